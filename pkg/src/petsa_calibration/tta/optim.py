"""SGD and Adam as pure functions of (params, grads, state)."""

from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from petsa_calibration.enums import OptimizerKind
from petsa_calibration.exceptions import NumericalError, UsageError
from petsa_calibration.tensorgrad import Tensor


class NonFiniteGradientError(NumericalError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if self.learning_rate < 0:
            raise UsageError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass(frozen=True)
class OptimizerState:
    step: int = 0
    first_moment: tuple[np.ndarray, ...] = field(default_factory=tuple)
    second_moment: tuple[np.ndarray, ...] = field(default_factory=tuple)


def optimizer_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    cfg: OptimizerConfig,
) -> tuple[list[np.ndarray], OptimizerState]:
    """One update. Inputs are never modified; new arrays and a new state are returned.

    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    grads = [
        np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        for p, g in zip(params, grads, strict=True)
    ]
    for i, (p, g) in enumerate(zip(params, grads, strict=True)):
        if g.shape != p.shape:
            raise UsageError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"gradient {i} contains non-finite values")

    lr = cfg.learning_rate
    if cfg.kind == OptimizerKind.SGD:
        return [p - lr * g for p, g in zip(params, grads, strict=True)], replace(state, step=state.step + 1)

    step = state.step + 1
    first = state.first_moment or tuple(np.zeros_like(p) for p in params)
    second = state.second_moment or tuple(np.zeros_like(p) for p in params)
    new_first = tuple(cfg.beta1 * m + (1.0 - cfg.beta1) * g for m, g in zip(first, grads, strict=True))
    new_second = tuple(cfg.beta2 * v + (1.0 - cfg.beta2) * g * g for v, g in zip(second, grads, strict=True))
    bias1 = 1.0 - cfg.beta1**step
    bias2 = 1.0 - cfg.beta2**step
    new_params = [
        p - lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        for p, m, v in zip(params, new_first, new_second, strict=True)
    ]
    return new_params, OptimizerState(step=step, first_moment=new_first, second_moment=new_second)


def apply_gradients(tensors: Sequence[Tensor], state: OptimizerState, cfg: OptimizerConfig) -> OptimizerState:
    """Run :func:`optimizer_step` on the ``.grad`` of each tensor and rebind ``.data``."""
    new_params, new_state = optimizer_step(
        [t.data for t in tensors], [t.grad for t in tensors], state, cfg
    )
    for tensor, data in zip(tensors, new_params, strict=True):
        tensor.data = data
    return new_state
