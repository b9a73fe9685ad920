"""Adaptation objectives: Huber, spectral L1, patch-wise structure, and their composition.

All terms are means (over batch, variables, time steps, bins or patches) so
that weights stay comparable across horizons.
"""

from dataclasses import dataclass

import numpy as np
from loguru import logger

from petsa_calibration.enums import LossKind, LossMode
from petsa_calibration.exceptions import NumericalError, UsageError
from petsa_calibration.tensorgrad import (
    Tensor,
    absolute,
    as_tensor,
    getitem,
    mean,
    rdft,
    sqrt,
    transpose,
    variance,
    where,
)

# patches whose variance is at or below this are treated as constant
CONSTANT_PATCH_VAR = 1e-12


class LossError(NumericalError):
    pass


@dataclass(frozen=True)
class LossConfig:
    delta: float = 0.5
    beta: float = 0.1
    patch_len: int = 16
    patch_stride: int | None = None
    kind: LossKind = LossKind.PETSA
    freq_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.delta <= 0:
            raise UsageError(f"Huber delta must be > 0, got {self.delta}")
        if self.beta < 0:
            raise UsageError(f"beta must be >= 0, got {self.beta}")
        if self.patch_len < 1:
            raise UsageError(f"patch_len must be >= 1, got {self.patch_len}")
        if self.patch_stride is not None and self.patch_stride < 1:
            raise UsageError(f"patch_stride must be >= 1, got {self.patch_stride}")

    @property
    def stride(self) -> int:
        return self.patch_stride or self.patch_len

    @property
    def uses_freq(self) -> bool:
        return self.kind == LossKind.PETSA and self.freq_enabled and self.beta > 0


@dataclass
class LossReport:
    """Value of one objective evaluation.

    ``total`` is the differentiable scalar; the other fields are plain floats
    with ``total == mse + huber + patch + beta * freq``.
    """

    total: Tensor
    mse: float
    huber: float
    freq: float
    patch: float
    beta: float
    n_observed: int
    patch_skipped: bool = False
    freq_skipped: bool = False

    def as_dict(self) -> dict:
        return {
            "total": self.total.item(),
            "mse": self.mse,
            "huber": self.huber,
            "freq": self.freq,
            "patch": self.patch,
            "n_observed": self.n_observed,
            "patch_skipped": self.patch_skipped,
            "freq_skipped": self.freq_skipped,
        }


def _check_same_shape(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise LossError(f"prediction shape {pred.shape} does not match target shape {target.shape}")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target)
    err = pred - target
    return mean(err * err)


def huber(pred, target, delta: float = 0.5) -> Tensor:
    """Mean of ``0.5 e^2`` where ``|e| < delta``, else ``delta (|e| - 0.5 delta)``."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target)
    err = pred - target
    quadratic = 0.5 * (err * err)
    linear = delta * (absolute(err) - 0.5 * delta)
    return mean(where(np.abs(err.data) < delta, quadratic, linear))


def freq_loss(pred, target) -> Tensor:
    """Mean complex modulus of the spectral difference along the time axis of ``[B, S, V]``."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target)
    if pred.ndim != 3:
        raise LossError(f"freq_loss expects [B, S, V] tensors, got shape {pred.shape}")
    # the transform is linear, so F(pred) - F(target) == F(pred - target)
    spectrum = rdft(transpose(pred - target, (0, 2, 1)))
    return mean(spectrum.magnitude())


def patch_indices(length: int, patch_len: int, stride: int) -> np.ndarray:
    """``[n_patches, patch_len]`` time indices; a trailing remainder shorter than a patch is dropped."""
    starts = np.arange(0, length - patch_len + 1, stride)
    return starts[:, None] + np.arange(patch_len)[None, :]


def patch_loss(pred, target, patch_len: int = 16, stride: int | None = None) -> Tensor:
    """Sum of the patch-averaged correlation, mean and variance discrepancies.

    Correlation term is ``1 - pearson`` and is 0 for any patch pair where
    either side is constant.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target)
    if pred.ndim != 3:
        raise LossError(f"patch_loss expects [B, S, V] tensors, got shape {pred.shape}")
    length = pred.shape[1]
    if patch_len > length:
        raise LossError(f"patch length {patch_len} exceeds sequence length {length}")
    index = (slice(None), patch_indices(length, patch_len, stride or patch_len), slice(None))
    pred_patches = getitem(pred, index)
    target_patches = getitem(target, index)

    pred_mean = mean(pred_patches, axis=2, keepdims=True)
    target_mean = mean(target_patches, axis=2, keepdims=True)
    pred_var = variance(pred_patches, axis=2)
    target_var = variance(target_patches, axis=2)

    mean_gap = pred_mean - target_mean
    mean_term = mean(mean_gap * mean_gap)
    var_gap = pred_var - target_var
    var_term = mean(var_gap * var_gap)

    covariance = mean((pred_patches - pred_mean) * (target_patches - target_mean), axis=2)
    informative = (pred_var.data > CONSTANT_PATCH_VAR) & (target_var.data > CONSTANT_PATCH_VAR)
    denominator = sqrt(where(informative, pred_var * target_var, 1.0))
    corr_term = mean(where(informative, 1.0 - covariance / denominator, 0.0))

    return corr_term + mean_term + var_term


def petsa_loss(
    pred: Tensor,
    target_observed,
    config: LossConfig,
    mode: LossMode = LossMode.PARTIAL,
) -> LossReport:
    """Evaluate the configured objective on the observed prefix of the horizon.

    :param pred: Calibrated forecast ``[B, H, V]``.
    :param target_observed: The ``p`` observed target steps ``[B, p, V]``.
    :param config: Loss weights and patch geometry.
    :param mode: ``total`` requires ``p == H``.
    :raises LossError: When nothing is observed or shapes disagree.
    """
    pred = as_tensor(pred)
    target = as_tensor(target_observed)
    if pred.ndim != 3 or target.ndim != 3:
        raise LossError(f"expected [B, S, V] tensors, got {pred.shape} and {target.shape}")
    horizon, n_observed = pred.shape[1], target.shape[1]
    if n_observed == 0:
        raise LossError("no target steps observed; cannot build a loss")
    if n_observed > horizon:
        raise LossError(f"{n_observed} observed steps exceed the horizon {horizon}")
    if LossMode(mode) == LossMode.TOTAL and n_observed != horizon:
        raise LossError(f"total mode needs all {horizon} steps, got {n_observed}")
    if n_observed < horizon:
        pred = getitem(pred, (slice(None), slice(0, n_observed), slice(None)))
    _check_same_shape(pred, target)

    terms: list[Tensor] = []
    values = {"mse": 0.0, "huber": 0.0, "freq": 0.0, "patch": 0.0}
    patch_skipped = False
    freq_skipped = False

    if config.kind == LossKind.MSE:
        terms.append(mse_loss(pred, target))
        values["mse"] = terms[-1].item()
    else:
        terms.append(huber(pred, target, config.delta))
        values["huber"] = terms[-1].item()

    if config.kind == LossKind.PETSA:
        if n_observed < config.patch_len:
            patch_skipped = True
            logger.trace(f"patch term skipped: {n_observed} observed steps < patch length {config.patch_len}")
        else:
            terms.append(patch_loss(pred, target, config.patch_len, config.stride))
            values["patch"] = terms[-1].item()
        if config.uses_freq:
            freq = freq_loss(pred, target)
            values["freq"] = freq.item()
            terms.append(config.beta * freq)
        else:
            freq_skipped = True

    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return LossReport(
        total=total,
        beta=config.beta,
        n_observed=n_observed,
        patch_skipped=patch_skipped,
        freq_skipped=freq_skipped,
        **values,
    )
