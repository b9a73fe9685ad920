"""Residual calibration modules wrapped around a frozen forecaster.

``CalibrationModule`` is the gated low-rank residual::

    out[:, :, v] = z[:, :, v] + tanh(alpha[v] * z[:, :, v]) @ W[:, :, v] + b[:, v]
    W[i, j, v] = sum_k A[i, k] * B[k, j, v]

``DenseCalibrationModule`` is the full per-variable ``[S, S, V]`` residual map
used by the dense baseline.
"""

import os

import numpy as np

from petsa_calibration.checkpoint import read_container, write_container
from petsa_calibration.enums import Side
from petsa_calibration.exceptions import DataError, UsageError
from petsa_calibration.forecasters import xavier_normal
from petsa_calibration.tensorgrad import DimensionError, Tensor, as_tensor, matmul, reshape, tanh, transpose

SNAPSHOT_KIND = "calibration"


def _per_variable_matmul(z: Tensor, weight: Tensor) -> Tensor:
    """``[B, S, V]`` times ``[S, S, V]`` -> ``[B, S, V]``, one ``S x S`` product per variable."""
    out = matmul(transpose(z, (2, 0, 1)), transpose(weight, (2, 0, 1)))
    return transpose(out, (1, 2, 0))


class _ResidualModule:
    side: Side
    length: int
    n_vars: int
    params: dict[str, Tensor]

    def _check_input(self, z: Tensor) -> None:
        if z.ndim != 3 or z.shape[1:] != (self.length, self.n_vars):
            raise DimensionError(
                f"{self.side.value} calibration expects [B, {self.length}, {self.n_vars}], got {z.shape}"
            )

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def __call__(self, z) -> Tensor:
        return self.calibrate(z)

    def calibrate(self, z) -> Tensor:
        raise NotImplementedError

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.side.value}.{name}": t.data.copy() for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            key = f"{self.side.value}.{name}"
            if key not in arrays or arrays[key].shape != tensor.shape:
                raise DataError(f"snapshot has no array {key} of shape {tensor.shape}")
            tensor.data = np.array(arrays[key], dtype=np.float64)


class CalibrationModule(_ResidualModule):
    """Gated low-rank residual calibration for one side of the forecaster.

    :param side: ``input`` (length L) or ``output`` (length H).
    :param length: Sequence length S of that side.
    :param n_vars: Number of variables V.
    :param rank: Rank r of the factorization ``W = A B``.
    """

    def __init__(self, side: Side, length: int, n_vars: int, rank: int, parameters: dict):
        self.side = Side(side)
        self.length = length
        self.n_vars = n_vars
        self.rank = rank
        self.params = {
            name: Tensor(parameters[name], requires_grad=True) for name in ("alpha", "A", "B", "b")
        }
        expected = {
            "alpha": (n_vars,),
            "A": (length, rank),
            "B": (rank, length, n_vars),
            "b": (length, n_vars),
        }
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def init(
        cls,
        side: Side,
        length: int,
        n_vars: int,
        rank: int,
        alpha0: float = 0.5,
        seed: int = 2025,
    ) -> "CalibrationModule":
        """Xavier-normal ``A``, zero ``B`` and ``b``, and ``alpha = alpha0`` for every variable."""
        if rank < 1:
            raise UsageError(f"calibration rank must be >= 1, got {rank}")
        if length < 1 or n_vars < 1:
            raise UsageError(f"calibration needs length >= 1 and n_vars >= 1, got {length}, {n_vars}")
        rng = np.random.default_rng(seed)
        return cls(
            side,
            length,
            n_vars,
            rank,
            {
                "alpha": np.full(n_vars, float(alpha0)),
                "A": xavier_normal(rng, length, rank),
                "B": np.zeros((rank, length, n_vars)),
                "b": np.zeros((length, n_vars)),
            },
        )

    def weight(self) -> Tensor:
        p = self.params
        low_rank = matmul(p["A"], reshape(p["B"], (self.rank, self.length * self.n_vars)))
        return reshape(low_rank, (self.length, self.length, self.n_vars))

    def calibrate(self, z) -> Tensor:
        z = as_tensor(z)
        self._check_input(z)
        gated = tanh(z * self.params["alpha"])
        return z + _per_variable_matmul(gated, self.weight()) + self.params["b"]


class DenseCalibrationModule(_ResidualModule):
    """Full-rank residual ``out = z + z @ W + b`` per variable, zero-initialized."""

    def __init__(self, length: int, n_vars: int, side: Side = Side.OUTPUT):
        self.side = Side(side)
        self.length = length
        self.n_vars = n_vars
        self.params = {
            "W": Tensor(np.zeros((length, length, n_vars)), requires_grad=True),
            "b": Tensor(np.zeros((length, n_vars)), requires_grad=True),
        }

    def calibrate(self, z) -> Tensor:
        z = as_tensor(z)
        self._check_input(z)
        return z + _per_variable_matmul(z, self.params["W"]) + self.params["b"]


def calibrate(m: _ResidualModule, z) -> Tensor:
    return m.calibrate(z)


def param_count(m: _ResidualModule) -> int:
    return m.param_count


def module_param_count(length: int, n_vars: int, rank: int) -> int:
    return length * rank + rank * length * n_vars + length * n_vars + n_vars


def petsa_param_count(lookback: int, horizon: int, n_vars: int, rank: int) -> int:
    """Trainable parameters of the input plus output modules."""
    return module_param_count(lookback, n_vars, rank) + module_param_count(horizon, n_vars, rank)


def dense_param_count(horizon: int, n_vars: int) -> int:
    return horizon * horizon * n_vars + horizon * n_vars


def memory_mb(n_params: int) -> float:
    """Size of ``n_params`` float64 values in MiB."""
    return n_params * 8 / 2**20


def save_snapshot(modules: list[_ResidualModule], path: os.PathLike, header: dict | None = None) -> None:
    arrays = {}
    for module in modules:
        arrays.update(module.to_arrays())
    write_container(path, {"kind": SNAPSHOT_KIND, **(header or {})}, arrays)


def load_snapshot(modules: list[_ResidualModule], path: os.PathLike) -> dict:
    """Restore module parameters in place from a snapshot and return its header."""
    header, arrays = read_container(path)
    if header.get("kind") != SNAPSHOT_KIND:
        raise DataError(f"{path} is not a calibration snapshot")
    for module in modules:
        module.load_arrays(arrays)
    return header
