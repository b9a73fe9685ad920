import hashlib
import warnings

import numpy as np
from loguru import logger
from scipy.linalg import LinAlgError, LinAlgWarning, solve
from tqdm import tqdm

from petsa_calibration.enums import ForecasterKind, OptimizerKind
from petsa_calibration.exceptions import NumericalError
from petsa_calibration.losses import mse_loss
from petsa_calibration.tensorgrad import (
    DimensionError,
    Tensor,
    as_tensor,
    backward,
    matmul,
    reshape,
    tanh,
    transpose,
)
from petsa_calibration.tta.optim import OptimizerConfig, OptimizerState, apply_gradients


class ForecasterFitError(NumericalError):
    pass


class Forecaster:
    """Frozen forecaster base class

    Maps a lookback batch ``[B, L, V]`` to a forecast ``[B, H, V]`` with
    tensorgrad operations, so gradients flow to the input even though the
    parameters never require grad outside of offline training.

    :raises NotImplementedError: When the forward pass is called on the base class.
    """

    KIND: ForecasterKind
    # every backbone here maps each variable with the same per-channel weights
    CHANNEL_INDEPENDENT: bool = True

    def __init__(
        self,
        lookback: int,
        horizon: int,
        n_vars: int,
        parameters: dict[str, np.ndarray] | None = None,
        provenance: dict | None = None,
    ):
        self.lookback = lookback
        self.horizon = horizon
        self.n_vars = n_vars
        self.provenance = dict(provenance or {})
        expected = self.parameter_shapes()
        if parameters is None:
            parameters = {name: np.zeros(shape) for name, shape in expected.items()}
        if set(parameters) != set(expected):
            raise DimensionError(
                f"{self.KIND.value} expects parameters {sorted(expected)}, got {sorted(parameters)}"
            )
        self.parameters: dict[str, Tensor] = {}
        for name, shape in expected.items():
            value = np.asarray(parameters[name], dtype=np.float64)
            if value.shape != shape:
                raise DimensionError(f"parameter {name} has shape {value.shape}, expected {shape}")
            self.parameters[name] = Tensor(value)

    @property
    def kind(self) -> ForecasterKind:
        return self.KIND

    @property
    def channel_independent(self) -> bool:
        return self.CHANNEL_INDEPENDENT

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def trainable(self) -> list[Tensor]:
        return list(self.parameters.values())

    def numpy_parameters(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters.items()}

    def checksum(self) -> str:
        """SHA-256 over parameter names, shapes and bytes."""
        sha256_hash = hashlib.sha256()
        for name, tensor in self.parameters.items():
            sha256_hash.update(name.encode())
            sha256_hash.update(str(tensor.shape).encode())
            sha256_hash.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        return sha256_hash.hexdigest()

    def predict(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[0] < 1 or x.shape[1:] != (self.lookback, self.n_vars):
            raise DimensionError(
                f"{self.KIND.value} forecaster expects [B, {self.lookback}, {self.n_vars}] input, "
                f"got {x.shape}"
            )
        return self.forward(x)

    def __call__(self, x) -> Tensor:
        return self.predict(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _channel_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel ``[B, L, V] -> [B, H, V]`` with ``weight [V, L, H]`` and ``bias [V, H]``."""
    n_vars, _, horizon = weight.shape
    out = matmul(transpose(x, (2, 0, 1)), weight) + reshape(bias, (n_vars, 1, horizon))
    return transpose(out, (1, 2, 0))


class OlsForecaster(Forecaster):
    KIND = ForecasterKind.OLS

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "weight": (self.n_vars, self.lookback, self.horizon),
            "bias": (self.n_vars, self.horizon),
        }

    def forward(self, x: Tensor) -> Tensor:
        return _channel_linear(x, self.parameters["weight"], self.parameters["bias"])


def moving_average_matrix(lookback: int, kernel: int) -> np.ndarray:
    """``M [L, L]`` such that ``M @ x`` is the centered moving average of ``x`` with
    edge-replicated padding."""
    half = (kernel - 1) // 2
    matrix = np.zeros((lookback, lookback))
    rows = np.arange(lookback)
    for offset in range(-half, half + 1):
        np.add.at(matrix, (rows, np.clip(rows + offset, 0, lookback - 1)), 1.0 / kernel)
    return matrix


class DLinearForecaster(Forecaster):
    """Trend/remainder decomposition followed by two per-channel linear maps."""

    KIND = ForecasterKind.DLINEAR

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "moving_average": (self.lookback, self.lookback),
            "trend_weight": (self.n_vars, self.lookback, self.horizon),
            "trend_bias": (self.n_vars, self.horizon),
            "remainder_weight": (self.n_vars, self.lookback, self.horizon),
            "remainder_bias": (self.n_vars, self.horizon),
        }

    def trainable(self) -> list[Tensor]:
        return [t for name, t in self.parameters.items() if name != "moving_average"]

    def decompose(self, x) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        trend = matmul(self.parameters["moving_average"], x)
        return trend, x - trend

    def forward(self, x: Tensor) -> Tensor:
        trend, remainder = self.decompose(x)
        p = self.parameters
        return _channel_linear(trend, p["trend_weight"], p["trend_bias"]) + _channel_linear(
            remainder, p["remainder_weight"], p["remainder_bias"]
        )


class MlpForecaster(Forecaster):
    """Two-layer tanh network shared by every channel."""

    KIND = ForecasterKind.MLP

    def __init__(self, lookback, horizon, n_vars, parameters=None, provenance=None, hidden: int = 64):
        if parameters is not None and "hidden_weight" in parameters:
            hidden = np.shape(parameters["hidden_weight"])[1]
        self.hidden = hidden
        super().__init__(lookback, horizon, n_vars, parameters, provenance)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "hidden_weight": (self.lookback, self.hidden),
            "hidden_bias": (self.hidden,),
            "output_weight": (self.hidden, self.horizon),
            "output_bias": (self.horizon,),
        }

    def forward(self, x: Tensor) -> Tensor:
        p = self.parameters
        channels = transpose(x, (0, 2, 1))
        hidden = tanh(matmul(channels, p["hidden_weight"]) + p["hidden_bias"])
        out = matmul(hidden, p["output_weight"]) + p["output_bias"]
        return transpose(out, (0, 2, 1))


FORECASTERS: dict[ForecasterKind, type[Forecaster]] = {
    cls.KIND: cls for cls in (OlsForecaster, DLinearForecaster, MlpForecaster)
}


def make_forecaster(kind: ForecasterKind, lookback: int, horizon: int, n_vars: int, **kwargs) -> Forecaster:
    return FORECASTERS[ForecasterKind(kind)](lookback, horizon, n_vars, **kwargs)


def _check_training_data(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or y.ndim != 3 or x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise DimensionError(f"training windows must be [N, L, V] and [N, H, V], got {x.shape} and {y.shape}")
    if x.shape[0] == 0:
        raise ForecasterFitError("no training windows; the train split is shorter than lookback + horizon")
    return x, y


def fit_ols(x: np.ndarray, y: np.ndarray, ridge_lambda: float = 1e-3, provenance: dict | None = None) -> OlsForecaster:
    """Closed-form ridge regression per channel with an unpenalized intercept.

    :param x: Training lookbacks ``[N, L, V]``.
    :param y: Training targets ``[N, H, V]``.
    :param ridge_lambda: Ridge penalty on the weights.
    :raises ForecasterFitError: If the normal equations are singular or ill-conditioned.
    """
    x, y = _check_training_data(x, y)
    _, lookback, n_vars = x.shape
    horizon = y.shape[1]
    weight = np.empty((n_vars, lookback, horizon))
    bias = np.empty((n_vars, horizon))
    for c in range(n_vars):
        xc, yc = x[:, :, c], y[:, :, c]
        x_mean, y_mean = xc.mean(axis=0), yc.mean(axis=0)
        xc, yc = xc - x_mean, yc - y_mean
        gram = xc.T @ xc + ridge_lambda * np.eye(lookback)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", LinAlgWarning)
                weight[c] = solve(gram, xc.T @ yc, assume_a="pos")
        except (LinAlgError, LinAlgWarning) as ex:
            raise ForecasterFitError(
                f"OLS normal equations for channel {c} are singular or ill-conditioned "
                f"with ridge_lambda={ridge_lambda}; use ridge_lambda > 0 or a larger value"
            ) from ex
        bias[c] = y_mean - x_mean @ weight[c]
    return OlsForecaster(lookback, horizon, n_vars, {"weight": weight, "bias": bias}, provenance)


def _train(
    model: Forecaster,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> None:
    params = model.trainable()
    for p in params:
        p.requires_grad = True
    cfg = OptimizerConfig(kind=OptimizerKind.ADAM, learning_rate=learning_rate)
    state = OptimizerState()
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    try:
        for epoch in tqdm(range(epochs), desc=f"Training {model.KIND.value}", disable=epochs == 0):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                batch = order[start : start + batch_size]
                loss = mse_loss(model.predict(Tensor(x[batch])), y[batch])
                if not np.isfinite(loss.item()):
                    raise ForecasterFitError(
                        f"{model.KIND.value} training diverged at epoch {epoch} "
                        f"(loss {loss.item()}); use a smaller learning rate than {learning_rate}"
                    )
                backward(loss)
                state = apply_gradients(params, state, cfg)
                epoch_loss += loss.item() * len(batch)
            logger.debug(f"{model.KIND.value} epoch {epoch}: train MSE {epoch_loss / n:.6f}")
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None


def fit_dlinear(
    x: np.ndarray,
    y: np.ndarray,
    kernel: int = 25,
    epochs: int = 10,
    learning_rate: float = 5e-3,
    batch_size: int = 32,
    seed: int = 2025,
    provenance: dict | None = None,
) -> DLinearForecaster:
    """Fit DLinear by mini-batch Adam on MSE, starting from uniform ``1/L`` weights."""
    x, y = _check_training_data(x, y)
    _, lookback, n_vars = x.shape
    horizon = y.shape[1]
    if kernel < 1 or kernel % 2 == 0:
        raise ForecasterFitError(f"moving-average kernel must be a positive odd number, got {kernel}")
    if kernel >= 2 * lookback:
        raise ForecasterFitError(f"moving-average kernel {kernel} must be smaller than 2 * lookback = {2 * lookback}")
    uniform = np.full((n_vars, lookback, horizon), 1.0 / lookback)
    model = DLinearForecaster(
        lookback,
        horizon,
        n_vars,
        {
            "moving_average": moving_average_matrix(lookback, kernel),
            "trend_weight": uniform,
            "trend_bias": np.zeros((n_vars, horizon)),
            "remainder_weight": uniform.copy(),
            "remainder_bias": np.zeros((n_vars, horizon)),
        },
        provenance,
    )
    _train(model, x, y, epochs, learning_rate, batch_size, seed)
    return model


def xavier_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def fit_mlp(
    x: np.ndarray,
    y: np.ndarray,
    hidden: int = 64,
    epochs: int = 10,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    seed: int = 2025,
    provenance: dict | None = None,
) -> MlpForecaster:
    x, y = _check_training_data(x, y)
    _, lookback, n_vars = x.shape
    horizon = y.shape[1]
    rng = np.random.default_rng(seed)
    model = MlpForecaster(
        lookback,
        horizon,
        n_vars,
        {
            "hidden_weight": xavier_normal(rng, lookback, hidden),
            "hidden_bias": np.zeros(hidden),
            "output_weight": xavier_normal(rng, hidden, horizon),
            "output_bias": np.zeros(horizon),
        },
        provenance,
    )
    _train(model, x, y, epochs, learning_rate, batch_size, seed)
    return model


def fit_forecaster(
    kind: ForecasterKind,
    x: np.ndarray,
    y: np.ndarray,
    config: dict,
    seed: int = 2025,
    provenance: dict | None = None,
) -> Forecaster:
    """Fit the backbone named by ``kind`` with hyperparameters from the ``forecaster`` config section."""
    kind = ForecasterKind(kind)
    logger.info(f"Fitting {kind.value} on {x.shape[0]} windows")
    if kind == ForecasterKind.OLS:
        return fit_ols(x, y, config["ridge_lambda"], provenance)
    common = {
        "epochs": config["epochs"],
        "learning_rate": config["learning_rate"],
        "batch_size": config["batch_size"],
        "seed": seed,
        "provenance": provenance,
    }
    if kind == ForecasterKind.DLINEAR:
        return fit_dlinear(x, y, kernel=config["dlinear_kernel"], **common)
    return fit_mlp(x, y, hidden=config["mlp_hidden"], **common)


def predict(f: Forecaster, x) -> Tensor:
    return f.predict(x)


def evaluate_mse(f: Forecaster, x: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> float:
    """Mean squared error over all windows, computed in batches."""
    if x.shape[0] == 0:
        return float("nan")
    sse = 0.0
    for start in range(0, x.shape[0], batch_size):
        pred = predict(f, x[start : start + batch_size]).data
        sse += float(np.sum((pred - y[start : start + batch_size]) ** 2))
    return sse / y.size
