"""Dense-parameter training models and synthetic data.

Two model kinds keep gradient oracles exact at desk scale: linear regression
and a one-hidden-layer tanh MLP, both under squared loss with parameters
stored as one flat float64 vector (the unit of synchronization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WorkerFault

LINEAR_REGRESSION = "linear_regression"
MLP = "mlp"


@dataclass(frozen=True)
class ModelConfig:
    kind: str = LINEAR_REGRESSION
    n_features: int = 8
    hidden: int = 16  # mlp only
    n_outputs: int = 1

    def __post_init__(self):
        if self.kind not in (LINEAR_REGRESSION, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_features < 1 or self.n_outputs < 1:
            raise ValueError("n_features and n_outputs must be >= 1")
        if self.kind == MLP and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.kind == LINEAR_REGRESSION:
            return [(self.n_features, self.n_outputs), (1, self.n_outputs)]
        return [
            (self.n_features, self.hidden), (1, self.hidden),
            (self.hidden, self.n_outputs), (1, self.n_outputs),
        ]

    @property
    def param_count(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)


def hidden_for_param_count(n_features: int, n_outputs: int, target: int) -> int:
    """Closest hidden width so an MLP has roughly `target` parameters."""
    denom = n_features + 1 + n_outputs
    return max(1, round((target - n_outputs) / denom))


class Model:
    """Flat-parameter model with analytic loss/gradient under squared loss."""

    def __init__(self, config: ModelConfig, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (config.param_count,):
            raise ValueError(
                f"expected {config.param_count} parameters, got {params.shape}"
            )
        self.config = config
        self.params = params.copy()

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng([seed, 0xC0FFEE])
        chunks = []
        for rows, cols in config.layer_shapes:
            scale = 1.0 / np.sqrt(rows)
            chunks.append(rng.normal(0.0, scale, size=rows * cols))
        return cls(config, np.concatenate(chunks))

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def param_count(self) -> int:
        return self.config.param_count

    def clone(self) -> "Model":
        return Model(self.config, self.params)

    def _views(self, params: np.ndarray | None = None):
        params = self.params if params is None else params
        views = []
        offset = 0
        for rows, cols in self.config.layer_shapes:
            views.append(params[offset:offset + rows * cols].reshape(rows, cols))
            offset += rows * cols
        return views

    def predict(self, X: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.config.kind == LINEAR_REGRESSION:
            W, b = self._views(params)
            return X @ W + b
        W1, b1, W2, b2 = self._views(params)
        return np.tanh(X @ W1 + b1) @ W2 + b2

    def loss(self, X: np.ndarray, y: np.ndarray, params: np.ndarray | None = None) -> float:
        """Squared loss, 0.5 * mean over samples of the summed output error."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        residual = self.predict(X, params) - y
        return 0.5 * float(np.mean(np.sum(residual ** 2, axis=1)))

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Analytic mean gradient over the minibatch (update is NOT applied)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if X.shape[0] == 0:
            raise WorkerFault("minibatch is empty")
        batch = X.shape[0]
        if self.config.kind == LINEAR_REGRESSION:
            W, b = self._views()
            residual = X @ W + b - y  # (B, k)
            loss = 0.5 * float(np.mean(np.sum(residual ** 2, axis=1)))
            gW = X.T @ residual / batch
            gb = residual.mean(axis=0, keepdims=True)
            grad = np.concatenate([gW.ravel(), gb.ravel()])
        else:
            W1, b1, W2, b2 = self._views()
            z1 = X @ W1 + b1
            a1 = np.tanh(z1)
            residual = a1 @ W2 + b2 - y
            loss = 0.5 * float(np.mean(np.sum(residual ** 2, axis=1)))
            gW2 = a1.T @ residual / batch
            gb2 = residual.mean(axis=0, keepdims=True)
            dz1 = (residual @ W2.T) * (1.0 - a1 ** 2)
            gW1 = X.T @ dz1 / batch
            gb1 = dz1.mean(axis=0, keepdims=True)
            grad = np.concatenate([gW1.ravel(), gb1.ravel(), gW2.ravel(), gb2.ravel()])
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise WorkerFault(
                f"non-finite loss/gradient on a batch of {batch} samples"
            )
        return loss, grad


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 1024
    n_features: int = 8
    n_outputs: int = 1
    noise_std: float = 0.0

    def __post_init__(self):
        if self.n_samples < 0 or self.n_features < 1 or self.n_outputs < 1:
            raise ValueError("bad dataset dimensions")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def make_dataset(cfg: DatasetConfig, seed: int,
                 teacher_kind: str = LINEAR_REGRESSION,
                 teacher_hidden: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian features with targets from a planted (seeded) teacher model."""
    rng = np.random.default_rng([seed, 0xDA7A])
    X = rng.normal(0.0, 1.0, size=(cfg.n_samples, cfg.n_features))
    teacher_cfg = ModelConfig(teacher_kind, cfg.n_features, teacher_hidden, cfg.n_outputs)
    teacher = Model.initialize(teacher_cfg, seed + 1)
    y = teacher.predict(X) if cfg.n_samples else np.zeros((0, cfg.n_outputs))
    if cfg.noise_std > 0 and cfg.n_samples:
        y = y + rng.normal(0.0, cfg.noise_std, size=y.shape)
    return X, y


def dataset_to_bytes(X: np.ndarray, y: np.ndarray) -> bytes:
    """Raw row-major float64 bytes: all of X then all of y (no header)."""
    return (np.ascontiguousarray(X, dtype="<f8").tobytes()
            + np.ascontiguousarray(y, dtype="<f8").tobytes())


def rows_from_bytes(blob: bytes, n_rows: int, n_features: int,
                    n_outputs: int) -> tuple[np.ndarray, np.ndarray]:
    expected = n_rows * (n_features + n_outputs) * 8
    if len(blob) != expected:
        raise WorkerFault(f"dataset chunk is {len(blob)} bytes, expected {expected}")
    split = n_rows * n_features * 8
    X = np.frombuffer(blob, dtype="<f8", count=n_rows * n_features).reshape(
        n_rows, n_features).astype(np.float64)
    y = np.frombuffer(blob, dtype="<f8", offset=split).reshape(
        n_rows, n_outputs).astype(np.float64)
    return X, y
