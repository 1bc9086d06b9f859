"""Simulation models with exact samplers and ground-truth conditional quantiles.

Each model is written as ``Q(x, tau) = m(x) + s(x) * q(tau)`` where ``q`` is
the standard normal or Student-t(2) quantile function and ``s(x) >= 0``, so
``Y = Q(X, U)`` with ``U ~ Unif(0, 1)`` has conditional tau-quantile exactly
``Q(X, tau)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from nqnet import seeding

LINEAR1D = "LINEAR1D"
WAVE = "WAVE"
ANGLE = "ANGLE"
MVLINEAR = "MVLINEAR"
SINDEX = "SINDEX"
ADDITIVE = "ADDITIVE"

MODEL_IDS = (LINEAR1D, WAVE, ANGLE, MVLINEAR, SINDEX, ADDITIVE)

A = np.array([1.012, -0.965, -0.785, 1.336, 0.0, 0.378, 0.599, 1.292])
B = np.array([1.002, 0.0, -0.497, 3.993, 0.0, 0.0, 0.0, 0.0])


def _check_p(p):
    p = np.asarray(p, dtype=np.float64)
    if not (np.all(p > 0) and np.all(p < 1)):
        raise ValueError("probability must lie strictly inside (0, 1)")
    return p


def std_normal_quantile(p):
    """Inverse of the standard normal CDF."""
    out = special.ndtri(_check_p(p))
    return out[()] if out.ndim == 0 else out


def student_t2_quantile(p):
    """Inverse CDF of Student's t with 2 degrees of freedom.

    Closed form obtained by inverting F(x) = 1/2 + x / (2 sqrt(2 + x^2)).
    """
    p = _check_p(p)
    out = (2.0 * p - 1.0) * np.sqrt(2.0 / (4.0 * p * (1.0 - p)))
    return out[()] if out.ndim == 0 else out


def student_t2_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 + x / (2.0 * np.sqrt(2.0 + x * x))


# location m(x), scale s(x), and which noise quantile function to use
def _linear1d(x):
    return 2.0 * x[:, 0], np.ones(len(x))


def _wave(x):
    x = x[:, 0]
    return 2.0 * x * np.sin(4.0 * np.pi * x), np.exp(4.0 * x - 2.0)


def _angle(x):
    x = x[:, 0]
    return 4.0 * (1.0 - np.abs(x - 0.5)), np.abs(np.sin(np.pi * x))


def _mvlinear(x):
    return 2.0 * x @ A, np.ones(len(x))


def _sindex(x):
    return np.exp(0.1 * (x @ A)), np.abs(np.sin(np.pi * (x @ B)))


def _additive(x):
    m = (3.0 * x[:, 0] + 4.0 * (x[:, 1] - 0.5) ** 2 + 2.0 * np.sin(np.pi * x[:, 2])
         - 5.0 * np.abs(x[:, 3] - 0.5))
    return m, np.exp(0.1 * (x @ B - 0.5))


_MODELS = {
    LINEAR1D: (1, _linear1d, student_t2_quantile),
    WAVE: (1, _wave, std_normal_quantile),
    ANGLE: (1, _angle, std_normal_quantile),
    MVLINEAR: (8, _mvlinear, student_t2_quantile),
    SINDEX: (8, _sindex, std_normal_quantile),
    ADDITIVE: (8, _additive, std_normal_quantile),
}


@dataclass(frozen=True)
class SimModel:
    model_id: str

    def __post_init__(self):
        if self.model_id not in _MODELS:
            raise ValueError(f"unknown model {self.model_id!r}; valid ids: {', '.join(MODEL_IDS)}")

    @property
    def input_dim(self) -> int:
        return _MODELS[self.model_id][0]

    def location_scale(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = self._check_x(X)
        return _MODELS[self.model_id][1](X)

    def noise_quantile(self, p):
        return _MODELS[self.model_id][2](p)

    def _check_x(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        d = self.input_dim
        if X.ndim == 1:
            X = X[:, None] if d == 1 else X[None, :]
        if X.ndim != 2 or X.shape[1] != d:
            raise ValueError(f"{self.model_id} expects inputs of dimension {d}, got shape {X.shape}")
        if np.any(X < 0) or np.any(X > 1):
            raise ValueError("inputs must lie in [0, 1]")
        return X

    def quantiles(self, X, taus) -> np.ndarray:
        """Ground-truth quantiles, shape ``(n, len(taus))``."""
        m, s = self.location_scale(X)
        q = np.atleast_1d(self.noise_quantile(np.atleast_1d(taus)))
        return m[:, None] + s[:, None] * q[None, :]


def get_model(model) -> SimModel:
    return model if isinstance(model, SimModel) else SimModel(str(model).upper())


def true_quantile(model, x, tau):
    """Conditional tau-quantile of Y given X = x for one input or a batch."""
    model = get_model(model)
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 0 or (x_arr.ndim == 1 and model.input_dim > 1)
    m, s = model.location_scale(np.atleast_1d(x_arr))
    out = m + s * model.noise_quantile(tau)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    model_id: str
    seed: int

    @property
    def n(self) -> int:
        return len(self.Y)

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.X.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{j + 1}" for j in range(d)] + ["y"])
            for xi, yi in zip(self.X, self.Y):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
        return path


def read_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    header = rows[0]
    if header[-1] != "y" or not all(h.startswith("x_") for h in header[:-1]):
        raise ValueError(f"{path}: expected columns x_1..x_d, y")
    data = np.array(rows[1:], dtype=np.float64)
    return data[:, :-1], data[:, -1]


def sample(model, n: int, seed: int, stream: int = seeding.DATA) -> Dataset:
    """Inverse-transform draw of n pairs: X ~ Unif[0,1]^d, Y = Q(X, U)."""
    model = get_model(model)
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = seeding.stream(seed, stream)
    X = rng.random((n, model.input_dim))
    U = rng.random(n)
    # rng.random() can return exactly 0
    U = np.where(U > 0, U, np.nextafter(0.0, 1.0))
    m, s = model.location_scale(X)
    Y = m + s * model.noise_quantile(U)
    return Dataset(X, Y, model.model_id, seed)
