"""Check (pinball) loss, quantile Huber loss and the multi-level empirical risk."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHECK = "CHECK"
QHUBER = "QHUBER"


@dataclass(frozen=True)
class LossSpec:
    kind: str = CHECK
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in (CHECK, QHUBER):
            raise ValueError(f"unknown loss kind {self.kind!r}; expected CHECK or QHUBER")
        if self.kind == QHUBER and not self.kappa > 0:
            raise ValueError("kappa must be positive for the quantile Huber loss")


def _check_tau(tau):
    tau = np.asarray(tau, dtype=np.float64)
    if not (np.all(tau > 0) and np.all(tau < 1)):
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    return tau


def _scalar(x):
    return x[()] if isinstance(x, np.ndarray) and x.ndim == 0 else x


def check_loss(tau, u):
    """rho_tau(u) = u * (tau - 1{u < 0})."""
    tau = _check_tau(tau)
    u = np.asarray(u, dtype=np.float64)
    return _scalar(np.where(u >= 0, tau * u, (tau - 1.0) * u))


def check_loss_grad(tau, u):
    """Derivative in u; at u = 0 the right derivative tau is used."""
    tau = _check_tau(tau)
    u = np.asarray(u, dtype=np.float64)
    return _scalar(np.where(u >= 0, tau, tau - 1.0) + 0.0 * u)


def huber(u, kappa):
    a = np.abs(u)
    return np.where(a <= kappa, 0.5 * u * u, kappa * (a - 0.5 * kappa))


def qhuber_loss(tau, u, kappa=1.0):
    """|tau - 1{u < 0}| * L_kappa(u) / kappa with L_kappa the Huber kernel."""
    tau = _check_tau(tau)
    if not np.all(np.asarray(kappa) > 0):
        raise ValueError("kappa must be positive")
    u = np.asarray(u, dtype=np.float64)
    w = np.abs(tau - (u < 0))
    return _scalar(w * huber(u, kappa) / kappa)


def qhuber_loss_grad(tau, u, kappa=1.0):
    tau = _check_tau(tau)
    u = np.asarray(u, dtype=np.float64)
    w = np.abs(tau - (u < 0))
    return _scalar(w * np.clip(u, -kappa, kappa) / kappa)


def empirical_risk(levels, predictions, targets, spec: LossSpec | None = None):
    """Averaged multi-level risk and its gradient w.r.t. the predictions.

    ``predictions`` is an ``(N, K)`` array (or a batched QuantileFan).
    ``targets`` is either a length-N vector, giving

        (1/N) sum_i (1/K) sum_k rho_{tau_k}(Y_i - f_k(X_i)),

    or an ``(N, J)`` matrix of J target samples per row, in which case the
    residual is formed for every (target j, level k) pair and averaged
    uniformly over all N * J * K terms.

    Returns ``(risk, grad)`` with ``grad`` shaped like the predictions.
    """
    spec = spec or LossSpec()
    f = getattr(predictions, "f", predictions)
    f = np.asarray(f, dtype=np.float64)
    taus = np.asarray(levels, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("predictions must be a non-empty (N, K) batch")
    N, K = f.shape
    if taus.shape != (K,):
        raise ValueError(f"{taus.size} levels for {K} predicted quantiles")
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != N:
        raise ValueError(f"targets shape {np.shape(targets)} does not match {N} predictions")
    J = y.shape[1]

    u = y[:, :, None] - f[:, None, :]  # (N, J, K)
    if spec.kind == CHECK:
        loss = check_loss(taus, u)
        dloss = check_loss_grad(taus, u)
    else:
        loss = qhuber_loss(taus, u, spec.kappa)
        dloss = qhuber_loss_grad(taus, u, spec.kappa)
    scale = 1.0 / (N * J * K)
    risk = float(loss.sum() * scale)
    grad = -dloss.sum(axis=1) * scale
    return risk, grad
