"""Central finite differences with ReLU-kink masking."""
import numpy as np

from nqnet import nn


def _pattern(net, X):
    _, cache = nn.forward(net, X)
    caches = cache if isinstance(cache, tuple) else (cache,)  # ParallelNet gives one per part
    hidden = [z for c in caches for z in c.pre[:-1]]
    return [z > 0 for z in hidden], min((np.abs(z).min() for z in hidden), default=np.inf)


def fd_net_grad(loss_of_net, net, X, h=1e-5, margin=1e-6, kinks=None):
    """Finite-difference gradient over all parameters and a mask of usable coordinates.

    A coordinate is unusable when the +-h perturbation flips any hidden
    unit's activation pattern or brings a pre-activation within ``margin`` of 0.
    ``kinks(net)`` may return further quantities (loss residuals, head
    inputs behind a ReLU) whose sign changes mark a non-smooth point.
    """
    theta = nn.flatten_params(net)
    base, _ = _pattern(net, X)
    if kinks is not None:
        base.append(kinks(net) > 0)
    fd = np.zeros_like(theta)
    ok = np.ones(theta.size, dtype=bool)
    for i in range(theta.size):
        vals = []
        for sgn in (1, -1):
            t = theta.copy()
            t[i] += sgn * h
            pert = nn.unflatten_params(net, t)
            pat, closest = _pattern(pert, X)
            if kinks is not None:
                k = kinks(pert)
                pat.append(k > 0)
                closest = min(closest, np.abs(k).min(initial=np.inf))
            if closest < margin or any(np.any(p != b) for p, b in zip(pat, base)):
                ok[i] = False
            vals.append(loss_of_net(pert))
        fd[i] = (vals[0] - vals[1]) / (2 * h)
    return fd, ok


def max_rel_error(analytic, fd, ok, floor=1e-7):
    a, f = analytic[ok], fd[ok]
    rel = np.abs(a - f) / np.maximum(floor, np.maximum(np.abs(a), np.abs(f)))
    return float(rel.max()) if rel.size else 0.0
