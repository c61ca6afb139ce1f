"""Slow reference implementations used only by the tests."""

import numpy as np


def brute_nn(src, dst):
    """Linear-scan nearest neighbour; ties to the lowest id."""
    ids = np.empty(len(src), dtype=np.int64)
    d2 = np.empty(len(src))
    for i, q in enumerate(src):
        d = dst - q
        dd = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        j = int(np.argmin(dd))  # argmin returns the first minimum
        ids[i], d2[i] = j, dd[j]
    return ids, d2


def brute_metrics(p, t, np_, nt, tau):
    ip, dp = brute_nn(p, t)
    it, dt = brute_nn(t, p)
    cd = float(np.mean(dp) + np.mean(dt))
    acc = float(np.mean(np.sqrt(dp)))
    comp = float(np.mean(np.sqrt(dt)))
    nc = float(np.mean(np.clip(np.abs(np.sum(np_ * nt[ip], axis=1)), 0, 1)))
    pr = float(np.mean(dp <= tau * tau))
    rc = float(np.mean(dt <= tau * tau))
    fs = 0.0 if pr + rc == 0 else 100.0 * 2 * pr * rc / (pr + rc)
    return dict(CD=cd, Acc=acc, Comp=comp, NC=nc, FS=fs)


def random_cloud(rng, n):
    pts = rng.uniform(0, 1, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm
