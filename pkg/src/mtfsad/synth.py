"""Planted multi-task data and slow, independent reference solvers.

Nothing here calls into the optimization, classifier or feature modules:
the oracles exist to cross-check those code paths, so each one is written
from scratch in the most direct way available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .optim import MultiTaskDataset, TaskData


@dataclass(frozen=True)
class PlantedSpec:
    n_tasks: int = 10
    n_features: int = 50
    n_samples: int = 100
    support_size: int = 5
    signal: float = 1.0
    sigma: float = 0.1
    seed: int = 0
    mode: str = "shared"

    def __post_init__(self):
        if min(self.n_tasks, self.n_features, self.n_samples) < 1:
            raise ContractViolation("n_tasks, n_features and n_samples must be >= 1")
        if not 0 <= self.support_size <= self.n_features:
            raise ContractViolation("support_size must lie in [0, n_features]")
        if self.mode not in ("shared", "disjoint"):
            raise ContractViolation(f"unknown support mode {self.mode!r}")
        if self.sigma < 0 or self.signal < 0:
            raise ContractViolation("signal and sigma must be nonnegative")


def generate(spec):
    """Draw a dataset with a planted sparse weight matrix.

    Returns ``(dataset, W_star, support)`` where ``support[j]`` is the sorted
    list of active features for task ``j`` (identical across tasks in shared
    mode).  Labels are ``sign(A_j w_j + noise)`` with ``sign(0) = +1``.
    """
    rng = np.random.default_rng(spec.seed)
    n, L, s = spec.n_features, spec.n_tasks, spec.support_size
    W = np.zeros((n, L))
    shared = sorted(rng.choice(n, size=s, replace=False).tolist())
    tasks, support = [], []
    for j in range(L):
        active = shared if spec.mode == "shared" else sorted(
            rng.choice(n, size=s, replace=False).tolist())
        mags = spec.signal * (1.0 + rng.random(s))
        signs = rng.choice((-1.0, 1.0), size=s)
        W[active, j] = mags * signs
        A = rng.standard_normal((spec.n_samples, n))
        noise = spec.sigma * rng.standard_normal(spec.n_samples)
        y = np.where(A @ W[:, j] + noise >= 0, 1.0, -1.0)
        tasks.append(TaskData(A, y, j))
        support.append(list(active))
    names = [f"x{i}" for i in range(n)]
    return MultiTaskDataset(tasks, names), W, support


def lasso_cd_oracle(A, y, lam, tol=1e-10, max_sweeps=1_000_000):
    """Cyclic coordinate descent for 1/2 ||y - A w||^2 + lam ||w||_1."""
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    m, n = A.shape
    w = np.zeros(n)
    r = y.copy()
    sq = (A * A).sum(axis=0)
    for _ in range(max_sweeps):
        biggest = 0.0
        for k in range(n):
            if sq[k] == 0.0:
                continue
            rho = A[:, k] @ r + sq[k] * w[k]
            if rho > lam:
                new = (rho - lam) / sq[k]
            elif rho < -lam:
                new = (rho + lam) / sq[k]
            else:
                new = 0.0
            delta = new - w[k]
            if delta != 0.0:
                r -= delta * A[:, k]
                w[k] = new
                biggest = max(biggest, abs(delta))
        if biggest < tol:
            break
    return w


def _kernel_matrix(X, kernel, gamma):
    n = len(X)
    K = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            if kernel == "linear":
                K[a, b] = sum(p * q for p, q in zip(X[a], X[b]))
            else:
                K[a, b] = math.exp(-gamma * sum((p - q) ** 2 for p, q in zip(X[a], X[b])))
    return K


def _project_box_hyperplane(v, y, C):
    # Euclidean projection onto {0 <= a <= C, y.a = 0}: a = clip(v - nu*y, 0, C)
    # where nu zeroes the piecewise-linear, nonincreasing g(nu) = y.a(nu).
    knots = np.unique(np.concatenate([v * y, (v - C) * y]))
    vals = np.clip(v[None, :] - knots[:, None] * y[None, :], 0.0, C) @ y
    if vals[0] < 0 or vals[-1] > 0:
        raise ArithmeticError("projection bracket not found")
    hit = np.nonzero(vals == 0)[0]
    if hit.size:
        nu = knots[hit[0]]
    else:
        i = int(np.nonzero(vals < 0)[0][0])
        k0, k1, g0, g1 = knots[i - 1], knots[i], vals[i - 1], vals[i]
        nu = k0 + (k1 - k0) * g0 / (g0 - g1)
    return np.clip(v - nu * y, 0.0, C)


def qp_svm_oracle(X, y, kernel="linear", C=1.0, gamma=1.0, tol=1e-8, max_iter=2_000_000):
    """Dual SVM objective ``sum(a) - 1/2 a^T Q a`` at its maximum.

    Plain projected-gradient ascent on the dual with a step of
    ``1 / ||Q||_2``; stops once an iteration moves ``a`` by less than ``tol``.
    """
    X = [list(map(float, row)) for row in np.atleast_2d(np.asarray(X, dtype=float))]
    y = np.asarray(y, dtype=float)
    if len(X) > 12:
        raise ContractViolation("the QP oracle is meant for at most 12 points")
    K = _kernel_matrix(X, kernel, gamma)
    Q = (y[:, None] * y[None, :]) * K
    step = 1.0 / max(np.linalg.eigvalsh(Q).max(), 1e-12)
    a = np.zeros(len(y))
    for _ in range(max_iter):
        new = _project_box_hyperplane(a + step * (1.0 - Q @ a), y, C)
        moved = np.abs(new - a).max()
        a = new
        if moved < tol:
            break
    return float(a.sum() - 0.5 * a @ Q @ a)


def naive_dft(x):
    """Direct O(N^2) discrete Fourier transform."""
    x = [complex(v) for v in x]
    N = len(x)
    return [sum(x[k] * complex(math.cos(-2 * math.pi * f * k / N),
                               math.sin(-2 * math.pi * f * k / N))
                for k in range(N))
            for f in range(N)]


def pair_count_auc(y_true, scores):
    """AUC by counting every positive/negative pair; ties count one half."""
    pos = [s for t, s in zip(y_true, scores) if t > 0]
    neg = [s for t, s in zip(y_true, scores) if t <= 0]
    twice = 0
    for p in pos:
        for q in neg:
            if p > q:
                twice += 2
            elif p == q:
                twice += 1
    return twice / (2 * len(pos) * len(neg))


def grid_prox_l1(v, threshold, step=1e-5, radius=None):
    """Minimize 1/2 (x - v)^2 + threshold |x| over a 1-D grid around v."""
    radius = abs(v) + threshold + 1.0 if radius is None else radius
    xs = np.arange(-radius, radius + step, step)
    vals = 0.5 * (xs - v) ** 2 + threshold * np.abs(xs)
    return float(xs[np.argmin(vals)])


def grid_prox_l2(r, threshold, step=1e-3, final_step=1e-6):
    """Minimize 1/2 ||x - r||^2 + threshold ||x||_2 by 2-D grid search.

    A grid of spacing ``step`` covers the box spanned by 0 and ``r``; the
    search then zooms in around the best point, ten times finer each
    round, until the spacing reaches ``final_step``.  The objective is
    convex, so the minimizer stays inside each zoomed window.
    """
    r = np.asarray(r, dtype=float)

    def f(X0, X1):
        return 0.5 * ((X0 - r[0]) ** 2 + (X1 - r[1]) ** 2) + threshold * np.hypot(X0, X1)

    lo = np.minimum(r, 0.0) - 0.05
    hi = np.maximum(r, 0.0) + 0.05
    while True:
        g0 = np.arange(lo[0], hi[0] + step, step)
        g1 = np.arange(lo[1], hi[1] + step, step)
        X0, X1 = np.meshgrid(g0, g1, indexing="ij")
        i, j = np.unravel_index(np.argmin(f(X0, X1)), X0.shape)
        best = np.array([g0[i], g1[j]])
        if step <= final_step:
            return best
        lo, hi = best - 20 * step, best + 20 * step
        step /= 10
