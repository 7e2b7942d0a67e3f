"""Binary SVM trained by SMO, grid-search cross-validation and metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ContractViolation, DegenerateModelError, StratificationError, ValidationError

MODEL_FORMAT = "mtfsad-svm"
MODEL_VERSION = 1

DEFAULT_C_GRID = tuple(2.0 ** e for e in range(-5, 16, 2))
DEFAULT_GAMMA_GRID = tuple(2.0 ** e for e in range(-15, 4, 2))


def default_grid():
    return [(c, g) for c in DEFAULT_C_GRID for g in DEFAULT_GAMMA_GRID]


@dataclass
class MinMaxScaling:
    low: np.ndarray
    high: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        return cls(X.min(axis=0), X.max(axis=0))

    @classmethod
    def identity(cls, width):
        return cls(np.zeros(width), np.ones(width))

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        span = self.high - self.low
        span = np.where(span > 0, span, 1.0)
        return (X - self.low) / span


def kernel_matrix(A, B, kernel, gamma):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if kernel == "linear":
        return A @ B.T
    if kernel == "rbf":
        d = ((A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T)
        return np.exp(-gamma * np.maximum(d, 0.0))
    raise ValidationError(f"unknown kernel {kernel!r}")


@dataclass
class SvmModel:
    kernel: str
    C: float
    gamma: float
    support: np.ndarray          # indices into the training set
    support_vectors: np.ndarray  # scaled training rows
    dual_coef: np.ndarray        # alpha_i * y_i
    bias: float
    scaling: MinMaxScaling
    selected_features: list = field(default_factory=list)
    dual_objective: float = float("nan")
    kkt_gap: float = float("nan")
    iterations: int = 0

    @property
    def n_features(self):
        return self.scaling.low.shape[0]


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise ContractViolation(f"{X.shape[0]} rows but {y.shape[0]} labels")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValidationError("labels must be +1/-1")
    if not np.all(np.isfinite(X)):
        raise ValidationError("non-finite feature values")
    return X, y


def svm_train(X, y, kernel="rbf", C=1.0, gamma=1.0, *, scale=True, tol=1e-3,
              max_iter=1_000_000, selected_features=None):
    """Train a C-SVM by sequential minimal optimization.

    The working pair is the maximal violating pair of the dual's KKT
    conditions; training stops when that violation drops below ``tol``.
    With ``scale=True`` a min-max scaling to [0, 1] is learned from ``X``
    and stored in the model.
    """
    X, y = _check_xy(X, y)
    if np.all(y > 0) or np.all(y < 0):
        raise DegenerateModelError("training labels contain a single class")
    if not C > 0:
        raise ValidationError("C must be positive")
    scaling = MinMaxScaling.fit(X) if scale else MinMaxScaling.identity(X.shape[1])
    Xs = scaling.transform(X)
    n = len(y)

    K = kernel_matrix(Xs, Xs, kernel, gamma)
    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    pos, neg = y > 0, y < 0

    it = 0
    gap = np.inf
    for it in range(1, max_iter + 1):
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (pos & (alpha > 0)) | (neg & (alpha < C))
        v = -y * grad
        vu = np.where(up, v, -np.inf)
        vl = np.where(low, v, np.inf)
        i = int(np.argmax(vu))
        j = int(np.argmin(vl))
        gap = vu[i] - vl[j]
        if gap < tol:
            break
        eta = diag[i] + diag[j] - 2.0 * K[i, j]
        delta = gap / max(eta, 1e-12)
        lim_i = C - alpha[i] if y[i] > 0 else alpha[i]
        lim_j = alpha[j] if y[j] > 0 else C - alpha[j]
        delta = min(delta, lim_i, lim_j)
        ai = alpha[i] + y[i] * delta
        aj = alpha[j] - y[j] * delta
        # snap to the box so bound membership is exact
        if delta == lim_i:
            ai = C if y[i] > 0 else 0.0
        if delta == lim_j:
            aj = 0.0 if y[j] > 0 else C
        di, dj = ai - alpha[i], aj - alpha[j]
        alpha[i], alpha[j] = ai, aj
        grad += Q[:, i] * di + Q[:, j] * dj

    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        rho = float(yg[free].mean())
    else:
        at_c, at_0 = alpha >= C, alpha <= 0
        ub_mask = (at_c & neg) | (at_0 & pos)
        lb_mask = (at_c & pos) | (at_0 & neg)
        ub = yg[ub_mask].min() if np.any(ub_mask) else np.inf
        lb = yg[lb_mask].max() if np.any(lb_mask) else -np.inf
        rho = float((ub + lb) / 2.0)

    sv = np.nonzero(alpha > 0)[0]
    dual = float(alpha.sum() - 0.5 * alpha @ Q @ alpha)
    return SvmModel(
        kernel=kernel, C=float(C), gamma=float(gamma), support=sv,
        support_vectors=Xs[sv], dual_coef=alpha[sv] * y[sv], bias=-rho,
        scaling=scaling,
        selected_features=list(selected_features) if selected_features is not None
        else list(range(X.shape[1])),
        dual_objective=dual, kkt_gap=float(gap), iterations=it)


def decision_values(model, X):
    """f(x) = sum_i alpha_i y_i K(sv_i, x) + b on raw (unscaled) inputs."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.n_features:
        raise ContractViolation(
            f"model expects {model.n_features} feature columns, got {X.shape[1]}")
    if model.support_vectors.shape[0] == 0:
        return np.full(X.shape[0], model.bias)
    Xs = model.scaling.transform(X)
    Kx = kernel_matrix(Xs, model.support_vectors, model.kernel, model.gamma)
    return Kx @ model.dual_coef + model.bias


def predict(model, X):
    return np.where(decision_values(model, X) >= 0, 1.0, -1.0)


def accuracy(y_true, y_pred):
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    if y_true.shape != y_pred.shape:
        raise ContractViolation("y_true and y_pred differ in length")
    if y_true.size == 0:
        raise ContractViolation("accuracy of an empty sample is undefined")
    return int(np.count_nonzero(y_true == y_pred)) / y_true.size


def auc(y_true, scores):
    """Probability that a random positive outscores a random negative.

    Ties count one half.  Computed from integer counts over tied score
    groups, so the result equals exhaustive pair counting exactly.
    """
    y_true = np.asarray(y_true, dtype=float).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    if y_true.shape != scores.shape:
        raise ContractViolation("labels and scores differ in length")
    is_pos = y_true > 0
    n_pos = int(is_pos.sum())
    n_neg = y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes")
    order = np.argsort(scores, kind="stable")
    s, p = scores[order], is_pos[order]
    twice = 0
    neg_below = 0
    start = 0
    while start < s.size:
        stop = start
        while stop < s.size and s[stop] == s[start]:
            stop += 1
        gp = int(p[start:stop].sum())
        gn = (stop - start) - gp
        twice += 2 * gp * neg_below + gp * gn
        neg_below += gn
        start = stop
    return twice / (2 * n_pos * n_neg)


def stratified_folds(y, folds=5, seed=0):
    """Fold number per example: per class, a seeded shuffle dealt round-robin."""
    y = np.asarray(y, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    out = np.empty(y.size, dtype=int)
    for label in (-1.0, 1.0):
        idx = np.nonzero(y == label)[0]
        if idx.size < folds:
            raise StratificationError(
                f"class {label:+.0f} has {idx.size} examples, fewer than {folds} folds")
        out[rng.permutation(idx)] = np.arange(idx.size) % folds
    return out


def cv_scores(X, y, grid, folds=5, seed=0, kernel="rbf"):
    """Mean validation accuracy (as an exact fraction) for every grid pair."""
    X, y = _check_xy(X, y)
    if not grid:
        raise ContractViolation("empty parameter grid")
    assign = stratified_folds(y, folds, seed)
    scores = {}
    for C, gamma in grid:
        total = Fraction(0)
        for f in range(folds):
            tr, va = assign != f, assign == f
            model = svm_train(X[tr], y[tr], kernel, C, gamma)
            total += Fraction(int(np.count_nonzero(predict(model, X[va]) == y[va])),
                              int(va.sum()))
        scores[(C, gamma)] = total / folds
    return scores


def cross_validate(X, y, grid=None, folds=5, seed=0, kernel="rbf"):
    """Best ``(C, gamma)`` by mean fold accuracy; ties go to smaller C, then gamma."""
    grid = default_grid() if grid is None else list(grid)
    scores = cv_scores(X, y, grid, folds, seed, kernel)
    best = None
    for pair in sorted(scores):
        if best is None or scores[pair] > scores[best]:
            best = pair
    return best


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    C: float
    gamma: float
    t: int
    scaled: bool = True


def evaluate(model, X, y):
    X, y = _check_xy(X, y)
    pred = predict(model, X)
    scores = decision_values(model, X)
    try:
        area = auc(y, scores)
    except ValidationError:
        area = float("nan")
    return EvalReport(
        accuracy=accuracy(y, pred), auc=area,
        tp=int(np.sum((pred > 0) & (y > 0))), fp=int(np.sum((pred > 0) & (y < 0))),
        tn=int(np.sum((pred < 0) & (y < 0))), fn=int(np.sum((pred < 0) & (y > 0))),
        C=model.C, gamma=model.gamma, t=len(model.selected_features))


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def dump_model(model, fh):
    fh.write(f"{MODEL_FORMAT} {MODEL_VERSION}\n")
    fh.write(f"kernel {model.kernel}\n")
    fh.write(f"C {model.C!r}\n")
    fh.write(f"gamma {model.gamma!r}\n")
    fh.write(f"bias {float(model.bias)!r}\n")
    fh.write("features " + " ".join(str(f) for f in model.selected_features) + "\n")
    fh.write("scale_min " + _fmt(model.scaling.low) + "\n")
    fh.write("scale_max " + _fmt(model.scaling.high) + "\n")
    fh.write(f"support {len(model.support)}\n")
    for idx, coef, row in zip(model.support, model.dual_coef, model.support_vectors):
        fh.write(f"{int(idx)} {float(coef)!r} {_fmt(row)}\n")


def dumps_model(model):
    buf = io.StringIO()
    dump_model(model, buf)
    return buf.getvalue()


def load_model(fh):
    lines = [ln.rstrip("\n") for ln in fh]
    head = lines[0].split()
    if head != [MODEL_FORMAT, str(MODEL_VERSION)]:
        raise ValidationError(f"not a {MODEL_FORMAT} v{MODEL_VERSION} model: {lines[0]!r}")
    fields = {}
    k = 1
    while not lines[k].startswith("support "):
        key, _, rest = lines[k].partition(" ")
        fields[key] = rest
        k += 1
    n_sv = int(lines[k].split()[1])
    rows = [ln.split() for ln in lines[k + 1:k + 1 + n_sv]]
    feats = [int(v) if v.lstrip("-").isdigit() else v for v in fields["features"].split()]
    width = len(fields["scale_min"].split())
    return SvmModel(
        kernel=fields["kernel"], C=float(fields["C"]), gamma=float(fields["gamma"]),
        support=np.array([int(r[0]) for r in rows], dtype=int),
        support_vectors=np.array([[float(v) for v in r[2:]] for r in rows]).reshape(n_sv, width),
        dual_coef=np.array([float(r[1]) for r in rows]),
        bias=float(fields["bias"]),
        scaling=MinMaxScaling(np.array([float(v) for v in fields["scale_min"].split()]),
                              np.array([float(v) for v in fields["scale_max"].split()])),
        selected_features=feats)


def loads_model(text):
    return load_model(io.StringIO(text))
