"""End-to-end experiment: chronological tasks, feature selection, per-task SVMs."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import classifier, features, ingest, labeling, optim
from .errors import ContractViolation, MtfsError, PipelineError, ValidationError

METHODS = ("lasso", "mtfs")


@dataclass
class ExperimentConfig:
    dataset: Optional[str] = None
    capture: Optional[str] = None
    alarms: Optional[str] = None
    n_tasks: int = 10
    train_fraction: float = 0.5
    feature_counts: tuple = (5, 12, 24)
    methods: tuple = METHODS
    max_iters: int = 5000
    rel_tol: float = 1e-6
    lambda_budget: int = 30
    kernel: str = "rbf"
    c_grid: tuple = classifier.DEFAULT_C_GRID
    gamma_grid: tuple = classifier.DEFAULT_GAMMA_GRID
    folds: int = 5
    seed: int = 0
    output_dir: str = "results"
    complete_only: bool = False
    idle_timeout: float = ingest.DEFAULT_IDLE_TIMEOUT
    vote_threshold: float = 0.5
    # recorded in the outputs so the preprocessing choice is visible
    svm_scaling: str = "minmax-train"

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie in (0, 1)")
        if self.n_tasks < 1:
            raise ValidationError("n_tasks must be >= 1")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValidationError(f"methods must be drawn from {METHODS}, got {self.methods}")
        if not self.feature_counts:
            raise ValidationError("feature_counts is empty")

    @property
    def grid(self):
        return [(c, g) for c in self.c_grid for g in self.gamma_grid]

    def solver_options(self):
        return optim.SolverOptions(lam=0.0, max_iters=self.max_iters, rel_tol=self.rel_tol)


def _parse_list(conv):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return tuple(conv(v) for v in text)
        return tuple(conv(v.strip()) for v in str(text).split(",") if v.strip())
    return parse


def _parse_bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def _parse_methods(text):
    items = _parse_list(str)(text)
    return METHODS if items == ("both",) else items


_CONVERTERS = {
    "dataset": str, "capture": str, "alarms": str, "output_dir": str, "kernel": str,
    "svm_scaling": str,
    "n_tasks": int, "max_iters": int, "lambda_budget": int, "folds": int, "seed": int,
    "train_fraction": float, "rel_tol": float, "idle_timeout": float,
    "vote_threshold": float,
    "feature_counts": _parse_list(int), "methods": _parse_methods,
    "c_grid": _parse_list(float), "gamma_grid": _parse_list(float),
    "complete_only": _parse_bool,
}


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _CONVERTERS:
            raise ValidationError(f"config line {lineno}: cannot parse {raw!r}")
        try:
            values[key] = _CONVERTERS[key](value.strip())
        except ValueError as exc:
            raise ValidationError(f"config line {lineno}: {exc}") from None
    return values


def load_config(path=None, **overrides):
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for key, value in overrides.items():
        if value is not None:
            values[key] = _CONVERTERS[key](value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


def format_config(config, exclude=()):
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if v is None or f.name in exclude:
            continue
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- splitting --------------------------------------------------------------

def task_sizes(n_rows, n_tasks):
    """Contiguous block sizes; the remainder goes one row each to the earliest tasks."""
    if n_rows < n_tasks:
        raise ContractViolation(f"cannot split {n_rows} rows into {n_tasks} tasks")
    base, extra = divmod(n_rows, n_tasks)
    return [base + (1 if j < extra else 0) for j in range(n_tasks)]


def split_tasks(X, y, n_tasks, feature_names=None):
    """Chronological task split of time-ordered rows; task ids run 1..L."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    tasks, start = [], 0
    for j, size in enumerate(task_sizes(len(y), n_tasks), start=1):
        tasks.append(optim.TaskData(X[start:start + size], y[start:start + size], j))
        start += size
    return optim.MultiTaskDataset(tasks, feature_names)


@dataclass
class SplitInfo:
    train_rows: np.ndarray
    test_rows: np.ndarray
    train_pos: int
    train_neg: int
    test_pos: int
    test_neg: int


def split_train_test(task, fraction, seed):
    """Seeded shuffle; the first ``ceil(fraction * m)`` rows are training rows."""
    if not 0 < fraction < 1:
        raise ValidationError("fraction must lie in (0, 1)")
    m = task.n_samples
    n_train = math.ceil(round(fraction * m, 9))
    if n_train == 0 or n_train == m:
        raise ContractViolation(f"task {task.task_id}: split of {m} rows leaves an empty side")
    perm = np.random.default_rng([seed, task.task_id]).permutation(m)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    train = optim.TaskData(task.features[tr], task.targets[tr], task.task_id)
    test = optim.TaskData(task.features[te], task.targets[te], task.task_id)
    yt, ye = task.targets[tr], task.targets[te]
    info = SplitInfo(tr, te, int((yt > 0).sum()), int((yt < 0).sum()),
                     int((ye > 0).sum()), int((ye < 0).sum()))
    return train, test, info


# -- experiment -------------------------------------------------------------

@dataclass
class ResultRow:
    task: int
    method: str
    t: int
    accuracy: float
    auc: float
    C: float
    gamma: float
    lam: float
    features: list


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def select(self, method=None, t=None, task=None):
        return [r for r in self.rows
                if (method is None or r.method == method)
                and (t is None or r.t == t) and (task is None or r.task == task)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["task", "method", "t", "accuracy", "auc", "C", "gamma", "lambda",
                          "features"])
            for r in self.rows:
                out.writerow([r.task, r.method, r.t, repr(r.accuracy), repr(r.auc), repr(r.C),
                              repr(r.gamma), repr(r.lam), " ".join(r.features)])


@dataclass
class Standardization:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X):
        return (X - self.mean) / self.scale


@dataclass
class ExperimentResult:
    table: ResultTable
    splits: dict
    standardization: dict
    models: dict
    dataset: optim.MultiTaskDataset


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (MtfsError, ValueError, ArithmeticError, OSError) as exc:
        raise PipelineError(name, exc) from exc


def labels_to_targets(labels):
    return np.where(np.asarray(labels) > 0, 1.0, -1.0)


def table_from_capture(capture, alarms_path, idle_timeout=ingest.DEFAULT_IDLE_TIMEOUT,
                       complete_only=False, vote_threshold=0.5, schema=features.DEFAULT_SCHEMA):
    """Ingest, featurize and label a capture into a :class:`features.FlowTable`."""
    reader = _stage("ingest", ingest.read_capture, capture)
    flows = _stage("ingest", lambda: ingest.assemble_flows(reader, idle_timeout))
    if complete_only:
        flows = [f for f in flows if f.complete]
    X, _ = _stage("featurize", features.extract_matrix, flows, schema)
    alarms = _stage("label", labeling.read_alarms, alarms_path)
    labels, _ = _stage("label", labeling.label_flows, flows, alarms,
                       threshold=vote_threshold)
    y = np.array([1 if lab.label == labeling.ANOMALOUS else -1 for lab in labels], dtype=int)
    return features.FlowTable([str(f.flow_id) for f in flows], np.zeros(len(flows), dtype=int),
                              X, y, schema.columns)


def _load_table(config):
    if config.dataset:
        return _stage("load", features.read_dataset_csv, config.dataset)
    if config.capture and config.alarms:
        return table_from_capture(config.capture, config.alarms, config.idle_timeout,
                                  config.complete_only, config.vote_threshold)
    raise PipelineError("config", ValidationError("need a dataset CSV or a capture plus alarms"))


def _svm_run(Xtr, ytr, Xte, yte, feats, config):
    C, gamma = classifier.cross_validate(Xtr, ytr, config.grid, config.folds, config.seed,
                                         config.kernel)
    model = classifier.svm_train(Xtr, ytr, config.kernel, C, gamma, selected_features=feats)
    return model, classifier.evaluate(model, Xte, yte)


def run_experiment(config, table=None):
    """Run the Lasso vs. multi-task selection comparison.

    For every feature count ``t``: the multi-task selector picks one shared
    set from all training halves jointly, the Lasso baseline picks one set
    per task; each task then gets a cross-validated SVM on its training
    half restricted to its set, scored on its test half.  Selection and
    scaling statistics only ever see training rows.
    """
    if table is None:
        table = _load_table(config)
    if np.any(table.labels == 0):
        raise PipelineError("load", ValidationError("dataset contains unlabeled rows"))
    data = _stage("split", split_tasks, table.X, labels_to_targets(table.labels),
                  config.n_tasks, table.columns)
    n = data.n_features
    for t in config.feature_counts:
        if not 1 <= t <= n:
            raise PipelineError("select", ContractViolation(f"feature count {t} outside [1, {n}]"))

    splits, train, test, std = {}, [], [], {}
    for task in data.tasks:
        tr, te, info = _stage("split", split_train_test, task, config.train_fraction, config.seed)
        splits[task.task_id] = info
        train.append(tr)
        test.append(te)
        std[task.task_id] = Standardization.fit(tr.features)
    sel_data = optim.MultiTaskDataset(
        [optim.TaskData(std[tr.task_id].transform(tr.features), tr.targets, tr.task_id)
         for tr in train], data.feature_names)
    opts = config.solver_options()

    table_out = ResultTable()
    models = {}
    cache = {}
    for t in config.feature_counts:
        choices = {}
        if "mtfs" in config.methods:
            res = _stage("select", optim.lambda_for_feature_count, sel_data, t, "l21",
                         config.lambda_budget, opts)
            for tr in train:
                choices[(tr.task_id, "mtfs")] = (res.lam, sorted(res.selected))
        if "lasso" in config.methods:
            for j, tr in enumerate(train):
                res = _stage("select", optim.lambda_for_feature_count, sel_data.task(j), t,
                             "l1", config.lambda_budget, opts)
                choices[(tr.task_id, "lasso")] = (res.lam, sorted(res.selected))
        for tr, te in zip(train, test):
            for method in METHODS:
                if (tr.task_id, method) not in choices:
                    continue
                lam, feats = choices[(tr.task_id, method)]
                ck = (tr.task_id, tuple(feats))
                if ck not in cache:
                    cache[ck] = _stage("classify", _svm_run, tr.features[:, feats], tr.targets,
                                       te.features[:, feats], te.targets, feats, config)
                model, rep = cache[ck]
                models[(tr.task_id, method, t)] = model
                table_out.rows.append(ResultRow(
                    tr.task_id, method, t, rep.accuracy, rep.auc, rep.C, rep.gamma, lam,
                    [data.feature_names[i] for i in feats]))
    table_out.rows.sort(key=lambda r: (r.t, r.task, METHODS.index(r.method)))
    return ExperimentResult(table_out, splits, std, models, data)


def write_outputs(result, config, out_dir=None):
    """ResultTable CSV plus plot-ready per-figure CSVs; returns written paths."""
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def path(name):
        p = os.path.join(out_dir, name)
        paths.append(p)
        return p

    result.table.write_csv(path("results.csv"))
    tasks = sorted({r.task for r in result.table.rows})
    methods = [m for m in METHODS if m in config.methods]
    for t in config.feature_counts:
        with open(path(f"accuracy_top{t}.csv"), "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["task", *methods])
            for task in tasks:
                out.writerow([task, *[repr(result.table.select(m, t, task)[0].accuracy)
                                      for m in methods]])
    with open(path("auc_by_task.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        cols = [(t, m) for t in config.feature_counts for m in methods]
        out.writerow(["task", *[f"{m}_t{t}" for t, m in cols]])
        for task in tasks:
            out.writerow([task, *[repr(result.table.select(m, t, task)[0].auc) for t, m in cols]])
    with open(path("splits.csv"), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["task", "rows", "train_pos", "train_neg", "test_pos", "test_neg"])
        for task in tasks:
            s = result.splits[task]
            out.writerow([task, len(s.train_rows) + len(s.test_rows),
                          s.train_pos, s.train_neg, s.test_pos, s.test_neg])
    with open(path("config.txt"), "w") as fh:
        # the directory is implied by where the file sits; keeping it out lets
        # two runs into different directories compare byte for byte
        fh.write(format_config(config, exclude=("output_dir",)))
    return paths
