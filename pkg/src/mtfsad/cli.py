"""Command line entry point: ``mtfsad <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import classifier, features, ingest, labeling, optim, pipeline, synth
from .errors import MtfsError, PipelineError


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def cmd_ingest(args):
    reader = ingest.read_capture(args.capture)
    flows = ingest.assemble_flows(reader, args.idle_timeout)
    ingest.write_flows_csv(args.out, flows)
    s = reader.stats
    print(f"records={s.records} accepted={s.accepted} skipped={s.skipped} ipv6={s.ipv6} "
          f"truncated={s.truncated} flows={len(flows)} "
          f"complete={sum(f.complete for f in flows)}")


def cmd_featurize(args):
    reader = ingest.read_capture(args.capture)
    flows = ingest.assemble_flows(reader, args.idle_timeout)
    if args.complete_only:
        flows = [f for f in flows if f.complete]
    schema = features.DEFAULT_SCHEMA
    X, defined = features.extract_matrix(flows, schema)
    labels = np.zeros(len(flows), dtype=int)
    if args.labels:
        by_id = labeling.read_labels_csv(args.labels)
        labels = np.array([
            0 if f.flow_id not in by_id else (1 if by_id[f.flow_id] == labeling.ANOMALOUS else -1)
            for f in flows], dtype=int)
    task_ids = np.repeat(np.arange(1, args.tasks + 1),
                         pipeline.task_sizes(len(flows), args.tasks)) if flows else []
    table = features.FlowTable([str(f.flow_id) for f in flows], np.asarray(task_ids, dtype=int),
                               X, labels, schema.columns)
    features.write_dataset_csv(args.out, table)
    if args.schema_out:
        schema.write_csv(args.schema_out)
    if args.mask_out:
        features.write_mask_csv(args.mask_out, table.flow_ids, defined, schema)
    print(f"flows={len(flows)} features={len(schema)}")


def cmd_label(args):
    flows = ingest.assemble_flows(ingest.read_capture(args.capture), args.idle_timeout)
    alarms = labeling.read_alarms(args.alarms)
    detectors = tuple(args.detectors.split(",")) if args.detectors else labeling.DEFAULT_DETECTORS
    labels, communities = labeling.label_flows(
        flows, alarms, total_detectors=len(detectors), threshold=args.threshold,
        known_detectors=detectors)
    labeling.write_labels_csv(args.out, labels)
    acc = sum(c.decision == labeling.ACCEPTED for c in communities)
    anom = sum(lab.label == labeling.ANOMALOUS for lab in labels)
    print(f"alarms={len(alarms)} communities={len(communities)} accepted={acc} "
          f"flows={len(labels)} anomalous={anom}")


def cmd_synth(args):
    spec = synth.PlantedSpec(args.tasks, args.features, args.samples, args.support,
                             args.signal, args.sigma, args.seed, args.mode)
    data, W, _ = synth.generate(spec)
    X = np.vstack([t.features for t in data.tasks])
    y = np.concatenate([t.targets for t in data.tasks]).astype(int)
    tids = np.concatenate([np.full(t.n_samples, t.task_id + 1) for t in data.tasks])
    table = features.FlowTable([str(i) for i in range(len(y))], tids, X, y, data.feature_names)
    features.write_dataset_csv(args.out, table)
    if args.truth_out:
        optim.write_weights_csv(args.truth_out, W, [t + 1 for t in data.task_ids],
                                data.feature_names)
    print(f"rows={len(y)} tasks={spec.n_tasks} features={spec.n_features}")


def _task_splits(args):
    table = features.read_dataset_csv(args.dataset)
    data = pipeline.split_tasks(table.X, pipeline.labels_to_targets(table.labels),
                                args.tasks, table.columns)
    return data, [pipeline.split_train_test(t, args.train_fraction, args.seed) for t in data.tasks]


def cmd_select(args):
    data, splits = _task_splits(args)
    std = [pipeline.Standardization.fit(tr.features) for tr, _, _ in splits]
    sel = optim.MultiTaskDataset(
        [optim.TaskData(s.transform(tr.features), tr.targets, tr.task_id)
         for s, (tr, _, _) in zip(std, splits)], data.feature_names)
    opts = optim.SolverOptions(lam=0.0, max_iters=args.max_iters, rel_tol=args.rel_tol)
    if args.method == "mtfs":
        res = optim.lambda_for_feature_count(sel, args.features, "l21", args.budget, opts)
        W = res.weights
        print(f"lambda={res.lam!r} selected=" + ",".join(data.feature_names[i] for i in res.selected))
    else:
        cols = []
        for j in range(sel.n_tasks):
            res = optim.lambda_for_feature_count(sel.task(j), args.features, "l1", args.budget, opts)
            cols.append(res.weights[:, 0])
            print(f"task={sel.tasks[j].task_id} lambda={res.lam!r} selected="
                  + ",".join(data.feature_names[i] for i in res.selected))
        W = np.stack(cols, axis=1)
    if args.out:
        optim.write_weights_csv(args.out, W, sel.task_ids, data.feature_names)


def _task_index(data, task_id):
    ids = data.task_ids
    if task_id not in ids:
        raise MtfsError(f"task {task_id} not in {ids}")
    return ids.index(task_id)


def cmd_train(args):
    data, splits = _task_splits(args)
    tr, _, _ = splits[_task_index(data, args.task)]
    names = [c.strip() for c in args.columns.split(",")]
    feats = [data.feature_names.index(c) for c in names]
    grid = [(c, g) for c in args.c_grid for g in args.gamma_grid]
    X = tr.features[:, feats]
    C, gamma = classifier.cross_validate(X, tr.targets, grid, args.folds, args.seed, args.kernel)
    model = classifier.svm_train(X, tr.targets, args.kernel, C, gamma, selected_features=names)
    with open(args.out, "w") as fh:
        classifier.dump_model(model, fh)
    print(f"C={C!r} gamma={gamma!r} support={len(model.support)}")


def cmd_evaluate(args):
    data, splits = _task_splits(args)
    _, te, _ = splits[_task_index(data, args.task)]
    with open(args.model) as fh:
        model = classifier.load_model(fh)
    feats = [data.feature_names.index(str(c)) for c in model.selected_features]
    rep = classifier.evaluate(model, te.features[:, feats], te.targets)
    print(f"task={args.task} accuracy={rep.accuracy!r} auc={rep.auc!r} "
          f"tp={rep.tp} fp={rep.fp} tn={rep.tn} fn={rep.fn}")


def cmd_experiment(args):
    overrides = dict(dataset=args.dataset, capture=args.capture, alarms=args.alarms,
                     n_tasks=args.tasks, seed=args.seed, output_dir=args.out_dir,
                     feature_counts=args.features, methods=args.method)
    config = pipeline.load_config(args.config, **overrides)
    result = pipeline.run_experiment(config)
    for p in pipeline.write_outputs(result, config):
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="mtfsad", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def capture_cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("capture")
        sp.add_argument("--idle-timeout", type=float, default=ingest.DEFAULT_IDLE_TIMEOUT)
        return sp

    sp = capture_cmd("ingest", "pcap -> flow CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = capture_cmd("featurize", "pcap -> dataset CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--labels", help="labels CSV from the label command")
    sp.add_argument("--tasks", type=int, default=1)
    sp.add_argument("--complete-only", action="store_true")
    sp.add_argument("--schema-out")
    sp.add_argument("--mask-out")
    sp.set_defaults(func=cmd_featurize)

    sp = capture_cmd("label", "pcap + alarms -> labels CSV")
    sp.add_argument("alarms")
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--detectors", help="comma-separated detector names")
    sp.set_defaults(func=cmd_label)

    sp = sub.add_parser("synth", help="planted multi-task dataset CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--truth-out")
    sp.add_argument("--tasks", type=int, default=10)
    sp.add_argument("--features", type=int, default=50)
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--support", type=int, default=5)
    sp.add_argument("--signal", type=float, default=1.0)
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--mode", choices=("shared", "disjoint"), default="shared")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    def dataset_cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("dataset")
        sp.add_argument("--tasks", type=int, default=10)
        sp.add_argument("--train-fraction", type=float, default=0.5)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = dataset_cmd("select", "feature selection on the training halves")
    sp.add_argument("--method", choices=("lasso", "mtfs"), default="mtfs")
    sp.add_argument("--features", type=int, default=5)
    sp.add_argument("--budget", type=int, default=30)
    sp.add_argument("--max-iters", type=int, default=5000)
    sp.add_argument("--rel-tol", type=float, default=1e-6)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_select)

    sp = dataset_cmd("train", "cross-validated SVM for one task")
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--columns", required=True, help="comma-separated feature columns")
    sp.add_argument("--kernel", choices=("rbf", "linear"), default="rbf")
    sp.add_argument("--c-grid", type=lambda s: tuple(float(v) for v in s.split(",")),
                    default=classifier.DEFAULT_C_GRID)
    sp.add_argument("--gamma-grid", type=lambda s: tuple(float(v) for v in s.split(",")),
                    default=classifier.DEFAULT_GAMMA_GRID)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = dataset_cmd("evaluate", "score a saved model on a task's test half")
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="end-to-end Lasso vs multi-task comparison")
    sp.add_argument("--config")
    sp.add_argument("--dataset")
    sp.add_argument("--capture")
    sp.add_argument("--alarms")
    sp.add_argument("--tasks", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--features", type=_ints)
    sp.add_argument("--method", choices=("lasso", "mtfs", "both"))
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2
    except (MtfsError, OSError, ValueError) as exc:
        print(f"error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
