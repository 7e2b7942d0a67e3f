"""Per-flow discriminators and the dataset CSV format.

Feature ids 1-7, 25-27 and 239-248 follow the numbering of the classic
248-discriminator catalog for TCP flows (ports, inter-arrival quartiles,
control-byte quartiles, IAT spectrum).  The remaining discriminators of
that catalog are not computed; the extra statistics needed to describe
both directions consistently carry ids from 300 upwards.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ValidationError
from .ingest import FlowKey, TcpFlags

SCHEMA_VERSION = "flowfeat-1"
FFT_LENGTH = 32
FFT_BINS = 10

BOTH, C2S, S2C = "both", "client->server", "server->client"

_STATS = ("min", "q1", "median", "mean", "q3", "max", "var")
_STAT_TEXT = {
    "min": "minimum", "q1": "first quartile", "median": "median", "mean": "mean",
    "q3": "third quartile", "max": "maximum", "var": "population variance",
}


@dataclass(frozen=True)
class FeatureDef:
    feature_id: int
    name: str
    direction: str
    definition: str


def _default_defs():
    defs = [
        FeatureDef(1, "server_port", BOTH, "port number at server"),
        FeatureDef(2, "client_port", BOTH, "port number at client"),
    ]
    for fid, stat in zip((3, 4, 5, 6, 7), ("min", "q1", "median", "mean", "q3")):
        defs.append(FeatureDef(fid, f"iat_{stat}", BOTH,
                               f"{_STAT_TEXT[stat]} packet inter-arrival time (s), all packets"))
    for fid, stat in zip((25, 26, 27), ("q1", "median", "mean")):
        defs.append(FeatureDef(fid, f"ctrl_{stat}", BOTH,
                               f"{_STAT_TEXT[stat]} of control bytes (IP+TCP header) per packet"))
    for k in range(1, FFT_BINS + 1):
        defs.append(FeatureDef(238 + k, f"fft_iat_{k}", BOTH,
                               f"|DFT| of the zero-padded 32-point IAT sequence, bin {k}"))
    fid = 300
    for stat in ("max", "var"):
        defs.append(FeatureDef(fid, f"iat_{stat}", BOTH,
                               f"{_STAT_TEXT[stat]} packet inter-arrival time (s), all packets"))
        fid += 1
    for quantity, unit in (("iat", "inter-arrival time (s)"), ("len", "packet length (bytes on wire)")):
        for tag, direction in (("c2s", C2S), ("s2c", S2C)):
            for stat in _STATS:
                defs.append(FeatureDef(fid, f"{quantity}_{stat}_{tag}", direction,
                                       f"{_STAT_TEXT[stat]} {unit}, {direction} packets"))
                fid += 1
    for stat in ("min", "max", "var"):
        defs.append(FeatureDef(fid, f"ctrl_{stat}", BOTH,
                               f"{_STAT_TEXT[stat]} of control bytes (IP+TCP header) per packet"))
        fid += 1
    for flag in ("syn", "ack"):
        for tag, direction in (("c2s", C2S), ("s2c", S2C)):
            defs.append(FeatureDef(fid, f"{flag}_count_{tag}", direction,
                                   f"packets with {flag.upper()} set, {direction}"))
            fid += 1
    for tag, direction in (("c2s", C2S), ("s2c", S2C)):
        defs.append(FeatureDef(fid, f"payload_bytes_{tag}", direction,
                               f"total TCP payload bytes, {direction}"))
        fid += 1
    defs.append(FeatureDef(fid, "duration", BOTH, "last minus first packet timestamp (s)"))
    return defs


class FeatureSchema:
    def __init__(self, defs, version=SCHEMA_VERSION):
        self.defs = list(defs)
        self.version = version
        ids = [d.feature_id for d in self.defs]
        if len(set(ids)) != len(ids):
            raise ContractViolation("feature ids must be unique")
        self._pos = {d.feature_id: i for i, d in enumerate(self.defs)}

    def __len__(self):
        return len(self.defs)

    def __iter__(self):
        return iter(self.defs)

    @property
    def ids(self):
        return [d.feature_id for d in self.defs]

    @property
    def columns(self):
        return [f"f{d.feature_id}" for d in self.defs]

    def position(self, feature_id):
        return self._pos[feature_id]

    def by_name(self, name):
        return next(d for d in self.defs if d.name == name)

    def subset(self, feature_ids):
        return FeatureSchema([self.defs[self._pos[i]] for i in feature_ids], self.version)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["id", "name", "direction", "definition"])
            for d in self.defs:
                out.writerow([d.feature_id, d.name, d.direction, d.definition])


DEFAULT_SCHEMA = FeatureSchema(_default_defs())

# (client->server id, server->client id) pairs exchanged by a role swap
SWAP_PAIRS = [(1, 2)] + [
    (DEFAULT_SCHEMA.by_name(f"{q}_{s}_c2s").feature_id,
     DEFAULT_SCHEMA.by_name(f"{q}_{s}_s2c").feature_id)
    for q in ("iat", "len") for s in _STATS
] + [
    (DEFAULT_SCHEMA.by_name(f"{n}_c2s").feature_id, DEFAULT_SCHEMA.by_name(f"{n}_s2c").feature_id)
    for n in ("syn_count", "ack_count", "payload_bytes")
]


@dataclass
class FeatureVector:
    flow_key: FlowKey
    values: np.ndarray
    defined: np.ndarray
    schema_version: str = SCHEMA_VERSION


def quantile(sorted_sample, q):
    """Linear interpolation between order statistics at ``q * (len - 1)``.

    ``sorted_sample`` must already be in ascending order.
    """
    n = len(sorted_sample)
    if n == 0:
        raise ContractViolation("quantile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"q must lie in [0, 1], got {q}")
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_sample[lo] + frac * (sorted_sample[hi] - sorted_sample[lo])


def summary_stats(sample):
    """min, q1, median, mean, q3, max, population variance; None when empty."""
    if len(sample) == 0:
        return dict.fromkeys(_STATS)
    s = sorted(sample)
    mean = math.fsum(s) / len(s)
    return {
        "min": s[0], "q1": quantile(s, 0.25), "median": quantile(s, 0.5), "mean": mean,
        "q3": quantile(s, 0.75), "max": s[-1],
        "var": math.fsum((x - mean) ** 2 for x in s) / len(s),
    }


def fft_magnitudes(iats):
    seq = np.zeros(FFT_LENGTH)
    head = np.asarray(iats, dtype=float)[:FFT_LENGTH]
    seq[:head.size] = head
    return np.abs(np.fft.fft(seq))[1:FFT_BINS + 1]


def fft_iat(flow):
    """Magnitudes of DFT bins 1..10 of the flow's IAT sequence padded to 32."""
    return fft_magnitudes(_iats([p.ts_us for p in flow.packets]))


def _iats(times_us):
    return [(b - a) / 1e6 for a, b in zip(times_us, times_us[1:])]


def _raw_features(flow):
    pkts = flow.packets
    if not pkts:
        raise ContractViolation("cannot featurize an empty flow")
    c2s = [p for p, d in zip(pkts, flow.from_client) if d]
    s2c = [p for p, d in zip(pkts, flow.from_client) if not d]
    times = [p.ts_us for p in pkts]
    iat_all = _iats(times)
    out = {
        "server_port": flow.server[1],
        "client_port": flow.client[1],
        "duration": (times[-1] - times[0]) / 1e6,
    }
    for stat, v in summary_stats(iat_all).items():
        out[f"iat_{stat}"] = v
    for tag, group in (("c2s", c2s), ("s2c", s2c)):
        for stat, v in summary_stats(_iats([p.ts_us for p in group])).items():
            out[f"iat_{stat}_{tag}"] = v
        for stat, v in summary_stats([p.total_len for p in group]).items():
            out[f"len_{stat}_{tag}"] = v
        out[f"syn_count_{tag}"] = sum(p.has(TcpFlags.SYN) for p in group)
        out[f"ack_count_{tag}"] = sum(p.has(TcpFlags.ACK) for p in group)
        out[f"payload_bytes_{tag}"] = sum(p.payload_len for p in group)
    for stat, v in summary_stats([p.control_bytes for p in pkts]).items():
        out[f"ctrl_{stat}"] = v
    spectrum = fft_magnitudes(iat_all) if iat_all else [None] * FFT_BINS
    for k, v in enumerate(spectrum, start=1):
        out[f"fft_iat_{k}"] = v
    return out


def extract(flow, schema=DEFAULT_SCHEMA):
    """Feature vector of ``flow``; undefined statistics are 0 with ``defined`` False."""
    raw = _raw_features(flow)
    values = np.zeros(len(schema))
    defined = np.zeros(len(schema), dtype=bool)
    for i, d in enumerate(schema):
        if d.name not in raw:
            raise ContractViolation(f"feature {d.feature_id} ({d.name}) is not computable")
        v = raw[d.name]
        if v is not None:
            values[i] = float(v)
            defined[i] = True
    return FeatureVector(flow.key, values, defined, schema.version)


def extract_matrix(flows, schema=DEFAULT_SCHEMA):
    vecs = [extract(f, schema) for f in flows]
    if not vecs:
        return np.zeros((0, len(schema))), np.zeros((0, len(schema)), dtype=bool)
    return np.stack([v.values for v in vecs]), np.stack([v.defined for v in vecs])


# -- dataset CSV -----------------------------------------------------------

@dataclass
class FlowTable:
    """Rows of the dataset CSV: ``flow_id, task_id, f<id>..., label``."""

    flow_ids: list
    task_ids: np.ndarray
    X: np.ndarray
    labels: np.ndarray
    columns: list

    @property
    def n_rows(self):
        return len(self.flow_ids)


def write_dataset_csv(path, table):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["flow_id", "task_id", *table.columns, "label"])
        for fid, tid, row, lab in zip(table.flow_ids, table.task_ids, table.X, table.labels):
            out.writerow([fid, int(tid), *[repr(float(v)) for v in row], int(lab)])


def read_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["flow_id", "task_id"] or header[-1] != "label":
            raise ValidationError(f"{path}: not a dataset CSV (header {header[:3]}...)")
        rows = list(reader)
    columns = header[2:-1]
    X = np.array([[float(v) for v in r[2:-1]] for r in rows], dtype=float)
    return FlowTable(
        flow_ids=[r[0] for r in rows],
        task_ids=np.array([int(r[1]) for r in rows], dtype=int),
        X=X.reshape(len(rows), len(columns)),
        labels=np.array([int(r[-1]) for r in rows], dtype=int),
        columns=columns)


def write_mask_csv(path, flow_ids, defined, schema):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["flow_id", *[f"d{i}" for i in schema.ids]])
        for fid, row in zip(flow_ids, defined):
            out.writerow([fid, *[int(b) for b in row]])
