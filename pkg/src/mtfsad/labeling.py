"""Ground-truth labels from detector alarms.

Alarms (produced by external detectors) are resolved to the flows they
describe, linked into a similarity graph whenever two alarms share a flow,
and grouped into connected communities.  A community is accepted when
enough distinct detectors contributed to it; flows covered by an accepted
community are anomalous, every other flow is normal.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from .errors import UnknownDetectorError, ValidationError
from .ingest import PROTO_TCP, FlowKey

DEFAULT_DETECTORS = ("pca", "gamma", "hough", "kl")
ANOMALOUS, NORMAL = "anomalous", "normal"
ACCEPTED, REJECTED = "accepted", "rejected"

_PREDICATE_FIELDS = ("src_ip", "dst_ip", "src_port", "dst_port", "proto")


@dataclass
class Alarm:
    alarm_id: object
    detector: str
    granularity: str
    keys: list
    score: Optional[float] = None

    def __post_init__(self):
        if self.granularity not in ("flow", "packet"):
            raise ValidationError(f"alarm {self.alarm_id}: bad granularity {self.granularity!r}")
        if not self.keys:
            raise ValidationError(f"alarm {self.alarm_id}: no keys")
        for k in self.keys:
            unknown = set(k) - set(_PREDICATE_FIELDS)
            if unknown:
                raise ValidationError(f"alarm {self.alarm_id}: unknown key fields {sorted(unknown)}")
            if self.granularity == "flow" and not {"src_ip", "dst_ip", "src_port", "dst_port"} <= set(k):
                raise ValidationError(f"alarm {self.alarm_id}: flow keys need a full 5-tuple")


@dataclass
class Community:
    community_id: int
    members: list
    flows: set
    decision: Optional[str] = None
    detectors: set = field(default_factory=set)


@dataclass
class LabeledFlow:
    flow_id: int
    flow_key: FlowKey
    label: str
    community_id: Optional[int] = None


def _alarm_sort_key(alarm_id):
    return (0, alarm_id, "") if isinstance(alarm_id, int) else (1, 0, str(alarm_id))


def _packet_matches(pkt, pred):
    if pred.get("proto", PROTO_TCP) != PROTO_TCP:
        return False
    return all(getattr(pkt, f) == v for f, v in pred.items() if f != "proto")


class FlowIndex:
    """Lookup tables over a flow list used to resolve alarms."""

    def __init__(self, flows):
        self.flows = list(flows)
        self.by_key = defaultdict(list)
        self.by_ip = defaultdict(list)
        for f in self.flows:
            self.by_key[f.key].append(f)
            self.by_ip[f.key.a_ip].append(f)
            if f.key.b_ip != f.key.a_ip:
                self.by_ip[f.key.b_ip].append(f)

    def candidates(self, pred):
        for fld in ("src_ip", "dst_ip"):
            if fld in pred:
                return self.by_ip.get(pred[fld], [])
        return self.flows


def matching_packets(alarm, flows):
    """``(flow_id, packet_position)`` pairs of packets an alarm describes."""
    index = flows if isinstance(flows, FlowIndex) else FlowIndex(flows)
    hits = set()
    for pred in alarm.keys:
        if alarm.granularity == "flow":
            key = FlowKey.of(pred["src_ip"], pred["src_port"], pred["dst_ip"],
                             pred["dst_port"], pred.get("proto", PROTO_TCP))
            for f in index.by_key.get(key, []):
                hits.update((f.flow_id, i) for i in range(f.n_packets))
            continue
        for f in index.candidates(pred):
            hits.update((f.flow_id, i) for i, p in enumerate(f.packets) if _packet_matches(p, pred))
    return hits


def resolve_alarm_flows(alarm, flows):
    """Flow keys of the traffic an alarm describes; empty when nothing matches."""
    index = flows if isinstance(flows, FlowIndex) else FlowIndex(flows)
    keys = set()
    for pred in alarm.keys:
        if alarm.granularity == "flow":
            key = FlowKey.of(pred["src_ip"], pred["src_port"], pred["dst_ip"],
                             pred["dst_port"], pred.get("proto", PROTO_TCP))
            if key in index.by_key:
                keys.add(key)
            continue
        for f in index.candidates(pred):
            if any(_packet_matches(p, pred) for p in f.packets):
                keys.add(f.key)
    return keys


@dataclass
class SimilarityGraph:
    alarm_ids: list
    flowsets: list
    edges: set

    def neighbours(self):
        adj = [set() for _ in self.alarm_ids]
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj


def build_similarity_graph(flowsets, alarm_ids=None):
    """Undirected graph over alarms; nodes ``a < b`` are linked iff their flow sets meet."""
    flowsets = [set(s) for s in flowsets]
    alarm_ids = list(range(len(flowsets))) if alarm_ids is None else list(alarm_ids)
    holders = defaultdict(list)
    for node, fs in enumerate(flowsets):
        for key in fs:
            holders[key].append(node)
    edges = set()
    for nodes in holders.values():
        for i, a in enumerate(nodes):
            for b in nodes[i + 1:]:
                edges.add((a, b))
    return SimilarityGraph(alarm_ids, flowsets, edges)


def find_communities(graph):
    """Connected components, ordered by their smallest member alarm id."""
    parent = list(range(len(graph.alarm_ids)))

    def root(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in sorted(graph.edges):
        ra, rb = root(a), root(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = defaultdict(list)
    for node in range(len(parent)):
        groups[root(node)].append(node)
    comps = sorted(groups.values(),
                   key=lambda nodes: min(_alarm_sort_key(graph.alarm_ids[n]) for n in nodes))
    out = []
    for cid, nodes in enumerate(comps):
        members = sorted((graph.alarm_ids[n] for n in nodes), key=_alarm_sort_key)
        flows = set().union(*(graph.flowsets[n] for n in nodes))
        out.append(Community(cid, members, flows))
    return out


def required_votes(threshold, total_detectors):
    if not 0 < threshold <= 1:
        raise ValidationError(f"threshold must lie in (0, 1], got {threshold}")
    if total_detectors < 1:
        raise ValidationError("total_detectors must be >= 1")
    # round() absorbs binary noise such as 0.3 * 10 = 3.0000000000000004
    return math.ceil(round(threshold * total_detectors, 9))


def decide_and_label(communities, votes, flows, total_detectors=len(DEFAULT_DETECTORS),
                     threshold=0.5, known_detectors=DEFAULT_DETECTORS):
    """Accept or reject each community and label every flow.

    ``votes`` maps alarm id to detector name.  A community is accepted when
    its members come from at least ``ceil(threshold * total_detectors)``
    distinct detectors.  Flows covered by any accepted community are
    anomalous (the lowest accepted community id is recorded); all other
    flows are normal, carrying the id of a rejected community covering
    them, if any.
    """
    need = required_votes(threshold, total_detectors)
    if known_detectors is not None:
        known = set(known_detectors)
        for alarm_id, det in votes.items():
            if det not in known:
                raise UnknownDetectorError(f"alarm {alarm_id}: unknown detector {det!r}")
    accepted_by, rejected_by = {}, {}
    for c in communities:
        c.detectors = {votes[a] for a in c.members}
        c.decision = ACCEPTED if len(c.detectors) >= need else REJECTED
        target = accepted_by if c.decision == ACCEPTED else rejected_by
        for key in c.flows:
            target.setdefault(key, c.community_id)
    out = []
    for f in flows:
        if f.key in accepted_by:
            out.append(LabeledFlow(f.flow_id, f.key, ANOMALOUS, accepted_by[f.key]))
        else:
            out.append(LabeledFlow(f.flow_id, f.key, NORMAL, rejected_by.get(f.key)))
    return out


def label_flows(flows, alarms, total_detectors=len(DEFAULT_DETECTORS), threshold=0.5,
                known_detectors=DEFAULT_DETECTORS):
    """Full labelling pass; returns ``(labels, communities)``."""
    index = FlowIndex(flows)
    flowsets = [resolve_alarm_flows(a, index) for a in alarms]
    graph = build_similarity_graph(flowsets, [a.alarm_id for a in alarms])
    communities = find_communities(graph)
    votes = {a.alarm_id: a.detector for a in alarms}
    labels = decide_and_label(communities, votes, flows, total_detectors, threshold,
                              known_detectors)
    return labels, communities


def read_alarms(path):
    alarms = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                alarms.append(Alarm(rec["id"], rec["detector"], rec["granularity"],
                                    [dict(k) for k in rec["keys"]], rec.get("score")))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad alarm record ({exc})") from None
    ids = [a.alarm_id for a in alarms]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate alarm ids")
    return alarms


def write_alarms(path, alarms):
    with open(path, "w") as fh:
        for a in alarms:
            rec = {"id": a.alarm_id, "detector": a.detector, "granularity": a.granularity,
                   "keys": a.keys, "score": a.score}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_labels_csv(path, labels):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["flow_id", "label", "community_id"])
        for lab in labels:
            out.writerow([lab.flow_id, lab.label,
                          "" if lab.community_id is None else lab.community_id])


def read_labels_csv(path):
    """Mapping flow_id -> label string."""
    with open(path, newline="") as fh:
        return {int(r["flow_id"]): r["label"] for r in csv.DictReader(fh)}
