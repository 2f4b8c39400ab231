"""Typed layer DAGs, the compression operators, and search-space sampling.

An architecture is an immutable directed acyclic graph of layer nodes whose
node order is topological (every edge points from a smaller id to a larger
one).  Compression is expressed as a :class:`MutationPlan` combining three
operators: node removal, channel shrinkage, and skip-edge addition.  All
operators are pure functions; sampling is fully determined by its seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

DOCUMENT_FORMAT = "archgraph/1"

LAYER_TYPES = (
    "conv",
    "conv_dw",
    "batch_norm",
    "relu",
    "max_pool",
    "avg_pool",
    "fc",
    "global_avg_pool",
)
NUM_LAYER_TYPES = len(LAYER_TYPES)

# Which of the six attributes are meaningful per layer type.  Channel counts
# are interface dimensions and therefore meaningful for every type.
_WINDOWED = frozenset({"conv", "conv_dw", "max_pool", "avg_pool"})
_GROUPED = frozenset({"conv", "conv_dw"})
# Types whose out_channels is a free parameter (filters / units); every other
# type passes its input width through unchanged.
_CHANNEL_SETTERS = frozenset({"conv", "conv_dw", "fc"})


class InvalidGraphError(ValueError):
    """A graph violates a structural or dimensional invariant."""


class InvalidPlanError(ValueError):
    """A mutation plan is not applicable to the graph it targets."""


@dataclass(frozen=True)
class LayerNode:
    """One layer of an architecture.

    Attributes that carry no meaning for the layer type are exactly 0; see
    the per-type validation rules in :func:`_check_node`.
    """

    id: int
    layer_type: str
    kernel_size: int = 0
    stride: int = 0
    padding: int = 0
    group: int = 0
    in_channels: int = 0
    out_channels: int = 0
    in_spatial: int = 0
    out_spatial: int = 0

    def input_dim(self) -> tuple[int, int]:
        return (self.in_channels, self.in_spatial)

    def output_dim(self) -> tuple[int, int]:
        return (self.out_channels, self.out_spatial)


def expected_out_spatial(layer_type: str, in_spatial: int, kernel_size: int,
                         stride: int, padding: int) -> int:
    """Spatial size produced by a layer given its input spatial size."""
    if layer_type in _WINDOWED:
        span = in_spatial + 2 * padding - kernel_size
        if span < 0 or stride < 1:
            raise InvalidGraphError(
                f"window ({kernel_size}, stride {stride}, padding {padding}) "
                f"does not fit spatial size {in_spatial}")
        return span // stride + 1
    if layer_type == "global_avg_pool":
        return 1
    return in_spatial


def _check_node(nd: LayerNode) -> None:
    if nd.layer_type not in LAYER_TYPES:
        raise InvalidGraphError(f"node {nd.id}: unknown layer type {nd.layer_type!r}")
    for name in ("kernel_size", "stride", "padding", "group", "in_channels",
                 "out_channels", "in_spatial", "out_spatial"):
        value = getattr(nd, name)
        if not isinstance(value, int) or value < 0:
            raise InvalidGraphError(f"node {nd.id}: {name} must be a non-negative int")
    if nd.in_channels < 1 or nd.out_channels < 1:
        raise InvalidGraphError(f"node {nd.id}: channel counts must be >= 1")
    if nd.in_spatial < 1 or nd.out_spatial < 1:
        raise InvalidGraphError(f"node {nd.id}: spatial sizes must be >= 1")

    if nd.layer_type in _WINDOWED:
        if nd.kernel_size < 1 or nd.stride < 1:
            raise InvalidGraphError(f"node {nd.id}: windowed layer needs kernel and stride >= 1")
    else:
        if nd.kernel_size != 0 or nd.stride != 0 or nd.padding != 0:
            raise InvalidGraphError(
                f"node {nd.id}: kernel/stride/padding are meaningless for "
                f"{nd.layer_type} and must be 0")

    if nd.layer_type in _GROUPED:
        if nd.group < 1:
            raise InvalidGraphError(f"node {nd.id}: convolution group must be >= 1")
        if nd.in_channels % nd.group or nd.out_channels % nd.group:
            raise InvalidGraphError(
                f"node {nd.id}: group {nd.group} must divide channels "
                f"{nd.in_channels}->{nd.out_channels}")
    elif nd.group != 0:
        raise InvalidGraphError(f"node {nd.id}: group is meaningless for {nd.layer_type}")

    if nd.layer_type not in _CHANNEL_SETTERS and nd.out_channels != nd.in_channels:
        raise InvalidGraphError(
            f"node {nd.id}: {nd.layer_type} preserves channels "
            f"({nd.in_channels} != {nd.out_channels})")
    if nd.layer_type == "fc" and nd.in_spatial != 1:
        raise InvalidGraphError(f"node {nd.id}: fc expects spatial size 1")

    want = expected_out_spatial(nd.layer_type, nd.in_spatial, nd.kernel_size,
                                nd.stride, nd.padding)
    if nd.out_spatial != want:
        raise InvalidGraphError(
            f"node {nd.id}: out_spatial {nd.out_spatial} inconsistent with "
            f"{nd.layer_type} on spatial {nd.in_spatial} (expected {want})")


@dataclass(frozen=True)
class ArchGraph:
    """A validated architecture DAG.

    Nodes are numbered 0..n-1 in topological order, every edge (i, j) has
    i < j with matching dimensions, and there is exactly one source and one
    sink.  Construction validates; instances are immutable.
    """

    nodes: tuple[LayerNode, ...]
    edges: frozenset[tuple[int, int]]
    teacher_ref: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges",
                           frozenset((int(a), int(b)) for a, b in self.edges))
        _check_graph(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def predecessors(self) -> dict[int, tuple[int, ...]]:
        preds: dict[int, list[int]] = {v: [] for v in range(len(self.nodes))}
        for a, b in self.edges:
            preds[b].append(a)
        return {v: tuple(sorted(ps)) for v, ps in preds.items()}

    def successors(self) -> dict[int, tuple[int, ...]]:
        succs: dict[int, list[int]] = {v: [] for v in range(len(self.nodes))}
        for a, b in self.edges:
            succs[a].append(b)
        return {v: tuple(sorted(ss)) for v, ss in succs.items()}

    def to_document(self) -> dict:
        return {
            "format": DOCUMENT_FORMAT,
            "teacher_ref": self.teacher_ref,
            "nodes": [{f.name: getattr(nd, f.name) for f in fields(LayerNode)}
                      for nd in self.nodes],
            "edges": sorted([a, b] for a, b in self.edges),
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "ArchGraph":
        if not isinstance(doc, Mapping):
            raise InvalidGraphError("architecture document must be an object")
        if doc.get("format") != DOCUMENT_FORMAT:
            raise InvalidGraphError(
                f"unsupported architecture format {doc.get('format')!r}")
        try:
            nodes = tuple(LayerNode(**{str(k): v for k, v in nd.items()})
                          for nd in doc["nodes"])
            edges = frozenset((int(a), int(b)) for a, b in doc["edges"])
        except (KeyError, TypeError) as exc:
            raise InvalidGraphError(f"malformed architecture document: {exc}") from exc
        return cls(nodes, edges, doc.get("teacher_ref"))

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=True)


def _check_graph(g: ArchGraph) -> None:
    n = len(g.nodes)
    if n < 1:
        raise InvalidGraphError("graph needs at least one node")
    for pos, nd in enumerate(g.nodes):
        if nd.id != pos:
            raise InvalidGraphError(f"node ids must be 0..{n - 1} in order")
        _check_node(nd)
    indeg = [0] * n
    outdeg = [0] * n
    for a, b in g.edges:
        if not (0 <= a < b < n):
            raise InvalidGraphError(f"edge ({a}, {b}) must satisfy 0 <= src < dst < {n}")
        if g.nodes[a].output_dim() != g.nodes[b].input_dim():
            raise InvalidGraphError(
                f"edge ({a}, {b}): output {g.nodes[a].output_dim()} does not "
                f"match input {g.nodes[b].input_dim()}")
        outdeg[a] += 1
        indeg[b] += 1
    sources = [v for v in range(n) if indeg[v] == 0]
    sinks = [v for v in range(n) if outdeg[v] == 0]
    if sources != [0] or sinks != [n - 1]:
        raise InvalidGraphError(
            f"graph must have exactly one source (node 0) and one sink "
            f"(node {n - 1}); found sources {sources}, sinks {sinks}")


def save_graph(g: ArchGraph, path: str | Path) -> None:
    Path(path).write_text(g.to_json() + "\n")


def load_graph(path: str | Path) -> ArchGraph:
    return ArchGraph.from_document(json.loads(Path(path).read_text()))


def param_count(g: ArchGraph) -> int:
    """Total learnable parameter count (weights plus biases)."""
    total = 0
    for nd in g.nodes:
        if nd.layer_type in ("conv", "conv_dw"):
            total += nd.kernel_size ** 2 * (nd.in_channels // nd.group) * nd.out_channels
            total += nd.out_channels
        elif nd.layer_type == "fc":
            total += nd.in_channels * nd.out_channels + nd.out_channels
        elif nd.layer_type == "batch_norm":
            total += 2 * nd.out_channels
    return total


def removable_nodes(g: ArchGraph) -> frozenset[int]:
    """Ids of non-source, non-sink nodes whose input and output dimensions
    agree, so removing one and reconnecting its neighbours stays valid."""
    last = len(g.nodes) - 1
    return frozenset(nd.id for nd in g.nodes
                     if 0 < nd.id < last and nd.input_dim() == nd.output_dim())


def shrink_groups(g: ArchGraph) -> dict[tuple[int, int], tuple[int, ...]]:
    """Partition of the channel-setting nodes keyed by (in_channels,
    out_channels); nodes share a group iff the pair is identical."""
    groups: dict[tuple[int, int], list[int]] = {}
    for nd in g.nodes:
        if nd.layer_type in _CHANNEL_SETTERS:
            groups.setdefault((nd.in_channels, nd.out_channels), []).append(nd.id)
    return {key: tuple(sorted(ids)) for key, ids in groups.items()}


@dataclass(frozen=True)
class MutationPlan:
    """A compression step: removals, per-group shrink ratios, added skips.

    All node ids refer to the graph the plan targets.  Shrink ratios are
    keyed by the (in_channels, out_channels) group key.
    """

    removals: frozenset[int] = frozenset()
    shrink_ratios: Mapping[tuple[int, int], float] = field(default_factory=dict)
    added_skips: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "removals", frozenset(int(v) for v in self.removals))
        object.__setattr__(self, "shrink_ratios",
                           {(int(a), int(b)): float(r)
                            for (a, b), r in dict(self.shrink_ratios).items()})
        object.__setattr__(self, "added_skips",
                           frozenset((int(a), int(b)) for a, b in self.added_skips))

    def is_identity(self) -> bool:
        return (not self.removals and not self.added_skips
                and all(r == 1.0 for r in self.shrink_ratios.values()))


def validate_plan(g: ArchGraph, plan: MutationPlan) -> None:
    """Raise InvalidPlanError unless the plan is applicable to g."""
    removable = removable_nodes(g)
    bad = plan.removals - removable
    if bad:
        raise InvalidPlanError(f"nodes {sorted(bad)} are not removable")
    groups = shrink_groups(g)
    for key, ratio in plan.shrink_ratios.items():
        if key not in groups:
            raise InvalidPlanError(f"no shrink group with dimensions {key}")
        if not 0.0 < ratio <= 1.0:
            raise InvalidPlanError(f"shrink ratio {ratio} for {key} outside (0, 1]")
    n = len(g.nodes)
    for a, b in plan.added_skips:
        if not (0 <= a < b < n):
            raise InvalidPlanError(f"skip ({a}, {b}) is not a forward pair")
        if a in plan.removals or b in plan.removals:
            raise InvalidPlanError(f"skip ({a}, {b}) touches a removed node")
        if (a, b) in g.edges:
            raise InvalidPlanError(f"skip ({a}, {b}) already exists")
        # Dimension compatibility is checked after shrinkage, where it binds.


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_mutation(g: ArchGraph, plan: MutationPlan) -> ArchGraph:
    """Apply removals, then shrinkage, then skip additions.

    Removal splices every predecessor of a removed node to every successor
    (duplicate edges collapse).  Shrinkage rescales the out_channels of each
    planned group member and propagates widths to consumers in topological
    order; a plan whose ratios break an edge's agreement raises
    InvalidPlanError.  The result is a freshly validated ArchGraph.
    """
    validate_plan(g, plan)
    n = len(g.nodes)

    preds = {v: set(ps) for v, ps in g.predecessors().items()}
    succs = {v: set(ss) for v, ss in g.successors().items()}
    for r in sorted(plan.removals):
        ps, ss = preds.pop(r), succs.pop(r)
        for p in ps:
            succs[p].discard(r)
            succs[p].update(ss)
        for s in ss:
            preds[s].discard(r)
            preds[s].update(ps)

    survivors = [v for v in range(n) if v not in plan.removals]
    new_id = {v: i for i, v in enumerate(survivors)}

    # Mutable per-node attributes, still keyed by the original ids.
    attrs = {v: {f.name: getattr(g.nodes[v], f.name) for f in fields(LayerNode)}
             for v in survivors}

    # Shrink targets are matched on the original dimensions.
    targets = {}
    for v in survivors:
        nd = g.nodes[v]
        if nd.layer_type in _CHANNEL_SETTERS:
            ratio = plan.shrink_ratios.get((nd.in_channels, nd.out_channels))
            if ratio is not None:
                targets[v] = max(1, _round_half_up(nd.out_channels * ratio))

    for v in survivors:
        a = attrs[v]
        if preds[v]:
            widths = {attrs[p]["out_channels"] for p in preds[v]}
            if len(widths) != 1:
                raise InvalidPlanError(
                    f"shrinkage breaks agreement at node {v}: producer widths "
                    f"{sorted(widths)}")
            a["in_channels"] = widths.pop()
        if g.nodes[v].layer_type in _CHANNEL_SETTERS:
            a["out_channels"] = targets.get(v, a["out_channels"])
        else:
            a["out_channels"] = a["in_channels"]
        if g.nodes[v].layer_type in _GROUPED:
            a["group"] = max(1, math.gcd(math.gcd(a["in_channels"], a["out_channels"]),
                                         a["group"]))

    new_edges = set()
    for v in survivors:
        for s in succs[v]:
            new_edges.add((new_id[v], new_id[s]))
    for a, b in plan.added_skips:
        src, dst = attrs[a], attrs[b]
        if (src["out_channels"], src["out_spatial"]) != (dst["in_channels"], dst["in_spatial"]):
            raise InvalidPlanError(
                f"skip ({a}, {b}): dimensions {src['out_channels']}x{src['out_spatial']} "
                f"vs {dst['in_channels']}x{dst['in_spatial']} differ in the mutated graph")
        new_edges.add((new_id[a], new_id[b]))

    nodes = []
    for v in survivors:
        a = dict(attrs[v])
        a["id"] = new_id[v]
        nodes.append(LayerNode(**a))
    try:
        return ArchGraph(tuple(nodes), frozenset(new_edges), teacher_ref=g.teacher_ref)
    except InvalidGraphError as exc:
        raise InvalidPlanError(f"plan produces an invalid graph: {exc}") from exc


@dataclass(frozen=True)
class SamplePolicy:
    """Distribution of random compression plans.

    Each removable node is dropped independently with removal_prob, every
    shrink class draws one ratio from shrink_ratio_choices (classes whose
    width is pinned by the graph input, or by the sink when pin_sink is set,
    stay at 1.0), and the number of added skips is drawn uniformly from
    skip_count_choices, capped by the number of valid pairs.
    """

    removal_prob: float = 0.25
    shrink_ratio_choices: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    skip_count_choices: tuple[int, ...] = (0, 1, 2, 3)
    pin_sink: bool = True
    max_retries: int = 16

    def __post_init__(self) -> None:
        if not 0.0 <= self.removal_prob <= 1.0:
            raise ValueError("removal_prob must lie in [0, 1]")
        if not self.shrink_ratio_choices:
            raise ValueError("shrink_ratio_choices must not be empty")
        for r in self.shrink_ratio_choices:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"shrink ratio choice {r} outside (0, 1]")
        if not self.skip_count_choices:
            raise ValueError("skip_count_choices must not be empty")
        for c in self.skip_count_choices:
            if c < 0:
                raise ValueError("skip counts must be >= 0")


_SOURCE_CLASS = -1


def _ratio_classes(g: ArchGraph, pin_sink: bool):
    """Group the shrink groups into classes that must share one ratio.

    Producer widths meeting at any node must stay equal after shrinkage, so
    the originating channel setters of all producers of a node are unioned.
    Classes reachable from the graph input (and the sink's class, when
    pinned) must keep ratio 1.0.
    """
    parent: dict[int, int] = {_SOURCE_CLASS: _SOURCE_CLASS}
    for nd in g.nodes:
        if nd.layer_type in _CHANNEL_SETTERS:
            parent[nd.id] = nd.id

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    preds = g.predecessors()
    origin: dict[int, int] = {}
    for nd in g.nodes:
        ps = preds[nd.id]
        if ps:
            for p in ps[1:]:
                union(origin[ps[0]], origin[p])
            upstream = find(origin[ps[0]])
        else:
            upstream = _SOURCE_CLASS
        origin[nd.id] = nd.id if nd.layer_type in _CHANNEL_SETTERS else upstream

    groups = shrink_groups(g)
    for members in groups.values():
        for m in members[1:]:
            union(members[0], m)
    if pin_sink:
        union(origin[len(g.nodes) - 1], _SOURCE_CLASS)

    classes: dict[int, list[tuple[int, int]]] = {}
    for key, members in groups.items():
        classes.setdefault(find(members[0]), []).append(key)
    pinned = find(_SOURCE_CLASS)
    return classes, pinned


def _skip_candidates(g: ArchGraph) -> list[tuple[int, int]]:
    pairs = []
    for i in range(len(g.nodes)):
        for j in range(i + 1, len(g.nodes)):
            if (i, j) in g.edges:
                continue
            if g.nodes[i].output_dim() == g.nodes[j].input_dim():
                pairs.append((i, j))
    return pairs


def _draw_plan(teacher: ArchGraph, rng: np.random.Generator,
               policy: SamplePolicy) -> MutationPlan:
    removals = frozenset(v for v in sorted(removable_nodes(teacher))
                         if rng.random() < policy.removal_prob)
    trimmed = apply_mutation(teacher, MutationPlan(removals=removals))

    classes, pinned = _ratio_classes(trimmed, policy.pin_sink)
    ratios: dict[tuple[int, int], float] = {}
    for rep in sorted(classes):
        if rep == pinned:
            ratio = 1.0
        else:
            ratio = float(rng.choice(policy.shrink_ratio_choices))
        for key in classes[rep]:
            ratios[key] = ratio
    shrunk = apply_mutation(trimmed, MutationPlan(shrink_ratios=ratios))

    pairs = _skip_candidates(shrunk)
    want = int(rng.choice(policy.skip_count_choices))
    count = min(want, len(pairs))
    skips: set[tuple[int, int]] = set()
    if count:
        chosen = rng.choice(len(pairs), size=count, replace=False)
        survivors = sorted(set(range(len(teacher.nodes))) - removals)
        for idx in sorted(int(i) for i in chosen):
            a, b = pairs[idx]
            skips.add((survivors[a], survivors[b]))
    return MutationPlan(removals=removals, shrink_ratios=ratios,
                        added_skips=frozenset(skips))


def sample_plan(teacher: ArchGraph, rng_seed: int,
                policy: SamplePolicy | None = None) -> MutationPlan:
    """Draw one random compression plan for the teacher, deterministically
    per seed.  Draws that fail to produce a valid graph are retried; after
    max_retries the identity plan is returned."""
    policy = policy or SamplePolicy()
    rng = np.random.default_rng(rng_seed)
    for _ in range(max(1, policy.max_retries)):
        try:
            plan = _draw_plan(teacher, rng, policy)
            apply_mutation(teacher, plan)
            return plan
        except InvalidPlanError:
            continue
    return MutationPlan()


def sample_compressed(teacher: ArchGraph, rng_seed: int,
                      policy: SamplePolicy | None = None) -> ArchGraph:
    """Sample one compressed variant of the teacher (never growing its
    parameter count)."""
    return apply_mutation(teacher, sample_plan(teacher, rng_seed, policy))
