"""Fixed-width per-layer vector encoding of architecture graphs.

Each layer becomes one vector: a one-hot layer-type block, six scaled
attributes (kernel size, stride, padding, group, in channels, out channels),
then two n_max-length 0/1 blocks marking incoming and outgoing edge offsets.
An edge (i, j) sets position j - i in node i's outgoing block and in node
j's incoming block.  Spatial sizes are intentionally not encoded; decoding
recomputes them from a given input spatial size.
"""
from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .archgraph import (ArchGraph, InvalidGraphError, LayerNode, LAYER_TYPES,
                        NUM_LAYER_TYPES, expected_out_spatial)

ATTR_NAMES = ("kernel_size", "stride", "padding", "group", "in_channels", "out_channels")
ATTR_COUNT = len(ATTR_NAMES)


class TooManyLayersError(ValueError):
    """Graph has more nodes than the configured maximum sequence length."""


class OffsetOverflowError(ValueError):
    """An edge offset exceeds the block length n_max."""


class InconsistentEncodingError(ValueError):
    """A sequence encoding does not describe a well-formed graph."""


def encoding_width(n_max: int) -> int:
    return NUM_LAYER_TYPES + ATTR_COUNT + 2 * n_max


@dataclass(frozen=True)
class AttributeScaling:
    """Divisors that bring the six attributes into [0, 1]-ish range.

    Channel counts are divided by the teacher's maximum channel count,
    geometric attributes (kernel/stride/padding/group) by a fixed 16.
    """

    channel_scale: float
    geometry_scale: float = 16.0

    def __post_init__(self) -> None:
        if self.channel_scale <= 0 or self.geometry_scale <= 0:
            raise ValueError("scaling divisors must be positive")

    @classmethod
    def for_teacher(cls, teacher: ArchGraph) -> "AttributeScaling":
        top = max(max(nd.in_channels, nd.out_channels) for nd in teacher.nodes)
        return cls(channel_scale=float(top))


@dataclass(eq=False)
class LayerEncoding:
    values: np.ndarray


@dataclass(eq=False)
class SequenceEncoding:
    """Per-layer vectors for one graph, stored as an (n, width) matrix."""

    values: np.ndarray
    n_max: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("sequence encoding must be a 2-d array")
        n, width = self.values.shape
        if n < 1 or n > self.n_max:
            raise ValueError(f"sequence length {n} outside 1..{self.n_max}")
        if width != encoding_width(self.n_max):
            raise ValueError(
                f"row width {width} != {encoding_width(self.n_max)} for n_max {self.n_max}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def layers(self) -> list[LayerEncoding]:
        return [LayerEncoding(row) for row in self.values]

    def canonical_bytes(self) -> bytes:
        """Stable dedup key for the encoded architecture."""
        return self.values.shape[0].to_bytes(4, "little") + self.values.tobytes()


def encode(g: ArchGraph, n_max: int, scaling: AttributeScaling) -> SequenceEncoding:
    """Encode a graph as its per-layer vector sequence.

    Raises TooManyLayersError when the graph exceeds n_max nodes and
    OffsetOverflowError when an edge spans more than n_max positions.
    """
    n = len(g.nodes)
    if n > n_max:
        raise TooManyLayersError(f"{n} layers exceed the limit {n_max}")
    base_in = NUM_LAYER_TYPES + ATTR_COUNT
    base_out = base_in + n_max
    mat = np.zeros((n, encoding_width(n_max)), dtype=np.float64)
    for nd in g.nodes:
        row = mat[nd.id]
        row[LAYER_TYPES.index(nd.layer_type)] = 1.0
        row[NUM_LAYER_TYPES + 0] = nd.kernel_size / scaling.geometry_scale
        row[NUM_LAYER_TYPES + 1] = nd.stride / scaling.geometry_scale
        row[NUM_LAYER_TYPES + 2] = nd.padding / scaling.geometry_scale
        row[NUM_LAYER_TYPES + 3] = nd.group / scaling.geometry_scale
        row[NUM_LAYER_TYPES + 4] = nd.in_channels / scaling.channel_scale
        row[NUM_LAYER_TYPES + 5] = nd.out_channels / scaling.channel_scale
    for a, b in g.edges:
        offset = b - a
        if offset > n_max:
            raise OffsetOverflowError(f"edge ({a}, {b}) offset {offset} exceeds {n_max}")
        mat[a, base_out + offset - 1] = 1.0
        mat[b, base_in + offset - 1] = 1.0
    return SequenceEncoding(mat, n_max)


def _bits(block: np.ndarray, what: str) -> list[int]:
    offsets = []
    for pos, value in enumerate(block):
        if abs(value) <= 1e-9:
            continue
        if abs(value - 1.0) > 1e-6:
            raise InconsistentEncodingError(f"{what} entry {value} is not 0/1")
        offsets.append(pos + 1)
    return offsets


def decode(s: SequenceEncoding, scaling: AttributeScaling,
           input_spatial: int) -> ArchGraph:
    """Rebuild the graph a sequence encodes.

    Spatial sizes are recomputed by propagation from input_spatial since the
    encoding does not carry them.  Raises InconsistentEncodingError when the
    one-hot block is malformed, the incoming and outgoing edge blocks
    disagree, or the rows do not describe a valid graph.
    """
    mat = s.values
    n = mat.shape[0]
    base_in = NUM_LAYER_TYPES + ATTR_COUNT
    base_out = base_in + s.n_max

    incoming: set[tuple[int, int]] = set()
    outgoing: set[tuple[int, int]] = set()
    raw: list[dict] = []
    for i in range(n):
        row = mat[i]
        hot = [t for t in range(NUM_LAYER_TYPES) if abs(row[t]) > 1e-9]
        if len(hot) != 1 or abs(row[hot[0]] - 1.0) > 1e-6:
            raise InconsistentEncodingError(f"row {i}: malformed layer-type block")
        geom = [int(round(row[NUM_LAYER_TYPES + k] * scaling.geometry_scale))
                for k in range(4)]
        chans = [int(round(row[NUM_LAYER_TYPES + 4 + k] * scaling.channel_scale))
                 for k in range(2)]
        raw.append({
            "layer_type": LAYER_TYPES[hot[0]],
            "kernel_size": geom[0], "stride": geom[1],
            "padding": geom[2], "group": geom[3],
            "in_channels": chans[0], "out_channels": chans[1],
        })
        for off in _bits(row[base_in:base_in + s.n_max], f"row {i} incoming"):
            if i - off < 0:
                raise InconsistentEncodingError(f"row {i}: incoming offset {off} before start")
            incoming.add((i - off, i))
        for off in _bits(row[base_out:base_out + s.n_max], f"row {i} outgoing"):
            if i + off >= n:
                raise InconsistentEncodingError(f"row {i}: outgoing offset {off} past end")
            outgoing.add((i, i + off))
    if incoming != outgoing:
        raise InconsistentEncodingError(
            f"incoming and outgoing blocks disagree: "
            f"{sorted(incoming ^ outgoing)} unmatched")

    preds: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in outgoing:
        preds[b].append(a)
    spatial_in = [0] * n
    spatial_out = [0] * n
    nodes = []
    try:
        for i in range(n):
            if preds[i]:
                candidates = {spatial_out[p] for p in preds[i]}
                if len(candidates) != 1:
                    raise InconsistentEncodingError(
                        f"row {i}: producer spatial sizes disagree {sorted(candidates)}")
                spatial_in[i] = candidates.pop()
            else:
                spatial_in[i] = input_spatial
            spatial_out[i] = expected_out_spatial(
                raw[i]["layer_type"], spatial_in[i], raw[i]["kernel_size"],
                raw[i]["stride"], raw[i]["padding"])
            nodes.append(LayerNode(id=i, in_spatial=spatial_in[i],
                                   out_spatial=spatial_out[i], **raw[i]))
        return ArchGraph(tuple(nodes), frozenset(outgoing))
    except InvalidGraphError as exc:
        raise InconsistentEncodingError(f"decoded rows are not a valid graph: {exc}") from exc


def to_csv(s: SequenceEncoding) -> str:
    """Render the encoding as CSV, one row per layer."""
    header = [f"type_{t}" for t in LAYER_TYPES]
    header += list(ATTR_NAMES)
    header += [f"in_off_{d}" for d in range(1, s.n_max + 1)]
    header += [f"out_off_{d}" for d in range(1, s.n_max + 1)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in s.values:
        writer.writerow([format(v, ".12g") for v in row])
    return buf.getvalue()
