"""Small reference teacher architectures used by tests, demos, and the CLI."""
from __future__ import annotations

from .archgraph import ArchGraph, LayerNode, expected_out_spatial


class _Builder:
    def __init__(self, in_channels: int, in_spatial: int):
        self.nodes: list[LayerNode] = []
        self.edges: set[tuple[int, int]] = set()
        self._channels = in_channels
        self._spatial = in_spatial

    def add(self, layer_type: str, out_channels: int | None = None, *,
            kernel_size: int = 0, stride: int = 0, padding: int = 0,
            group: int = 0, link: bool = True) -> int:
        """Append a node fed by the previous one (when link is set)."""
        nid = len(self.nodes)
        in_c, in_s = self._channels, self._spatial
        out_c = in_c if out_channels is None else out_channels
        out_s = expected_out_spatial(layer_type, in_s, kernel_size, stride, padding)
        self.nodes.append(LayerNode(
            id=nid, layer_type=layer_type, kernel_size=kernel_size,
            stride=stride, padding=padding, group=group,
            in_channels=in_c, out_channels=out_c,
            in_spatial=in_s, out_spatial=out_s))
        if link and nid > 0:
            self.edges.add((nid - 1, nid))
        self._channels, self._spatial = out_c, out_s
        return nid

    def skip(self, src: int, dst: int) -> None:
        self.edges.add((src, dst))

    def build(self, teacher_ref: str) -> ArchGraph:
        return ArchGraph(tuple(self.nodes), frozenset(self.edges),
                         teacher_ref=teacher_ref)


def chain_teacher(in_channels: int = 3, in_spatial: int = 16,
                  widths: tuple[int, ...] = (16, 32), classes: int = 8) -> ArchGraph:
    """Plain convolutional chain: (conv-bn-relu-pool)* then gap and fc."""
    b = _Builder(in_channels, in_spatial)
    for w in widths:
        b.add("conv", w, kernel_size=3, stride=1, padding=1, group=1)
        b.add("batch_norm")
        b.add("relu")
        b.add("max_pool", kernel_size=2, stride=2)
    b.add("global_avg_pool")
    b.add("fc", classes)
    return b.build(f"chain-{'x'.join(map(str, widths))}")


def residual_teacher(in_channels: int = 3, in_spatial: int = 16,
                     width: int = 16, blocks: int = 1, classes: int = 8) -> ArchGraph:
    """Conv stem plus identity-skip residual blocks, gap, and fc.

    Each block is conv-bn-relu-conv-bn with a skip from the block input to
    the joining relu, which sums its two inputs.
    """
    b = _Builder(in_channels, in_spatial)
    b.add("conv", width, kernel_size=3, stride=1, padding=1, group=1)
    b.add("batch_norm")
    entry = b.add("relu")
    for _ in range(blocks):
        b.add("conv", width, kernel_size=3, stride=1, padding=1, group=1)
        b.add("batch_norm")
        b.add("relu")
        b.add("conv", width, kernel_size=3, stride=1, padding=1, group=1)
        b.add("batch_norm")
        join = b.add("relu")
        b.skip(entry, join)
        entry = join
    b.add("global_avg_pool")
    b.add("fc", classes)
    return b.build(f"residual-w{width}b{blocks}")
