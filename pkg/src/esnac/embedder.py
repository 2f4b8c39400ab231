"""Bidirectional recurrent embedder for layer-vector sequences.

Two independent LSTM cells read the sequence left-to-right and
right-to-left; the per-step hidden states are concatenated, mean-pooled
over steps, and L2-normalized to give a unit-norm embedding.  Everything is
float64 numpy with hand-written exact reverse-mode gradients; no framework
autograd is involved.

Gates are stacked in the order input, forget, output, candidate, so each
weight matrix has 4*hidden_size rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .encode import SequenceEncoding

PARAMS_FORMAT = "embedder-params/1"
_DEGENERATE_NORM = 1e-12


class DimensionMismatchError(ValueError):
    """Sequence width does not match the embedder's input size."""


@dataclass(eq=False)
class Embedding:
    """Unit-norm embedding vector (length 2 * hidden_size)."""

    values: np.ndarray


@dataclass(eq=False)
class CellParams:
    w_x: np.ndarray  # (4H, input_size)
    w_h: np.ndarray  # (4H, H)
    b: np.ndarray    # (4H,)

    def copy(self) -> "CellParams":
        return CellParams(self.w_x.copy(), self.w_h.copy(), self.b.copy())


@dataclass(eq=False)
class EmbedderParams:
    """All weights of the bidirectional embedder.

    Instances double as gradient containers: embed_backward returns an
    EmbedderParams whose arrays hold the gradient of each weight.
    """

    forward_cell: CellParams
    backward_cell: CellParams
    hidden_size: int
    input_size: int

    def copy(self) -> "EmbedderParams":
        return EmbedderParams(self.forward_cell.copy(), self.backward_cell.copy(),
                              self.hidden_size, self.input_size)

    def num_params(self) -> int:
        return 2 * 4 * (self.input_size * self.hidden_size
                        + self.hidden_size * self.hidden_size + self.hidden_size)

    def to_vector(self) -> np.ndarray:
        parts = []
        for cell in (self.forward_cell, self.backward_cell):
            parts += [cell.w_x.ravel(), cell.w_h.ravel(), cell.b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec: np.ndarray, hidden_size: int,
                    input_size: int) -> "EmbedderParams":
        vec = np.asarray(vec, dtype=np.float64)
        h, d = hidden_size, input_size
        sizes = [4 * h * d, 4 * h * h, 4 * h] * 2
        if vec.size != sum(sizes):
            raise ValueError(f"vector length {vec.size} != {sum(sizes)}")
        chunks = np.split(vec, np.cumsum(sizes)[:-1])
        cells = []
        for i in range(2):
            w_x = chunks[3 * i].reshape(4 * h, d).copy()
            w_h = chunks[3 * i + 1].reshape(4 * h, h).copy()
            b = chunks[3 * i + 2].copy()
            cells.append(CellParams(w_x, w_h, b))
        return cls(cells[0], cells[1], hidden_size, input_size)

    @classmethod
    def zeros(cls, hidden_size: int, input_size: int) -> "EmbedderParams":
        h, d = hidden_size, input_size
        make = lambda: CellParams(np.zeros((4 * h, d)), np.zeros((4 * h, h)),
                                  np.zeros(4 * h))
        return cls(make(), make(), hidden_size, input_size)


def init_params(rng_seed: int, hidden_size: int, input_size: int) -> EmbedderParams:
    """Uniform init on [-1/sqrt(H), 1/sqrt(H)] with forget-gate biases at 1."""
    if hidden_size < 1 or input_size < 1:
        raise ValueError("hidden_size and input_size must be >= 1")
    rng = np.random.default_rng(rng_seed)
    h, d = hidden_size, input_size
    bound = 1.0 / np.sqrt(h)
    cells = []
    for _ in range(2):
        w_x = rng.uniform(-bound, bound, size=(4 * h, d))
        w_h = rng.uniform(-bound, bound, size=(4 * h, h))
        b = rng.uniform(-bound, bound, size=4 * h)
        b[h:2 * h] = 1.0
        cells.append(CellParams(w_x, w_h, b))
    return EmbedderParams(cells[0], cells[1], hidden_size, input_size)


def _cell_forward(cell: CellParams, xs: np.ndarray):
    """Run one LSTM direction over xs (T, D); zero initial state."""
    steps, _ = xs.shape
    h = cell.b.shape[0] // 4
    hs = np.empty((steps, h))
    cache = {
        "xs": xs,
        "h_prev": np.empty((steps, h)), "c_prev": np.empty((steps, h)),
        "i": np.empty((steps, h)), "f": np.empty((steps, h)),
        "o": np.empty((steps, h)), "g": np.empty((steps, h)),
        "tanh_c": np.empty((steps, h)),
    }
    h_t = np.zeros(h)
    c_t = np.zeros(h)
    for t in range(steps):
        cache["h_prev"][t] = h_t
        cache["c_prev"][t] = c_t
        z = cell.w_x @ xs[t] + cell.w_h @ h_t + cell.b
        i_t = expit(z[:h])
        f_t = expit(z[h:2 * h])
        o_t = expit(z[2 * h:3 * h])
        g_t = np.tanh(z[3 * h:])
        c_t = f_t * c_t + i_t * g_t
        tc = np.tanh(c_t)
        h_t = o_t * tc
        cache["i"][t], cache["f"][t] = i_t, f_t
        cache["o"][t], cache["g"][t] = o_t, g_t
        cache["tanh_c"][t] = tc
        hs[t] = h_t
    return hs, cache


def _cell_backward(cell: CellParams, cache: dict, dhs: np.ndarray) -> CellParams:
    """Backpropagate through one direction; dhs[t] is the upstream gradient
    on the step-t hidden state."""
    xs = cache["xs"]
    steps, h = dhs.shape
    d_wx = np.zeros_like(cell.w_x)
    d_wh = np.zeros_like(cell.w_h)
    d_b = np.zeros_like(cell.b)
    dh_carry = np.zeros(h)
    dc_carry = np.zeros(h)
    for t in range(steps - 1, -1, -1):
        i_t, f_t = cache["i"][t], cache["f"][t]
        o_t, g_t = cache["o"][t], cache["g"][t]
        tc = cache["tanh_c"][t]
        dh = dhs[t] + dh_carry
        do = dh * tc
        dc = dc_carry + dh * o_t * (1.0 - tc * tc)
        di = dc * g_t
        df = dc * cache["c_prev"][t]
        dg = dc * i_t
        dz = np.concatenate([
            di * i_t * (1.0 - i_t),
            df * f_t * (1.0 - f_t),
            do * o_t * (1.0 - o_t),
            dg * (1.0 - g_t * g_t),
        ])
        d_wx += np.outer(dz, xs[t])
        d_wh += np.outer(dz, cache["h_prev"][t])
        d_b += dz
        dh_carry = cell.w_h.T @ dz
        dc_carry = dc * f_t
    return CellParams(d_wx, d_wh, d_b)


def _forward(params: EmbedderParams, mat: np.ndarray):
    hs_f, cache_f = _cell_forward(params.forward_cell, mat)
    hs_b_rev, cache_b = _cell_forward(params.backward_cell, mat[::-1])
    states = np.concatenate([hs_f, hs_b_rev[::-1]], axis=1)
    pooled = states.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm < _DEGENERATE_NORM:
        vec = np.zeros(2 * params.hidden_size)
        vec[0] = 1.0
        degenerate = True
    else:
        vec = pooled / norm
        degenerate = False
    ctx = {"cache_f": cache_f, "cache_b": cache_b, "vec": vec, "norm": norm,
           "degenerate": degenerate, "steps": mat.shape[0]}
    return vec, ctx


def _check_width(params: EmbedderParams, s: SequenceEncoding) -> np.ndarray:
    mat = s.values
    if mat.shape[1] != params.input_size:
        raise DimensionMismatchError(
            f"sequence width {mat.shape[1]} != embedder input size {params.input_size}")
    return mat


def embed(params: EmbedderParams, s: SequenceEncoding) -> Embedding:
    """Embed one sequence; deterministic for identical inputs and weights."""
    vec, _ = _forward(params, _check_width(params, s))
    return Embedding(vec)


def embed_with_cache(params: EmbedderParams, s: SequenceEncoding):
    """Embedding vector plus the forward cache needed for a later backward
    pass; avoids re-running the forward pass during training."""
    return _forward(params, _check_width(params, s))


def backward_from_cache(params: EmbedderParams, ctx: dict,
                        grad_out: np.ndarray) -> EmbedderParams:
    h = params.hidden_size
    if ctx["degenerate"]:
        return EmbedderParams.zeros(params.hidden_size, params.input_size)
    vec, norm, steps = ctx["vec"], ctx["norm"], ctx["steps"]
    grad_out = np.asarray(grad_out, dtype=np.float64)
    dv = (grad_out - vec * float(vec @ grad_out)) / norm
    dhs_f = np.tile(dv[:h] / steps, (steps, 1))
    dhs_b = np.tile(dv[h:] / steps, (steps, 1))
    g_f = _cell_backward(params.forward_cell, ctx["cache_f"], dhs_f)
    g_b = _cell_backward(params.backward_cell, ctx["cache_b"], dhs_b[::-1])
    return EmbedderParams(g_f, g_b, params.hidden_size, params.input_size)


def embed_backward(params: EmbedderParams, s: SequenceEncoding,
                   grad_out: np.ndarray) -> EmbedderParams:
    """Gradient of <embed(params, s), grad_out> w.r.t. every weight.

    Returns an EmbedderParams-shaped container holding the gradients.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (2 * params.hidden_size,):
        raise DimensionMismatchError(
            f"grad_out shape {grad_out.shape} != ({2 * params.hidden_size},)")
    _, ctx = _forward(params, _check_width(params, s))
    return backward_from_cache(params, ctx, grad_out)


def save_params(params: EmbedderParams, path: str | Path) -> None:
    """Versioned binary file with a shape header and row-major payloads."""
    # write through a handle so the name is used verbatim (no .npz appending)
    with open(Path(path), "wb") as fh:
        np.savez(
            fh,
            version=np.array(PARAMS_FORMAT),
            hidden_size=np.array(params.hidden_size),
            input_size=np.array(params.input_size),
            fwd_w_x=params.forward_cell.w_x, fwd_w_h=params.forward_cell.w_h,
            fwd_b=params.forward_cell.b,
            bwd_w_x=params.backward_cell.w_x, bwd_w_h=params.backward_cell.w_h,
            bwd_b=params.backward_cell.b,
        )


def load_params(path: str | Path) -> EmbedderParams:
    with np.load(Path(path), allow_pickle=False) as data:
        version = str(data["version"])
        if version != PARAMS_FORMAT:
            raise ValueError(f"unsupported params file version {version!r}")
        hidden = int(data["hidden_size"])
        width = int(data["input_size"])
        fwd = CellParams(data["fwd_w_x"].astype(np.float64),
                         data["fwd_w_h"].astype(np.float64),
                         data["fwd_b"].astype(np.float64))
        bwd = CellParams(data["bwd_w_x"].astype(np.float64),
                         data["bwd_w_h"].astype(np.float64),
                         data["bwd_b"].astype(np.float64))
    params = EmbedderParams(fwd, bwd, hidden, width)
    expect = {(4 * hidden, width), (4 * hidden, hidden), (4 * hidden,)}
    got = {fwd.w_x.shape, fwd.w_h.shape, fwd.b.shape,
           bwd.w_x.shape, bwd.w_h.shape, bwd.b.shape}
    if got != expect:
        raise ValueError(f"weight shapes {got} disagree with header {expect}")
    return params
