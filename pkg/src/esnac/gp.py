"""Gaussian process over learned embeddings and kernel training.

The covariance between two architectures is a squared-exponential kernel on
their embedder outputs, k(a, b) = exp(-||h(a) - h(b)||^2 / (2 sigma^2)), so
the kernel is learned by training the embedder weights.  The posterior uses
a constant prior mean equal to the empirical mean of the conditioning
rewards and a Cholesky factorization of K + (noise_var + jitter) I, with
jitter escalated by factors of 10 up to 1e-4 before giving up.

Three training objectives are available: the mean negative log predictive
density of each point left out (the default), the negative log marginal
likelihood, and a plain Euclidean regression from embeddings to rewards
through a small affine head.  All gradients are exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .archgraph import ArchGraph
from .embedder import (EmbedderParams, backward_from_cache, embed,
                       embed_with_cache)
from .encode import SequenceEncoding

OBJECTIVES = ("loo_posterior", "marginal_likelihood", "euclidean")
_MAX_JITTER = 1e-4


class NumericalFailureError(RuntimeError):
    """Factorization failed even after jitter escalation."""


class NonFiniteLossError(RuntimeError):
    """A training objective evaluated to a non-finite value."""


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 1.0
    noise_var: float = 1e-4
    jitter: float = 1e-8

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        if not 0 < self.jitter <= _MAX_JITTER:
            raise ValueError(f"jitter must lie in (0, {_MAX_JITTER}]")


@dataclass(frozen=True)
class Posterior:
    mean: float
    variance: float

    def __post_init__(self) -> None:
        if self.variance < 0:
            raise ValueError("posterior variance must be >= 0")


@dataclass(eq=False)
class EvalRecord:
    """One evaluated architecture with its reward."""

    arch: ArchGraph
    encoding: SequenceEncoding
    accuracy: float
    params: int
    reward: float
    record_id: str | None = None
    mode: str | None = None
    seed: int | None = None
    timestamp: float | None = None
    failed: bool = False

    def key(self) -> bytes:
        return self.encoding.canonical_bytes()


@dataclass(eq=False)
class EvalSet:
    """Deduplicated collection of evaluated architectures.

    Record order is insertion order; subsets preserve it.  Duplicates are
    detected by the canonical encoding bytes.
    """

    teacher: ArchGraph | None = None
    teacher_accuracy: float | None = None
    n_max: int | None = None
    records: list[EvalRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        keys = set()
        for rec in self.records:
            if rec.key() in keys:
                raise ValueError("duplicate architecture in EvalSet")
            keys.add(rec.key())
        self._keys = keys

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EvalRecord]:
        return iter(self.records)

    def contains_key(self, key: bytes) -> bool:
        return key in self._keys

    def keys(self) -> set[bytes]:
        return set(self._keys)

    def add(self, rec: EvalRecord) -> bool:
        """Append a record unless its architecture is already present."""
        if rec.key() in self._keys:
            return False
        self.records.append(rec)
        self._keys.add(rec.key())
        return True

    def rewards(self) -> np.ndarray:
        return np.array([rec.reward for rec in self.records], dtype=np.float64)

    def subset_by_mask(self, mask: Sequence[bool]) -> "EvalSet":
        if len(mask) != len(self.records):
            raise ValueError("mask length must match record count")
        picked = [rec for rec, keep in zip(self.records, mask) if keep]
        return EvalSet(self.teacher, self.teacher_accuracy, self.n_max, picked)


def kernel(params: EmbedderParams, cfg: KernelConfig, a: SequenceEncoding,
           b: SequenceEncoding) -> float:
    """Squared-exponential kernel value between two encoded architectures."""
    ha = embed(params, a).values
    hb = embed(params, b).values
    d2 = float(np.sum((ha - hb) ** 2))
    return float(np.exp(-d2 / (2.0 * cfg.sigma ** 2)))


def _gram(h_mat: np.ndarray, sigma: float) -> np.ndarray:
    sq = np.sum(h_mat * h_mat, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (h_mat @ h_mat.T)
    np.clip(d2, 0.0, None, out=d2)
    gram = np.exp(-d2 / (2.0 * sigma ** 2))
    np.fill_diagonal(gram, 1.0)
    return gram


def _factor(gram: np.ndarray, cfg: KernelConfig):
    """Cholesky of gram + (noise_var + jitter) I with jitter escalation."""
    n = gram.shape[0]
    jitter = cfg.jitter
    while jitter <= _MAX_JITTER:
        ridge = cfg.noise_var + jitter
        try:
            mat = gram + ridge * np.eye(n)
            return cho_factor(mat, lower=True), ridge
        except LinAlgError:
            jitter *= 10.0
    raise NumericalFailureError(
        f"factorization failed for {n} points even at jitter {_MAX_JITTER}")


class PosteriorModel:
    """Posterior conditioned on one evaluated set, factorized once.

    Prediction over many candidates reuses the cached embeddings and
    Cholesky factor, which is what the acquisition maximizer needs.
    """

    def __init__(self, params: EmbedderParams, cfg: KernelConfig, train: EvalSet):
        self.params = params
        self.cfg = cfg
        self.size = len(train)
        if self.size == 0:
            return
        self._h = np.stack([embed(params, rec.encoding).values for rec in train])
        y = train.rewards()
        self.mean_offset = float(y.mean())
        gram = _gram(self._h, cfg.sigma)
        self._cho, self._ridge = _factor(gram, cfg)
        self._alpha = cho_solve(self._cho, y - self.mean_offset)

    def _posterior_from_embedding(self, h: np.ndarray) -> Posterior:
        diff = self._h - h[None, :]
        d2 = np.sum(diff * diff, axis=1)
        k_star = np.exp(-d2 / (2.0 * self.cfg.sigma ** 2))
        mean = self.mean_offset + float(k_star @ self._alpha)
        var = 1.0 - float(k_star @ cho_solve(self._cho, k_star))
        return Posterior(mean, max(0.0, var))

    def predict(self, query: SequenceEncoding) -> Posterior:
        if self.size == 0:
            return Posterior(0.0, 1.0)
        return self._posterior_from_embedding(embed(self.params, query).values)

    def predict_many(self, queries: Sequence[SequenceEncoding]) -> list[Posterior]:
        if self.size == 0:
            return [Posterior(0.0, 1.0) for _ in queries]
        return [self.predict(q) for q in queries]


def posterior(params: EmbedderParams, cfg: KernelConfig, train: EvalSet,
              query: SequenceEncoding) -> Posterior:
    """GP posterior mean and variance at one query architecture."""
    return PosteriorModel(params, cfg, train).predict(query)


def _loo_terms(q_inv: np.ndarray, y: np.ndarray):
    """Leave-one-out predictive means and variances from the inverse of
    A = K + ridge I, with the prior mean of each fold equal to the
    empirical mean of the remaining rewards."""
    n = y.size
    q_diag = np.diag(q_inv)
    alpha = q_inv @ y
    beta = q_inv.sum(axis=1)
    fold_means = (y.sum() - y) / (n - 1)
    rho = alpha - fold_means * beta
    mu = y - rho / q_diag
    var = 1.0 / q_diag
    return mu, var, rho, q_diag, fold_means


def loo_loss(params: EmbedderParams, cfg: KernelConfig, train: EvalSet) -> float:
    """Mean negative log leave-one-out predictive density of the rewards.

    Computed from a single factorization; each fold's predictive density is
    that of the observation, so its variance includes the noise and jitter
    ridge.  Matches per-point refits exactly.
    """
    n = len(train)
    if n < 2:
        raise ValueError("leave-one-out needs at least two records")
    h_mat = np.stack([embed(params, rec.encoding).values for rec in train])
    y = train.rewards()
    cho, _ = _factor(_gram(h_mat, cfg.sigma), cfg)
    q_inv = cho_solve(cho, np.eye(n))
    mu, var, _, _, _ = _loo_terms(q_inv, y)
    dens = 0.5 * np.log(2.0 * np.pi * var) + (y - mu) ** 2 / (2.0 * var)
    return float(dens.mean())


@dataclass(eq=False)
class RegressionHead:
    """Affine map from embeddings to rewards for the euclidean objective."""

    weights: np.ndarray
    bias: float = 0.0

    def copy(self) -> "RegressionHead":
        return RegressionHead(self.weights.copy(), self.bias)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "RegressionHead":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:-1].copy(), float(vec[-1]))

    @classmethod
    def zeros(cls, hidden_size: int) -> "RegressionHead":
        return cls(np.zeros(2 * hidden_size), 0.0)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "loo_posterior"
    learning_rate: float = 1e-3
    epochs: int = 200
    rng_seed: int = 0
    regression_head: RegressionHead | None = None

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def loss_and_grad(params: EmbedderParams, cfg: KernelConfig, tcfg: TrainConfig,
                  train: EvalSet, head: RegressionHead | None = None):
    """Objective value and exact gradients.

    Returns (loss, embedder gradient, head gradient); the head gradient is
    None except for the euclidean objective.  Raises NonFiniteLossError
    instead of ever returning a non-finite loss.
    """
    n = len(train)
    if n < 2:
        raise ValueError("training objectives need at least two records")
    y = train.rewards()
    pairs = [embed_with_cache(params, rec.encoding) for rec in train]
    h_mat = np.stack([vec for vec, _ in pairs])
    head_grad = None

    if tcfg.objective == "euclidean":
        head = head or tcfg.regression_head
        if head is None:
            raise ValueError("euclidean objective needs a regression head")
        resid = h_mat @ head.weights + head.bias - y
        loss = float(np.mean(resid ** 2))
        d_h = np.outer(2.0 * resid / n, head.weights)
        head_grad = RegressionHead(2.0 / n * (h_mat.T @ resid),
                                   float(2.0 / n * resid.sum()))
    else:
        gram = _gram(h_mat, cfg.sigma)
        cho, _ = _factor(gram, cfg)
        q_inv = cho_solve(cho, np.eye(n))
        if tcfg.objective == "loo_posterior":
            mu, var, rho, q_diag, fold_means = _loo_terms(q_inv, y)
            dens = 0.5 * np.log(2.0 * np.pi * var) + (y - mu) ** 2 / (2.0 * var)
            loss = float(dens.mean())
            # Adjoint of the loss through rho and diag(Q), then through Q.
            d_rho = rho / (n * q_diag)
            d_qd = (-0.5 / q_diag - 0.5 * rho ** 2 / q_diag ** 2) / n
            m_bar = (np.outer(d_rho, y) - np.outer(fold_means * d_rho, np.ones(n))
                     + np.diag(d_qd))
            a_bar = -q_inv @ m_bar @ q_inv
        else:  # marginal_likelihood
            centered = y - y.mean()
            alpha = cho_solve(cho, centered)
            log_det = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
            loss = float(0.5 * centered @ alpha + 0.5 * log_det
                         + 0.5 * n * math.log(2.0 * math.pi))
            a_bar = 0.5 * (q_inv - np.outer(alpha, alpha))
        w = (a_bar + a_bar.T) * gram
        np.fill_diagonal(w, 0.0)
        d_h = (w @ h_mat - w.sum(axis=1)[:, None] * h_mat) / cfg.sigma ** 2

    if not math.isfinite(loss):
        raise NonFiniteLossError(
            f"{tcfg.objective} evaluated to {loss} on {n} records")

    grads = EmbedderParams.zeros(params.hidden_size, params.input_size)
    for i, (_, ctx) in enumerate(pairs):
        g = backward_from_cache(params, ctx, d_h[i])
        for cell, acc in ((g.forward_cell, grads.forward_cell),
                          (g.backward_cell, grads.backward_cell)):
            acc.w_x += cell.w_x
            acc.w_h += cell.w_h
            acc.b += cell.b
    return loss, grads, head_grad


def train_kernel(init: EmbedderParams, cfg: KernelConfig, tcfg: TrainConfig,
                 train: EvalSet) -> EmbedderParams:
    """Full-batch adaptive-moment training of the embedder weights.

    Tracks the best post-step objective value and returns those weights.
    A non-finite loss restores the last finite iterate, halves the learning
    rate, and retries, at most three times; a fourth failure propagates.
    """
    if len(train) < 2:
        raise ValueError("train_kernel needs at least two records")
    hidden, width = init.hidden_size, init.input_size
    use_head = tcfg.objective == "euclidean"
    head = (tcfg.regression_head.copy() if tcfg.regression_head is not None
            else RegressionHead.zeros(hidden)) if use_head else None

    def pack(p: EmbedderParams, hd: RegressionHead | None) -> np.ndarray:
        vec = p.to_vector()
        return np.concatenate([vec, hd.to_vector()]) if hd is not None else vec

    def unpack(vec: np.ndarray):
        if use_head:
            split = init.num_params()
            return (EmbedderParams.from_vector(vec[:split], hidden, width),
                    RegressionHead.from_vector(vec[split:]))
        return EmbedderParams.from_vector(vec, hidden, width), None

    def evaluate(vec: np.ndarray):
        p, hd = unpack(vec)
        loss, g_p, g_h = loss_and_grad(p, cfg, tcfg, train, head=hd)
        grad = g_p.to_vector()
        if g_h is not None:
            grad = np.concatenate([grad, g_h.to_vector()])
        return loss, grad

    theta = pack(init.copy(), head)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = tcfg.learning_rate
    halvings = 0
    adam_t = 0
    steps_done = 0
    last_finite = theta.copy()
    best_loss = math.inf
    best_vec: np.ndarray | None = None

    while steps_done < tcfg.epochs:
        try:
            loss, grad = evaluate(theta)
        except NonFiniteLossError:
            if halvings >= 3:
                raise
            halvings += 1
            lr *= 0.5
            theta = last_finite.copy()
            m[:] = 0.0
            v[:] = 0.0
            adam_t = 0
            continue
        if steps_done >= 1 and loss < best_loss:
            best_loss = loss
            best_vec = theta.copy()
        last_finite = theta.copy()
        adam_t += 1
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** adam_t)
        v_hat = v / (1.0 - beta2 ** adam_t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        steps_done += 1

    try:
        final_loss, _ = evaluate(theta)
        if final_loss < best_loss:
            best_loss = final_loss
            best_vec = theta.copy()
    except NonFiniteLossError:
        pass
    if best_vec is None:
        best_vec = theta
    result, _ = unpack(best_vec)
    return result
