"""Expected improvement and its maximization over the compression space.

The default maximizer scores a pool of freshly sampled candidates under one
posterior and picks the best expected improvement, breaking exact ties by
smaller parameter count and then sampling order.  An elitist evolutionary
maximizer is available as an alternative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Collection

import numpy as np
from scipy.stats import norm

from .archgraph import (ArchGraph, InvalidPlanError, MutationPlan, SamplePolicy,
                        apply_mutation, param_count, removable_nodes,
                        sample_compressed, shrink_groups, _skip_candidates)
from .encode import AttributeScaling, SequenceEncoding, encode
from .gp import EvalSet, Posterior, PosteriorModel

MAXIMIZERS = ("random_sampling", "evolutionary")


class EmptyCandidateSetError(RuntimeError):
    """Every generated candidate was already evaluated."""


@dataclass(frozen=True)
class AcquisitionConfig:
    num_candidates: int = 500
    maximizer: str = "random_sampling"
    ea_population: int = 50
    ea_generations: int = 10
    ea_mutation_rate: float = 0.3
    policy: SamplePolicy = field(default_factory=SamplePolicy)

    def __post_init__(self) -> None:
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.maximizer not in MAXIMIZERS:
            raise ValueError(f"maximizer must be one of {MAXIMIZERS}")
        if self.ea_population < 2:
            raise ValueError("ea_population must be >= 2")
        if self.ea_generations < 1:
            raise ValueError("ea_generations must be >= 1")
        if not 0.0 < self.ea_mutation_rate < 1.0:
            raise ValueError("ea_mutation_rate must lie in (0, 1)")


def expected_improvement(p: Posterior, best_so_far: float) -> float:
    """Closed-form EI of a Gaussian belief against the incumbent."""
    gap = p.mean - best_so_far
    if p.variance <= 0.0:
        return max(0.0, gap)
    s = math.sqrt(p.variance)
    z = gap / s
    return max(0.0, gap * float(norm.cdf(z)) + s * float(norm.pdf(z)))


def _argmax(scored: list[tuple[float, int, int]]) -> int:
    """Index of the best (ei, params, order) triple: highest EI, ties to
    smaller parameter count, then earlier order."""
    best = None
    best_idx = -1
    for ei, params, order in scored:
        key = (ei, -params, -order)
        if best is None or key > best:
            best = key
            best_idx = order
    return best_idx


def _maximize_random(cfg: AcquisitionConfig, model: PosteriorModel,
                     teacher: ArchGraph, scaling: AttributeScaling, n_max: int,
                     banned: set[bytes], best_so_far: float,
                     rng: np.random.Generator) -> ArchGraph:
    seeds = rng.integers(0, 2 ** 63 - 1, size=cfg.num_candidates)
    graphs: list[ArchGraph] = []
    encodings: list[SequenceEncoding] = []
    seen: set[bytes] = set()
    for seed in seeds:
        g = sample_compressed(teacher, int(seed), cfg.policy)
        enc = encode(g, n_max, scaling)
        key = enc.canonical_bytes()
        if key in banned or key in seen:
            continue
        seen.add(key)
        graphs.append(g)
        encodings.append(enc)
    if not graphs:
        raise EmptyCandidateSetError(
            f"all {cfg.num_candidates} sampled candidates were already evaluated")
    posts = model.predict_many(encodings)
    scored = [(expected_improvement(p, best_so_far), param_count(g), i)
              for i, (p, g) in enumerate(zip(posts, graphs))]
    return graphs[_argmax(scored)]


def _mutate_once(g: ArchGraph, rng: np.random.Generator,
                 policy: SamplePolicy, rate: float) -> ArchGraph:
    """One random mutation-plan delta applied to g; clones when nothing is
    applicable."""
    for _ in range(4):
        removable = sorted(removable_nodes(g))
        groups = sorted(shrink_groups(g))
        pairs = _skip_candidates(g)
        available = [name for name, ok in (("remove", bool(removable)),
                                           ("shrink", bool(groups)),
                                           ("skip", bool(pairs))) if ok]
        if not available:
            return g
        chosen = [name for name in available if rng.random() < rate]
        if not chosen:
            chosen = [available[int(rng.integers(len(available)))]]
        removals: set[int] = set()
        ratios: dict[tuple[int, int], float] = {}
        skips: set[tuple[int, int]] = set()
        if "remove" in chosen:
            removals.add(removable[int(rng.integers(len(removable)))])
        if "shrink" in chosen:
            key = groups[int(rng.integers(len(groups)))]
            ratios[key] = float(rng.choice(policy.shrink_ratio_choices))
        if "skip" in chosen:
            a, b = pairs[int(rng.integers(len(pairs)))]
            if a not in removals and b not in removals:
                skips.add((a, b))
        try:
            return apply_mutation(g, MutationPlan(frozenset(removals), ratios,
                                                  frozenset(skips)))
        except InvalidPlanError:
            continue
    return g


def _maximize_evolutionary(cfg: AcquisitionConfig, model: PosteriorModel,
                           teacher: ArchGraph, scaling: AttributeScaling,
                           n_max: int, banned: set[bytes], best_so_far: float,
                           rng: np.random.Generator) -> ArchGraph:
    def score(g: ArchGraph) -> tuple[float, int, bytes]:
        enc = encode(g, n_max, scaling)
        ei = expected_improvement(model.predict(enc), best_so_far)
        return ei, param_count(g), enc.canonical_bytes()

    population = []
    for seed in rng.integers(0, 2 ** 63 - 1, size=cfg.ea_population):
        g = sample_compressed(teacher, int(seed), cfg.policy)
        population.append((g, *score(g)))
    for _ in range(cfg.ea_generations):
        population.sort(key=lambda item: (-item[1], item[2]))
        elites = population[:max(1, len(population) // 2)]
        children = []
        while len(elites) + len(children) < cfg.ea_population:
            parent = elites[int(rng.integers(len(elites)))][0]
            child = _mutate_once(parent, rng, cfg.policy, cfg.ea_mutation_rate)
            children.append((child, *score(child)))
        population = elites + children
    population.sort(key=lambda item: (-item[1], item[2]))
    for g, _, _, key in population:
        if key not in banned:
            return g
    raise EmptyCandidateSetError("entire final population was already evaluated")


def maximize(cfg: AcquisitionConfig, model: PosteriorModel, teacher: ArchGraph,
             eval_set: EvalSet, best_so_far: float, rng_seed: int,
             extra_exclude: Collection[bytes] = ()) -> ArchGraph:
    """Architecture maximizing EI under the model's posterior.

    Candidates whose canonical encoding appears in eval_set (or in
    extra_exclude) are skipped; raises EmptyCandidateSetError when nothing
    remains.  Deterministic per rng_seed.
    """
    if eval_set.n_max is None or eval_set.teacher is None:
        raise ValueError("eval_set must carry its teacher and n_max")
    scaling = AttributeScaling.for_teacher(eval_set.teacher)
    banned = eval_set.keys() | set(extra_exclude)
    rng = np.random.default_rng(rng_seed)
    if cfg.maximizer == "random_sampling":
        return _maximize_random(cfg, model, teacher, scaling, eval_set.n_max,
                                banned, best_so_far, rng)
    return _maximize_evolutionary(cfg, model, teacher, scaling, eval_set.n_max,
                                  banned, best_so_far, rng)
