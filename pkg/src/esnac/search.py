"""Multi-kernel Bayesian-optimization search loop and baselines.

Each step proxy-evaluates the pending architectures, then every kernel
independently re-trains from a fresh random initialization on its own
random subset of the evaluated set and proposes the next architecture by
maximizing expected improvement.  After the final step the top finalists
by proxy reward are re-evaluated in full mode.

All randomness flows from the master seed through derive_seed, which hashes
the seed with (step, kernel, purpose) tags into independent streams, so
runs are reproducible and each kernel reads only its own stream.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionConfig, maximize
from .archgraph import ArchGraph, param_count, sample_compressed
from .embedder import EmbedderParams, init_params
from .encode import AttributeScaling, encode, encoding_width
from .evaluator import (BackendMalformedResponseError, BackendReportedFailureError,
                        BackendTimeoutError, EvalLog, EvalRequestMode, Evaluator,
                        SurrogateBackend, SurrogateConfig, load_eval_records)
from .gp import (EvalRecord, EvalSet, KernelConfig, PosteriorModel, TrainConfig,
                 train_kernel)

_BACKEND_ERRORS = (BackendTimeoutError, BackendMalformedResponseError,
                   BackendReportedFailureError)


class ConfigError(ValueError):
    """A configuration field is missing or invalid."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class WidthMismatchError(ValueError):
    """Pretrained kernel weights do not fit the target encoding width."""


def derive_seed(master_seed: int, *tags: int | str) -> int:
    """Independent child seed for (master_seed, tags).

    String tags are folded in through crc32 so call sites stay readable.
    """
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode()))
        else:
            entropy.append(int(tag) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(entropy).generate_state(2, np.uint64)
    return int(state[0] ^ (state[1] << 32)) & 0x7FFFFFFFFFFFFFFF


@dataclass
class SearchConfig:
    steps: int = 10
    kernels: int = 4
    subset_prob: float = 0.5
    teacher: ArchGraph | None = None
    teacher_accuracy: float | None = None
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kernel_cfg: KernelConfig = field(default_factory=KernelConfig)
    backend: str = "surrogate"
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    finalists: int = 4
    master_seed: int = 0
    n_max: int | None = None
    embedder_hidden_size: int = 64
    proxy_epochs: int = 10
    full_epochs: int = 60
    condition_on_full_d: bool = False

    def validate(self) -> None:
        if self.teacher is None:
            raise ConfigError("teacher", "missing required field")
        if self.steps < 1:
            raise ConfigError("steps", "must be >= 1")
        if self.kernels < 1:
            raise ConfigError("kernels", "must be >= 1")
        if not 0.0 <= self.subset_prob <= 1.0:
            raise ConfigError("subset_prob", "must lie in [0, 1]")
        if self.finalists < 1:
            raise ConfigError("finalists", "must be >= 1")
        if self.embedder_hidden_size < 1:
            raise ConfigError("embedder_hidden_size", "must be >= 1")
        if self.proxy_epochs < 1:
            raise ConfigError("proxy_epochs", "must be >= 1")
        if self.full_epochs < 1:
            raise ConfigError("full_epochs", "must be >= 1")
        if self.n_max is not None and self.n_max < len(self.teacher.nodes):
            raise ConfigError("n_max", "smaller than the teacher's node count")
        if isinstance(self.backend, str) and self.backend != "surrogate" \
                and not self.backend.startswith("external:"):
            raise ConfigError("backend", "must be 'surrogate' or 'external:<command>'")

    def resolved_n_max(self) -> int:
        return self.n_max if self.n_max is not None else len(self.teacher.nodes)


@dataclass(eq=False)
class StepEval:
    step: int
    kernel: int
    record: EvalRecord


@dataclass(eq=False)
class SearchTrace:
    steps: list[StepEval]
    eval_set: EvalSet
    finalists: list[EvalRecord]
    best: EvalRecord | None
    final_kernels: list[EmbedderParams] = field(default_factory=list)

    @property
    def proxy_evaluations(self) -> int:
        return len(self.steps)

    def best_proxy_reward(self) -> float:
        rewards = [s.record.reward for s in self.steps]
        return max(rewards) if rewards else float("-inf")


def _make_backend(cfg: SearchConfig):
    if not isinstance(cfg.backend, str):
        return cfg.backend, False
    if cfg.backend == "surrogate":
        return SurrogateBackend(cfg.surrogate, cfg.teacher), True
    from .evaluator import ExternalBackend
    return ExternalBackend(cfg.backend.split(":", 1)[1]), True


def _resolve_teacher_accuracy(cfg: SearchConfig) -> float:
    if cfg.teacher_accuracy is not None:
        return cfg.teacher_accuracy
    if isinstance(cfg.backend, str) and cfg.backend == "surrogate":
        return cfg.surrogate.teacher_accuracy()
    raise ConfigError("teacher_accuracy",
                      "required unless the surrogate backend is used")


def _evaluate_with_retry(evaluator: Evaluator, g: ArchGraph,
                         mode: EvalRequestMode, record_id: str) -> EvalRecord:
    """One retry on backend failure, then a flagged zero-reward record."""
    for attempt in range(2):
        try:
            return evaluator.evaluate(g, mode, record_id=record_id)
        except _BACKEND_ERRORS:
            if attempt == 1:
                return evaluator.failed_record(g, mode, record_id=record_id)
    raise AssertionError("unreachable")


def _distinct_samples(teacher: ArchGraph, count: int, master_seed: int,
                      purpose: str, acq: AcquisitionConfig, n_max: int,
                      scaling: AttributeScaling) -> list[ArchGraph]:
    picked: list[ArchGraph] = []
    seen: set[bytes] = set()
    attempt = 0
    while len(picked) < count and attempt < 50 * count:
        seed = derive_seed(master_seed, purpose, len(picked), attempt)
        g = sample_compressed(teacher, seed, acq.policy)
        key = encode(g, n_max, scaling).canonical_bytes()
        attempt += 1
        if key in seen:
            continue
        seen.add(key)
        picked.append(g)
    if len(picked) < count:
        raise RuntimeError(f"could not sample {count} distinct architectures")
    return picked


def run_search(cfg: SearchConfig, log_path: str | Path | None = None,
               resume_log: str | Path | None = None) -> SearchTrace:
    """Run the multi-kernel loop for cfg.steps steps of cfg.kernels
    evaluations each, then re-evaluate the finalists in full mode.

    With resume_log pointing at an earlier run's log, records already
    evaluated are reused and the run continues from the recorded boundary;
    everything else is recomputed deterministically from the master seed.
    """
    cfg.validate()
    teacher = cfg.teacher
    n_max = cfg.resolved_n_max()
    scaling = AttributeScaling.for_teacher(teacher)
    teacher_accuracy = _resolve_teacher_accuracy(cfg)
    width = encoding_width(n_max)
    backend, owns_backend = _make_backend(cfg)
    proxy = EvalRequestMode("proxy", cfg.proxy_epochs)
    full = EvalRequestMode("full", cfg.full_epochs)

    cached: dict[str, EvalRecord] = {}
    if resume_log is not None and Path(resume_log).exists():
        for rec in load_eval_records(resume_log):
            if rec.record_id:
                cached[rec.record_id] = rec

    evaluator = Evaluator(teacher, teacher_accuracy, backend, n_max, scaling)
    log = None
    if log_path is not None:
        log = EvalLog(log_path, teacher, teacher_accuracy, n_max)

    data = EvalSet(teacher=teacher, teacher_accuracy=teacher_accuracy, n_max=n_max)
    trace_steps: list[StepEval] = []
    final_kernels: list[EmbedderParams] = []

    try:
        pending = _distinct_samples(teacher, cfg.kernels, cfg.master_seed,
                                    "initial-sample", cfg.acquisition, n_max, scaling)
        for step in range(1, cfg.steps + 1):
            for k, g in enumerate(pending):
                record_id = f"{step}:{k}"
                rec = cached.get(record_id)
                fresh = rec is None
                if fresh:
                    rec = _evaluate_with_retry(evaluator, g, proxy, record_id)
                if not data.add(rec):
                    raise RuntimeError(f"duplicate evaluation at {record_id}")
                if log is not None and fresh:
                    log.append(rec)
                trace_steps.append(StepEval(step, k, rec))

            selections: list[ArchGraph] = []
            selected_keys: set[bytes] = set()
            kernels_this_step: list[EmbedderParams] = []
            for k in range(cfg.kernels):
                theta = init_params(derive_seed(cfg.master_seed, "kernel-init", step, k),
                                    cfg.embedder_hidden_size, width)
                mask_rng = np.random.default_rng(
                    derive_seed(cfg.master_seed, "subset", step, k))
                mask = mask_rng.random(len(data)) < cfg.subset_prob
                subset = data.subset_by_mask(mask.tolist())
                if len(subset) >= 2:
                    tcfg = replace(cfg.train,
                                   rng_seed=derive_seed(cfg.master_seed, "train", step, k))
                    theta = train_kernel(theta, cfg.kernel_cfg, tcfg, subset)
                conditioning = data if cfg.condition_on_full_d else subset
                model = PosteriorModel(theta, cfg.kernel_cfg, conditioning)
                rewards = conditioning.rewards()
                incumbent = float(rewards.max()) if rewards.size else 0.0
                choice = maximize(cfg.acquisition, model, teacher, data, incumbent,
                                  derive_seed(cfg.master_seed, "maximize", step, k),
                                  extra_exclude=selected_keys)
                selected_keys.add(encode(choice, n_max, scaling).canonical_bytes())
                selections.append(choice)
                kernels_this_step.append(theta)
            pending = selections
            final_kernels = kernels_this_step

        ranked = sorted(data, key=lambda r: (-r.reward, r.params, r.record_id))
        finalists: list[EvalRecord] = []
        for i, proxy_rec in enumerate(ranked[:cfg.finalists]):
            record_id = f"final:{i}"
            rec = cached.get(record_id)
            fresh = rec is None
            if fresh:
                rec = _evaluate_with_retry(evaluator, proxy_rec.arch, full, record_id)
            if log is not None and fresh:
                log.append(rec)
            finalists.append(rec)
        best = max(finalists, key=lambda r: r.reward, default=None)
    finally:
        if owns_backend:
            backend.close()

    return SearchTrace(trace_steps, data, finalists, best, final_kernels)


def run_random_search(cfg: SearchConfig, budget: int | None = None,
                      log_path: str | Path | None = None) -> SearchTrace:
    """Budget-matched baseline: distinct random samples, proxy-evaluated,
    finalists re-evaluated in full mode."""
    cfg.validate()
    if budget is None:
        budget = cfg.steps * cfg.kernels
    if budget < 1:
        raise ConfigError("budget", "must be >= 1")
    teacher = cfg.teacher
    n_max = cfg.resolved_n_max()
    scaling = AttributeScaling.for_teacher(teacher)
    teacher_accuracy = _resolve_teacher_accuracy(cfg)
    backend, owns_backend = _make_backend(cfg)
    proxy = EvalRequestMode("proxy", cfg.proxy_epochs)
    full = EvalRequestMode("full", cfg.full_epochs)
    evaluator = Evaluator(teacher, teacher_accuracy, backend, n_max, scaling)
    log = None
    if log_path is not None:
        log = EvalLog(log_path, teacher, teacher_accuracy, n_max)

    data = EvalSet(teacher=teacher, teacher_accuracy=teacher_accuracy, n_max=n_max)
    trace_steps: list[StepEval] = []
    try:
        samples = _distinct_samples(teacher, budget, cfg.master_seed,
                                    "random-search", cfg.acquisition, n_max, scaling)
        for i, g in enumerate(samples):
            rec = _evaluate_with_retry(evaluator, g, proxy, f"rs:{i}")
            data.add(rec)
            if log is not None:
                log.append(rec)
            trace_steps.append(StepEval(i + 1, 0, rec))
        ranked = sorted(data, key=lambda r: (-r.reward, r.params, r.record_id))
        finalists = []
        for i, proxy_rec in enumerate(ranked[:cfg.finalists]):
            rec = _evaluate_with_retry(evaluator, proxy_rec.arch, full, f"final:{i}")
            if log is not None:
                log.append(rec)
            finalists.append(rec)
        best = max(finalists, key=lambda r: r.reward, default=None)
    finally:
        if owns_backend:
            backend.close()
    return SearchTrace(trace_steps, data, finalists, best, [])


def run_transfer_search(cfg: SearchConfig, pretrained: list[EmbedderParams],
                        eval_set: EvalSet | None = None,
                        log_path: str | Path | None = None) -> SearchTrace:
    """Reuse kernels trained in another setting: each pretrained kernel
    proposes one architecture by maximizing EI over this teacher's space,
    conditioned on the (possibly empty) target evaluated set, and every
    proposal is evaluated in full mode."""
    cfg.validate()
    if not pretrained:
        raise ConfigError("transfer", "needs at least one pretrained kernel")
    teacher = cfg.teacher
    n_max = cfg.resolved_n_max()
    width = encoding_width(n_max)
    for i, params in enumerate(pretrained):
        if params.input_size != width:
            raise WidthMismatchError(
                f"kernel {i} expects input width {params.input_size}, "
                f"target encoding width is {width}")
    scaling = AttributeScaling.for_teacher(teacher)
    teacher_accuracy = _resolve_teacher_accuracy(cfg)
    backend, owns_backend = _make_backend(cfg)
    full = EvalRequestMode("full", cfg.full_epochs)
    evaluator = Evaluator(teacher, teacher_accuracy, backend, n_max, scaling)
    log = None
    if log_path is not None:
        log = EvalLog(log_path, teacher, teacher_accuracy, n_max)

    data = eval_set if eval_set is not None else EvalSet(
        teacher=teacher, teacher_accuracy=teacher_accuracy, n_max=n_max)
    rewards = data.rewards()
    incumbent = float(rewards.max()) if rewards.size else 0.0

    finalists: list[EvalRecord] = []
    selected: set[bytes] = set()
    try:
        for i, params in enumerate(pretrained):
            model = PosteriorModel(params, cfg.kernel_cfg, data)
            choice = maximize(cfg.acquisition, model, teacher, data, incumbent,
                              derive_seed(cfg.master_seed, "transfer", i),
                              extra_exclude=selected)
            selected.add(encode(choice, n_max, scaling).canonical_bytes())
            rec = _evaluate_with_retry(evaluator, choice, full, f"transfer:{i}")
            data.add(rec)
            if log is not None:
                log.append(rec)
            finalists.append(rec)
        best = max(finalists, key=lambda r: r.reward, default=None)
    finally:
        if owns_backend:
            backend.close()
    return SearchTrace([], data, finalists, best, list(pretrained))
