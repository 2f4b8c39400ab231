"""Reward computation, evaluation backends, and the evaluated-set log.

The reward of a student architecture combines its compression against the
teacher with its relative accuracy: with c = 1 - params/teacher_params,
reward = c * (2 - c) * accuracy / teacher_accuracy.

Two backends produce accuracies.  The surrogate is a closed-form function
of three graph features (parameter ratio, fraction of layers retained,
added skips) with seeded Gaussian noise in proxy mode only.  The external
backend drives a child process speaking newline-delimited JSON over
stdin/stdout: requests {"id", "mode", "epochs", "architecture"} and
responses {"id", "status", "accuracy", "message"?}; unknown response fields
are ignored.
"""
from __future__ import annotations

import json
import math
import queue
import shlex
import subprocess
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .archgraph import ArchGraph, param_count
from .encode import AttributeScaling, encode
from .gp import EvalRecord, EvalSet

LOG_FORMAT = "evalset/1"


class BackendTimeoutError(RuntimeError):
    """The external evaluator did not answer within the timeout."""


class BackendMalformedResponseError(RuntimeError):
    """The external evaluator produced an unparsable or invalid response."""


class BackendReportedFailureError(RuntimeError):
    """The external evaluator answered with status "error"."""


class CorruptLogError(ValueError):
    """An evaluated-set log line could not be parsed or checked."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class RewardInputs:
    accuracy: float
    params: int
    teacher_accuracy: float
    teacher_params: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if not 0.0 < self.teacher_accuracy <= 1.0:
            raise ValueError("teacher_accuracy must lie in (0, 1]")
        if self.params < 0 or self.teacher_params < 1:
            raise ValueError("parameter counts must be non-negative (teacher >= 1)")


def compression_ratio(params: int, teacher_params: int) -> float:
    """Fraction of the teacher's parameters that was removed."""
    if teacher_params < 1:
        raise ValueError("teacher_params must be >= 1")
    return 1.0 - params / teacher_params


def reward(r: RewardInputs) -> float:
    """Compression-accuracy tradeoff score; equals 1 for an uncompressed
    student matching the teacher's accuracy."""
    c = compression_ratio(r.params, r.teacher_params)
    return c * (2.0 - c) * r.accuracy / r.teacher_accuracy


@dataclass(frozen=True)
class EvalRequestMode:
    mode: str
    epochs: int

    def __post_init__(self) -> None:
        if self.mode not in ("proxy", "full"):
            raise ValueError("mode must be 'proxy' or 'full'")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class SurrogateConfig:
    """Weights of the closed-form surrogate accuracy.

    Accuracy is base_accuracy * (1 - depth_weight * (1 - kept)^2
    - size_weight * (log ratio - log target)^2 + skip_weight * min(k, 3)/3)
    clamped to [0, teacher accuracy], where kept is the fraction of layers
    retained, ratio the parameter ratio, and k the added skip count.
    """

    rng_seed: int = 0
    noise_sd: float = 0.01
    base_accuracy: float = 0.95
    depth_weight: float = 0.3
    size_weight: float = 0.2
    skip_weight: float = 0.05
    param_ratio_target: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 < self.base_accuracy <= 1.0:
            raise ValueError("base_accuracy must lie in (0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0.0 < self.param_ratio_target <= 1.0:
            raise ValueError("param_ratio_target must lie in (0, 1]")

    def teacher_accuracy(self) -> float:
        return self.base_accuracy * (1.0 - self.size_weight
                                     * math.log(self.param_ratio_target) ** 2)


def _excess_edges(g: ArchGraph) -> int:
    return len(g.edges) - (len(g.nodes) - 1)


def surrogate_features(g: ArchGraph, teacher: ArchGraph):
    """(parameter ratio, fraction of layers retained, added skip count)."""
    t_params = param_count(teacher)
    if t_params < 1:
        raise ValueError("teacher must have parameters")
    ratio = param_count(g) / t_params
    kept = len(g.nodes) / len(teacher.nodes)
    skips = max(0, _excess_edges(g) - _excess_edges(teacher))
    return ratio, kept, skips


def surrogate_accuracy(cfg: SurrogateConfig, g: ArchGraph, teacher: ArchGraph,
                       mode: EvalRequestMode) -> float:
    """Deterministic accuracy with a known optimum in feature space; proxy
    mode adds reproducible Gaussian noise seeded per architecture."""
    ratio, kept, skips = surrogate_features(g, teacher)
    if ratio <= 0.0:
        return 0.0
    score = (1.0
             - cfg.depth_weight * (1.0 - kept) ** 2
             - cfg.size_weight * (math.log(ratio)
                                  - math.log(cfg.param_ratio_target)) ** 2
             + cfg.skip_weight * min(skips, 3) / 3.0)
    acc = cfg.base_accuracy * score
    if mode.mode == "proxy" and cfg.noise_sd > 0:
        tag = zlib.crc32(json.dumps(g.to_document(), sort_keys=True).encode())
        noise_rng = np.random.default_rng((cfg.rng_seed, tag))
        acc += cfg.noise_sd * float(noise_rng.standard_normal())
    return float(min(max(acc, 0.0), cfg.teacher_accuracy()))


class SurrogateBackend:
    """In-process analytic evaluator."""

    def __init__(self, cfg: SurrogateConfig, teacher: ArchGraph):
        self.cfg = cfg
        self.teacher = teacher

    def accuracy(self, g: ArchGraph, mode: EvalRequestMode) -> float:
        return surrogate_accuracy(self.cfg, g, self.teacher, mode)

    def close(self) -> None:
        pass


def _reader(stream: IO[str], out: "queue.Queue[str | None]") -> None:
    for line in stream:
        out.put(line)
    out.put(None)


class ExternalBackend:
    """Child-process evaluator speaking one JSON document per line.

    The process is started lazily and kept alive across requests; responses
    are matched by id, so stale answers from a timed-out request are
    skipped rather than misattributed.
    """

    def __init__(self, command: str | list[str], proxy_timeout: float = 600.0,
                 full_timeout: float = 3600.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("external backend command must not be empty")
        self.proxy_timeout = proxy_timeout
        self.full_timeout = full_timeout
        self._proc: subprocess.Popen | None = None
        self._lines: "queue.Queue[str | None]" = queue.Queue()
        self._counter = 0

    def _ensure_started(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
            self._lines = queue.Queue()
            threading.Thread(target=_reader, args=(self._proc.stdout, self._lines),
                             daemon=True).start()
        return self._proc

    def accuracy(self, g: ArchGraph, mode: EvalRequestMode) -> float:
        proc = self._ensure_started()
        self._counter += 1
        request_id = f"req-{self._counter}"
        label = f"{request_id} ({len(g.nodes)} layers, {param_count(g)} params)"
        payload = json.dumps({"id": request_id, "mode": mode.mode,
                              "epochs": mode.epochs,
                              "architecture": g.to_document()})
        try:
            proc.stdin.write(payload + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._discard_dead()
            raise BackendMalformedResponseError(
                f"evaluator process rejected request {label}: {exc}") from exc
        timeout = self.proxy_timeout if mode.mode == "proxy" else self.full_timeout
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeoutError(f"no response within {timeout}s for {label}")
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                raise BackendTimeoutError(f"no response within {timeout}s for {label}")
            if line is None:
                # The sentinel is consumed here, so the process must not be
                # reused: poll() can still report it alive mid-teardown and a
                # second request would then wait on a forever-empty queue.
                self._discard_dead()
                raise BackendMalformedResponseError(
                    f"evaluator stream ended while waiting for {label}")
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BackendMalformedResponseError(
                    f"unparsable response for {label}: {line!r}") from exc
            if not isinstance(doc, dict) or doc.get("id") != request_id:
                continue  # stale or foreign response
            status = doc.get("status")
            if status == "error":
                raise BackendReportedFailureError(
                    f"evaluator failed on {label}: {doc.get('message', 'no message')}")
            if status != "ok":
                raise BackendMalformedResponseError(
                    f"response for {label} has status {status!r}")
            acc = doc.get("accuracy")
            if not isinstance(acc, (int, float)) or isinstance(acc, bool) \
                    or not math.isfinite(acc) or not 0.0 <= acc <= 1.0:
                raise BackendMalformedResponseError(
                    f"response for {label} has invalid accuracy {acc!r}")
            return float(acc)

    def _discard_dead(self) -> None:
        """Drop a process whose pipes have failed; the next request restarts."""
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.terminate()
                try:
                    self._proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
        self._proc = None

    def __enter__(self) -> "ExternalBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class Evaluator:
    """Turns architectures into EvalRecords against one teacher setting."""

    def __init__(self, teacher: ArchGraph, teacher_accuracy: float, backend,
                 n_max: int, scaling: AttributeScaling | None = None):
        self.teacher = teacher
        self.teacher_accuracy = teacher_accuracy
        self.teacher_params = param_count(teacher)
        self.backend = backend
        self.n_max = n_max
        self.scaling = scaling or AttributeScaling.for_teacher(teacher)

    def evaluate(self, g: ArchGraph, mode: EvalRequestMode,
                 record_id: str | None = None, seed: int | None = None) -> EvalRecord:
        """Evaluate one architecture; backend errors propagate unchanged."""
        acc = self.backend.accuracy(g, mode)
        return self._record(g, acc, mode, record_id, seed, failed=False)

    def failed_record(self, g: ArchGraph, mode: EvalRequestMode,
                      record_id: str | None = None,
                      seed: int | None = None) -> EvalRecord:
        """Zero-reward record for an evaluation that failed after retry."""
        return self._record(g, 0.0, mode, record_id, seed, failed=True)

    def _record(self, g, acc, mode, record_id, seed, failed) -> EvalRecord:
        params = param_count(g)
        rew = reward(RewardInputs(acc, params, self.teacher_accuracy,
                                  self.teacher_params))
        return EvalRecord(
            arch=g, encoding=encode(g, self.n_max, self.scaling), accuracy=acc,
            params=params, reward=rew, record_id=record_id, mode=mode.mode,
            seed=seed, timestamp=time.time(), failed=failed)


class EvalLog:
    """Append-only JSON-lines log of an EvalSet.

    The first line is a version-tagged header carrying the teacher and its
    accuracy so a load can rebuild the exact set.
    """

    def __init__(self, path: str | Path, teacher: ArchGraph,
                 teacher_accuracy: float, n_max: int):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            header = {"format": LOG_FORMAT, "teacher": teacher.to_document(),
                      "teacher_accuracy": teacher_accuracy, "n_max": n_max}
            self.path.write_text(json.dumps(header) + "\n")

    def append(self, rec: EvalRecord) -> None:
        doc = {
            "id": rec.record_id,
            "architecture": rec.arch.to_document(),
            "accuracy": rec.accuracy,
            "params": rec.params,
            "reward": rec.reward,
            "mode": rec.mode,
            "seed": rec.seed,
            "timestamp": rec.timestamp,
            "failed": rec.failed,
        }
        with self.path.open("a") as fh:
            fh.write(json.dumps(doc) + "\n")
            fh.flush()


def _read_log(path: str | Path):
    """Parse and validate a log, returning (empty EvalSet, ordered records).

    Every line is checked: the reward must be re-derivable from the record's
    own fields and the parameter count must match the architecture.
    """
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return EvalSet(), []
    lines = text.splitlines()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptLogError(1, f"unparsable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != LOG_FORMAT:
        raise CorruptLogError(1, f"missing or unsupported header {header!r}")
    try:
        teacher = ArchGraph.from_document(header["teacher"])
        teacher_accuracy = float(header["teacher_accuracy"])
        n_max = int(header["n_max"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptLogError(1, f"unreadable header: {exc}") from exc
    teacher_params = param_count(teacher)
    scaling = AttributeScaling.for_teacher(teacher)
    records: list[EvalRecord] = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            doc = json.loads(line)
            arch = ArchGraph.from_document(doc["architecture"])
            rec = EvalRecord(
                arch=arch, encoding=encode(arch, n_max, scaling),
                accuracy=float(doc["accuracy"]), params=int(doc["params"]),
                reward=float(doc["reward"]), record_id=doc.get("id"),
                mode=doc.get("mode"), seed=doc.get("seed"),
                timestamp=doc.get("timestamp"), failed=bool(doc.get("failed", False)))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise CorruptLogError(number, f"unreadable record: {exc}") from exc
        if rec.params != param_count(arch):
            raise CorruptLogError(number, "parameter count does not match architecture")
        expected = reward(RewardInputs(rec.accuracy, rec.params,
                                       teacher_accuracy, teacher_params))
        if abs(expected - rec.reward) > 1e-9:
            raise CorruptLogError(
                number, f"reward {rec.reward} not re-derivable (expected {expected})")
        records.append(rec)
    out = EvalSet(teacher=teacher, teacher_accuracy=teacher_accuracy, n_max=n_max)
    return out, records


def load_eval_records(path: str | Path) -> list[EvalRecord]:
    """All validated records in log order, including full-mode re-evaluations
    of architectures already present (used for resume and reporting)."""
    return _read_log(path)[1]


def load_eval_set(path: str | Path) -> EvalSet:
    """Rebuild the evaluated set from its log.

    A full-mode line repeating an earlier architecture is a re-evaluation of
    a finalist and is skipped (the set keeps the first record); the same
    architecture twice in the same mode is corruption.  CorruptLogError names
    the first offending line for that and for unparsable lines, a missing
    header, or a reward that cannot be re-derived from the record's fields.
    """
    out, records = _read_log(path)
    first_mode: dict[bytes, str | None] = {}
    for number, rec in enumerate(records, start=2):
        if out.add(rec):
            first_mode[rec.key()] = rec.mode
        elif rec.mode == first_mode.get(rec.key()):
            raise CorruptLogError(number, "duplicate architecture in log")
    return out
