"""Terminal-sample rewards and the std-normalized multi-metric combiner.

Three analytic scores stand in for audio metrics:

* ``loglik``     -- clean-distribution log-density (no reference needed),
* ``similarity`` -- cosine similarity of frozen random-projection features,
* ``fidelity``   -- negative mean squared error to the clean reference.

They deliberately pull in different directions: the fidelity optimum is the
posterior mean, which sits off the clean manifold.
"""
from __future__ import annotations

import logging
import math
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .tasks import TaskSpec, clean_log_density

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
BUILTIN = ("loglik", "similarity", "fidelity")


def reward_target_loglik(x, task: TaskSpec):
    return clean_log_density(task, x)


def make_projection(dim: int, n_features: int = 8, seed: int = 0) -> np.ndarray:
    """Frozen Gaussian projection (n_features, dim) used by the similarity score."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    return rng.standard_normal((n_features, dim)) / math.sqrt(n_features)


def reward_reference_similarity(x, x1, projection: np.ndarray):
    """Cosine similarity of projected features, row-wise for batches."""
    x, x1 = np.asarray(x, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    fx, f1 = np.atleast_2d(x) @ projection.T, np.atleast_2d(x1) @ projection.T
    nx, n1 = np.linalg.norm(fx, axis=1), np.linalg.norm(f1, axis=1)
    if np.any(nx == 0) or np.any(n1 == 0):
        raise ValueError("similarity is undefined for zero-norm inputs")
    out = np.clip(np.sum(fx * f1, axis=1) / (nx * n1), -1.0, 1.0)
    return float(out[0]) if x.ndim == 1 else out


def reward_fidelity(x, x1):
    x, x1 = np.asarray(x, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x.shape != x1.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x1.shape}")
    out = -np.mean((np.atleast_2d(x) - np.atleast_2d(x1)) ** 2, axis=1)
    return float(out[0]) if x.ndim == 1 else out


@dataclass
class RewardSpec:
    name: str
    kind: str = "builtin"  # "builtin" | "external"
    weight: float = 1.0
    std: float | None = None
    command: tuple[str, ...] = ()
    timeout: float = 30.0

    def __post_init__(self):
        if not math.isfinite(self.weight):
            raise ValueError("reward weight must be finite")
        if self.kind == "builtin" and self.name not in BUILTIN:
            raise ValueError(f"unknown builtin reward '{self.name}'")
        if self.kind == "external" and not self.command:
            raise ValueError("external reward needs a command")


def estimate_std(name: str, scores) -> float:
    """Population std of calibration scores, floored at 1e-8."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size < 2:
        raise ValueError(f"need at least 2 scores to estimate std of '{name}'")
    sd = float(np.std(scores))
    if sd < STD_FLOOR:
        log.warning("reward '%s' is constant over the calibration set; using std floor", name)
        return STD_FLOOR
    return sd


def combine_multi(specs: Sequence[RewardSpec], raw: Mapping[str, np.ndarray]):
    """sum_i weight_i * raw_i / std_i."""
    total = 0.0
    for spec in specs:
        if spec.std is None:
            raise ValueError(f"reward '{spec.name}' has no estimated std")
        if spec.name not in raw:
            raise KeyError(f"missing score for reward '{spec.name}'")
        total = total + spec.weight * np.asarray(raw[spec.name], dtype=np.float64) / spec.std
    return total


@dataclass
class ScoredSample:
    x: np.ndarray
    c: np.ndarray
    x1: np.ndarray
    components: dict[str, np.ndarray]
    combined: np.ndarray


@dataclass
class RewardModel:
    """Scores terminal samples with every known metric and combines the active ones.

    ``active`` specs form the training reward; all builtin metrics are always
    reported so non-optimized ones can expose reward hacking.
    """

    task: TaskSpec
    active: list[RewardSpec]
    projection: np.ndarray
    extra: dict[str, Callable] = field(default_factory=dict)

    def component_names(self) -> list[str]:
        names = list(BUILTIN)
        for spec in self.active:
            if spec.name not in names:
                names.append(spec.name)
        return names

    def raw_scores(self, x, c, x1) -> dict[str, np.ndarray]:
        x = np.atleast_2d(x)
        x1 = np.atleast_2d(x1)
        out = {
            "loglik": np.atleast_1d(reward_target_loglik(x, self.task)),
            "similarity": np.atleast_1d(reward_reference_similarity(x, x1, self.projection)),
            "fidelity": np.atleast_1d(reward_fidelity(x, x1)),
        }
        for spec in self.active:
            if spec.kind == "external":
                out[spec.name] = external_score(spec.command, x, timeout=spec.timeout)
        for name, fn in self.extra.items():
            out[name] = np.asarray(fn(x, c, x1), dtype=np.float64)
        for name, v in out.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"reward '{name}' produced non-finite scores")
        return out

    def combine(self, raw: Mapping[str, np.ndarray]) -> np.ndarray:
        if len(self.active) == 1 and self.active[0].std is None:
            spec = self.active[0]
            return spec.weight * np.asarray(raw[spec.name])
        return np.asarray(combine_multi(self.active, raw))

    def __call__(self, x, c, x1) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raw = self.raw_scores(x, c, x1)
        return self.combine(raw), raw

    def score(self, x, c, x1) -> ScoredSample:
        combined, raw = self(x, c, x1)
        return ScoredSample(np.atleast_2d(x), np.atleast_2d(c), np.atleast_2d(x1), raw, combined)

    def calibrate(self, x, c, x1) -> "RewardModel":
        """Return a copy whose active specs carry stds estimated on these samples."""
        raw = self.raw_scores(x, c, x1)
        specs = [replace(s, std=estimate_std(s.name, raw[s.name])) for s in self.active]
        return RewardModel(self.task, specs, self.projection, dict(self.extra))


# ------------------------------------------------------- external scorers


class ExternalScorerError(RuntimeError):
    """Spawn failure, timeout or malformed/mismatched scorer output."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def write_request(path: Path, samples: np.ndarray, ids: Sequence[str]) -> None:
    lines = []
    for sid, row in zip(ids, samples):
        vals = ",".join(repr(float(v)) for v in row)
        lines.append(f"{sid}\t{len(row)}\t{vals}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_request(path) -> list[tuple[str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, dim, vals = line.split("\t")
            arr = np.array([float(v) for v in vals.split(",")], dtype=np.float64)
            if arr.size != int(dim):
                raise ValueError(f"sample {sid}: declared dim {dim}, got {arr.size}")
            out.append((sid, arr))
    return out


def read_response(path: Path, ids: Sequence[str]) -> np.ndarray:
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ExternalScorerError("SCORER_MALFORMED", f"line {n}: expected 'id<TAB>score'")
            try:
                scores[parts[0]] = float(parts[1])
            except ValueError:
                raise ExternalScorerError("SCORER_MALFORMED", f"line {n}: bad score {parts[1]!r}") from None
    missing = [i for i in ids if i not in scores]
    if missing or len(scores) != len(ids):
        raise ExternalScorerError(
            "SCORER_MISMATCH", f"expected {len(ids)} scores, got {len(scores)} (missing: {missing[:5]})"
        )
    return np.array([scores[i] for i in ids], dtype=np.float64)


def external_score(command: Sequence[str], samples, timeout: float = 30.0) -> np.ndarray:
    """Score samples with an external program over the text exchange files.

    ``command`` is an argv list; the tokens ``{request}`` and ``{response}``
    are replaced with the exchange file paths.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    ids = [f"s{i}" for i in range(samples.shape[0])]
    with tempfile.TemporaryDirectory(prefix="flowgrpo-score-") as tmp:
        req, resp = Path(tmp) / "request.tsv", Path(tmp) / "response.tsv"
        write_request(req, samples, ids)
        argv = [a.replace("{request}", str(req)).replace("{response}", str(resp)) for a in command]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=timeout, text=True)
        except FileNotFoundError as exc:
            raise ExternalScorerError("SCORER_SPAWN", str(exc)) from None
        except subprocess.TimeoutExpired:
            raise ExternalScorerError("SCORER_TIMEOUT", f"no result within {timeout}s") from None
        if proc.returncode != 0:
            raise ExternalScorerError("SCORER_FAILED", f"exit {proc.returncode}: {proc.stderr.strip()[:200]}")
        if not resp.exists():
            raise ExternalScorerError("SCORER_MALFORMED", "scorer wrote no response file")
        return read_response(resp, ids)


def stub_command(mode: str, *extra: str) -> tuple[str, ...]:
    """argv for the bundled stub scorer (see ``flowgrpo.stub_scorer``)."""
    return (sys.executable, "-m", "flowgrpo.stub_scorer", mode, "{request}", "{response}", *extra)


__all__ = [
    "ExternalScorerError",
    "RewardModel",
    "RewardSpec",
    "ScoredSample",
    "combine_multi",
    "estimate_std",
    "external_score",
    "make_projection",
    "read_request",
    "reward_fidelity",
    "reward_reference_similarity",
    "reward_target_loglik",
    "stub_command",
]
