"""Inference rollouts, error metrics, paired t-tests and forgetting matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import DegenerateInputError, MissingArtifactError, MissingHeadError
from .stats import SIGNIFICANCE, paired_ttest
from .trainer import TASKS, EpisodeJob, run_episodes
from .world import EnvironmentSpec, TaskId


@dataclass(frozen=True)
class EvalRecord:
    regime: str
    env: EnvironmentSpec
    task: TaskId
    seed: int
    terminal_error: float


@dataclass(frozen=True)
class SummaryStats:
    n: int
    mean: float
    stddev: float
    adequacy_rate: float
    single: bool = False


def euclidean_error(prediction, target) -> float:
    return float(np.linalg.norm(np.subtract(prediction, target, dtype=float)))


def adequacy(error: float, threshold: float = 15.0) -> bool:
    return error < threshold


def _episode_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0xE7A1])


def evaluate(params, envs: dict, tasks, seeds, cfg: Config, regime: str = "", chunk: int = 512) -> list:
    """EvalRecords for every (environment, task, seed), rolled in lockstep chunks."""
    units = [(spec, TaskId(t), int(s)) for spec in envs for t in tasks for s in seeds]
    for _, t, _ in units:
        if t not in params.heads:
            raise MissingHeadError(f"no head for task {t.name}")
    records = []
    for lo in range(0, len(units), chunk):
        part = units[lo:lo + chunk]
        jobs = [EpisodeJob(*envs[spec], task, _episode_rng(seed)) for spec, task, seed in part]
        results = run_episodes(params, jobs, cfg.eval.epsilon, cfg, training=False, record=False)
        for (spec, task, seed), (_, terminal) in zip(part, results):
            err = euclidean_error(terminal, envs[spec][1][task])
            records.append(EvalRecord(regime, spec, task, seed, err))
    return records


def locate(params, volume, landmarks, task, seed: int, cfg: Config, regime: str = "") -> EvalRecord:
    env = {volume.spec: (volume, landmarks)}
    return evaluate(params, env, [task], [seed], cfg, regime)[0]


def summarize(records, threshold: float = 15.0) -> SummaryStats:
    errs = np.array([r.terminal_error if isinstance(r, EvalRecord) else r for r in records], dtype=float)
    if errs.size == 0:
        raise ValueError("no records to summarize")
    single = errs.size == 1
    std = 0.0 if single else float(np.std(errs, ddof=1))
    return SummaryStats(int(errs.size), float(errs.mean()), std, float(np.mean(errs < threshold)), single)


@dataclass(frozen=True)
class ForgettingMatrix:
    F: np.ndarray  # NaN where environment j was not yet trained at checkpoint i
    backward_transfer: float  # NaN when undefined (single environment)
    bt_defined: bool

    @property
    def forgetting(self) -> np.ndarray:
        """F[last][j] - F[j][j] for every environment but the last."""
        n = self.F.shape[0]
        return np.array([self.F[n - 1, j] - self.F[j, j] for j in range(n - 1)])


def forgetting_matrix(run, envs: dict, tasks=TASKS, n_episodes: int = 10, cfg: Config | None = None,
                      seed0: int | None = None) -> ForgettingMatrix:
    cfg = cfg or Config()
    ckpts = run.env_checkpoints()
    order = list(run.environments)
    if len(ckpts) != len(order):
        raise MissingArtifactError("run lacks one checkpoint per environment")
    base = cfg.eval.seed if seed0 is None else seed0
    seeds = range(base, base + n_episodes)
    n = len(order)
    F = np.full((n, n), np.nan)
    for i, ck in enumerate(ckpts):
        seen = {spec: envs[spec] for spec in order[: i + 1]}
        recs = evaluate(ck.params, seen, tasks, seeds, cfg)
        for j, spec in enumerate(order[: i + 1]):
            F[i, j] = np.mean([r.terminal_error for r in recs if r.env == spec])
    if n < 2:
        return ForgettingMatrix(F, math.nan, False)
    bt = float(np.mean([F[j, j] - F[n - 1, j] for j in range(n - 1)]))
    return ForgettingMatrix(F, bt, True)


__all__ = [
    "EvalRecord", "SummaryStats", "ForgettingMatrix", "euclidean_error", "adequacy", "evaluate",
    "locate", "summarize", "forgetting_matrix", "paired_ttest", "SIGNIFICANCE", "DegenerateInputError",
]
