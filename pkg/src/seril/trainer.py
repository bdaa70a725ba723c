"""Episode rollout and the three training regimes.

SERT trains one model per environment, MERT trains one model on all
environments at once, and SERIL visits environments one after another,
mixing each batch between the current environment's buffer and a
selective long-term store of earlier environments.

An epoch is ``steps_per_epoch`` optimizer updates. Episodes are collected
in rounds of five (one per task, or five random (environment, task) pairs
for MERT) rolled in lockstep against the current parameters, one round
per ``5 * updates_per_episode`` updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import qnet
from .config import Config
from .errors import TrainingDivergenceError
from .replay import LongTermStore, Strategy, TaskRings, mixed_sample, select_into_longterm
from .world import (
    N_ACTIONS,
    AgentState,
    Action,
    EnvironmentSpec,
    TaskId,
    Transition,
    Volume,
    crop,
    crop_many,
    generate_environment,
    move,
    readout_position,
    reward,
    start_position,
    termination_check,
    TRAIL_LEN,
)

log = logging.getLogger(__name__)

TASKS = tuple(TaskId)


def epsilon_at(step: int, cfg) -> float:
    t = cfg.training if isinstance(cfg, Config) else cfg
    frac = min(max(step, 0) / t.epsilon_decay_steps, 1.0)
    return (1.0 - frac) * t.epsilon_start + frac * t.epsilon_end


def arch_for(cfg: Config) -> qnet.NetworkArch:
    g = cfg.geometry
    return qnet.NetworkArch(frames=g.history, box=tuple(g.box), channels=tuple(g.channels),
                            head_widths=tuple(g.head_widths))


def build_environments(specs, cfg: Config) -> dict:
    """spec -> (Volume, landmarks) for the configured geometry."""
    return {s: generate_environment(s, cfg.geometry.volume) for s in specs}


# --- rollout ------------------------------------------------------------------

@dataclass
class EpisodeJob:
    volume: Volume
    landmarks: dict
    task: TaskId
    rng: np.random.Generator


@dataclass
class _Rollout:
    job: EpisodeJob
    position: tuple
    trail: list
    frames: np.ndarray
    frame_trail: tuple
    steps: int = 0
    done: bool = False
    transitions: list = field(default_factory=list)


def run_episodes(params, jobs, epsilon: float, cfg: Config, training: bool = True,
                 record: bool = True, keep_frames: bool = False):
    """Roll several independent episodes in lockstep.

    Each job owns its RNG, so results match rolling the jobs one by one.
    Returns ``[(transitions, terminal_position), ...]`` in job order.
    """
    g, t = cfg.geometry, cfg.training
    box, h = tuple(g.box), g.history
    runs = []
    for job in jobs:
        pos = start_position(job.rng, job.volume.dims, box)
        frame = crop(job.volume, pos, box)
        runs.append(_Rollout(job, pos, [pos], np.repeat(frame[None], h, axis=0), (pos,) * h))

    while True:
        active = [r for r in runs if not r.done]
        if not active:
            break
        actions = np.empty(len(active), dtype=np.int64)
        greedy = []
        for i, r in enumerate(active):
            if r.job.rng.random() < epsilon:
                actions[i] = r.job.rng.integers(0, N_ACTIONS)
            else:
                greedy.append(i)
        if greedy:
            frames = np.stack([active[i].frames for i in greedy])
            tasks = [int(active[i].job.task) for i in greedy]
            q = qnet.q_values(params, frames, tasks)
            actions[greedy] = np.argmax(q, axis=1)

        for r, a in zip(active, actions):
            job = r.job
            target = job.landmarks[job.task]
            new_pos = move(r.position, a, job.volume.dims)
            rew = reward(r.position, new_pos, target)
            frame = crop(job.volume, new_pos, box)
            frames_next = np.concatenate([r.frames[1:], frame[None]])
            trail_next = (r.frame_trail + (new_pos,))[-h:]
            r.trail.append(new_pos)
            del r.trail[:-TRAIL_LEN]
            r.steps += 1
            done = termination_check(r.trail, target, r.steps, t.max_episode_steps, training)
            if record:
                s = AgentState(r.position, box, r.frame_trail, r.frames if keep_frames else None)
                s2 = AgentState(new_pos, box, trail_next, frames_next if keep_frames else None)
                r.transitions.append(Transition(s, Action(int(a)), rew, s2, done, job.task, job.volume.spec))
            r.position, r.frames, r.frame_trail, r.done = new_pos, frames_next, trail_next, done

    return [(r.transitions, readout_position(r.trail)) for r in runs]


def run_episode(params, volume, landmarks, task, epsilon, rng, cfg: Config, training: bool = True):
    """One episode; returns (transitions with frames, inference-rule terminal position)."""
    job = EpisodeJob(volume, landmarks, TaskId(task), rng)
    return run_episodes(params, [job], epsilon, cfg, training, keep_frames=True)[0]


# --- learning -------------------------------------------------------------------

def materialize(batch, volumes: dict, box):
    """Re-extract frame stacks for compact transitions; returns loss_and_grad_arrays inputs."""
    n = len(batch)
    trails = np.empty((2, n, len(batch[0].s.trail), 3), dtype=np.int64)
    groups: dict = {}
    for i, tr in enumerate(batch):
        trails[0, i] = tr.s.trail
        trails[1, i] = tr.s_next.trail
        groups.setdefault(tr.env, []).append(i)
    h = trails.shape[2]
    frames = np.empty((2, n, h, *box), dtype=np.float32)
    for env, rows in groups.items():
        pts = trails[:, rows].reshape(-1, 3)
        frames[:, rows] = crop_many(volumes[env], pts, box).reshape(2, len(rows), h, *box)
    actions = np.array([int(tr.a) for tr in batch])
    rewards = np.array([tr.r for tr in batch])
    dones = np.array([tr.done for tr in batch])
    tasks = np.array([int(tr.task) for tr in batch])
    return frames[0], actions, rewards, frames[1], dones, tasks


class Learner:
    """Owns the online/target parameters and the optimizer; the single writer."""

    def __init__(self, cfg: Config, seed: int):
        self.cfg = cfg
        self.params = qnet.init_network(arch_for(cfg), seed, tasks=TASKS)
        self.target = qnet.sync_target(self.params)
        self.opt = qnet.AdamState()
        self.updates = 0

    def update(self, batch, volumes) -> float:
        t = self.cfg.training
        arrays = materialize(batch, volumes, tuple(self.cfg.geometry.box))
        loss, grads = qnet.loss_and_grad_arrays(self.params, self.target, *arrays, t.gamma)
        try:
            qnet.optimizer_step(self.params, grads, self.opt, t.lr)
        except TrainingDivergenceError as e:
            raise TrainingDivergenceError(f"optimizer step {self.updates + 1}: {e}") from None
        self.updates += 1
        if self.updates % t.target_sync_interval == 0:
            self.target = qnet.sync_target(self.params)
        return loss


@dataclass
class Checkpoint:
    label: str
    env_index: int
    epoch: int
    params: qnet.QNetworkParams


@dataclass
class RegimeRun:
    regime: str
    environments: list
    tasks: tuple = TASKS
    checkpoints: list = field(default_factory=list)
    logs: list = field(default_factory=list)
    rollouts: list = field(default_factory=list)  # (spec, task) per episode, in order
    store: LongTermStore | None = None

    @property
    def final(self) -> qnet.QNetworkParams:
        return self.checkpoints[-1].params

    def env_checkpoints(self) -> list:
        """Last checkpoint taken on each environment, in training order."""
        last = {}
        for c in self.checkpoints:
            if c.label != "final":
                last[c.env_index] = c
        return [last[i] for i in sorted(last)]


_REGIME_TAG = {"sert": 1, "mert": 2, "seril": 3}


class _Session:
    """Shared epoch loop: collection rounds interleaved with optimizer updates."""

    def __init__(self, regime: str, cfg: Config, envs: dict, seed: int, run: RegimeRun, on_log=None):
        self.cfg = cfg
        self.envs = envs
        self.volumes = {s: v for s, (v, _) in envs.items()}
        self.learner = Learner(cfg, seed)
        self.episode_rng = np.random.default_rng([seed, _REGIME_TAG[regime], 1])
        self.sample_rng = np.random.default_rng([seed, _REGIME_TAG[regime], 2])
        self.run = run
        self.on_log = on_log
        self.round_size = len(TASKS)

    def collect(self, pairs, epsilon):
        jobs = []
        for spec, task in pairs:
            vol, lm = self.envs[spec]
            child = np.random.default_rng(self.episode_rng.integers(0, 2**63))
            jobs.append(EpisodeJob(vol, lm, task, child))
            self.run.rollouts.append((spec, task))
        return run_episodes(self.learner.params, jobs, epsilon, self.cfg, training=True)

    def epoch(self, steps, session_step, pick_pairs, push, draw_batch, label, env_index, epoch_no):
        t = self.cfg.training
        every = self.round_size * t.updates_per_episode
        losses, ep_rewards = [], []
        for i in range(steps):
            eps = epsilon_at(session_step + i, t)
            if i % every == 0:
                for transitions, _ in self.collect(pick_pairs(), eps):
                    ep_rewards.append(sum(tr.r for tr in transitions))
                    for tr in transitions:
                        push(tr)
            losses.append(self.learner.update(draw_batch(), self.volumes))
        record = {
            "regime": self.run.regime,
            "label": label,
            "epoch": epoch_no,
            "step": self.learner.updates,
            "loss": float(np.mean(losses)),
            "mean_reward": float(np.mean(ep_rewards)) if ep_rewards else 0.0,
            "epsilon": epsilon_at(session_step + steps - 1, t),
        }
        self.run.logs.append(record)
        self.run.checkpoints.append(Checkpoint(label, env_index, epoch_no, qnet.sync_target(self.learner.params)))
        if self.on_log:
            self.on_log(record)
        log.debug("%s", record)
        return session_step + steps


def _round_robin(spec):
    return lambda: [(spec, task) for task in TASKS]


def train_sert(env: EnvironmentSpec, cfg: Config, envs: dict | None = None, on_log=None, seed=None) -> RegimeRun:
    envs = envs or build_environments([env], cfg)
    seed = cfg.experiment.seed if seed is None else seed
    t = cfg.training
    run = RegimeRun("sert", [env])
    sess = _Session("sert", cfg, {env: envs[env]}, seed, run, on_log)
    rings = TaskRings(cfg.replay.capacity)
    step = 0
    for e in range(t.epochs_sert):
        step = sess.epoch(
            t.steps_per_epoch, step, _round_robin(env), rings.push,
            lambda: rings.sample(t.batch_size, sess.sample_rng),
            f"{env.name}-epoch{e}", 0, e,
        )
    return run


def train_mert(env_list, cfg: Config, envs: dict | None = None, on_log=None, seed=None) -> RegimeRun:
    env_list = list(env_list)
    if not env_list:
        raise ValueError("MERT needs at least one environment")
    envs = envs or build_environments(env_list, cfg)
    seed = cfg.experiment.seed if seed is None else seed
    t = cfg.training
    run = RegimeRun("mert", env_list)
    sess = _Session("mert", cfg, {s: envs[s] for s in env_list}, seed, run, on_log)
    rings = TaskRings(cfg.replay.capacity)

    def pick():
        rng = sess.episode_rng
        return [
            (env_list[int(rng.integers(0, len(env_list)))], TASKS[int(rng.integers(0, len(TASKS)))])
            for _ in range(sess.round_size)
        ]

    step = 0
    for e in range(t.epochs_mert):
        step = sess.epoch(
            t.steps_per_epoch, step, pick, rings.push,
            lambda: rings.sample(t.batch_size, sess.sample_rng),
            f"mert-epoch{e}", 0, e,
        )
    return run


def train_seril(env_sequence, cfg: Config, envs: dict | None = None, on_log=None, seed=None,
                use_store: bool = True) -> RegimeRun:
    """Sequential training with selective replay.

    ``use_store=False`` gives the plain fine-tuning ablation: same schedule,
    batches drawn only from the current environment.
    """
    env_sequence = list(env_sequence)
    if not env_sequence:
        raise ValueError("SERIL needs at least one environment")
    envs = envs or build_environments(env_sequence, cfg)
    seed = cfg.experiment.seed if seed is None else seed
    t, r = cfg.training, cfg.replay
    run = RegimeRun("seril", env_sequence)
    sess = _Session("seril", cfg, {s: envs[s] for s in env_sequence}, seed, run, on_log)
    store = LongTermStore(r.budget, Strategy(r.strategy)) if use_store else None
    run.store = store
    store_rng = np.random.default_rng([seed, _REGIME_TAG["seril"], 3])
    mix = cfg.mix

    for i, spec in enumerate(env_sequence):
        current = TaskRings(r.capacity)
        collected = {task: [] for task in TASKS}

        def push(tr, current=current, collected=collected):
            current.push(tr)
            collected[tr.task].append(tr)

        def draw(current=current):
            return mixed_sample(current, store, mix, sess.sample_rng)

        step = 0  # exploration restarts with each new environment
        for e in range(t.epochs_seril):
            step = sess.epoch(t.steps_per_epoch, step, _round_robin(spec), push, draw,
                              f"{spec.name}-epoch{e}", i, e)
        if store is not None:
            for task in TASKS:
                select_into_longterm(store, (spec, task), collected[task], store_rng)
    run.checkpoints.append(Checkpoint("final", len(env_sequence) - 1, t.epochs_seril,
                                      qnet.sync_target(sess.learner.params)))
    return run
