"""Synthetic imaging environments and the landmark-localization MDP.

Each environment is a 3D volume built from a shared "head" anatomy: a
smooth ellipsoidal blob containing a four-lobed ventricle structure. The
four lobe tips plus their centroid are the five landmarks. Environments
differ by an intensity transform (sequence), a lesion size (pathology)
and an axis permutation (orientation).

The agent is a box of voxels centred on an integer position. It moves one
voxel at a time along one of the three axes.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

MIN_DIM = 8
TRAIL_LEN = 20
OSCILLATION_COUNT = 4


class Sequence(enum.IntEnum):
    S1 = 0
    S2 = 1
    S3 = 2
    S4 = 3


class Pathology(enum.IntEnum):
    PHigh = 0
    PLow = 1


class Orientation(enum.IntEnum):
    Axial = 0
    Coronal = 1
    Sagittal = 2


class TaskId(enum.IntEnum):
    TopLeft = 0
    TopRight = 1
    BottomLeft = 2
    BottomRight = 3
    Center = 4


class Action(enum.IntEnum):
    PLUS_X = 0
    MINUS_X = 1
    PLUS_Y = 2
    MINUS_Y = 3
    PLUS_Z = 4
    MINUS_Z = 5


N_ACTIONS = len(Action)
ACTION_DELTAS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)

# (x, y, z) -> permuted axes; both permutations are involutions
_PERMUTATIONS = {
    Orientation.Axial: (0, 1, 2),
    Orientation.Coronal: (0, 2, 1),
    Orientation.Sagittal: (2, 1, 0),
}

LESION_FRACTION = {Pathology.PHigh: 0.12, Pathology.PLow: 0.06}


@dataclass(frozen=True, order=True)
class EnvironmentSpec:
    sequence: Sequence
    pathology: Pathology
    orientation: Orientation
    seed: int = 0

    @property
    def name(self) -> str:
        return f"{self.sequence.name}-{self.pathology.name}-{self.orientation.name}"

    @property
    def key(self) -> tuple[int, int, int]:
        """Seed-free identity used for replay keys and file names."""
        return (int(self.sequence), int(self.pathology), int(self.orientation))

    @classmethod
    def from_name(cls, name: str, seed: int = 0) -> "EnvironmentSpec":
        try:
            seq, path, orient = name.split("-")
            return cls(Sequence[seq], Pathology[path], Orientation[orient], seed)
        except (ValueError, KeyError):
            raise ConfigError(f"bad environment name {name!r}") from None


def all_specs(seed: int = 0) -> list[EnvironmentSpec]:
    """All 24 environments, ordered lexicographically by (orientation, pathology, sequence)."""
    return [
        EnvironmentSpec(seq, path, orient, seed)
        for orient, path, seq in itertools.product(Orientation, Pathology, Sequence)
    ]


Landmarks = dict  # TaskId -> (x, y, z)


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    spec: EnvironmentSpec
    _padded: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    def padded(self, box) -> np.ndarray:
        """Zero-padded copy so that any box centred on an in-bounds voxel is a plain slice."""
        box = tuple(int(b) for b in box)
        arr = self._padded.get(box)
        if arr is None:
            half = [b // 2 for b in box]
            arr = np.pad(self.voxels, [(h, h) for h in half]).astype(np.float32)
            self._padded[box] = arr
        return arr

    def windows(self, box) -> np.ndarray:
        return sliding_window_view(self.padded(box), tuple(int(b) for b in box))


def permute_point(p, orientation: Orientation) -> tuple[int, int, int]:
    perm = _PERMUTATIONS[Orientation(orientation)]
    return tuple(int(p[i]) for i in perm)


def apply_orientation(volume: Volume, landmarks: Landmarks, orientation: Orientation):
    perm = _PERMUTATIONS[Orientation(orientation)]
    voxels = np.ascontiguousarray(volume.voxels.transpose(perm))
    moved = {t: permute_point(p, orientation) for t, p in landmarks.items()}
    return Volume(voxels, volume.spec), moved


def _apply_sequence(v: np.ndarray, sequence: Sequence) -> np.ndarray:
    if sequence == Sequence.S1:
        return v
    if sequence == Sequence.S2:
        return np.sqrt(v)
    if sequence == Sequence.S3:
        return 1.0 - v
    return np.clip(2.0 * v - 0.5, 0.0, 1.0)


def _capsule_distance(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) @ ab) / float(ab @ ab), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(pts - closest, axis=-1)


def _lobe_tips(rng, frame, centre):
    """Lobe tip voxels in the anatomical frame: left/right on x, top/bottom on y."""
    frame = np.asarray(frame, dtype=float)
    tips = []
    for sy, sx in ((-1, -1), (-1, 1), (1, -1), (1, 1)):
        off = np.array(
            [
                sx * rng.uniform(0.16, 0.24),
                sy * rng.uniform(0.16, 0.24),
                rng.uniform(-0.08, 0.08),
            ]
        )
        tips.append(np.rint(centre + off * frame).astype(np.int64))
    return tips


def generate_environment(spec: EnvironmentSpec, dims=(64, 64, 24)):
    """Render the environment's volume and landmark set.

    ``dims`` is the shape of the returned (oriented) volume. Anatomy is
    rendered in the un-permuted frame so every orientation ends up with
    the same output shape.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise ConfigError(f"volume dims {dims} below minimum {MIN_DIM}")
    frame = permute_point(dims, spec.orientation)
    rng = np.random.default_rng(spec.seed)
    f = np.asarray(frame, dtype=float)

    centre = (f - 1) / 2 + rng.uniform(-0.04, 0.04, 3) * f
    semi = np.array([0.40, 0.42, 0.40]) * rng.uniform(0.95, 1.05, 3) * f
    tips = _lobe_tips(rng, frame, centre)
    hub = np.rint(np.mean(tips, axis=0)).astype(np.int64)

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in frame], indexing="ij"), -1)
    rho2 = np.sum(((grid - centre) / semi) ** 2, axis=-1)
    inside = 1.0 / (1.0 + np.exp(-12.0 * (1.0 - np.sqrt(rho2))))
    tissue = 0.35 + 0.45 * np.clip(1.0 - rho2, 0.0, 1.0)
    v = inside * tissue

    lobe_r = 0.045 * float(np.min(f)) + 1.0
    d = np.min([_capsule_distance(grid, hub.astype(float), t.astype(float)) for t in tips], axis=0)
    ventricle = np.clip(lobe_r + 0.5 - d, 0.0, 1.0)
    v = v * (1.0 - ventricle) + 0.05 * ventricle
    # bright ring marks the hub so the centre landmark has its own signature
    ring = np.exp(-0.5 * ((np.linalg.norm(grid - hub, axis=-1) - lobe_r - 1.5) / 0.8) ** 2)
    v = np.maximum(v, 0.85 * ring * inside)
    v = _apply_sequence(np.clip(v, 0.0, 1.0), spec.sequence)

    points = [*tips, hub]
    radius = LESION_FRACTION[spec.pathology] * float(min(dims))
    for _ in range(1000):
        c = centre + rng.uniform(-0.6, 0.6, 3) * semi
        if all(np.linalg.norm(c - p) > radius + 3.0 for p in points):
            break
    lesion = np.clip(radius + 0.5 - np.linalg.norm(grid - c, axis=-1), 0.0, 1.0)
    v = v * (1.0 - lesion) + 0.95 * lesion

    base = Volume(np.clip(v, 0.0, 1.0).astype(np.float32), spec)
    marks = {TaskId(i): tuple(int(x) for x in p) for i, p in enumerate(points)}
    vol, marks = apply_orientation(base, marks, spec.orientation)
    return Volume(vol.voxels, spec), marks


@dataclass(frozen=True)
class AgentState:
    """Box position plus the centres of the last H frames (most recent last).

    ``frames`` holds the cropped sub-volumes; it is dropped for compact
    storage and re-extracted from the volume when needed.
    """

    position: tuple[int, int, int]
    box: tuple[int, int, int]
    trail: tuple[tuple[int, int, int], ...]
    frames: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def history(self) -> np.ndarray:
        return self.frames

    def compact(self) -> "AgentState":
        return AgentState(self.position, self.box, self.trail)


def crop(volume: Volume, position, box) -> np.ndarray:
    return volume.windows(box)[tuple(int(p) for p in position)].copy()


def crop_many(volume: Volume, positions: np.ndarray, box) -> np.ndarray:
    """Crops for an (n, 3) array of positions, shape (n, bx, by, bz)."""
    positions = np.asarray(positions, dtype=np.int64)
    win = volume.windows(box)
    return win[positions[:, 0], positions[:, 1], positions[:, 2]]


def extract_state(volume: Volume, position, box, prior: AgentState | None = None, history_len: int = 4) -> AgentState:
    box = tuple(int(b) for b in box)
    if any(b % 2 == 0 for b in box):
        raise ConfigError(f"box extents must be odd, got {box}")
    position = tuple(int(p) for p in position)
    frame = crop(volume, position, box)
    if prior is None:
        trail = (position,) * history_len
        frames = np.repeat(frame[None], history_len, axis=0)
    else:
        trail = (prior.trail + (position,))[-history_len:]
        frames = np.concatenate([prior.frames, frame[None]])[-history_len:]
    return AgentState(position, box, trail, frames)


def state_frames(volume: Volume, states, box) -> np.ndarray:
    """Batch re-extraction of frame histories: (n, H, bx, by, bz)."""
    trails = np.array([s.trail for s in states], dtype=np.int64)
    n, h, _ = trails.shape
    out = crop_many(volume, trails.reshape(-1, 3), box)
    return out.reshape(n, h, *out.shape[1:])


def reward(pos_before, pos_after, target) -> float:
    t = np.asarray(target, dtype=float)
    r = np.linalg.norm(np.asarray(pos_before, dtype=float) - t) - np.linalg.norm(
        np.asarray(pos_after, dtype=float) - t
    )
    return float(np.clip(r, -1.0, 1.0))


@dataclass(frozen=True)
class Transition:
    s: AgentState
    a: Action
    r: float
    s_next: AgentState
    done: bool
    task: TaskId
    env: EnvironmentSpec

    def compact(self) -> "Transition":
        return Transition(self.s.compact(), self.a, self.r, self.s_next.compact(), self.done, self.task, self.env)


def move(position, action: Action, dims) -> tuple[int, int, int]:
    p = np.asarray(position, dtype=np.int64) + ACTION_DELTAS[int(action)]
    p = np.clip(p, 0, np.asarray(dims) - 1)
    return tuple(int(x) for x in p)


def termination_check(trail, target, step_count: int, max_steps: int, training: bool = True) -> bool:
    """Episode end test.

    ``trail`` is the recent position list with the current position last.
    Reaching the target only counts while training; at inference the
    agent stops when it oscillates or runs out of steps.
    """
    pos = tuple(trail[-1])
    recent = [tuple(p) for p in trail[-TRAIL_LEN:]]
    if training and np.linalg.norm(np.subtract(pos, target)) <= 1.0:
        return True
    if recent.count(pos) >= OSCILLATION_COUNT:
        return True
    return step_count >= max_steps


def readout_position(trail) -> tuple[int, int, int]:
    """Most revisited position of the trail; ties go to the latest."""
    recent = [tuple(p) for p in trail[-TRAIL_LEN:]]
    best, best_count = None, -1
    for p in recent:
        c = recent.count(p)
        if c >= best_count:
            best, best_count = p, c
    return best


def step(volume: Volume, landmarks: Landmarks, task: TaskId, state: AgentState, action: Action,
         position_trail=None, step_count: int = 1, max_steps: int = 200, training: bool = True) -> Transition:
    target = landmarks[TaskId(task)]
    new_pos = move(state.position, action, volume.dims)
    r = reward(state.position, new_pos, target)
    s_next = extract_state(volume, new_pos, state.box, state, len(state.trail))
    trail = list(position_trail or [state.position]) + [new_pos]
    done = termination_check(trail, target, step_count, max_steps, training)
    return Transition(state, Action(action), r, s_next, done, TaskId(task), volume.spec)


def start_position(rng: np.random.Generator, dims, box) -> tuple[int, int, int]:
    """Uniform voxel at least one box extent away from every face."""
    pos = []
    for d, b in zip(dims, box):
        lo, hi = b, d - 1 - b
        if lo > hi:
            lo = hi = (d - 1) // 2
        pos.append(int(rng.integers(lo, hi + 1)))
    return tuple(pos)
