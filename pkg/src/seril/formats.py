"""Binary file formats (all little-endian).

``.vol``  volume + landmarks, magic ``SRLV``
``.ckpt`` network parameters, magic ``SRLC``, trailing FNV-1a checksum
``.erb``  long-term replay store, magic ``SRLE``, trailing FNV-1a checksum

Writers go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from numba import njit

from .errors import MissingArtifactError
from .qnet import NetworkArch, QNetworkParams
from .replay import LongTermStore, Strategy
from .world import (
    Action,
    AgentState,
    EnvironmentSpec,
    Orientation,
    Pathology,
    Sequence,
    TaskId,
    Transition,
    Volume,
)

VERSION = 1
VOL_MAGIC = b"SRLV"
CKPT_MAGIC = b"SRLC"
ERB_MAGIC = b"SRLE"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_STRATEGY_CODES = {Strategy.Reservoir: 0, Strategy.RewardMagnitude: 1, Strategy.Coverage: 2}


@njit(cache=True)
def _fnv1a(data, h):
    prime = np.uint64(FNV_PRIME)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    arr = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a(arr, np.uint64(FNV_OFFSET)))


def file_checksum(path) -> int:
    return fnv1a64(Path(path).read_bytes())


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.buf = io.BytesIO(data)
        self.name = name

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        raw = self.buf.read(size)
        if len(raw) != size:
            raise MissingArtifactError(f"{self.name}: truncated file")
        return struct.unpack(fmt, raw)

    def array(self, count: int, dtype) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.buf.read(count * dt.itemsize)
        if len(raw) != count * dt.itemsize:
            raise MissingArtifactError(f"{self.name}: truncated file")
        return np.frombuffer(raw, dtype=dt).copy()

    def at_end(self) -> bool:
        return self.buf.tell() == len(self.buf.getbuffer())


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise MissingArtifactError(f"{path}: {e.strerror}") from None


def _check_header(r: _Reader, magic: bytes):
    if r.buf.read(4) != magic:
        raise MissingArtifactError(f"{r.name}: bad magic (expected {magic.decode()})")
    (version,) = r.read("<I")
    if version != VERSION:
        raise MissingArtifactError(f"{r.name}: unsupported version {version}")


def _split_checksum(data: bytes, name: str) -> bytes:
    if len(data) < 8:
        raise MissingArtifactError(f"{name}: truncated file")
    payload, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(payload) != stored:
        raise MissingArtifactError(f"{name}: checksum mismatch")
    return payload


def _spec_bytes(spec: EnvironmentSpec) -> bytes:
    return struct.pack("<4B", int(spec.sequence), int(spec.pathology), int(spec.orientation), 0)


def _make_spec(raw: tuple, seed: int, name: str) -> EnvironmentSpec:
    seq, path, orient, _ = raw
    try:
        return EnvironmentSpec(Sequence(seq), Pathology(path), Orientation(orient), seed)
    except ValueError:
        raise MissingArtifactError(f"{name}: bad environment descriptor") from None


# --- .vol ---------------------------------------------------------------------

def encode_volume(volume: Volume, landmarks) -> bytes:
    out = io.BytesIO()
    out.write(VOL_MAGIC)
    out.write(struct.pack("<I3I", VERSION, *volume.dims))
    out.write(_spec_bytes(volume.spec))
    out.write(struct.pack("<Q", volume.spec.seed))
    out.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())
    for task in TaskId:
        out.write(struct.pack("<3I", *landmarks[task]))
    return out.getvalue()


def write_volume(path, volume: Volume, landmarks) -> None:
    atomic_write(path, encode_volume(volume, landmarks))


def read_volume(path):
    name = str(path)
    r = _Reader(_read_bytes(path), name)
    _check_header(r, VOL_MAGIC)
    dims = r.read("<3I")
    raw_spec = r.read("<4B")
    (seed,) = r.read("<Q")
    spec = _make_spec(raw_spec, seed, name)
    voxels = r.array(int(np.prod(dims)), "<f4").reshape(dims).astype(np.float32)
    landmarks = {task: tuple(int(v) for v in r.read("<3I")) for task in TaskId}
    if not r.at_end():
        raise MissingArtifactError(f"{name}: trailing bytes")
    if not np.all(np.isfinite(voxels)) or voxels.min() < 0 or voxels.max() > 1:
        raise MissingArtifactError(f"{name}: voxel values outside [0, 1]")
    for p in landmarks.values():
        if any(c >= d for c, d in zip(p, dims)):
            raise MissingArtifactError(f"{name}: landmark outside volume")
    return Volume(voxels, spec), landmarks


# --- .ckpt --------------------------------------------------------------------

def _u32_seq(values) -> bytes:
    values = list(values)
    return struct.pack(f"<I{len(values)}I", len(values), *values)


def encode_checkpoint(params: QNetworkParams) -> bytes:
    a = params.arch
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<I", a.frames))
    out.write(struct.pack("<3I", *a.box))
    out.write(_u32_seq(a.channels))
    out.write(struct.pack("<I", a.kernel))
    out.write(_u32_seq(a.head_widths))
    out.write(struct.pack("<I", len(params.heads)))
    for task in params.heads:
        out.write(struct.pack("<B", int(task)))
    for _, tensor in params.named_tensors():
        out.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    payload = out.getvalue()
    return payload + struct.pack("<Q", fnv1a64(payload))


def write_checkpoint(path, params: QNetworkParams) -> None:
    atomic_write(path, encode_checkpoint(params))


def decode_checkpoint(data: bytes, name: str = "<checkpoint>") -> QNetworkParams:
    if data[:4] != CKPT_MAGIC:
        raise MissingArtifactError(f"{name}: bad magic (expected SRLC)")
    r = _Reader(_split_checksum(data, name), name)
    _check_header(r, CKPT_MAGIC)
    (frames,) = r.read("<I")
    box = r.read("<3I")
    (nc,) = r.read("<I")
    channels = r.read(f"<{nc}I")
    (kernel,) = r.read("<I")
    (nh,) = r.read("<I")
    head_widths = r.read(f"<{nh}I")
    arch = NetworkArch(frames, tuple(box), tuple(channels), kernel, tuple(head_widths))
    (n_heads,) = r.read("<I")
    try:
        tasks = [TaskId(r.read("<B")[0]) for _ in range(n_heads)]
    except ValueError:
        raise MissingArtifactError(f"{name}: bad task id") from None
    trunk = []
    c_in = frames
    for c_out in channels:
        w = r.array(c_in * kernel**3 * c_out, "<f4").reshape(c_in, kernel, kernel, kernel, c_out)
        trunk.append([w.astype(np.float32), r.array(c_out, "<f4").astype(np.float32)])
        c_in = c_out
    heads = {}
    for task in tasks:
        layers, width = [], arch.flat_width
        for w in head_widths:
            layers.append(r.array(width * w, "<f4").reshape(width, w).astype(np.float32))
            layers.append(r.array(w, "<f4").astype(np.float32))
            width = w
        heads[task] = layers
    if not r.at_end():
        raise MissingArtifactError(f"{name}: trailing bytes")
    return QNetworkParams(arch, trunk, heads)


def read_checkpoint(path) -> QNetworkParams:
    return decode_checkpoint(_read_bytes(path), str(path))


# --- .erb ---------------------------------------------------------------------

def encode_store(store: LongTermStore, history: int, box) -> bytes:
    out = io.BytesIO()
    out.write(ERB_MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<II3IB", history, store.budget, *box, _STRATEGY_CODES[store.strategy]))
    out.write(struct.pack("<I", len(store.reservoirs)))
    for (spec, task), items in store.reservoirs.items():
        out.write(_spec_bytes(spec))
        out.write(struct.pack("<QBQI", spec.seed, int(task), store.seen.get((spec, task), 0), len(items)))
        for t in items:
            pts = list(t.s.trail) + [t.s_next.position]
            out.write(struct.pack(f"<{3 * len(pts)}I", *[c for p in pts for c in p]))
            out.write(struct.pack("<BfB", int(t.a), t.r, int(t.done)))
    payload = out.getvalue()
    return payload + struct.pack("<Q", fnv1a64(payload))


def write_store(path, store: LongTermStore, history: int, box) -> None:
    atomic_write(path, encode_store(store, history, box))


def decode_store(data: bytes, name: str = "<store>") -> LongTermStore:
    """Rebuild a store of compact transitions; frames are re-extracted from volumes on use."""
    if data[:4] != ERB_MAGIC:
        raise MissingArtifactError(f"{name}: bad magic (expected SRLE)")
    r = _Reader(_split_checksum(data, name), name)
    _check_header(r, ERB_MAGIC)
    history, budget, bx, by, bz, code = r.read("<II3IB")
    box = (bx, by, bz)
    strategy = {v: k for k, v in _STRATEGY_CODES.items()}[code]
    store = LongTermStore(budget, strategy)
    (n_keys,) = r.read("<I")
    for _ in range(n_keys):
        raw_spec = r.read("<4B")
        seed, task, seen, count = r.read("<QBQI")
        spec = _make_spec(raw_spec, seed, name)
        try:
            task = TaskId(task)
        except ValueError:
            raise MissingArtifactError(f"{name}: bad task id") from None
        items = []
        for _ in range(count):
            flat = r.read(f"<{3 * (history + 1)}I")
            pts = [tuple(flat[i:i + 3]) for i in range(0, len(flat), 3)]
            a, rew, done = r.read("<BfB")
            trail = tuple(pts[:history])
            s = AgentState(trail[-1], box, trail)
            s2 = AgentState(pts[-1], box, (trail + (pts[-1],))[-history:])
            items.append(Transition(s, Action(a), float(rew), s2, bool(done), task, spec))
        store.reservoirs[(spec, task)] = items
        store.seen[(spec, task)] = seen
    if not r.at_end():
        raise MissingArtifactError(f"{name}: trailing bytes")
    return store


def read_store(path) -> LongTermStore:
    return decode_store(_read_bytes(path), str(path))
