"""Deterministic synthetic driving-world videos with per-frame ego-action labels.

A single agent moves on a 32x32 top-down canvas under a scripted Markov action
sequence over the seven ego actions. A colored indicator block appears exactly
CUE_LEAD frames before every action change, colored by the upcoming action, so
near-future actions are genuinely predictable from past frames.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, SamplingError

ACTION_NAMES = ("Move", "Stop", "TurnLeft", "TurnRight", "Overtake", "MoveLeft", "MoveRight")
N_ACTIONS = len(ACTION_NAMES)
CUE_LEAD = 4  # frames of warning before a transition
DWELL_RANGE = (6, 18)  # inclusive frames an action persists (min > CUE_LEAD)
FPS = 12
FRAME_SIZE = 32
CHANNELS = 3

# one distinct saturated color per upcoming action; never white/gray so the
# cue block is unambiguous against agent and background pixels
CUE_PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.5, 0.0],
    ],
    dtype=np.float32,
)
_CUE_SLICE = (slice(1, 4), slice(1, 4))  # rows/cols of the indicator block
_CUE_PROBE = (2, 2)  # center pixel used to test for cue presence

# relative preference for switching into each action (self-transitions excluded)
_ACTION_WEIGHTS = np.array([0.26, 0.12, 0.11, 0.11, 0.12, 0.14, 0.14])


@dataclass
class WorldState:
    x: float
    y: float
    heading: float
    speed: float
    action: int
    until_change: int
    pending: tuple[int, int] | None = None  # (upcoming action, countdown)


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # [L, 3, 32, 32] float32 in [0, 1]
    labels: np.ndarray  # [L] uint8 action ids
    fps: int
    seed: int
    video_id: int = -1

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ClipSample:
    past: np.ndarray  # [t, 3, 32, 32]
    combined: np.ndarray  # [t + t_pred, 3, 32, 32]
    past_labels: np.ndarray  # [t]
    future_labels: np.ndarray  # [t_pred]
    source: tuple[int, int] = field(default=(-1, 0))  # (video_id, start frame)


def _next_action(rng: np.random.Generator, current: int) -> int:
    w = _ACTION_WEIGHTS.copy()
    w[current] = 0.0
    return int(rng.choice(N_ACTIONS, p=w / w.sum()))


def _advance(state: WorldState) -> None:
    a = state.action
    dx = np.cos(state.heading)
    dy = np.sin(state.heading)
    if a == 0:  # Move
        step = 1.2
    elif a == 1:  # Stop
        step = 0.0
    elif a in (2, 3):  # TurnLeft / TurnRight
        state.heading += -0.22 if a == 2 else 0.22
        dx, dy = np.cos(state.heading), np.sin(state.heading)
        step = 0.8
    elif a == 4:  # Overtake
        step = 1.8
    else:  # MoveLeft / MoveRight: forward plus lateral drift
        step = 1.0
        lateral = -0.7 if a == 5 else 0.7
        state.x += lateral * -dy
        state.y += lateral * dx
    state.x = (state.x + step * dx) % FRAME_SIZE
    state.y = (state.y + step * dy) % FRAME_SIZE


def _render(state: WorldState) -> np.ndarray:
    img = np.full((CHANNELS, FRAME_SIZE, FRAME_SIZE), 0.08, dtype=np.float32)
    # dashed lane lines
    img[:, ::3, 8] = 0.25
    img[:, ::3, 23] = 0.25
    # agent body: 3x3 white block, torus wraparound
    cx, cy = int(round(state.x)) % FRAME_SIZE, int(round(state.y)) % FRAME_SIZE
    rows = [(cx + d) % FRAME_SIZE for d in (-1, 0, 1)]
    cols = [(cy + d) % FRAME_SIZE for d in (-1, 0, 1)]
    img[:, np.ix_(rows, cols)[0], np.ix_(rows, cols)[1]] = 1.0
    # heading tick two cells ahead of the body center
    tx = int(round(state.x + 2 * np.cos(state.heading))) % FRAME_SIZE
    ty = int(round(state.y + 2 * np.sin(state.heading))) % FRAME_SIZE
    img[:, tx, ty] = 0.7
    # cue block last so nothing can occlude it
    if state.pending is not None:
        img[:, _CUE_SLICE[0], _CUE_SLICE[1]] = CUE_PALETTE[state.pending[0]][:, None, None]
    return img


def cue_visible(frame: np.ndarray) -> int | None:
    """Return the signalled upcoming action id, or None when no cue is shown."""
    probe = frame[:, _CUE_PROBE[0], _CUE_PROBE[1]]
    for action, color in enumerate(CUE_PALETTE):
        if np.array_equal(probe, color):
            return action
    return None


def generate_video(seed: int, length: int) -> SyntheticVideo:
    """Render one scripted video; identical (seed, length) gives identical bytes."""
    if length < 24:
        raise ConfigurationError(f"video length must be >= 24 frames, got {length}")
    rng = np.random.default_rng(seed)
    state = WorldState(
        x=float(rng.uniform(4, FRAME_SIZE - 4)),
        y=float(rng.uniform(4, FRAME_SIZE - 4)),
        heading=float(rng.uniform(0, 2 * np.pi)),
        speed=1.0,
        action=int(rng.integers(0, N_ACTIONS)),
        until_change=int(rng.integers(DWELL_RANGE[0], DWELL_RANGE[1] + 1)),
    )
    frames = np.empty((length, CHANNELS, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    labels = np.empty(length, dtype=np.uint8)
    for f in range(length):
        if state.until_change == 0:
            state.action = state.pending[0]
            state.pending = None
            state.until_change = int(rng.integers(DWELL_RANGE[0], DWELL_RANGE[1] + 1))
        if state.until_change == CUE_LEAD:
            state.pending = (_next_action(rng, state.action), CUE_LEAD)
        frames[f] = _render(state)
        labels[f] = state.action
        _advance(state)
        state.until_change -= 1
    return SyntheticVideo(frames=frames, labels=labels, fps=FPS, seed=seed)


def derive_video_seed(master_seed: int, video_id: int) -> int:
    return int(np.random.SeedSequence([master_seed, video_id]).generate_state(1)[0])


def make_dataset(master_seed: int, n_videos: int, frames_per_video: int) -> list[SyntheticVideo]:
    """Generate n_videos independent videos; per-video seeds derive from (master, id)."""
    videos = []
    for vid in range(n_videos):
        video = generate_video(derive_video_seed(master_seed, vid), frames_per_video)
        video.video_id = vid
        videos.append(video)
    return videos


def split_dataset(
    videos: list[SyntheticVideo],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[list[SyntheticVideo], list[SyntheticVideo], list[SyntheticVideo]]:
    """Partition at video granularity: (train, val, test), remainder to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {ratios}")
    n = len(videos)
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    for name, count, ratio in (("train", n_train, ratios[0]), ("val", n_val, ratios[1]), ("test", n_test, ratios[2])):
        if ratio > 0 and count == 0:
            raise ConfigurationError(f"too few videos ({n}) to give the {name} split at ratio {ratio}")
    order = np.random.default_rng(seed).permutation(n)
    train = [videos[i] for i in order[:n_train]]
    val = [videos[i] for i in order[n_train : n_train + n_val]]
    test = [videos[i] for i in order[n_train + n_val :]]
    return train, val, test


def sample_clip(video: SyntheticVideo, t: int, t_pred: int, rng: np.random.Generator) -> ClipSample:
    """Uniform random start; past/combined/labels share one frame indexing."""
    span = t + t_pred
    if len(video) < span:
        raise SamplingError(f"video of {len(video)} frames cannot fit a clip of {span}")
    start = int(rng.integers(0, len(video) - span + 1))
    return clip_at(video, start, t, t_pred)


def clip_at(video: SyntheticVideo, start: int, t: int, t_pred: int) -> ClipSample:
    span = t + t_pred
    if start < 0 or start + span > len(video):
        raise SamplingError(f"clip [{start}, {start + span}) out of range for {len(video)} frames")
    combined = video.frames[start : start + span]
    return ClipSample(
        past=combined[:t],
        combined=combined,
        past_labels=video.labels[start : start + t].copy(),
        future_labels=video.labels[start + t : start + span].copy(),
        source=(video.video_id, start),
    )


def eval_clip_starts(video_length: int, t: int, t_pred: int, stride: int | None = None) -> list[int]:
    """Deterministic strided window starts covering the video."""
    span = t + t_pred
    if video_length < span:
        return []
    stride = stride or max(1, t_pred)
    return list(range(0, video_length - span + 1, stride))


# ---------------------------------------------------------------------------
# persistence: one binary file per video plus a JSON manifest

_MAGIC = b"FDVD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQ")  # magic, version, length, C, H, W, fps, seed


def save_video(path: str | Path, video: SyntheticVideo) -> None:
    path = Path(path)
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        len(video),
        *video.frames.shape[1:],
        video.fps,
        video.seed & 0xFFFFFFFFFFFFFFFF,
    )
    payload = header + video.frames.astype("<f4").tobytes() + video.labels.astype(np.uint8).tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_video(path: str | Path, video_id: int = -1) -> SyntheticVideo:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated video file")
    magic, version, length, c, h, w, fps, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a video file (bad magic {magic!r})")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported video format version {version}")
    frame_bytes = length * c * h * w * 4
    if len(raw) != _HEADER.size + frame_bytes + length:
        raise ValueError(f"{path}: size mismatch, file is corrupt or truncated")
    frames = np.frombuffer(raw, dtype="<f4", count=length * c * h * w, offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype=np.uint8, count=length, offset=_HEADER.size + frame_bytes)
    return SyntheticVideo(
        frames=frames.reshape(length, c, h, w).copy(),
        labels=labels.copy(),
        fps=fps,
        seed=seed,
        video_id=video_id,
    )


def write_dataset(directory: str | Path, videos: list[SyntheticVideo], splits: dict[str, list[int]]) -> None:
    """Persist one file per video plus a manifest listing video ids per split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for video in videos:
        save_video(directory / f"video_{video.video_id:04d}.fdv", video)
    manifest = {
        "version": _VERSION,
        "n_videos": len(videos),
        "frames_per_video": len(videos[0]) if videos else 0,
        "splits": {name: sorted(ids) for name, ids in splits.items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory: str | Path) -> tuple[list[SyntheticVideo], dict[str, list[int]]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    videos = [
        load_video(directory / f"video_{vid:04d}.fdv", video_id=vid)
        for vid in range(manifest["n_videos"])
    ]
    return videos, manifest["splits"]
