"""Deterministic synthetic tracking videos and MOTChallenge text I/O.

Objects are flat-colored rectangles on a black background moving with
piecewise-constant velocity. Painter's order provides occlusion, crossing
pairs provide identity-switch opportunities.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import ConfigError, NormBox

MOT_LINE = "{frame},{ident},{left:.2f},{top:.2f},{width:.2f},{height:.2f},{conf:.2f},-1,-1,-1"


class MotParseError(ValueError):
    pass


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 3
    max_objects: int = 6
    min_size: float = 0.12
    max_size: float = 0.22
    max_speed: float = 0.04
    turn_prob: float = 0.1
    crossing: bool = True
    entry_exit_prob: float = 0.0
    num_classes: int = 1
    seed: int = 0

    def validate(self):
        if self.height < 32 or self.width < 32:
            raise ConfigError("image size must be at least 32x32")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigError("object count range must satisfy 1 <= min <= max")
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError("object size range must satisfy 0 < min <= max")
        if self.max_size >= 1.0:
            raise ConfigError("objects larger than the frame")
        if self.crossing and self.max_objects < 2:
            raise ConfigError("crossing events need at least two objects")
        for name in ("turn_prob", "entry_exit_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")


@dataclass
class ObjectTrack:
    identity: int
    spawn_frame: int
    despawn_frame: int
    boxes: dict[int, NormBox]
    color: tuple[float, float, float]
    cls: int = 0
    depth: float = 0.0


@dataclass
class SequenceClip:
    frames: np.ndarray  # [S, H, W, 3] float32
    truth: list[list[tuple[int, NormBox, int]]]
    tracks: list[ObjectTrack] = field(default_factory=list)
    name: str = "seq"
    seed: int = 0

    @property
    def length(self) -> int:
        return len(self.truth)

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.frames.shape[1]), int(self.frames.shape[2])

    def subclip(self, indices: Sequence[int]) -> "SequenceClip":
        idx = list(indices)
        return SequenceClip(self.frames[idx], [self.truth[i] for i in idx],
                            self.tracks, self.name, self.seed)

    def truth_arrays(self, t: int):
        """(ids [M], boxes [M,4], classes [M]) for frame t."""
        rows = self.truth[t]
        ids = np.array([r[0] for r in rows], dtype=np.int64)
        boxes = np.array([r[1].as_array() for r in rows], dtype=np.float64).reshape(-1, 4)
        classes = np.array([r[2] for r in rows], dtype=np.int64)
        return ids, boxes, classes


class _Mover:
    def __init__(self, ident, pos, vel, size, color, depth, spawn, cls=0):
        self.ident = ident
        self.pos = np.asarray(pos, dtype=np.float64)
        self.vel = np.asarray(vel, dtype=np.float64)
        self.size = np.asarray(size, dtype=np.float64)
        self.color = color
        self.depth = depth
        self.track = ObjectTrack(ident, spawn, spawn, {}, color, cls, depth)
        self.locked_until = -1

    def box(self) -> NormBox:
        return NormBox(float(self.pos[0]), float(self.pos[1]),
                       float(self.size[0]), float(self.size[1]))

    def advance(self, rng: np.random.Generator, turn_prob: float, frame: int):
        if frame > self.locked_until and rng.random() < turn_prob:
            speed = float(np.hypot(*self.vel))
            angle = rng.uniform(0, 2 * math.pi)
            self.vel = speed * np.array([math.cos(angle), math.sin(angle)])
        self.pos = self.pos + self.vel
        half = self.size / 2
        for k in range(2):
            lo, hi = half[k], 1.0 - half[k]
            if self.pos[k] < lo:
                self.pos[k] = min(2 * lo - self.pos[k], hi)
                self.vel[k] = abs(self.vel[k])
            elif self.pos[k] > hi:
                self.pos[k] = max(2 * hi - self.pos[k], lo)
                self.vel[k] = -abs(self.vel[k])


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    # bright, saturated colors so objects stand out from the black background
    hue = rng.uniform(0, 1)
    rgb = np.clip(np.abs(((hue * 6 + np.array([0.0, 4.0, 2.0])) % 6) - 3) - 1, 0, 1)
    value = rng.uniform(0.6, 1.0)
    return tuple(float(c) for c in (0.15 + 0.85 * rgb) * value)


def _spawn(rng, cfg: SynthConfig, ident: int, frame: int) -> _Mover:
    size = rng.uniform(cfg.min_size, cfg.max_size, size=2)
    pos = rng.uniform(size / 2, 1 - size / 2)
    angle = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(0.3, 1.0) * cfg.max_speed
    vel = speed * np.array([math.cos(angle), math.sin(angle)])
    cls = int(rng.integers(cfg.num_classes))
    return _Mover(ident, pos, vel, size, _random_color(rng), float(rng.random()), frame, cls)


def _force_crossing(rng, cfg: SynthConfig, a: _Mover, b: _Mover, length: int):
    """Aim two movers so their centers coincide at the middle frame."""
    meet = max(1, length // 2)
    point = rng.uniform(0.35, 0.65, size=2)
    for mover, angle in ((a, rng.uniform(0, 2 * math.pi)), (b, None)):
        if angle is None:
            angle = math.atan2(a.vel[1], a.vel[0]) + rng.uniform(0.5, 1.0) * math.pi
        speed = rng.uniform(0.5, 1.0) * cfg.max_speed
        direction = np.array([math.cos(angle), math.sin(angle)])
        half = mover.size / 2
        # shrink speed until the start point is inside the frame
        for _ in range(60):
            start = point - meet * speed * direction
            if np.all(start >= half) and np.all(start <= 1 - half):
                break
            speed *= 0.9
        mover.pos = np.clip(start, half, 1 - half)
        mover.vel = speed * direction
        mover.locked_until = meet


def generate_sequence(config: SynthConfig, length: int, seed: int | None = None,
                      name: str = "seq") -> SequenceClip:
    config.validate()
    if length < 1:
        raise ConfigError("sequence length must be positive")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    if config.crossing:
        count = max(count, 2)
    movers = [_spawn(rng, config, i + 1, 0) for i in range(count)]
    next_id = count + 1
    if config.crossing:
        _force_crossing(rng, config, movers[0], movers[1], length)

    finished: list[ObjectTrack] = []
    truth: list[list[tuple[int, NormBox, int]]] = []
    frames = np.zeros((length, config.height, config.width, 3), dtype=np.float32)
    for t in range(length):
        if t > 0:
            for m in movers:
                m.advance(rng, config.turn_prob, t)
            if config.entry_exit_prob > 0:
                leaving = [m for m in movers
                           if m.locked_until < t and rng.random() < config.entry_exit_prob]
                for m in leaving:
                    m.track.despawn_frame = t
                    finished.append(m.track)
                    movers.remove(m)
                if len(movers) < config.max_objects and rng.random() < config.entry_exit_prob:
                    movers.append(_spawn(rng, config, next_id, t))
                    next_id += 1
                if len(movers) < config.min_objects:
                    movers.append(_spawn(rng, config, next_id, t))
                    next_id += 1
        rows = []
        for m in movers:
            box = m.box()
            m.track.boxes[t] = box
            m.track.despawn_frame = t + 1
            rows.append((m.ident, box, m.track.cls))
        truth.append(sorted(rows, key=lambda r: r[0]))
        ordered = sorted(movers, key=lambda m: m.depth)
        frames[t] = render_frame([(m.box(), m.color) for m in ordered],
                                 config.height, config.width)
    tracks = sorted(finished + [m.track for m in movers], key=lambda tr: tr.identity)
    return SequenceClip(frames, truth, tracks, name, seed)


def render_frame(objects: Sequence[tuple[NormBox, Sequence[float]]],
                 height: int = 64, width: int = 64) -> np.ndarray:
    """Draw filled rectangles in list order; a pixel belongs to a box if its center does."""
    img = np.zeros((height, width, 3), dtype=np.float32)
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    for box, color in objects:
        x0, y0, x1, y1 = box.to_xyxy()
        cols = (xs >= x0) & (xs < x1)
        rows = (ys >= y0) & (ys < y1)
        img[np.ix_(rows, cols)] = np.asarray(color, dtype=np.float32)
    return img


def has_crossing(clip: SequenceClip) -> bool:
    """True if two tracks' centers come within a quarter of their summed widths."""
    for rows in clip.truth:
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                a, b = rows[i][1], rows[j][1]
                if math.hypot(a.cx - b.cx, a.cy - b.cy) < (a.w + b.w) / 4:
                    return True
    return False


# --- MOTChallenge text format ------------------------------------------------

def box_to_pixels(box, image_size: tuple[int, int]) -> tuple[float, float, float, float]:
    h, w = image_size
    cx, cy, bw, bh = (float(v) for v in (box.as_array() if isinstance(box, NormBox) else box))
    return (cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h


def pixels_to_box(left, top, width, height, image_size: tuple[int, int]) -> NormBox:
    h, w = image_size
    return NormBox((left + width / 2) / w, (top + height / 2) / h, width / w, height / h)


def format_mot(frames: Sequence[Sequence[tuple]], image_size: tuple[int, int]) -> str:
    lines = []
    for t, rows in enumerate(frames):
        for ident, box, conf in sorted(rows, key=lambda r: r[0]):
            if ident < 1:
                raise ValueError(f"identities must be positive, got {ident}")
            left, top, width, height = box_to_pixels(box, image_size)
            lines.append(MOT_LINE.format(frame=t + 1, ident=int(ident), left=left, top=top,
                                         width=width, height=height, conf=float(conf)))
    return "".join(line + "\n" for line in lines)


def write_mot(frames: Sequence[Sequence[tuple]], image_size: tuple[int, int],
              path: str | os.PathLike) -> Path:
    """Write per-frame ``(identity, box, confidence)`` rows; frame index 0 -> line frame 1."""
    path = Path(path)
    path.write_text(format_mot(frames, image_size))
    return path


def parse_mot(text: str, image_size: tuple[int, int],
              num_frames: int | None = None) -> list[list[tuple[int, NormBox, float]]]:
    rows: dict[int, list] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        try:
            if len(parts) < 7:
                raise ValueError(f"expected at least 7 fields, got {len(parts)}")
            frame, ident = int(float(parts[0])), int(float(parts[1]))
            left, top, width, height, conf = (float(p) for p in parts[2:7])
            if frame < 1 or ident < 1:
                raise ValueError("frame and identity must be positive")
            box = pixels_to_box(left, top, width, height, image_size)
        except ValueError as exc:
            raise MotParseError(f"line {lineno}: {exc}: {line!r}") from None
        rows.setdefault(frame - 1, []).append((ident, box, conf))
    total = max(rows, default=-1) + 1
    if num_frames is not None:
        total = max(total, num_frames)
    return [sorted(rows.get(t, []), key=lambda r: r[0]) for t in range(total)]


def read_mot(path: str | os.PathLike, image_size: tuple[int, int],
             num_frames: int | None = None) -> list[list[tuple[int, NormBox, float]]]:
    return parse_mot(Path(path).read_text(), image_size, num_frames)


def truth_as_mot_rows(clip: SequenceClip) -> list[list[tuple[int, NormBox, float]]]:
    return [[(ident, box, 1.0) for ident, box, _ in rows] for rows in clip.truth]


# --- dataset directories -----------------------------------------------------

def write_seqinfo(path: Path, info: dict):
    path.write_text("".join(f"{k}={v}\n" for k, v in info.items()))


def read_seqinfo(path: Path) -> dict[str, str]:
    info = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            info[key.strip()] = value.strip()
    return info


def save_sequence(clip: SequenceClip, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = clip.image_size
    write_mot(truth_as_mot_rows(clip), (h, w), directory / "gt.txt")
    write_seqinfo(directory / "seqinfo", {"name": clip.name, "length": clip.length,
                                          "width": w, "height": h, "seed": clip.seed})
    np.save(directory / "frames.npy", clip.frames)
    return directory


def load_sequence(directory: str | os.PathLike) -> SequenceClip:
    directory = Path(directory)
    info = read_seqinfo(directory / "seqinfo")
    h, w, length = int(info["height"]), int(info["width"]), int(info["length"])
    frames = np.load(directory / "frames.npy")
    rows = read_mot(directory / "gt.txt", (h, w), length)
    truth = [[(ident, box, 0) for ident, box, _ in r] for r in rows]
    return SequenceClip(frames, truth, [], info.get("name", directory.name),
                        int(info.get("seed", 0)))


def generate_dataset(config: SynthConfig, count: int, length: int,
                     seed: int | None = None) -> list[SequenceClip]:
    """``count`` sequences whose seeds derive deterministically from ``seed``."""
    base = config.seed if seed is None else seed
    seeds = np.random.SeedSequence(base).generate_state(count)
    return [generate_sequence(config, length, int(s), name=f"seq-{i:04d}")
            for i, s in enumerate(seeds)]


def save_dataset(clips: Sequence[SequenceClip], directory: str | os.PathLike,
                 config: SynthConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        save_sequence(clip, directory / clip.name)
    if config is not None:
        write_seqinfo(directory / "synth.cfg", asdict(config))
    return directory


def load_dataset(directory: str | os.PathLike) -> list[SequenceClip]:
    directory = Path(directory)
    seqs = sorted(p for p in directory.iterdir() if (p / "seqinfo").exists())
    if not seqs:
        raise FileNotFoundError(f"no sequences found under {directory}")
    return [load_sequence(p) for p in seqs]
