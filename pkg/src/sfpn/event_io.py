"""Event streams, box labels, their on-disk formats, and a synthetic scene generator.

Events are kept column-wise in numpy arrays; polarity is signed (+1/-1) in
memory and {0, 1} on disk.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

log = logging.getLogger(__name__)

EVENT_HEADER = ["t_us", "x", "y", "p"]
LABEL_HEADER = ["t_us", "class_id", "x", "y", "w", "h"]
BINARY_MAGIC = b"EVT1"
BINARY_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Time-ordered events for a sensor of ``geometry = (width, height)``."""

    geometry: tuple[int, int]
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.geometry = (int(self.geometry[0]), int(self.geometry[1]))
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValidationError("event column lengths differ")

    @classmethod
    def empty(cls, geometry):
        z = np.zeros(0)
        return cls(geometry, z, z, z, z)

    @classmethod
    def from_events(cls, geometry, events: Sequence[Event]):
        if not events:
            return cls.empty(geometry)
        arr = np.asarray(events, dtype=np.int64).reshape(-1, 4)
        return cls(geometry, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @property
    def events(self) -> list[Event]:
        return list(self)

    def sorted(self) -> "EventStream":
        order = np.argsort(self.t, kind="stable")
        return EventStream(self.geometry, self.t[order], self.x[order], self.y[order], self.p[order])

    def negated(self) -> "EventStream":
        return EventStream(self.geometry, self.t, self.x, self.y, -self.p)

    def validate(self):
        w, h = self.geometry
        if len(self) == 0:
            return self
        if np.any(self.t < 0):
            raise ValidationError("negative timestamp")
        if not np.all(np.isin(self.p, (-1, 1))):
            raise ValidationError("polarity must be +1 or -1")
        bad = (self.x < 0) | (self.x >= w) | (self.y < 0) | (self.y >= h)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside geometry {w}x{h}"
            )
        if np.any(np.diff(self.t) < 0):
            raise ValidationError("events are not sorted by timestamp")
        return self

    def equals(self, other: "EventStream") -> bool:
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class GtBox:
    """Ground-truth box; ``x, y`` is the top-left corner, sizes in pixels."""

    t: int
    class_id: int
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float, float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2, self.w, self.h)


# -- event files -------------------------------------------------------------


def _is_binary(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == BINARY_MAGIC


def load_events(path, geometry) -> EventStream:
    """Read a CSV or packed-binary event file into a sorted, validated stream."""
    path = Path(path)
    if _is_binary(path):
        stream = _load_events_binary(path, geometry)
    else:
        stream = _load_events_csv(path, geometry)
    return stream.sorted().validate()


def _load_events_csv(path: Path, geometry) -> EventStream:
    cols: list[list[int]] = [[], [], [], []]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return EventStream.empty(geometry)
        if [c.strip() for c in header] != EVENT_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(EVENT_HEADER)}, got {header}")
        for row in reader:
            if not row:
                continue
            lineno = reader.line_num
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                t, x, y, p = (int(v) for v in row)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if p not in (0, 1):
                raise ParseError(f"{path}:{lineno}: polarity must be 0 or 1, got {p}")
            if t < 0 or x < 0 or y < 0:
                raise ParseError(f"{path}:{lineno}: negative field")
            cols[0].append(t)
            cols[1].append(x)
            cols[2].append(y)
            cols[3].append(1 if p == 1 else -1)
    return EventStream(geometry, *cols)


def _load_events_binary(path: Path, geometry) -> EventStream:
    raw = path.read_bytes()[len(BINARY_MAGIC):]
    rem = len(raw) % BINARY_DTYPE.itemsize
    if rem:
        offset = len(BINARY_MAGIC) + len(raw) - rem
        raise ParseError(f"{path}: truncated record at byte offset {offset}")
    rec = np.frombuffer(raw, dtype=BINARY_DTYPE)
    bad = np.flatnonzero(rec["p"] > 1)
    if bad.size:
        offset = len(BINARY_MAGIC) + int(bad[0]) * BINARY_DTYPE.itemsize
        raise ParseError(f"{path}: polarity must be 0 or 1 at byte offset {offset}")
    p = np.where(rec["p"] == 1, 1, -1)
    return EventStream(geometry, rec["t"], rec["x"], rec["y"], p)


def save_events(stream: EventStream, path, binary: bool = False) -> None:
    path = Path(path)
    disk_p = (stream.p > 0).astype(np.uint8)
    if binary:
        if len(stream) and (stream.t.max() > 0xFFFFFFFF or max(stream.geometry) > 0xFFFF):
            raise ValidationError("stream exceeds the packed binary field ranges")
        rec = np.empty(len(stream), dtype=BINARY_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, disk_p
        path.write_bytes(BINARY_MAGIC + rec.tobytes())
        return
    with open(path, "w", newline="") as fh:
        fh.write(",".join(EVENT_HEADER) + "\n")
        rows = np.stack([stream.t, stream.x, stream.y, disk_p], axis=1) if len(stream) else []
        fh.writelines(f"{t},{x},{y},{p}\n" for t, x, y, p in rows)


# -- label files -------------------------------------------------------------


def load_labels(path, geometry=None) -> list[GtBox]:
    """Read a label CSV; boxes are clamped to ``geometry = (width, height)`` if given."""
    path = Path(path)
    boxes = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [c.strip() for c in header] != LABEL_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(LABEL_HEADER)}, got {header}")
        for row in reader:
            if not row:
                continue
            lineno = reader.line_num
            if len(row) != 6:
                raise ParseError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                t, cls = int(row[0]), int(row[1])
                x, y, w, h = (float(v) for v in row[2:])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if w <= 0 or h <= 0:
                raise ValidationError(f"{path}:{lineno}: box size must be positive, got w={w} h={h}")
            if cls < 0:
                raise ValidationError(f"{path}:{lineno}: negative class id")
            box = GtBox(t, cls, x, y, w, h)
            if geometry is not None:
                box = clamp_box(box, geometry, where=f"{path}:{lineno}")
            boxes.append(box)
    return boxes


def clamp_box(box: GtBox, geometry, where: str = "") -> GtBox:
    width, height = geometry
    x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
    x1, y1 = min(box.x + box.w, float(width)), min(box.y + box.h, float(height))
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"{where}: box lies outside the {width}x{height} sensor")
    if (x0, y0, x1, y1) != (box.x, box.y, box.x + box.w, box.y + box.h):
        log.warning("%s: box clamped to sensor geometry", where or "label")
        return GtBox(box.t, box.class_id, x0, y0, x1 - x0, y1 - y0)
    return box


def save_labels(boxes: Sequence[GtBox], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(LABEL_HEADER) + "\n")
        for b in boxes:
            fh.write(f"{b.t},{b.class_id},{b.x!r},{b.y!r},{b.w!r},{b.h!r}\n")


def group_by_time(boxes: Sequence[GtBox]) -> dict[int, list[GtBox]]:
    """Map label timestamp to its boxes, keeping file order (duplicates retained)."""
    out: dict[int, list[GtBox]] = defaultdict(list)
    for b in boxes:
        out[b.t].append(b)
    return dict(out)


# -- synthetic scenes --------------------------------------------------------


@dataclass
class SceneConfig:
    """Moving bright rectangles on a dark background seen by an ideal DVS.

    ``edge_event_rate`` is the expected number of events a pixel emits per unit
    change of its covered fraction; ``noise_rate`` is background activity in
    events per pixel per second.
    """

    width: int = 64
    height: int = 64
    duration_us: int = 420_000
    num_objects: int = 2
    speed_range: tuple[float, float] = (60.0, 160.0)
    heading_range_deg: tuple[float, float] = (0.0, 360.0)
    edge_event_rate: float = 1.5
    noise_rate: float = 0.5
    label_interval_us: int = 60_000
    time_step_us: int = 1_000
    pedestrian_fraction: float = 0.5
    car_size: tuple[float, float, float, float] = (14.0, 24.0, 8.0, 14.0)
    pedestrian_size: tuple[float, float, float, float] = (4.0, 8.0, 9.0, 16.0)

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("scene geometry must be positive")
        if self.duration_us <= 0:
            raise ConfigError("scene duration must be positive (empty stream)")
        if self.num_objects < 0 or self.noise_rate < 0 or self.edge_event_rate < 0:
            raise ConfigError("object count and rates must be non-negative")
        if self.num_objects == 0 and self.noise_rate == 0:
            raise ConfigError("degenerate scene: zero objects and zero noise")
        if self.time_step_us <= 0 or self.label_interval_us % self.time_step_us:
            raise ConfigError("label_interval_us must be a positive multiple of time_step_us")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad speed range {self.speed_range}")
        for name in ("car_size", "pedestrian_size"):
            w0, w1, h0, h1 = getattr(self, name)
            if not (0 < w0 <= w1 < self.width and 0 < h0 <= h1 < self.height):
                raise ConfigError(f"{name} does not fit the sensor")
        return self


@dataclass
class _Mover:
    class_id: int
    x: float
    y: float
    w: float
    h: float
    vx: float
    vy: float
    trail: list = field(default_factory=list)

    def advance(self, dt_s: float, width: int, height: int):
        self.x += self.vx * dt_s
        self.y += self.vy * dt_s
        if self.x < 0:
            self.x, self.vx = -self.x, -self.vx
        elif self.x + self.w > width:
            self.x, self.vx = 2 * (width - self.w) - self.x, -self.vx
        if self.y < 0:
            self.y, self.vy = -self.y, -self.vy
        elif self.y + self.h > height:
            self.y, self.vy = 2 * (height - self.h) - self.y, -self.vy


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    cells = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, 1.0)


def render_coverage(objects, width: int, height: int) -> np.ndarray:
    """Fraction of each pixel covered by the brightest object (max over objects)."""
    img = np.zeros((height, width))
    for o in objects:
        cov = np.outer(_coverage_1d(o.y, o.y + o.h, height), _coverage_1d(o.x, o.x + o.w, width))
        np.maximum(img, cov, out=img)
    return img


def _spawn(rng: np.random.Generator, cfg: SceneConfig) -> _Mover:
    ped = rng.random() < cfg.pedestrian_fraction
    w0, w1, h0, h1 = cfg.pedestrian_size if ped else cfg.car_size
    w = round(float(rng.uniform(w0, w1)), 2)
    h = round(float(rng.uniform(h0, h1)), 2)
    x = float(rng.uniform(0, cfg.width - w))
    y = float(rng.uniform(0, cfg.height - h))
    speed = float(rng.uniform(*cfg.speed_range))
    heading = math.radians(float(rng.uniform(*cfg.heading_range_deg)))
    return _Mover(1 if ped else 0, x, y, w, h, speed * math.cos(heading), speed * math.sin(heading))


def synthesize_scene(seed: int, config: SceneConfig) -> tuple[EventStream, list[GtBox]]:
    """Simulate a DVS watching rectangles that bounce around the sensor.

    Each time step the per-pixel coverage change drives a Poisson number of
    events whose polarity is the sign of the change, so a bright object moving
    right fires ON events on its leading edge and OFF events on its trailing
    edge.  Labels are emitted every ``label_interval_us`` for every object.
    """
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    W, H = cfg.width, cfg.height
    objects = [_spawn(rng, cfg) for _ in range(cfg.num_objects)]
    dt_s = cfg.time_step_us * 1e-6
    n_steps = cfg.duration_us // cfg.time_step_us
    label_every = cfg.label_interval_us // cfg.time_step_us

    chunks = []
    boxes: list[GtBox] = []
    prev = render_coverage(objects, W, H)
    for step in range(1, n_steps + 1):
        t0 = (step - 1) * cfg.time_step_us
        for o in objects:
            o.advance(dt_s, W, H)
        cur = render_coverage(objects, W, H)
        delta = cur - prev
        prev = cur
        ys, xs = np.nonzero(delta)
        if ys.size and cfg.edge_event_rate > 0:
            d = delta[ys, xs]
            counts = rng.poisson(cfg.edge_event_rate * np.abs(d))
            keep = counts > 0
            if keep.any():
                ys, xs, d, counts = ys[keep], xs[keep], d[keep], counts[keep]
                ev_y = np.repeat(ys, counts)
                ev_x = np.repeat(xs, counts)
                ev_p = np.repeat(np.sign(d), counts).astype(np.int8)
                ev_t = t0 + rng.integers(0, cfg.time_step_us, size=ev_y.size)
                chunks.append((ev_t, ev_x, ev_y, ev_p))
        if step % label_every == 0:
            t = step * cfg.time_step_us
            for o in objects:
                box = GtBox(t, o.class_id, math.floor(o.x * 100) / 100, math.floor(o.y * 100) / 100, o.w, o.h)
                boxes.append(clamp_box(box, (W, H), where="synthesize_scene"))

    n_noise = rng.poisson(cfg.noise_rate * W * H * cfg.duration_us * 1e-6)
    if n_noise:
        chunks.append((
            rng.integers(0, n_steps * cfg.time_step_us, size=n_noise),
            rng.integers(0, W, size=n_noise),
            rng.integers(0, H, size=n_noise),
            np.where(rng.random(n_noise) < 0.5, 1, -1).astype(np.int8),
        ))
    if chunks:
        t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
        stream = EventStream((W, H), t, x, y, p).sorted()
    else:
        stream = EventStream.empty((W, H))
    return stream.validate(), boxes
