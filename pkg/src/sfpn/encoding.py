"""Dense signed frame stacks from event streams (time- and count-based stacking)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientDataError, ParseError
from .event_io import EventStream

SBT = "SBT"
SBE = "SBE"


@dataclass
class EncoderConfig:
    mode: str = SBT
    delta_t: int = 60_000
    frames_per_stack: int = 3
    stacks: int = 3
    events_per_frame: int = 5000
    geometry: tuple[int, int] = (64, 64)  # (H, W)

    def validate(self):
        if self.mode not in (SBT, SBE):
            raise ConfigError(f"unknown encoding mode {self.mode!r}")
        if self.frames_per_stack < 1 or self.stacks < 1:
            raise ConfigError("frames_per_stack and stacks must be >= 1")
        if self.mode == SBT and (self.delta_t <= 0 or self.delta_t % self.frames_per_stack):
            raise ConfigError(
                f"delta_t={self.delta_t} must be a positive multiple of frames_per_stack={self.frames_per_stack}"
            )
        if self.mode == SBE and self.events_per_frame < 1:
            raise ConfigError("events_per_frame must be >= 1")
        return self

    @property
    def frame_window(self) -> int:
        return self.delta_t // self.frames_per_stack

    @property
    def history(self) -> int:
        """Microseconds of history an SBT stack consumes before its label."""
        return self.stacks * self.delta_t


@dataclass
class FrameStack:
    data: np.ndarray  # int8, (S, C, H, W), values in {-1, 0, 1}
    t_end: int

    @property
    def shape(self):
        return self.data.shape


def _accumulate(n_frames, H, W, frame_idx, x, y, p) -> np.ndarray:
    acc = np.zeros(n_frames * H * W, dtype=np.int64)
    np.add.at(acc, (frame_idx * H + y) * W + x, p)
    return np.sign(acc).astype(np.int8).reshape(n_frames, H, W)


def _check_geometry(stream: EventStream, H: int, W: int):
    if stream.geometry != (W, H):
        raise ConfigError(f"stream geometry {stream.geometry} (w, h) does not match encoder (H, W)=({H}, {W})")


def encode_sbt(stream: EventStream, t_label: int, config: EncoderConfig) -> FrameStack:
    """Sign of summed polarity per pixel over S*C equal windows tiling
    ``[t_label - S*delta_t, t_label)``, oldest window first."""
    cfg = config.validate()
    if cfg.mode != SBT:
        raise ConfigError("encode_sbt requires mode SBT")
    H, W = cfg.geometry
    _check_geometry(stream, H, W)
    if t_label < cfg.history:
        raise InsufficientDataError(
            f"t_label={t_label} has too little history; earliest admissible t_label is {cfg.history}"
        )
    start = t_label - cfg.history
    lo, hi = np.searchsorted(stream.t, [start, t_label], side="left")
    t = stream.t[lo:hi]
    frame_idx = (t - start) // cfg.frame_window
    n_frames = cfg.stacks * cfg.frames_per_stack
    data = _accumulate(n_frames, H, W, frame_idx, stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi])
    return FrameStack(data.reshape(cfg.stacks, cfg.frames_per_stack, H, W), t_label - 1)


def encode_sbe(stream: EventStream, t_label: int, config: EncoderConfig) -> FrameStack:
    """Frames of exactly ``events_per_frame`` events, grouped backward from ``t_label``
    so the most recent group lands in the last frame."""
    cfg = config.validate()
    if cfg.mode != SBE:
        raise ConfigError("encode_sbe requires mode SBE")
    H, W = cfg.geometry
    _check_geometry(stream, H, W)
    n_frames = cfg.stacks * cfg.frames_per_stack
    need = n_frames * cfg.events_per_frame
    end = int(np.searchsorted(stream.t, t_label, side="left"))
    if end < need:
        raise InsufficientDataError(f"SBE needs {need} events before t_label={t_label}, only {end} available")
    sl = slice(end - need, end)
    frame_idx = np.arange(need) // cfg.events_per_frame
    data = _accumulate(n_frames, H, W, frame_idx, stream.x[sl], stream.y[sl], stream.p[sl])
    return FrameStack(data.reshape(cfg.stacks, cfg.frames_per_stack, H, W), t_label - 1)


def encode(stream: EventStream, t_label: int, config: EncoderConfig) -> FrameStack:
    if config.mode == SBE:
        return encode_sbe(stream, t_label, config)
    return encode_sbt(stream, t_label, config)


def stack_sparsity(stack: FrameStack) -> float:
    """Fraction of non-zero elements (event density of the stack)."""
    data = stack.data if isinstance(stack, FrameStack) else np.asarray(stack)
    if data.size == 0:
        return 0.0
    return float(np.count_nonzero(data)) / data.size


STACK_MAGIC = b"STK1"


def save_stack(stack: FrameStack, path) -> None:
    """``STK1`` | u32 S, C, H, W (little-endian) | int8 values, row-major."""
    data = np.ascontiguousarray(stack.data if isinstance(stack, FrameStack) else stack, dtype=np.int8)
    if data.ndim != 4:
        raise ConfigError(f"stack must be 4-d (S, C, H, W), got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(np.asarray(data.shape, dtype="<u4").tobytes())
        fh.write(data.tobytes())


def load_stack(path) -> np.ndarray:
    raw = open(path, "rb").read()
    if raw[:4] != STACK_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}, expected {STACK_MAGIC!r}")
    if len(raw) < 20:
        raise ParseError(f"{path}: truncated header")
    shape = tuple(int(v) for v in np.frombuffer(raw, dtype="<u4", count=4, offset=4))
    n = int(np.prod(shape))
    if len(raw) != 20 + n:
        raise ParseError(f"{path}: expected {n} data bytes for shape {shape}, found {len(raw) - 20}")
    return np.frombuffer(raw, dtype=np.int8, offset=20).reshape(shape).copy()
