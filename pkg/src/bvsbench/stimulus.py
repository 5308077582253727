"""Procedural test stimuli and video ingest.

Everything here produces sequences of :class:`TargetFrame`: normalized
radiance maps (u in [0, 1]) on the sensor pixel grid, contiguous in time.
Procedural kinds are bit-reproducible; there is no randomness in this module.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError

__all__ = [
    "TargetFrame",
    "StimulusProgram",
    "generate",
    "load_video",
    "resample_area",
    "read_image",
    "read_bvsf",
    "write_bvsf",
    "DEFAULT_GRID",
]

# Default COP grid; AOP pixels cover 2x2 of these.
DEFAULT_GRID = (320, 160)

KINDS = ("Uniform", "Ramp", "Step", "RotatingPattern", "FlickerGrid", "Video")

# Knuth multiplicative hash, used to scatter FlickerGrid active pixels.
_HASH_MULT = 2654435761


@dataclass
class TargetFrame:
    """One normalized radiance map: u in [0,1] per pixel, row-major (height, width)."""

    width: int
    height: int
    radiance: np.ndarray
    t_start_ns: int
    duration_ns: int

    def validate(self) -> None:
        if self.radiance.shape != (self.height, self.width):
            raise ConfigError(
                f"radiance shape {self.radiance.shape} != (height, width)=({self.height}, {self.width})"
            )
        if self.duration_ns <= 0:
            raise ConfigError("frame duration_ns must be > 0")
        lo, hi = float(self.radiance.min()), float(self.radiance.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(f"radiance outside [0,1]: min={lo}, max={hi}")


@dataclass
class StimulusProgram:
    """A named stimulus kind plus its kind-specific parameters.

    parameters by kind:
      Uniform:         level
      Ramp:            start, stop          (linear in frame index, inclusive ends)
      Step:            level_before, level_after, step_after_frame
      RotatingPattern: omega_rad_s, spokes, u_low, u_high  (left half static,
                       right half rotates about its own center)
      FlickerGrid:     active_fraction, flicker_hz, u_low, u_high
      Video:           path, channel (optional: "R" | "G" | "B")
    """

    kind: str
    parameters: dict = field(default_factory=dict)
    width: int = DEFAULT_GRID[0]
    height: int = DEFAULT_GRID[1]
    frame_period_ns: int = 1_321_004
    t0_ns: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown stimulus kind {self.kind!r}; expected one of {KINDS}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("stimulus grid dimensions must be positive")
        if self.frame_period_ns <= 0:
            raise ConfigError("frame_period_ns must be > 0")
        p = self.parameters
        if self.kind == "FlickerGrid":
            frac = p.get("active_fraction", 1.0)
            if not 0.0 < frac <= 1.0:
                raise ConfigError("FlickerGrid active_fraction must lie in (0, 1]")
        for key in ("level", "start", "stop", "level_before", "level_after", "u_low", "u_high"):
            if key in p and not 0.0 <= p[key] <= 1.0:
                raise ConfigError(f"stimulus parameter {key}={p[key]} outside [0, 1]")


def _frame(program: StimulusProgram, index: int, radiance: np.ndarray) -> TargetFrame:
    f = TargetFrame(
        width=program.width,
        height=program.height,
        radiance=radiance,
        t_start_ns=program.t0_ns + index * program.frame_period_ns,
        duration_ns=program.frame_period_ns,
    )
    f.validate()
    return f


def _uniform(program: StimulusProgram, n_frames: int) -> list[TargetFrame]:
    level = float(program.parameters.get("level", 0.5))
    base = np.full((program.height, program.width), level, dtype=np.float64)
    return [_frame(program, k, base.copy()) for k in range(n_frames)]


def _ramp(program: StimulusProgram, n_frames: int) -> list[TargetFrame]:
    start = float(program.parameters.get("start", 0.0))
    stop = float(program.parameters.get("stop", 1.0))
    if n_frames == 1:
        levels = [start]
    else:
        levels = [start + (stop - start) * k / (n_frames - 1) for k in range(n_frames)]
    return [
        _frame(program, k, np.full((program.height, program.width), lv, dtype=np.float64))
        for k, lv in enumerate(levels)
    ]


def _step(program: StimulusProgram, n_frames: int) -> list[TargetFrame]:
    p = program.parameters
    before = float(p.get("level_before", 0.2))
    after = float(p.get("level_after", 0.8))
    k_step = int(p.get("step_after_frame", 0))
    frames = []
    for k in range(n_frames):
        lv = before if k <= k_step else after
        frames.append(_frame(program, k, np.full((program.height, program.width), lv, dtype=np.float64)))
    return frames


def spoke_pattern(size: int, spokes: int, u_low: float, u_high: float) -> np.ndarray:
    """Square pinwheel inside the inscribed circle; background u_low outside.

    Angular squares of alternating u_low/u_high; deterministic and exactly
    reproducible under the nearest-neighbor rotation used below.
    """
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - c
    dy = yy - c
    r2 = dx * dx + dy * dy
    ang = np.arctan2(dy, dx)  # [-pi, pi]
    sector = np.floor((ang + math.pi) * spokes / math.pi).astype(np.int64)
    pat = np.where(sector % 2 == 0, u_high, u_low)
    radius = size / 2.0 - 1.0
    return np.where(r2 <= radius * radius, pat, u_low)


def rotate_nearest(image: np.ndarray, angle_rad: float, fill: float) -> np.ndarray:
    """Rotate about the raster center with nearest-neighbor sampling.

    Destination pixel (x, y) reads source at center + R(-angle) . (p - center),
    rounded via floor(v + 0.5); out-of-bounds sources read `fill`.
    """
    h, w = image.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    ca = math.cos(angle_rad)
    sa = math.sin(angle_rad)
    dx = xx - cx
    dy = yy - cy
    sx = np.floor(cx + ca * dx + sa * dy + 0.5).astype(np.int64)
    sy = np.floor(cy - sa * dx + ca * dy + 0.5).astype(np.int64)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.full_like(image, fill)
    out[inside] = image[sy[inside], sx[inside]]
    return out


def _rotating(program: StimulusProgram, n_frames: int) -> list[TargetFrame]:
    p = program.parameters
    omega = float(p.get("omega_rad_s", 2.0 * math.pi))
    spokes = int(p.get("spokes", 8))
    u_low = float(p.get("u_low", 0.0))
    u_high = float(p.get("u_high", 1.0))
    w, h = program.width, program.height
    if w % 2 != 0:
        raise ConfigError("RotatingPattern grid width must be even (static left / rotating right)")
    half = w // 2
    size = min(half, h)
    base = spoke_pattern(size, spokes, u_low, u_high)

    def paste(canvas: np.ndarray, tile: np.ndarray, x0: int) -> None:
        y0 = (h - size) // 2
        xo = x0 + (half - size) // 2
        canvas[y0 : y0 + size, xo : xo + size] = tile

    period_s = program.frame_period_ns * 1e-9
    frames = []
    for k in range(n_frames):
        canvas = np.full((h, w), u_low, dtype=np.float64)
        paste(canvas, base, 0)
        angle = omega * k * period_s
        paste(canvas, rotate_nearest(base, angle, u_low), half)
        frames.append(_frame(program, k, canvas))
    return frames


def flicker_active_mask(width: int, height: int, fraction: float) -> np.ndarray:
    """Deterministic scattered subset of pixels with the given active fraction."""
    idx = np.arange(width * height, dtype=np.uint64)
    scattered = (idx * np.uint64(_HASH_MULT)) % np.uint64(2**32)
    mask = scattered < np.uint64(int(fraction * 2**32))
    return mask.reshape(height, width)


def _flicker(program: StimulusProgram, n_frames: int) -> list[TargetFrame]:
    p = program.parameters
    fraction = float(p.get("active_fraction", 0.5))
    freq = float(p.get("flicker_hz", 100.0))
    u_low = float(p.get("u_low", 0.1))
    u_high = float(p.get("u_high", 0.9))
    mask = flicker_active_mask(program.width, program.height, fraction)
    period_s = program.frame_period_ns * 1e-9
    frames = []
    for k in range(n_frames):
        # Square wave sampled at the frame start; inactive pixels hold u_low.
        phase = int(math.floor(2.0 * freq * k * period_s))
        hi = phase % 2 == 0
        canvas = np.full((program.height, program.width), u_low, dtype=np.float64)
        canvas[mask] = u_high if hi else u_low
        frames.append(_frame(program, k, canvas))
    return frames


def generate(program: StimulusProgram, n_frames: int) -> list[TargetFrame]:
    """Render `n_frames` frames of the program; deterministic for procedural kinds."""
    program.validate()
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    if program.kind == "Uniform":
        return _uniform(program, n_frames)
    if program.kind == "Ramp":
        return _ramp(program, n_frames)
    if program.kind == "Step":
        return _step(program, n_frames)
    if program.kind == "RotatingPattern":
        return _rotating(program, n_frames)
    if program.kind == "FlickerGrid":
        return _flicker(program, n_frames)
    if program.kind == "Video":
        frames = load_video(
            program.parameters["path"],
            (program.width, program.height),
            channel=program.parameters.get("channel"),
            frame_period_ns=program.frame_period_ns,
            t0_ns=program.t0_ns,
        )
        if len(frames) < n_frames:
            raise ConfigError(f"video provides {len(frames)} frames, {n_frames} requested")
        return frames[:n_frames]
    raise ConfigError(f"unknown stimulus kind {program.kind!r}")


# --------------------------------------------------------------------------
# video / image ingest
# --------------------------------------------------------------------------

def resample_area(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Exact area-average resampling to (out_h, out_w).

    Each output pixel averages the source rectangle it covers, weighting
    partially-covered source pixels by overlap. Identity for same-size grids.
    """
    if out_w <= 0 or out_h <= 0:
        raise ConfigError("resample target dimensions must be positive")
    h, w = image.shape
    if (w, h) == (out_w, out_h):
        return image.astype(np.float64, copy=True)

    def axis_weights(n_src: int, n_dst: int) -> np.ndarray:
        # weights[d, s] = overlap of dst cell d with src cell s, normalized.
        scale = n_src / n_dst
        wts = np.zeros((n_dst, n_src), dtype=np.float64)
        for d in range(n_dst):
            a = d * scale
            b = (d + 1) * scale
            s0 = int(math.floor(a))
            s1 = min(int(math.ceil(b)), n_src)
            for s in range(s0, s1):
                wts[d, s] = min(b, s + 1) - max(a, s)
        return wts / scale

    wy = axis_weights(h, out_h)
    wx = axis_weights(w, out_w)
    return wy @ image.astype(np.float64) @ wx.T


_PNM_MAGIC = {b"P5": 1, b"P6": 3}


def _read_pnm(path: Path) -> tuple[np.ndarray, int]:
    """Binary PGM (P5) / PPM (P6) reader. Returns (array, maxval); array is
    (h, w) for graymaps and (h, w, 3) for pixmaps."""
    data = path.read_bytes()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while True:
            while pos < len(data) and data[pos : pos + 1].isspace():
                pos += 1
            if pos < len(data) and data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        return data[start:pos]

    magic = token()
    if magic not in _PNM_MAGIC:
        raise FormatError(f"{path}: unsupported magic {magic!r} (binary P5/P6 only)")
    channels = _PNM_MAGIC[magic]
    w = int(token())
    h = int(token())
    maxval = int(token())
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: zero dimension")
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: maxval {maxval} out of range")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    if len(data) - pos < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return raw.reshape(shape).astype(np.float64), maxval


def read_image(path: str | Path, channel: str | None = None) -> np.ndarray:
    """Read one PGM/PPM image as normalized radiance in [0, 1].

    Color images reduce to luma (R+G+B)/3 unless `channel` selects one plane.
    """
    arr, maxval = _read_pnm(Path(path))
    arr = arr / float(maxval)
    if arr.ndim == 2:
        if channel is not None:
            raise ConfigError(f"channel={channel!r} requested from a graymap")
        return arr
    if channel is None:
        return arr.mean(axis=2)
    try:
        ci = {"R": 0, "G": 1, "B": 2}[channel.upper()]
    except KeyError:
        raise ConfigError(f"channel must be R, G or B, got {channel!r}") from None
    return arr[:, :, ci]


BVSF_MAGIC = b"BVSF"
_BVSF_HEADER = struct.Struct("<4sIII")


def write_bvsf(path: str | Path, frames: np.ndarray) -> None:
    """Write frames (n, h, w) of u in [0,1] as the raw container (u16, 65535 <-> 1)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ConfigError("expected (n_frames, height, width)")
    n, h, w = frames.shape
    scaled = np.floor(np.clip(frames, 0.0, 1.0) * 65535.0 + 0.5).astype("<u2")
    with open(path, "wb") as fh:
        fh.write(_BVSF_HEADER.pack(BVSF_MAGIC, w, h, n))
        fh.write(scaled.tobytes())


def read_bvsf(path: str | Path) -> np.ndarray:
    """Read the raw container back into (n, h, w) float64 radiance."""
    data = Path(path).read_bytes()
    if len(data) < _BVSF_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h, n = _BVSF_HEADER.unpack_from(data)
    if magic != BVSF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if w == 0 or h == 0:
        raise FormatError(f"{path}: zero dimension")
    count = n * h * w
    if len(data) - _BVSF_HEADER.size < count * 2:
        raise FormatError(f"{path}: truncated payload")
    raw = np.frombuffer(data, dtype="<u2", count=count, offset=_BVSF_HEADER.size)
    return raw.reshape(n, h, w).astype(np.float64) / 65535.0


_SUFFIX_RE = re.compile(r"(\d+)\.(pgm|ppm)$", re.IGNORECASE)


def _sequence_paths(path: Path) -> list[Path]:
    """Resolve a numbered PGM/PPM sequence from one member or a directory."""
    if path.is_dir():
        members = sorted(p for p in path.iterdir() if _SUFFIX_RE.search(p.name))
        if not members:
            raise FormatError(f"{path}: no numbered .pgm/.ppm members")
        return members
    m = _SUFFIX_RE.search(path.name)
    if not m:
        return [path]
    stem = path.name[: m.start(1)]
    suffix = m.group(2)
    pattern = re.compile(re.escape(stem) + r"(\d+)\." + re.escape(suffix) + "$")
    members = sorted(p for p in path.parent.iterdir() if pattern.match(p.name))
    return members or [path]


def load_video(
    path: str | Path,
    grid: tuple[int, int],
    channel: str | None = None,
    frame_period_ns: int = 1_321_004,
    t0_ns: int = 0,
) -> list[TargetFrame]:
    """Load a graymap/pixmap sequence or a BVSF container as TargetFrames.

    Frames are area-average resampled to `grid` = (width, height).
    """
    w, h = grid
    if w <= 0 or h <= 0:
        raise ConfigError("target grid dimensions must be positive")
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")

    images: list[np.ndarray]
    if path.is_file() and path.suffix.lower() not in (".pgm", ".ppm"):
        head = path.open("rb").read(4)
        if head == BVSF_MAGIC:
            if channel is not None:
                raise ConfigError("BVSF containers are single-channel; channel selection not applicable")
            images = list(read_bvsf(path))
        else:
            raise FormatError(f"{path}: unrecognized container (magic {head!r})")
    else:
        images = [read_image(p, channel=channel) for p in _sequence_paths(path)]

    frames = []
    for k, img in enumerate(images):
        frames.append(
            TargetFrame(
                width=w,
                height=h,
                radiance=np.clip(resample_area(img, w, h), 0.0, 1.0),
                t_start_ns=t0_ns + k * frame_period_ns,
                duration_ns=frame_period_ns,
            )
        )
    for f in frames:
        f.validate()
    return frames
