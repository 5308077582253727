"""Spatiotemporal binary-plane encoder.

Grayscale target frames are compiled into packed micromirror planes: each
sensor pixel owns a k x k mirror block, and its radiance u becomes
c = round(u * M * k^2) on-slots spread evenly over the M planes of one
high-rate frame interval (Bresenham split in time, ordered dither in space).
Levels achievable: M * k^2 + 1.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, FormatError, GeometryError
from .stimulus import TargetFrame

__all__ = [
    "BlockMapping",
    "TimingConfig",
    "DitherPolicy",
    "PlaneStream",
    "bayer_matrix",
    "quantize_duty",
    "bresenham_split",
    "schedule_block",
    "build_schedule_lut",
    "encode_sequence",
    "decode_reference",
    "write_dmds",
    "read_dmds",
]


def bayer_matrix(side: int) -> np.ndarray:
    """Classic recursive ordered-dither threshold matrix (permutation of 0..side^2-1)."""
    if side < 1 or side & (side - 1):
        raise ConfigError(f"dither matrix side must be a power of two, got {side}")
    m = np.array([[0]], dtype=np.int64)
    while m.shape[0] < side:
        m = np.block([[4 * m, 4 * m + 2], [4 * m + 3, 4 * m + 1]])
    return m


@dataclass
class BlockMapping:
    """Sensor-pixel to mirror-block geometry.

    The affine is axis-aligned: mirror = k_cop * pixel + (offset_x, offset_y).
    One AOP pixel (8 um pitch) covers the 2x2 neighborhood of COP pixels
    (4 um pitch), hence k_aop = 2 * k_cop.
    """

    k_cop: int = 4
    k_aop: int = 8
    dmd_width: int = 2560
    dmd_height: int = 1440
    offset_x: int = 0
    offset_y: int = 0

    @classmethod
    def centered(cls, grid_w: int, grid_h: int, k_cop: int = 4,
                 dmd_width: int = 2560, dmd_height: int = 1440) -> "BlockMapping":
        """Mapping that centers the grid_w x grid_h pixel raster on the DMD."""
        return cls(
            k_cop=k_cop,
            k_aop=2 * k_cop,
            dmd_width=dmd_width,
            dmd_height=dmd_height,
            offset_x=(dmd_width - grid_w * k_cop) // 2,
            offset_y=(dmd_height - grid_h * k_cop) // 2,
        )

    @property
    def affine(self) -> np.ndarray:
        """2x3 sensor-to-mirror transform in mirror units per pixel."""
        return np.array(
            [[self.k_cop, 0.0, self.offset_x], [0.0, self.k_cop, self.offset_y]],
            dtype=np.float64,
        )

    def validate(self) -> None:
        if self.k_cop < 1:
            raise ConfigError("k_cop must be >= 1")
        if self.k_aop != 2 * self.k_cop:
            raise ConfigError(
                f"k_aop must equal 2 * k_cop (AOP pixels cover 2x2 COP pixels); "
                f"got k_aop={self.k_aop}, k_cop={self.k_cop}"
            )
        if self.dmd_width < 1 or self.dmd_height < 1:
            raise ConfigError("DMD extent must be positive")
        if self.offset_x < 0 or self.offset_y < 0:
            raise ConfigError("mapping offsets must be non-negative")

    def check_grid(self, width: int, height: int) -> None:
        """Every mapped block must lie within the DMD extent."""
        self.validate()
        k = self.k_cop
        if self.offset_x + width * k > self.dmd_width or self.offset_y + height * k > self.dmd_height:
            raise GeometryError(
                f"{width}x{height} pixel grid with {k}x{k} blocks at offset "
                f"({self.offset_x},{self.offset_y}) exceeds DMD {self.dmd_width}x{self.dmd_height}"
            )


@dataclass
class TimingConfig:
    """Plane/frame clocking. 757 FPS mode: 25 high-rate (AOP) frames per COP frame."""

    plane_period_ns: int = 31_250
    aop_frame_period_ns: int = 1_321_004
    cop_ratio: int = 25
    trigger_offset_ns: int = 0

    @property
    def planes_per_aop_frame(self) -> int:
        return self.aop_frame_period_ns // self.plane_period_ns

    def validate(self) -> None:
        if self.plane_period_ns <= 0 or self.aop_frame_period_ns <= 0:
            raise ConfigError("plane and frame periods must be positive")
        m = self.planes_per_aop_frame
        if m < 1:
            raise ConfigError("aop_frame_period_ns must cover at least one plane period")
        if self.cop_ratio < 1:
            raise ConfigError("cop_ratio must be >= 1")
        if self.aop_frame_period_ns < m * self.plane_period_ns:
            raise ConfigError("aop_frame_period_ns shorter than its plane block")


@dataclass
class DitherPolicy:
    """Spatial ordered-dither matrix; temporal spread is the fixed Bresenham split
    with a per-plane threshold rotation of (m * k^2 / gcd(M, k^2)) mod k^2."""

    threshold: np.ndarray = field(default_factory=lambda: bayer_matrix(4))

    @classmethod
    def for_side(cls, k: int) -> "DitherPolicy":
        return cls(threshold=bayer_matrix(k))

    @property
    def side(self) -> int:
        return int(self.threshold.shape[0])

    def validate(self) -> None:
        t = np.asarray(self.threshold)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ConfigError("threshold matrix must be square")
        k2 = t.shape[0] * t.shape[1]
        if sorted(t.ravel().tolist()) != list(range(k2)):
            raise ConfigError("threshold matrix must be a permutation of 0..k^2-1")


@dataclass
class PlaneStream:
    """Time-ordered packed binary planes: 1 bit per mirror, MSB-first within a
    byte, rows padded to byte boundary."""

    dmd_width: int
    dmd_height: int
    plane_period_ns: int
    planes: np.ndarray  # (n_planes, dmd_height, row_stride) uint8
    t0_ns: int = 0

    @property
    def n_planes(self) -> int:
        return int(self.planes.shape[0])

    @property
    def row_stride(self) -> int:
        return (self.dmd_width + 7) // 8

    def validate(self) -> None:
        if self.planes.dtype != np.uint8 or self.planes.ndim != 3:
            raise GeometryError("planes must be a (n, height, stride) uint8 array")
        n, h, s = self.planes.shape
        if h != self.dmd_height or s != self.row_stride:
            raise GeometryError(
                f"plane geometry ({h}, {s}) does not match DMD "
                f"{self.dmd_width}x{self.dmd_height} (stride {self.row_stride})"
            )

    def unpack_plane(self, index: int) -> np.ndarray:
        """One plane as a (height, width) uint8 0/1 image."""
        bits = np.unpackbits(self.planes[index], axis=1)
        return bits[:, : self.dmd_width]


def quantize_duty(u: float | np.ndarray, m_planes: int, k: int) -> np.ndarray | int:
    """On-slot count c = round(u * M * k^2), ties away from zero."""
    arr = np.asarray(u, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ConfigError("radiance fraction must lie in [0, 1]")
    total = m_planes * k * k
    c = np.floor(arr * total + 0.5).astype(np.int64)
    if np.ndim(u) == 0:
        return int(c)
    return c


def bresenham_split(c: int, m_planes: int) -> np.ndarray:
    """Split c on-slots over M planes with per-plane counts differing by <= 1."""
    m = np.arange(m_planes + 1, dtype=np.int64)
    edges = (m * c) // m_planes
    return np.diff(edges)


def schedule_block(c: int, m_planes: int, k: int, policy: DitherPolicy | None = None) -> np.ndarray:
    """Per-plane k x k on-masks for one block; exactly c bits set in total.

    Plane m turns on the c_m mirrors with the smallest rotated thresholds
    (T + offset_m) mod k^2, offset_m = (m * k^2 / gcd(M, k^2)) mod k^2.
    """
    total = m_planes * k * k
    if not 0 <= c <= total:
        raise ConfigError(f"on-slot count {c} outside [0, {total}]")
    policy = policy or DitherPolicy.for_side(k)
    policy.validate()
    if policy.side != k:
        raise ConfigError(f"policy matrix side {policy.side} != block side {k}")
    k2 = k * k
    stride = k2 // math.gcd(m_planes, k2)
    counts = bresenham_split(c, m_planes)
    masks = np.zeros((m_planes, k, k), dtype=bool)
    for m in range(m_planes):
        rotated = (policy.threshold + (m * stride) % k2) % k2
        masks[m] = rotated < counts[m]
    return masks


def build_schedule_lut(m_planes: int, k: int, policy: DitherPolicy | None = None) -> np.ndarray:
    """(levels, M, k, k) bool table of schedule_block outputs for every c."""
    total = m_planes * k * k
    lut = np.zeros((total + 1, m_planes, k, k), dtype=bool)
    for c in range(total + 1):
        lut[c] = schedule_block(c, m_planes, k, policy)
    return lut


def _check_frames(frames: Sequence[TargetFrame], timing: TimingConfig) -> None:
    if not frames:
        raise ConfigError("no frames to encode")
    t = frames[0].t_start_ns
    for f in frames:
        f.validate()
        if f.duration_ns != timing.aop_frame_period_ns:
            raise GeometryError(
                f"frame duration {f.duration_ns} != aop_frame_period_ns {timing.aop_frame_period_ns}"
            )
        if f.t_start_ns != t:
            raise GeometryError("frames must be contiguous and non-overlapping")
        t += f.duration_ns
        if (f.width, f.height) != (frames[0].width, frames[0].height):
            raise GeometryError("all frames must share one grid")


def encode_sequence(
    frames: Sequence[TargetFrame],
    mapping: BlockMapping,
    timing: TimingConfig,
    policy: DitherPolicy | None = None,
    jobs: int = 1,
) -> PlaneStream:
    """Compile a frame sequence into a packed plane stream (M planes per frame).

    Deterministic and independent of `jobs`: frames are encoded as independent
    work units and assembled in time order.
    """
    timing.validate()
    _check_frames(frames, timing)
    width, height = frames[0].width, frames[0].height
    mapping.check_grid(width, height)
    k = mapping.k_cop
    m_planes = timing.planes_per_aop_frame
    policy = policy or DitherPolicy.for_side(k)
    lut = build_schedule_lut(m_planes, k, policy)

    stride = (mapping.dmd_width + 7) // 8
    planes = np.zeros((len(frames) * m_planes, mapping.dmd_height, stride), dtype=np.uint8)

    def encode_one(i: int) -> None:
        c_map = quantize_duty(frames[i].radiance, m_planes, k)
        _kernels.encode_frame(
            c_map,
            lut,
            planes[i * m_planes : (i + 1) * m_planes],
            mapping.offset_x,
            mapping.offset_y,
            k,
        )

    if jobs > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(encode_one, range(len(frames))))
    else:
        for i in range(len(frames)):
            encode_one(i)

    stream = PlaneStream(
        dmd_width=mapping.dmd_width,
        dmd_height=mapping.dmd_height,
        plane_period_ns=timing.plane_period_ns,
        planes=planes,
        t0_ns=frames[0].t_start_ns + timing.trigger_offset_ns,
    )
    stream.validate()
    return stream


def block_on_counts(
    stream: PlaneStream,
    mapping: BlockMapping,
    width: int,
    height: int,
    group: int = 1,
) -> np.ndarray:
    """Per-block on-mirror counts, summed over groups of `group` planes.

    Returns (n_planes // group, height, width) int64. The workhorse for both
    decode_reference and ideal-optics projection.
    """
    stream.validate()
    mapping.check_grid(width, height)
    if group < 1 or stream.n_planes % group != 0:
        raise GeometryError(f"plane count {stream.n_planes} not divisible by group {group}")
    return _kernels.count_blocks(
        stream.planes, mapping.offset_x, mapping.offset_y, mapping.k_cop, width, height, group
    )


def decode_reference(
    stream: PlaneStream,
    mapping: BlockMapping,
    timing: TimingConfig,
    width: int,
    height: int,
) -> np.ndarray:
    """Achieved duty per pixel per frame: on-slots / (M * k^2).

    Verification oracle; |duty - u| <= 1 / (2 M k^2) for encoder output.
    """
    timing.validate()
    m_planes = timing.planes_per_aop_frame
    if stream.n_planes % m_planes != 0:
        raise GeometryError(
            f"stream has {stream.n_planes} planes, not a multiple of M={m_planes}"
        )
    counts = block_on_counts(stream, mapping, width, height, group=m_planes)
    return counts.astype(np.float64) / (m_planes * mapping.k_cop**2)


# --------------------------------------------------------------------------
# DMDS container
# --------------------------------------------------------------------------

DMDS_MAGIC = b"DMDS"
_DMDS_HEADER = struct.Struct("<4sIIIIQQ")


def write_dmds(path: str | Path, stream: PlaneStream) -> None:
    stream.validate()
    with open(path, "wb") as fh:
        fh.write(
            _DMDS_HEADER.pack(
                DMDS_MAGIC,
                1,
                stream.dmd_width,
                stream.dmd_height,
                stream.n_planes,
                stream.plane_period_ns,
                stream.t0_ns,
            )
        )
        fh.write(stream.planes.tobytes())


def read_dmds(path: str | Path) -> PlaneStream:
    data = Path(path).read_bytes()
    if len(data) < _DMDS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, height, n_planes, period, t0 = _DMDS_HEADER.unpack_from(data)
    if magic != DMDS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    stride = (width + 7) // 8
    count = n_planes * height * stride
    if len(data) - _DMDS_HEADER.size < count:
        raise FormatError(f"{path}: truncated payload")
    payload = np.frombuffer(data, dtype=np.uint8, count=count, offset=_DMDS_HEADER.size)
    stream = PlaneStream(
        dmd_width=width,
        dmd_height=height,
        plane_period_ns=period,
        planes=payload.reshape(n_planes, height, stride).copy(),
        t0_ns=t0,
    )
    stream.validate()
    return stream
