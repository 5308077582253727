"""Dual-pathway sensor model: intensity frames plus high-rate difference frames.

The cognition pathway (COP) integrates 25 high-rate periods into a Bayer
RGGB mosaic through a linear ADC. The action pathway (AOP) runs at the high
frame rate on 2x2-aggregated panchromatic pixels and emits signed-7-bit
temporal differences (vs the previous frame) and spatial differences (vs
kernel-offset neighbors), both scaled by configurable gains.

Noise model per frame: Poisson shot noise on qe*(1+prnu)*photons, plus dark
charge, a fixed dark-offset map (DSNU), and Gaussian read noise; electrons
clip at the full well. All draws come from counter-based streams keyed by
(seed, pathway, frame), so results are independent of evaluation order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import TimingConfig
from .errors import ConfigError, FormatError, GeometryError
from .projector import PhotonField
from .rng import substream

__all__ = [
    "TianmoucConfig",
    "COPFrame",
    "AOPFrame",
    "PathwayStreams",
    "simulate",
    "quantize_signed7",
    "round_half_away",
    "write_tmoc",
    "read_tmoc",
]


def round_half_away(v: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    arr = np.asarray(v, dtype=np.float64)
    return np.sign(arr) * np.floor(np.abs(arr) + 0.5)


def quantize_signed7(v: np.ndarray | float) -> np.ndarray | int:
    """Signed 7-bit magnitude: round half away from zero, clamp to [-127, 127]."""
    q = np.clip(round_half_away(v), -127, 127).astype(np.int8)
    if np.ndim(v) == 0:
        return int(q)
    return q


@dataclass
class TianmoucConfig:
    qe: float = 0.6
    full_well: float = 10_000.0
    read_noise: float = 2.0          # electrons RMS
    dark_current: float = 0.0        # electrons per AOP frame period
    sigma_dsnu: float = 0.0          # electrons, std of the fixed dark offset map
    sigma_prnu: float = 0.0          # fractional gain std
    adc_bits: int = 10
    adc_gain: float = 0.1            # K, DN per electron
    g_td: float = 1.0                # DN per electron of temporal difference
    g_sd: float = 1.0                # DN per electron of spatial difference
    sd_kernels: tuple = ((1, 0), (0, 1))
    bayer_gains: tuple = (1.0, 1.0, 1.0)  # (R, G, B) flux gains at mosaic sites
    shot_noise: bool = True
    quad_coeff: float = 0.0          # response nonlinearity: mean += quad_coeff * mean^2
    timing: TimingConfig = dc_field(default_factory=TimingConfig)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.qe <= 1.0:
            raise ConfigError("qe must lie in (0, 1]")
        if self.full_well <= 0:
            raise ConfigError("full_well must be > 0")
        if not 8 <= self.adc_bits <= 14:
            raise ConfigError("adc_bits must lie in [8, 14]")
        if self.read_noise < 0 or self.dark_current < 0 or self.sigma_dsnu < 0 or self.sigma_prnu < 0:
            raise ConfigError("noise parameters must be >= 0")
        if self.adc_gain <= 0:
            raise ConfigError("adc_gain must be > 0")
        if len(self.bayer_gains) != 3:
            raise ConfigError("bayer_gains must be (R, G, B)")
        for dx, dy in self.sd_kernels:
            if (dx, dy) == (0, 0):
                raise ConfigError("sd kernel offset (0,0) is degenerate")
        self.timing.validate()


@dataclass
class COPFrame:
    index: int
    timestamp_ns: int
    mosaic: np.ndarray  # (H, W) uint16, RGGB


@dataclass
class AOPFrame:
    index: int
    timestamp_ns: int
    td: np.ndarray      # (H/2, W/2) int8; frame 0 is all zero
    sd: np.ndarray      # (n_kernels, H/2, W/2) int8


@dataclass
class PathwayStreams:
    cop: list
    aop: list
    cop_ratio: int

    def validate(self) -> None:
        if len(self.aop) != len(self.cop) * self.cop_ratio:
            raise GeometryError(
                f"{len(self.aop)} AOP frames != {len(self.cop)} COP frames x ratio {self.cop_ratio}"
            )


def bayer_gain_map(width: int, height: int, gains: Sequence[float]) -> np.ndarray:
    """Per-pixel flux gain under the RGGB mosaic: R at (even,even), B at (odd,odd)."""
    g = np.full((height, width), float(gains[1]), dtype=np.float64)
    g[0::2, 0::2] = float(gains[0])
    g[1::2, 1::2] = float(gains[2])
    return g


def _fixed_pattern_maps(cfg: TianmoucConfig, width: int, height: int, label: str):
    """(dsnu, prnu) maps for one pathway grid, drawn once from the seed."""
    rng = substream(cfg.seed, f"tianmouc.fpn.{label}")
    dsnu = (
        rng.normal(0.0, cfg.sigma_dsnu, size=(height, width))
        if cfg.sigma_dsnu > 0
        else np.zeros((height, width))
    )
    prnu = (
        rng.normal(0.0, cfg.sigma_prnu, size=(height, width))
        if cfg.sigma_prnu > 0
        else np.zeros((height, width))
    )
    return dsnu, prnu


def _electrons(
    photons: np.ndarray,
    cfg: TianmoucConfig,
    dsnu: np.ndarray,
    prnu: np.ndarray,
    dark: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Photons -> electrons for one frame on one pathway grid."""
    mean = photons * cfg.qe * (1.0 + prnu)
    if cfg.quad_coeff != 0.0:
        mean = mean + cfg.quad_coeff * mean * mean
    mean = np.maximum(mean, 0.0)
    if cfg.shot_noise:
        e = rng.poisson(mean).astype(np.float64)
    else:
        e = mean.copy()
    e += dark + dsnu
    if cfg.read_noise > 0:
        e += rng.normal(0.0, cfg.read_noise, size=e.shape)
    return np.minimum(e, cfg.full_well)


def _sd_planes(intensity: np.ndarray, kernels, g_sd: float) -> np.ndarray:
    h, w = intensity.shape
    out = np.zeros((len(kernels), h, w), dtype=np.int8)
    for i, (dx, dy) in enumerate(kernels):
        diff = np.zeros((h, w), dtype=np.float64)
        # neighbor at (x+dx, y+dy) minus center, defined only where both exist
        src_y = slice(max(0, dy), h + min(0, dy))
        src_x = slice(max(0, dx), w + min(0, dx))
        dst_y = slice(max(0, -dy), h + min(0, -dy))
        dst_x = slice(max(0, -dx), w + min(0, -dx))
        diff[dst_y, dst_x] = intensity[src_y, src_x] - intensity[dst_y, dst_x]
        out[i] = quantize_signed7(g_sd * diff)
    return out


class _FrameSums:
    """Per-AOP-frame photon sums over a (possibly tiled) field.

    When the tiling block covers whole frames the sums repeat with period
    base_frames and are memoized, so long static exposures cost O(base).
    """

    def __init__(self, field: PhotonField, planes_per_frame: int):
        self.field = field
        self.ppf = planes_per_frame
        self.n_frames = field.n_planes // planes_per_frame
        aligned = field.repeats > 1 and field.hold == 1 and field.n_base % planes_per_frame == 0
        self.base_frames = field.n_base // planes_per_frame if aligned else 0
        self._cache: dict[int, np.ndarray] = {}

    def frame(self, n: int) -> np.ndarray:
        if self.ppf == 1:
            return self.field.plane(n)
        key = n % self.base_frames if self.base_frames else -1
        if key >= 0:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        total = np.zeros((self.field.height, self.field.width), dtype=np.float64)
        for i in range(n * self.ppf, (n + 1) * self.ppf):
            total += self.field.plane(i)
        if key >= 0:
            self._cache[key] = total
        return total


def simulate(
    field: PhotonField,
    cfg: TianmoucConfig,
    emit: tuple = ("cop", "aop"),
) -> PathwayStreams:
    """Run both pathways over the field; see module docstring for the model.

    `emit` can drop a pathway ("cop",)/("aop",) to save sampling time; the
    returned stream then has the other list empty and skips the ratio check.
    """
    cfg.validate()
    field.validate()
    timing = cfg.timing
    if field.width % 2 or field.height % 2:
        raise GeometryError("COP grid must have even dimensions (AOP pixels are 2x2 COP)")
    # One AOP frame exposes exactly M mirror planes; the residual slack up to
    # aop_frame_period_ns (757 FPS mode: 8.5 us) is dark time on the trigger
    # clock. Field planes may be pre-grouped (g mirror planes each).
    if field.plane_period_ns % timing.plane_period_ns != 0:
        raise GeometryError(
            f"field plane period {field.plane_period_ns} is not a multiple of the "
            f"mirror plane period {timing.plane_period_ns}"
        )
    g = field.plane_period_ns // timing.plane_period_ns
    m_planes = timing.planes_per_aop_frame
    if m_planes % g != 0:
        raise GeometryError(
            f"field grouping {g} does not divide the {m_planes} planes per AOP frame"
        )
    ppf = m_planes // g
    if field.n_planes % ppf != 0:
        raise GeometryError(
            f"field with {field.n_planes} planes does not cover whole AOP frames (ppf={ppf})"
        )
    n_aop = field.n_planes // ppf
    n_cop = 0
    if "cop" in emit:
        if n_aop % timing.cop_ratio != 0:
            raise GeometryError(
                f"{n_aop} AOP frames do not cover an integer number of COP frames "
                f"(ratio {timing.cop_ratio})"
            )
        n_cop = n_aop // timing.cop_ratio

    sums = _FrameSums(field, ppf)
    aop_frames: list[AOPFrame] = []
    cop_frames: list[COPFrame] = []

    if "aop" in emit:
        h2, w2 = field.height // 2, field.width // 2
        dsnu_a, prnu_a = _fixed_pattern_maps(cfg, w2, h2, "aop")
        prev = None
        for n in range(n_aop):
            s = sums.frame(n)
            photons = s.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
            rng = substream(cfg.seed, "tianmouc.aop", n)
            intensity = _electrons(photons, cfg, dsnu_a, prnu_a, cfg.dark_current, rng)
            if prev is None:
                td = np.zeros((h2, w2), dtype=np.int8)
            else:
                td = quantize_signed7(cfg.g_td * (intensity - prev))
            sd = _sd_planes(intensity, cfg.sd_kernels, cfg.g_sd)
            aop_frames.append(
                AOPFrame(
                    index=n,
                    timestamp_ns=field.t0_ns + n * timing.aop_frame_period_ns,
                    td=td,
                    sd=sd,
                )
            )
            prev = intensity

    if "cop" in emit:
        gain_map = bayer_gain_map(field.width, field.height, cfg.bayer_gains)
        dsnu_c, prnu_c = _fixed_pattern_maps(cfg, field.width, field.height, "cop")
        dn_max = (1 << cfg.adc_bits) - 1
        cop_sum_cache: dict[int, np.ndarray] = {}
        for kf in range(n_cop):
            start = kf * timing.cop_ratio
            key = start % sums.base_frames if sums.base_frames else -1
            photons = cop_sum_cache.get(key) if key >= 0 else None
            if photons is None:
                photons = np.zeros((field.height, field.width), dtype=np.float64)
                for n in range(start, start + timing.cop_ratio):
                    photons += sums.frame(n)
                if key >= 0:
                    cop_sum_cache[key] = photons
            rng = substream(cfg.seed, "tianmouc.cop", kf)
            electrons = _electrons(
                photons * gain_map, cfg, dsnu_c, prnu_c,
                cfg.dark_current * timing.cop_ratio, rng,
            )
            dn = np.clip(round_half_away(cfg.adc_gain * electrons), 0, dn_max).astype(np.uint16)
            cop_frames.append(
                COPFrame(
                    index=kf,
                    timestamp_ns=field.t0_ns + kf * timing.cop_ratio * timing.aop_frame_period_ns,
                    mosaic=dn,
                )
            )

    streams = PathwayStreams(cop=cop_frames, aop=aop_frames, cop_ratio=timing.cop_ratio)
    if "cop" in emit and "aop" in emit:
        streams.validate()
    return streams


# --------------------------------------------------------------------------
# TMOC container
# --------------------------------------------------------------------------

TMOC_MAGIC = b"TMOC"
_TMOC_HEADER = struct.Struct("<4sIIIIIIIIIQQ")


def write_tmoc(path: str | Path, streams: PathwayStreams, t0_ns: int = 0,
               aop_period_ns: int = 1_321_004, sd_kernels: tuple = ((1, 0), (0, 1))) -> None:
    """Header, then all COP mosaics (u16 LE), then per AOP frame: TD plane (i8)
    followed by one SD plane (i8) per kernel."""
    if streams.cop:
        ch, cw = streams.cop[0].mosaic.shape
    elif streams.aop:
        ah, aw = streams.aop[0].td.shape
        ch, cw = ah * 2, aw * 2
    else:
        raise ConfigError("empty stream")
    ah, aw = ch // 2, cw // 2
    n_sd = len(sd_kernels)
    with open(path, "wb") as fh:
        fh.write(
            _TMOC_HEADER.pack(
                TMOC_MAGIC, 1, cw, ch, aw, ah, streams.cop_ratio, n_sd,
                len(streams.cop), len(streams.aop), t0_ns, aop_period_ns,
            )
        )
        for dx, dy in sd_kernels:
            fh.write(struct.pack("<bb", dx, dy))
        for f in streams.cop:
            fh.write(f.mosaic.astype("<u2").tobytes())
        for f in streams.aop:
            if f.sd.shape[0] != n_sd:
                raise ConfigError("AOP frame kernel count mismatch")
            fh.write(f.td.astype("<i1").tobytes())
            fh.write(f.sd.astype("<i1").tobytes())


def read_tmoc(path: str | Path):
    """Returns (PathwayStreams, sd_kernels, t0_ns, aop_period_ns)."""
    data = Path(path).read_bytes()
    if len(data) < _TMOC_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    (magic, version, cw, ch, aw, ah, ratio, n_sd, n_cop, n_aop, t0, period) = (
        _TMOC_HEADER.unpack_from(data)
    )
    if magic != TMOC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _TMOC_HEADER.size
    kernels = []
    for _ in range(n_sd):
        dx, dy = struct.unpack_from("<bb", data, pos)
        kernels.append((dx, dy))
        pos += 2
    need = n_cop * cw * ch * 2 + n_aop * aw * ah * (1 + n_sd)
    if len(data) - pos < need:
        raise FormatError(f"{path}: truncated payload")
    cop = []
    for i in range(n_cop):
        count = cw * ch
        arr = np.frombuffer(data, dtype="<u2", count=count, offset=pos)
        cop.append(COPFrame(index=i, timestamp_ns=t0 + i * ratio * period,
                            mosaic=arr.reshape(ch, cw).copy()))
        pos += count * 2
    aop = []
    for i in range(n_aop):
        count = aw * ah
        td = np.frombuffer(data, dtype="<i1", count=count, offset=pos)
        pos += count
        sd = np.frombuffer(data, dtype="<i1", count=count * n_sd, offset=pos)
        pos += count * n_sd
        aop.append(
            AOPFrame(index=i, timestamp_ns=t0 + i * period,
                     td=td.reshape(ah, aw).copy(), sd=sd.reshape(n_sd, ah, aw).copy())
        )
    streams = PathwayStreams(cop=cop, aop=aop, cop_ratio=ratio)
    return streams, tuple(kernels), t0, period
