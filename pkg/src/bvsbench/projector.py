"""Optical projection: packed mirror planes -> expected photon counts per pixel.

lambda(x, y, m) = dark_flux + phi_max * v(r) * coverage(x, y, m), where
coverage is the on-fraction of the pixel's mirror block after misalignment
and Gaussian blur. Ideal optics reduce coverage to on-count / k^2, which is
served by the fast block-counting kernel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import BlockMapping, PlaneStream, block_on_counts
from .errors import ConfigError, FormatError, GeometryError

__all__ = [
    "OpticalConfig",
    "PhotonField",
    "project",
    "integrate_exposure",
    "write_phot",
    "read_phot",
]


@dataclass
class OpticalConfig:
    """Flux scale and imperfection model of the projection path.

    phi_max: expected photons per sensor pixel per plane period at full duty.
    psf_sigma: Gaussian blur radius in mirror units (0 = ideal).
    vignetting_a2/a4: radial gain v(r) = 1 + a2 r^2 + a4 r^4 with r normalized
        to the half-diagonal; v(0) = 1 by construction, and v must stay in (0, 1].
    misalign_dx/dy (mirror units), misalign_rot (radians): applied to the
        mirror image before block integration.
    dark_flux: stray photons per pixel per plane.
    """

    phi_max: float = 1000.0
    psf_sigma: float = 0.0
    vignetting_a2: float = 0.0
    vignetting_a4: float = 0.0
    misalign_dx: float = 0.0
    misalign_dy: float = 0.0
    misalign_rot: float = 0.0
    dark_flux: float = 0.0

    @property
    def is_ideal_geometry(self) -> bool:
        return (
            self.psf_sigma == 0.0
            and self.misalign_dx == 0.0
            and self.misalign_dy == 0.0
            and self.misalign_rot == 0.0
        )

    def validate(self) -> None:
        if self.phi_max <= 0:
            raise ConfigError("phi_max must be > 0")
        if self.psf_sigma < 0:
            raise ConfigError("psf_sigma must be >= 0")
        if self.dark_flux < 0:
            raise ConfigError("dark_flux must be >= 0")
        r = np.linspace(0.0, 1.0, 101)
        v = 1.0 + self.vignetting_a2 * r**2 + self.vignetting_a4 * r**4
        if v.min() <= 0.0 or v.max() > 1.0 + 1e-12:
            raise ConfigError("vignetting profile must stay within (0, 1] for r in [0, 1]")

    def vignetting_map(self, width: int, height: int) -> np.ndarray:
        if self.vignetting_a2 == 0.0 and self.vignetting_a4 == 0.0:
            return np.ones((height, width), dtype=np.float64)
        cy = (height - 1) / 2.0
        cx = (width - 1) / 2.0
        yy, xx = np.mgrid[0:height, 0:width]
        r_max = math.hypot(cx, cy) or 1.0
        r2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / (r_max * r_max)
        return 1.0 + self.vignetting_a2 * r2 + self.vignetting_a4 * r2 * r2


@dataclass
class PhotonField:
    """Expected photons per sensor pixel per plane interval (means, not samples).

    `counts` holds `n_base` planes. Two compression knobs keep long exposures
    O(base) in memory without changing per-plane semantics: `hold` dwells on
    each base plane for that many consecutive plane intervals, and `repeats`
    tiles the whole held block end to end, so
    plane(i) = counts[(i // hold) % n_base].
    """

    width: int
    height: int
    plane_period_ns: int
    counts: np.ndarray  # (n_base, height, width) float64
    repeats: int = 1
    hold: int = 1
    t0_ns: int = 0

    @property
    def n_base(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n_planes(self) -> int:
        return self.n_base * self.hold * self.repeats

    @property
    def duration_ns(self) -> int:
        return self.n_planes * self.plane_period_ns

    def validate(self) -> None:
        if self.counts.ndim != 3 or self.counts.shape[1:] != (self.height, self.width):
            raise GeometryError(
                f"counts shape {self.counts.shape} inconsistent with grid "
                f"{self.width}x{self.height}"
            )
        if self.repeats < 1 or self.hold < 1:
            raise ConfigError("repeats and hold must be >= 1")
        if self.plane_period_ns <= 0:
            raise ConfigError("plane_period_ns must be > 0")
        if float(self.counts.min(initial=0.0)) < 0.0:
            raise ConfigError("photon counts must be >= 0")

    def plane(self, index: int) -> np.ndarray:
        if not 0 <= index < self.n_planes:
            raise IndexError(f"plane {index} out of range [0, {self.n_planes})")
        return self.counts[(index // self.hold) % self.n_base]

    def tiled(self, repeats: int) -> "PhotonField":
        """Same field repeated `repeats` times end to end (requires repeats>=1)."""
        if repeats < 1:
            raise ConfigError("repeats must be >= 1")
        return PhotonField(
            width=self.width,
            height=self.height,
            plane_period_ns=self.plane_period_ns,
            counts=self.counts,
            repeats=self.repeats * repeats,
            hold=self.hold,
            t0_ns=self.t0_ns,
        )

    def materialize(self) -> np.ndarray:
        """Full (n_planes, height, width) array; use only at small scale."""
        out = self.counts
        if self.hold > 1:
            out = np.repeat(out, self.hold, axis=0)
        if self.repeats > 1:
            out = np.tile(out, (self.repeats, 1, 1))
        return out


def project(
    stream: PlaneStream,
    mapping: BlockMapping,
    optics: OpticalConfig,
    width: int,
    height: int,
    group: int = 1,
) -> PhotonField:
    """Expected photons per pixel for each plane (or each group of `group` planes).

    Grouping sums consecutive planes, e.g. group = planes-per-frame yields one
    entry per high-rate frame; the result's plane_period_ns scales accordingly.
    """
    optics.validate()
    stream.validate()
    mapping.check_grid(width, height)
    if group < 1 or stream.n_planes % group != 0:
        raise GeometryError(f"plane count {stream.n_planes} not divisible by group {group}")
    k = mapping.k_cop

    if optics.is_ideal_geometry:
        on = block_on_counts(stream, mapping, width, height, group=group)
        coverage = on.astype(np.float64) / (k * k)
    else:
        coverage = _coverage_full(stream, mapping, optics, width, height, group)

    v = optics.vignetting_map(width, height)
    lam = group * optics.dark_flux + optics.phi_max * v[None, :, :] * coverage
    field = PhotonField(
        width=width,
        height=height,
        plane_period_ns=stream.plane_period_ns * group,
        counts=lam,
        t0_ns=stream.t0_ns,
    )
    field.validate()
    return field


def _coverage_full(
    stream: PlaneStream,
    mapping: BlockMapping,
    optics: OpticalConfig,
    width: int,
    height: int,
    group: int,
) -> np.ndarray:
    """Slow path: blur + misalign the mirror image, then integrate per block."""
    from scipy import ndimage

    k = mapping.k_cop
    n_groups = stream.n_planes // group
    out = np.zeros((n_groups, height, width), dtype=np.float64)

    rot = optics.misalign_rot
    cy = (stream.dmd_height - 1) / 2.0
    cx = (stream.dmd_width - 1) / 2.0
    ca, sa = math.cos(rot), math.sin(rot)
    # scipy affine_transform maps output coords (row, col) through
    # matrix @ o + offset into the input; this realizes "rotate by rot about
    # the DMD center, then translate by (dx, dy) mirrors".
    matrix = np.array([[ca, sa], [-sa, ca]])
    center = np.array([cy, cx])
    shift = np.array([optics.misalign_dy, optics.misalign_dx])
    offset = center - matrix @ (center + shift)

    for i in range(stream.n_planes):
        img = stream.unpack_plane(i).astype(np.float64)
        if optics.psf_sigma > 0.0:
            img = ndimage.gaussian_filter(img, optics.psf_sigma, truncate=3.0, mode="constant")
        if rot != 0.0 or optics.misalign_dx != 0.0 or optics.misalign_dy != 0.0:
            img = ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant")
        region = img[
            mapping.offset_y : mapping.offset_y + height * k,
            mapping.offset_x : mapping.offset_x + width * k,
        ]
        out[i // group] += region.reshape(height, k, width, k).mean(axis=(1, 3))
    return out


def integrate_exposure(field: PhotonField, t_a_ns: int, t_b_ns: int) -> np.ndarray:
    """Sum of expected photons over planes within [t_a, t_b); bounds must lie
    on plane boundaries inside the field."""
    field.validate()
    period = field.plane_period_ns
    for t in (t_a_ns, t_b_ns):
        if (t - field.t0_ns) % period != 0:
            raise GeometryError(f"window bound {t} is not plane-aligned (period {period})")
    i0 = (t_a_ns - field.t0_ns) // period
    i1 = (t_b_ns - field.t0_ns) // period
    if i0 > i1 or i0 < 0 or i1 > field.n_planes:
        raise GeometryError("window outside the field extent")
    total = np.zeros((field.height, field.width), dtype=np.float64)
    for i in range(i0, i1):
        total += field.plane(i)
    return total


PHOT_MAGIC = b"PHOT"
_PHOT_HEADER = struct.Struct("<4sIII")


def write_phot(path: str | Path, field: PhotonField) -> None:
    """Dump as the raw 16-byte-header container with f32 payload."""
    field.validate()
    with open(path, "wb") as fh:
        fh.write(_PHOT_HEADER.pack(PHOT_MAGIC, field.width, field.height, field.n_planes))
        for i in range(field.n_planes):
            fh.write(field.plane(i).astype("<f4").tobytes())


def read_phot(path: str | Path, plane_period_ns: int, t0_ns: int = 0) -> PhotonField:
    data = Path(path).read_bytes()
    if len(data) < _PHOT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h, n = _PHOT_HEADER.unpack_from(data)
    if magic != PHOT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    count = n * h * w
    if len(data) - _PHOT_HEADER.size < count * 4:
        raise FormatError(f"{path}: truncated payload")
    raw = np.frombuffer(data, dtype="<f4", count=count, offset=_PHOT_HEADER.size)
    return PhotonField(
        width=w,
        height=h,
        plane_period_ns=plane_period_ns,
        counts=raw.reshape(n, h, w).astype(np.float64),
        t0_ns=t0_ns,
    )
