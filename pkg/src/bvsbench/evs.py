"""Event-camera model on the projected photon field.

Each pixel low-pass filters the log photon signal ln(I + eps) with an
intensity-dependent cutoff f_c(I) = min(f_max, f_dark + k_f * I) and emits a
+/-1 event whenever the filtered level crosses the running reference by the
contrast threshold; the reference then jumps by exactly that threshold, which
preserves the floor(dL/theta) count law. Crossing times inside a plane
interval come from the closed-form inversion of the exponential response.

Generated events (plus an independent background Poisson noise process) are
time-merged and pushed through a single constant-rate FIFO bus: queued events
get delayed timestamps, overflow drops the newest arrival, and generation
times are kept alongside for latency accounting.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, FormatError, GeometryError
from .projector import PhotonField
from .rng import substream

__all__ = [
    "EVSConfig",
    "Event",
    "EventStream",
    "DropStats",
    "simulate",
    "ideal_event_count",
    "write_evt1",
    "read_evt1",
    "write_events_csv",
]

_THETA_FLOOR = 1e-9


@dataclass
class EVSConfig:
    theta_on: float = 0.2            # log-intensity contrast thresholds (natural log)
    theta_off: float = 0.2
    theta_jitter: float = 0.0        # per-pixel threshold std
    tau_ref_ns: float = 1_000_000.0  # refractory period
    f_dark: float = 100.0            # bandwidth model f_c(I) = min(f_max, f_dark + k_f * I)
    k_f: float = 1.0                 # Hz per photon/plane
    f_max: float = 1e7
    log_eps: float = 1e-3            # floor added inside the log
    noise_rate_hz: float = 0.0       # background events per pixel per second
    bus_rate: float = 1e8            # events per second, sensor-wide
    fifo_depth: int = 4096
    seed: int = 0

    @classmethod
    def ideal(cls, **overrides) -> "EVSConfig":
        """Lag-free, refractory-free, noise-free pixel front end."""
        base = dict(
            f_dark=math.inf, f_max=math.inf, tau_ref_ns=0.0,
            noise_rate_hz=0.0, theta_jitter=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.theta_on <= 0 or self.theta_off <= 0:
            raise ConfigError("contrast thresholds must be > 0")
        if self.theta_jitter < 0 or self.tau_ref_ns < 0 or self.noise_rate_hz < 0:
            raise ConfigError("jitter, refractory and noise rate must be >= 0")
        if self.bus_rate <= 0:
            raise ConfigError("bus_rate must be > 0")
        if self.fifo_depth < 1:
            raise ConfigError("fifo_depth must be >= 1")
        if self.log_eps <= 0:
            raise ConfigError("log_eps must be > 0")
        if self.f_dark < 0 or self.k_f < 0 or self.f_max <= 0:
            raise ConfigError("bandwidth parameters must be non-negative, f_max > 0")


@dataclass
class Event:
    t_ns: int
    x: int
    y: int
    polarity: int


@dataclass
class EventStream:
    """Column arrays of the emitted events, in bus departure order."""

    width: int
    height: int
    t_ns: np.ndarray          # int64, non-decreasing
    x: np.ndarray             # uint16
    y: np.ndarray             # uint16
    polarity: np.ndarray      # int8, +1 / -1
    t_generated_ns: np.ndarray  # int64, pre-bus generation times

    def __len__(self) -> int:
        return int(self.t_ns.shape[0])

    def validate(self) -> None:
        n = len(self)
        for arr in (self.x, self.y, self.polarity, self.t_generated_ns):
            if arr.shape[0] != n:
                raise GeometryError("event stream columns disagree in length")
        if n and np.any(np.diff(self.t_ns) < 0):
            raise GeometryError("event timestamps must be non-decreasing")


@dataclass
class DropStats:
    generated: int
    emitted: int
    dropped: int
    max_queue_delay_ns: int
    rate_bin_ns: int
    rate_counts: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def validate(self) -> None:
        if self.emitted + self.dropped != self.generated:
            raise GeometryError("emitted + dropped must equal generated")


def _theta_maps(cfg: EVSConfig, width: int, height: int):
    on = np.full((height, width), cfg.theta_on, dtype=np.float64)
    off = np.full((height, width), cfg.theta_off, dtype=np.float64)
    if cfg.theta_jitter > 0:
        rng = substream(cfg.seed, "evs.theta")
        on += rng.normal(0.0, cfg.theta_jitter, size=on.shape)
        off += rng.normal(0.0, cfg.theta_jitter, size=off.shape)
        np.maximum(on, _THETA_FLOOR, out=on)
        np.maximum(off, _THETA_FLOOR, out=off)
    return on, off


def _noise_events(cfg: EVSConfig, field: PhotonField):
    """Background Poisson events, injected independently of pixel dynamics."""
    duration_ns = field.duration_ns
    rng = substream(cfg.seed, "evs.noise")
    n_pix = field.width * field.height
    counts = rng.poisson(cfg.noise_rate_hz * duration_ns * 1e-9, size=n_pix)
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.astype(np.int32), empty.astype(np.int32), empty.astype(np.int8)
    t = field.t0_ns + rng.integers(0, duration_ns, size=total, dtype=np.int64)
    pol = np.where(rng.random(total) < 0.5, 1, -1).astype(np.int8)
    pix = np.repeat(np.arange(n_pix, dtype=np.int64), counts)
    x = (pix % field.width).astype(np.int32)
    y = (pix // field.width).astype(np.int32)
    return t, x, y, pol


def simulate(field: PhotonField, cfg: EVSConfig) -> tuple[EventStream, DropStats]:
    """Generate, merge and bus-schedule events for the whole field."""
    cfg.validate()
    field.validate()
    if field.n_planes < 1:
        raise GeometryError("field must contain at least one plane")

    theta_on, theta_off = _theta_maps(cfg, field.width, field.height)
    t, x, y, pol = _kernels.evs_events(
        field.counts, field.repeats, field.t0_ns, field.plane_period_ns,
        theta_on, theta_off, cfg.tau_ref_ns, cfg.f_dark, cfg.k_f, cfg.f_max,
        cfg.log_eps,
    )

    if cfg.noise_rate_hz > 0:
        nt, nx, ny, npol = _noise_events(cfg, field)
        t = np.concatenate([t, nt])
        x = np.concatenate([x, nx])
        y = np.concatenate([y, ny])
        pol = np.concatenate([pol, npol])

    # Deterministic time merge; ties broken by (y, x, polarity).
    order = np.lexsort((pol, x, y, t))
    t, x, y, pol = t[order], x[order], y[order], pol[order]
    generated = int(t.shape[0])

    drain_ns = 1e9 / cfg.bus_rate
    t_out, dropped = _kernels.fifo_bus(t, drain_ns, cfg.fifo_depth)
    keep = ~dropped
    t_emit = t_out[keep]
    t_gen = t[keep]
    delays = t_emit - t_gen

    bin_ns = 1_000_000
    if t_emit.shape[0]:
        span = int(t_emit[-1] - t_emit[0]) + 1
        n_bins = (span + bin_ns - 1) // bin_ns
        counts = np.bincount((t_emit - t_emit[0]) // bin_ns, minlength=n_bins)
    else:
        counts = np.zeros(0, dtype=np.int64)

    stream = EventStream(
        width=field.width,
        height=field.height,
        t_ns=t_emit,
        x=x[keep].astype(np.uint16),
        y=y[keep].astype(np.uint16),
        polarity=pol[keep],
        t_generated_ns=t_gen,
    )
    stream.validate()
    stats = DropStats(
        generated=generated,
        emitted=int(keep.sum()),
        dropped=int(dropped.sum()),
        max_queue_delay_ns=int(delays.max()) if delays.shape[0] else 0,
        rate_bin_ns=bin_ns,
        rate_counts=counts.astype(np.int64),
    )
    stats.validate()
    return stream, stats


def ideal_event_count(log_trajectory, cfg: EVSConfig) -> int:
    """Bus-free, lag-free, noise-free event count for one pixel's log-intensity
    samples; the oracle side of saturation analysis."""
    traj = np.asarray(log_trajectory, dtype=np.float64)
    if traj.ndim != 1 or traj.shape[0] == 0:
        raise ConfigError("trajectory must be a non-empty 1-D array")
    l_ref = float(traj[0])
    count = 0
    for v in traj[1:].tolist():
        while v >= l_ref + cfg.theta_on:
            count += 1
            l_ref += cfg.theta_on
        while v <= l_ref - cfg.theta_off:
            count += 1
            l_ref -= cfg.theta_off
    return count


# --------------------------------------------------------------------------
# EVT1 container + CSV mirror
# --------------------------------------------------------------------------

EVT1_MAGIC = b"EVT1"
_EVT1_HEADER = struct.Struct("<4sIIIQ")
_EVT1_RECORD = struct.Struct("<QHHbQ")


def write_evt1(path: str | Path, stream: EventStream) -> None:
    stream.validate()
    with open(path, "wb") as fh:
        fh.write(_EVT1_HEADER.pack(EVT1_MAGIC, 1, stream.width, stream.height, len(stream)))
        for i in range(len(stream)):
            fh.write(
                _EVT1_RECORD.pack(
                    int(stream.t_ns[i]),
                    int(stream.x[i]),
                    int(stream.y[i]),
                    int(stream.polarity[i]),
                    int(stream.t_generated_ns[i]),
                )
            )


def read_evt1(path: str | Path) -> EventStream:
    data = Path(path).read_bytes()
    if len(data) < _EVT1_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, height, count = _EVT1_HEADER.unpack_from(data)
    if magic != EVT1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    need = _EVT1_HEADER.size + count * _EVT1_RECORD.size
    if len(data) < need:
        raise FormatError(f"{path}: truncated payload")
    t = np.empty(count, dtype=np.int64)
    x = np.empty(count, dtype=np.uint16)
    y = np.empty(count, dtype=np.uint16)
    pol = np.empty(count, dtype=np.int8)
    t_gen = np.empty(count, dtype=np.int64)
    pos = _EVT1_HEADER.size
    for i in range(count):
        rec = _EVT1_RECORD.unpack_from(data, pos)
        t[i], x[i], y[i], pol[i], t_gen[i] = rec
        pos += _EVT1_RECORD.size
    stream = EventStream(width=width, height=height, t_ns=t, x=x, y=y,
                         polarity=pol, t_generated_ns=t_gen)
    stream.validate()
    return stream


def write_events_csv(path: str | Path, stream: EventStream) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("t_ns,x,y,polarity,t_generated_ns\n")
        for i in range(len(stream)):
            fh.write(
                f"{int(stream.t_ns[i])},{int(stream.x[i])},{int(stream.y[i])},"
                f"{int(stream.polarity[i])},{int(stream.t_generated_ns[i])}\n"
            )
