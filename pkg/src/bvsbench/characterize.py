"""Characterization protocols over the full simulated bench.

Every protocol is a pure function of (bench config, seed): it drives the
stimulus -> encoder -> projector -> sensor pipeline, computes one metric
family, and returns a report embedding the config hash, trial counts and
confidence half-widths. Reports serialize to canonical JSON plus CSV curves.

Drive levels are always reported as *achieved* duties: the mirror-plane
encoder quantizes radiance to c / (M k^2) per high-rate frame, and intensity
protocols additionally spread sub-steps over the 25 frames of one COP
exposure, giving 25 M k^2 + 1 distinct COP illumination levels.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import evs as evs_mod
from . import tianmouc as tm
from .config import BenchConfig, config_hash
from .encoder import DitherPolicy, encode_sequence
from .errors import MetricUndefinedError, ProtocolPreconditionError
from .projector import PhotonField, project
from .rng import derive_seed
from .stimulus import TargetFrame, flicker_active_mask
from .tianmouc import TianmoucConfig

__all__ = [
    "LinearityReport",
    "UniformityReport",
    "SNRReport",
    "PhotonTransferReport",
    "LatencyReport",
    "ContrastThresholdReport",
    "SaturationReport",
    "DiffSNRReport",
    "run_linearity",
    "run_uniformity",
    "run_snr_dr",
    "run_photon_transfer",
    "run_evs_latency",
    "run_evs_contrast_threshold",
    "run_event_saturation",
    "run_diff_snr",
    "run_protocol",
]


# --------------------------------------------------------------------------
# pipeline helpers
# --------------------------------------------------------------------------

def _uniform_frames(bench: BenchConfig, duties: list[float]) -> list[TargetFrame]:
    """One TargetFrame per high-rate frame, each spatially uniform."""
    period = bench.timing.aop_frame_period_ns
    return [
        TargetFrame(
            width=bench.grid_width,
            height=bench.grid_height,
            radiance=np.full((bench.grid_height, bench.grid_width), d, dtype=np.float64),
            t_start_ns=i * period,
            duration_ns=period,
        )
        for i, d in enumerate(duties)
    ]


def _project_frames(bench: BenchConfig, frames, group: int) -> PhotonField:
    policy = DitherPolicy.for_side(bench.mapping.k_cop)
    stream = encode_sequence(frames, bench.mapping, bench.timing, policy)
    return project(
        stream, bench.mapping, bench.optics, bench.grid_width, bench.grid_height, group=group
    )


def _uniform_sequence_field(bench: BenchConfig, duties: list[float], group: int) -> PhotonField:
    """Photon field for a sequence of spatially uniform frames.

    Frames are encoded independently, so only one frame per distinct duty is
    encoded and projected; the sequence is then assembled by lookup. Bitwise
    identical to encoding the full sequence.
    """
    unique = sorted(set(duties))
    projected = {}
    for d in unique:
        f = _project_frames(bench, _uniform_frames(bench, [d]), group=group)
        projected[d] = f.counts
        period = f.plane_period_ns
    counts = np.concatenate([projected[d] for d in duties], axis=0)
    return PhotonField(
        width=bench.grid_width,
        height=bench.grid_height,
        plane_period_ns=period,
        counts=counts,
        t0_ns=bench.timing.trigger_offset_ns,
    )


def _cop_slots(bench: BenchConfig) -> int:
    """Distinct on-slot total of one COP exposure: 25 frames x M planes x k^2."""
    m = bench.timing.planes_per_aop_frame
    return bench.timing.cop_ratio * m * bench.mapping.k_cop**2


def _cop_duty_split(bench: BenchConfig, u: float) -> tuple[float, list[float]]:
    """Per-frame duty schedule realizing u at COP-exposure granularity.

    Returns (achieved_duty, per-frame duties for one COP period): the count
    round(u * total_slots) is Bresenham-split over the cop_ratio frames.
    """
    timing = bench.timing
    m = timing.planes_per_aop_frame
    k2 = bench.mapping.k_cop**2
    slots_frame = m * k2
    total = round(u * slots_frame * timing.cop_ratio)
    base = total // timing.cop_ratio
    duties = []
    prev = 0
    for j in range(timing.cop_ratio):
        edge = ((j + 1) * total) // timing.cop_ratio
        duties.append((edge - prev) / slots_frame)
        prev = edge
    return total / (slots_frame * timing.cop_ratio), duties


def _frame_duty(bench: BenchConfig, u: float) -> float:
    """Duty achievable within one high-rate frame: round(u M k^2)/(M k^2)."""
    slots = bench.timing.planes_per_aop_frame * bench.mapping.k_cop**2
    return min(slots, max(0, round(u * slots))) / slots


def _flickerless_duty(bench: BenchConfig, u: float) -> float:
    """Duty with identical per-plane on-counts (c divisible by M): u -> j/k^2."""
    k2 = bench.mapping.k_cop**2
    return min(k2, max(0, round(u * k2))) / k2


def _cop_photons_full(bench: BenchConfig) -> float:
    """Nominal photons per COP pixel per COP exposure at duty 1 (flat optics)."""
    return bench.optics.phi_max * bench.timing.planes_per_aop_frame * bench.timing.cop_ratio


def _sensor_cfg(bench: BenchConfig, protocol: str, index: int = 0) -> TianmoucConfig:
    return dataclasses.replace(
        bench.tianmouc, seed=derive_seed(bench.seed, f"protocol.{protocol}", index)
    )


def _cop_run(bench: BenchConfig, u: float, n_frames: int, protocol: str, index: int):
    """n_frames COP mosaics at achieved duty u (float stack), plus the duty."""
    duty, duties = _cop_duty_split(bench, u)
    base = _uniform_sequence_field(bench, duties, group=bench.timing.planes_per_aop_frame)
    field = base.tiled(n_frames)
    cfg = _sensor_cfg(bench, protocol, index)
    streams = tm.simulate(field, cfg, emit=("cop",))
    stack = np.stack([f.mosaic.astype(np.float64) for f in streams.cop])
    return duty, stack


def _lsq(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares line fit; returns (slope, intercept)."""
    a = np.vstack([x, np.ones_like(x)]).T
    sol, *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(sol[0]), float(sol[1])


def _median_ci_half_width(values: np.ndarray) -> float:
    """Notch-style half-width for a median: 1.57 * IQR / sqrt(n)."""
    n = values.shape[0]
    if n < 2:
        return 0.0
    q75, q25 = np.percentile(values, [75, 25])
    return float(1.57 * (q75 - q25) / math.sqrt(n))


def _mean_ci_half_width(values: np.ndarray) -> float:
    n = values.shape[0]
    if n < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(n))


# --------------------------------------------------------------------------
# intensity-pathway protocols
# --------------------------------------------------------------------------

@dataclass
class LinearityReport:
    slope_dn_per_photon: float
    intercept_dn: float
    max_nonlinearity_pct: float      # LE, % of full scale over the usable range
    full_scale_dn: int
    n_levels_used: int
    frames_per_level: int
    curve: dict = dc_field(default_factory=dict)
    protocol: str = "linearity"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {"residuals": self.curve}


def run_linearity(bench: BenchConfig, levels=None, frames_per_level=None) -> LinearityReport:
    p = bench.protocols.linearity
    levels = list(levels if levels is not None else p.levels)
    frames_per_level = frames_per_level or p.frames_per_level
    if len(levels) < 5 or min(levels) > 0.05 + 1e-12 or max(levels) < 0.95 - 1e-12:
        raise ProtocolPreconditionError(
            "linearity needs >= 5 levels spanning [0.05, 0.95] of full drive"
        )

    phot_full = _cop_photons_full(bench)
    full_scale = (1 << bench.tianmouc.adc_bits) - 1
    rows = {"u": [], "duty": [], "photons": [], "mean_dn": []}
    for i, u in enumerate(sorted(levels)):
        duty, stack = _cop_run(bench, u, frames_per_level, "linearity", i)
        rows["u"].append(float(u))
        rows["duty"].append(duty)
        rows["photons"].append(duty * phot_full)
        rows["mean_dn"].append(float(stack.mean()))

    mean_dn = np.array(rows["mean_dn"])
    photons = np.array(rows["photons"])
    # Usable range and LE normalization are relative to the saturation
    # response (max observed mean), per the photon-transfer convention.
    resp_max = float(mean_dn.max())
    usable = (mean_dn >= 0.05 * resp_max) & (mean_dn <= 0.95 * resp_max)
    if np.all(mean_dn >= 0.95 * resp_max):
        raise ProtocolPreconditionError("response curve is flat: all levels saturated")
    if usable.sum() < 2:
        raise ProtocolPreconditionError("fewer than 2 usable levels in the 5-95% response range")

    slope, intercept = _lsq(photons[usable], mean_dn[usable])
    fit = slope * photons + intercept
    residual = mean_dn - fit
    le = float(np.abs(residual[usable]).max() / resp_max * 100.0)
    rows["fit_dn"] = fit.tolist()
    rows["residual_dn"] = residual.tolist()
    rows["used"] = usable.astype(int).tolist()

    return LinearityReport(
        slope_dn_per_photon=slope,
        intercept_dn=intercept,
        max_nonlinearity_pct=le,
        full_scale_dn=full_scale,
        n_levels_used=int(usable.sum()),
        frames_per_level=frames_per_level,
        curve=rows,
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


@dataclass
class UniformityReport:
    dsnu_dn: float
    prnu_pct: float
    dark_mean_dn: float
    half_mean_dn: float
    half_target_duty: float
    n_dark: int
    n_half: int
    protocol: str = "uniformity"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {}


def run_uniformity(bench: BenchConfig, n_dark=None, n_half=None) -> UniformityReport:
    p = bench.protocols.uniformity
    n_dark = n_dark or p.n_dark
    n_half = n_half or p.n_half
    if n_dark < 100 or n_half < 100:
        raise ProtocolPreconditionError("uniformity needs n_dark, n_half >= 100")

    t = bench.tianmouc
    sat_e = min(t.full_well, ((1 << t.adc_bits) - 1) / t.adc_gain)
    u_half = min(1.0, 0.5 * sat_e / (t.qe * _cop_photons_full(bench)))

    _, dark_stack = _cop_run(bench, 0.0, n_dark, "uniformity", 0)
    half_duty, half_stack = _cop_run(bench, u_half, n_half, "uniformity", 1)

    half_mean = float(half_stack.mean())
    sat_dn = sat_e * t.adc_gain
    if not 0.4 * sat_dn <= half_mean <= 0.6 * sat_dn + 1.0:
        raise ProtocolPreconditionError(
            f"half-level response {half_mean:.1f} DN outside 50%+-10% of saturation {sat_dn:.1f} DN"
        )

    dark_avg = dark_stack.mean(axis=0)
    half_avg = half_stack.mean(axis=0)
    dsnu_dn = float(dark_avg.std())
    s2_half = float(half_avg.var())
    s2_dark = float(dark_avg.var())
    mu_diff = float(half_avg.mean() - dark_avg.mean())
    prnu_pct = 100.0 * math.sqrt(max(0.0, s2_half - s2_dark)) / mu_diff if mu_diff > 0 else 0.0

    return UniformityReport(
        dsnu_dn=dsnu_dn,
        prnu_pct=prnu_pct,
        dark_mean_dn=float(dark_avg.mean()),
        half_mean_dn=half_mean,
        half_target_duty=half_duty,
        n_dark=n_dark,
        n_half=n_half,
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


@dataclass
class SNRReport:
    dynamic_range_db: float
    u_min: float
    u_sat: float
    frames_per_level: int
    curve: dict = dc_field(default_factory=dict)
    protocol: str = "snr_dr"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {"snr": self.curve}


def run_snr_dr(bench: BenchConfig, levels=None, frames_per_level=None) -> SNRReport:
    p = bench.protocols.snr_dr
    levels = sorted(levels if levels is not None else p.levels)
    frames_per_level = frames_per_level or p.frames_per_level
    if len(levels) < 20:
        raise ProtocolPreconditionError("snr_dr needs >= 20 illumination points")

    _, dark_stack = _cop_run(bench, 0.0, frames_per_level, "snr_dr", 0)
    dark_mean = float(dark_stack.mean())

    rows = {"u": [], "duty": [], "signal_dn": [], "noise_dn": [], "snr": [], "snr_db": []}
    for i, u in enumerate(levels):
        duty, stack = _cop_run(bench, u, frames_per_level, "snr_dr", i + 1)
        signal = float(stack.mean() - dark_mean)
        noise = float(math.sqrt(stack.var(axis=0, ddof=1).mean()))
        snr = signal / noise if noise > 0 else math.inf
        rows["u"].append(float(u))
        rows["duty"].append(duty)
        rows["signal_dn"].append(signal)
        rows["noise_dn"].append(noise)
        rows["snr"].append(snr)
        rows["snr_db"].append(20.0 * math.log10(snr) if 0 < snr < math.inf else None)

    snr = np.array([s if not math.isinf(s) else 1e12 for s in rows["snr"]])
    duty = np.array(rows["duty"])
    signal = np.array(rows["signal_dn"])

    # 0 dB crossing by log-log interpolation between bracketing levels.
    above = np.nonzero(snr >= 1.0)[0]
    if above.size == 0:
        raise MetricUndefinedError("SNR never crosses 0 dB within the level range")
    j = int(above[0])
    if j == 0:
        raise ProtocolPreconditionError("lowest level is already above the noise floor")
    lo, hi = j - 1, j
    if snr[lo] <= 0:
        u_min = duty[hi]
    else:
        f = (0.0 - math.log10(snr[lo])) / (math.log10(snr[hi]) - math.log10(snr[lo]))
        u_min = 10 ** (math.log10(duty[lo]) + f * (math.log10(duty[hi]) - math.log10(duty[lo])))

    plateau = float(signal.max())
    linear = (signal <= 0.7 * plateau) & (snr > 3.0)
    if linear.sum() < 2:
        raise ProtocolPreconditionError("levels do not span the linear range up to saturation")
    slope, intercept = _lsq(duty[linear], signal[linear])
    # illumination at which the response meets the saturation plateau
    u_sat = (plateau - intercept) / slope
    if u_sat <= u_min:
        raise MetricUndefinedError("saturation level does not exceed the noise floor")

    dr_db = 20.0 * math.log10(u_sat / u_min)
    return SNRReport(
        dynamic_range_db=dr_db,
        u_min=float(u_min),
        u_sat=float(u_sat),
        frames_per_level=frames_per_level,
        curve=rows,
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


@dataclass
class PhotonTransferReport:
    system_gain_dn_per_e: float      # K from variance-vs-mean slope
    responsivity_dn_per_photon: float
    qe_estimate: float
    n_levels_used: int
    frames_per_level: int
    curve: dict = dc_field(default_factory=dict)
    protocol: str = "photon_transfer"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {"transfer": self.curve}


def run_photon_transfer(bench: BenchConfig, levels=None, frames_per_level=None) -> PhotonTransferReport:
    p = bench.protocols.photon_transfer
    levels = sorted(levels if levels is not None else p.levels)
    frames_per_level = frames_per_level or p.frames_per_level
    if not levels:
        raise ProtocolPreconditionError("photon_transfer needs at least one level")

    t = bench.tianmouc
    phot_full = _cop_photons_full(bench)
    sat_dn = min(t.full_well * t.adc_gain, float((1 << t.adc_bits) - 1))

    _, dark_stack = _cop_run(bench, 0.0, frames_per_level, "photon_transfer", 0)
    dark_mean = float(dark_stack.mean())
    dark_var = float(dark_stack.var(axis=0, ddof=1).mean())

    rows = {"u": [], "duty": [], "photons": [], "mean_dn": [], "var_dn2": [], "used": []}
    for i, u in enumerate(levels):
        duty, stack = _cop_run(bench, u, frames_per_level, "photon_transfer", i + 1)
        mean = float(stack.mean())
        var = float(stack.var(axis=0, ddof=1).mean())
        rows["u"].append(float(u))
        rows["duty"].append(duty)
        rows["photons"].append(duty * phot_full)
        rows["mean_dn"].append(mean)
        rows["var_dn2"].append(var)
        rows["used"].append(1 if mean < 0.9 * sat_dn else 0)
    if rows["duty"] and max(rows["photons"]) <= 0:
        raise ProtocolPreconditionError("all levels quantize to zero photons")

    used = np.array(rows["used"], dtype=bool)
    if used.sum() < 2:
        raise ProtocolPreconditionError("fewer than 2 unsaturated levels")
    mean = np.array(rows["mean_dn"])[used] - dark_mean
    var = np.array(rows["var_dn2"])[used] - dark_var
    photons = np.array(rows["photons"])[used]
    k_gain, _ = _lsq(mean, var)
    resp, _ = _lsq(photons, mean)
    if k_gain <= 0:
        raise MetricUndefinedError("variance-vs-mean slope is not positive")

    return PhotonTransferReport(
        system_gain_dn_per_e=k_gain,
        responsivity_dn_per_photon=resp,
        qe_estimate=resp / k_gain,
        n_levels_used=int(used.sum()),
        frames_per_level=frames_per_level,
        curve=rows,
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


# --------------------------------------------------------------------------
# event-pathway protocols
# --------------------------------------------------------------------------

def _evs_cfg(bench: BenchConfig, protocol: str, index: int = 0) -> evs_mod.EVSConfig:
    return dataclasses.replace(
        bench.evs, seed=derive_seed(bench.seed, f"protocol.{protocol}", index)
    )


def _evs_step_field(bench: BenchConfig, duty_a: float, duty_b: float,
                    settle: int, hold: int) -> tuple[PhotonField, int]:
    """Per-plane photon field for a spatially uniform step; returns (field, t_step_ns)."""
    duties = [duty_a] * settle + [duty_b] * hold
    field = _uniform_sequence_field(bench, duties, group=1)
    m = bench.timing.planes_per_aop_frame
    t_step = field.t0_ns + settle * m * field.plane_period_ns
    return field, t_step


@dataclass
class LatencyReport:
    intensities: list
    median_latency_ns: list
    ci_half_width_ns: list
    achieved_delta_l: list
    n_trials: int
    curve: dict = dc_field(default_factory=dict)
    protocol: str = "evs_latency"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {"latency": self.curve}


def run_evs_latency(bench: BenchConfig, intensities=None, delta_l=None, trials=None) -> LatencyReport:
    p = bench.protocols.evs_latency
    intensities = list(intensities if intensities is not None else p.intensities)
    delta_l = delta_l if delta_l is not None else p.delta_l
    trials = trials or p.trials
    theta_on = bench.evs.theta_on
    if delta_l <= theta_on:
        raise ProtocolPreconditionError(f"step contrast {delta_l} must exceed theta_on {theta_on}")
    if trials < 20:
        raise ProtocolPreconditionError("latency protocol needs >= 20 trials")
    if bench.grid_width * bench.grid_height < trials:
        raise ProtocolPreconditionError("grid too small for the requested trial count")

    rows = {"u": [], "duty_base": [], "duty_step": [], "delta_l": [],
            "median_latency_ns": [], "ci_half_width_ns": [], "n": []}
    for i, u in enumerate(sorted(intensities)):
        # Flicker-free duties (identical per-plane on-counts) keep the log
        # drive piecewise constant, so the filter starts in true steady state.
        duty_a = _flickerless_duty(bench, u)
        duty_b = _flickerless_duty(bench, min(1.0, duty_a * math.exp(delta_l)))
        if duty_a <= 0 or math.log(duty_b / duty_a) <= theta_on:
            raise ProtocolPreconditionError(
                f"intensity {u}: achievable step contrast does not exceed theta_on"
            )
        field, t_step = _evs_step_field(bench, duty_a, duty_b, p.settle_frames, p.hold_frames)
        cfg = _evs_cfg(bench, "evs_latency", i)
        stream, _ = evs_mod.simulate(field, cfg)

        # First ON event at or after the step, per pixel, on generation times.
        on = (stream.polarity == 1) & (stream.t_generated_ns >= t_step)
        if not np.any(on):
            raise MetricUndefinedError(f"intensity {u}: no ON event within the record window")
        pix = stream.y[on].astype(np.int64) * bench.grid_width + stream.x[on].astype(np.int64)
        t_gen = stream.t_generated_ns[on]
        order = np.argsort(pix, kind="stable")  # events already time-ordered per pixel
        pix, t_gen = pix[order], t_gen[order]
        first_idx = np.unique(pix, return_index=True)[1]
        firsts = t_gen[first_idx]
        if firsts.shape[0] < trials:
            raise MetricUndefinedError(
                f"intensity {u}: only {firsts.shape[0]} pixels responded (< {trials} trials)"
            )
        lat = (firsts[:trials] - t_step).astype(np.float64)
        rows["u"].append(float(u))
        rows["duty_base"].append(duty_a)
        rows["duty_step"].append(duty_b)
        rows["delta_l"].append(math.log(duty_b / duty_a))
        rows["median_latency_ns"].append(float(np.median(lat)))
        rows["ci_half_width_ns"].append(_median_ci_half_width(lat))
        rows["n"].append(int(lat.shape[0]))

    return LatencyReport(
        intensities=rows["u"],
        median_latency_ns=rows["median_latency_ns"],
        ci_half_width_ns=rows["ci_half_width_ns"],
        achieved_delta_l=rows["delta_l"],
        n_trials=trials,
        curve=rows,
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


@dataclass
class ContrastThresholdReport:
    threshold_estimate: float
    contrasts: list
    response_fractions: list
    achieved_delta_l: list
    n_pixels: int
    ci_half_width: float
    curve: dict = dc_field(default_factory=dict)
    protocol: str = "evs_contrast"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {"psychometric": self.curve}


def run_evs_contrast_threshold(bench: BenchConfig, contrasts=None) -> ContrastThresholdReport:
    p = bench.protocols.evs_contrast
    contrasts = sorted(contrasts if contrasts is not None else p.contrasts)
    theta_on = bench.evs.theta_on
    if contrasts != sorted(contrasts) or len(contrasts) < 2:
        raise ProtocolPreconditionError("contrasts must be an ascending list of >= 2 values")
    if max(contrasts) < theta_on:
        raise ProtocolPreconditionError("no listed contrast reaches theta_on")
    if min(contrasts) >= theta_on:
        raise ProtocolPreconditionError("contrasts must straddle theta_on")

    n_pixels = bench.grid_width * bench.grid_height
    rows = {"delta_l": [], "achieved_delta_l": [], "response_fraction": []}
    for i, dl in enumerate(contrasts):
        duty_a = _flickerless_duty(bench, p.base_u)
        duty_b = _flickerless_duty(bench, min(1.0, duty_a * math.exp(dl)))
        achieved = math.log(duty_b / duty_a) if duty_b > duty_a else 0.0
        field, t_step = _evs_step_field(bench, duty_a, duty_b, p.settle_frames, p.hold_frames)
        cfg = _evs_cfg(bench, "evs_contrast", i)
        stream, _ = evs_mod.simulate(field, cfg)
        on = (stream.polarity == 1) & (stream.t_generated_ns >= t_step)
        responding = np.unique(
            stream.y[on].astype(np.int64) * bench.grid_width + stream.x[on].astype(np.int64)
        ).shape[0]
        rows["delta_l"].append(float(dl))
        rows["achieved_delta_l"].append(achieved)
        rows["response_fraction"].append(responding / n_pixels)

    frac = np.array(rows["response_fraction"])
    hits = np.nonzero(frac >= 0.5)[0]
    if hits.size == 0:
        raise MetricUndefinedError("no contrast produced >= 50% pixel response")
    estimate = float(contrasts[int(hits[0])])

    return ContrastThresholdReport(
        threshold_estimate=estimate,
        contrasts=[float(c) for c in contrasts],
        response_fractions=frac.tolist(),
        achieved_delta_l=rows["achieved_delta_l"],
        n_pixels=n_pixels,
        ci_half_width=float(np.diff(contrasts).max()),
        curve=rows,
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


@dataclass
class SaturationReport:
    knee_fraction: float | None
    bus_rate: float
    flicker_hz: float
    events_per_cycle_per_pixel: int
    curve: dict = dc_field(default_factory=dict)
    protocol: str = "event_saturation"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {"saturation": self.curve}


def run_event_saturation(bench: BenchConfig, active_fractions=None, delta_l=None,
                         flicker_hz=None) -> SaturationReport:
    p = bench.protocols.event_saturation
    fractions = sorted(active_fractions if active_fractions is not None else p.active_fractions)
    delta_l = delta_l if delta_l is not None else p.delta_l
    flicker_hz = flicker_hz if flicker_hz is not None else p.flicker_hz
    if fractions != sorted(fractions) or not fractions:
        raise ProtocolPreconditionError("active_fractions must be an ascending non-empty list")

    timing = bench.timing
    m = timing.planes_per_aop_frame
    frame_s = m * timing.plane_period_ns * 1e-9  # light-timeline frame duration
    half_frames = max(1, round(1.0 / (2.0 * flicker_hz * frame_s)))
    f_achieved = 1.0 / (2.0 * half_frames * frame_s)

    duty_lo = _flickerless_duty(bench, p.u_low)
    duty_hi = _flickerless_duty(bench, min(1.0, duty_lo * math.exp(delta_l)))
    if duty_lo <= 0 or math.log(duty_hi / duty_lo) <= bench.evs.theta_on:
        raise ProtocolPreconditionError("flicker contrast does not exceed theta_on")

    rows = {"fraction": [], "n_active": [], "ideal_rate": [], "generated": [],
            "emitted": [], "dropped": [], "emitted_rate": [], "shortfall": [],
            "max_queue_delay_ns": []}
    knee = None
    events_per_cycle = 0
    for i, fraction in enumerate(fractions):
        mask = flicker_active_mask(bench.grid_width, bench.grid_height, fraction)
        n_active = int(mask.sum())
        # one flicker cycle: half_frames low, half_frames high (active pixels only)
        duties = [duty_lo] * half_frames + [duty_hi] * half_frames
        frames = []
        period = timing.aop_frame_period_ns
        for j, d in enumerate(duties):
            rad = np.where(mask, d, duty_lo)
            frames.append(TargetFrame(bench.grid_width, bench.grid_height, rad,
                                      j * period, period))
        base = _project_frames(bench, frames, group=1)
        field = base.tiled(p.cycles)

        # bus-free oracle: exact input-driven count over the whole record
        # (all active pixels share one trajectory)
        ay, ax = np.argwhere(mask)[0]
        base_traj = base.counts[:, ay, ax]
        traj_full = np.log(np.tile(base_traj, p.cycles) + bench.evs.log_eps)
        per_pixel_ideal = evs_mod.ideal_event_count(traj_full, bench.evs)
        traj2 = np.log(np.tile(base_traj, 2) + bench.evs.log_eps)
        traj1 = np.log(base_traj + bench.evs.log_eps)
        events_per_cycle = evs_mod.ideal_event_count(traj2, bench.evs) - evs_mod.ideal_event_count(
            traj1, bench.evs
        )
        duration_s = field.duration_ns * 1e-9
        ideal_rate = n_active * per_pixel_ideal / duration_s

        cfg = _evs_cfg(bench, "event_saturation", i)
        stream, stats = evs_mod.simulate(field, cfg)
        emitted_rate = stats.emitted / duration_s
        shortfall = max(0.0, 1.0 - emitted_rate / ideal_rate) if ideal_rate > 0 else 0.0
        if knee is None and shortfall >= 0.05:
            knee = fraction
        rows["fraction"].append(float(fraction))
        rows["n_active"].append(n_active)
        rows["ideal_rate"].append(ideal_rate)
        rows["generated"].append(stats.generated)
        rows["emitted"].append(stats.emitted)
        rows["dropped"].append(stats.dropped)
        rows["emitted_rate"].append(emitted_rate)
        rows["shortfall"].append(shortfall)
        rows["max_queue_delay_ns"].append(stats.max_queue_delay_ns)

    return SaturationReport(
        knee_fraction=knee,
        bus_rate=bench.evs.bus_rate,
        flicker_hz=f_achieved,
        events_per_cycle_per_pixel=events_per_cycle,
        curve=rows,
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


@dataclass
class DiffSNRReport:
    td_snr: float | None
    sd_snr: float | None
    td_signal: float
    td_noise: float
    sd_signal: float
    sd_noise: float
    delta_i_electrons: float
    saturated: bool
    infinite_snr: bool
    n_trials: int
    td_ci_half_width: float
    protocol: str = "diff_snr"
    config_hash: str = ""
    seed: int = 0

    def curves(self):
        return {}


def run_diff_snr(bench: BenchConfig, delta_i=None, trials=None) -> DiffSNRReport:
    p = bench.protocols.diff_snr
    delta_i = delta_i if delta_i is not None else p.delta_i_electrons
    trials = trials or p.trials
    t = bench.tianmouc
    timing = bench.timing

    # AOP pixels integrate 2x2 COP-pixel flux.
    phot_aop_full = 4.0 * bench.optics.phi_max * timing.planes_per_aop_frame
    k2 = bench.mapping.k_cop**2
    e_per_grid_step = t.qe * phot_aop_full / k2
    duty_a = _flickerless_duty(bench, p.base_u)
    steps = max(1, round(delta_i / e_per_grid_step))
    duty_b = duty_a + steps / k2
    if duty_b > 1.0:
        raise ProtocolPreconditionError("diff_snr step exceeds full drive; lower base_u or delta_i")
    achieved_di = steps / k2 * phot_aop_full * t.qe
    saturated = abs(t.g_td * achieved_di) >= 127 or abs(t.g_sd * achieved_di) >= 127

    # temporal: [a]*settle + trials x ([b] + [a]*gap)
    duties = [duty_a] * 2
    step_frames = []
    for _ in range(trials):
        step_frames.append(len(duties))
        duties += [duty_b] + [duty_a] * p.static_gap
    base = _uniform_sequence_field(bench, duties, group=timing.planes_per_aop_frame)
    cfg = _sensor_cfg(bench, "diff_snr", 0)
    streams = tm.simulate(base, cfg, emit=("aop",))
    td = np.stack([f.td.astype(np.float64) for f in streams.aop])

    up_idx = np.array(step_frames)
    static_mask = np.ones(len(duties), dtype=bool)
    static_mask[0] = False                     # TD frame 0 is defined 0
    static_mask[up_idx] = False                # up-steps
    static_mask[np.minimum(up_idx + 1, len(duties) - 1)] = False  # down-steps
    td_signal = float(np.abs(td[up_idx].mean()))
    td_noise = float(td[static_mask].std(ddof=1))
    td_trial_means = td[up_idx].reshape(len(up_idx), -1).mean(axis=1)

    # spatial: static vertical edge at half width (even COP column -> clean AOP edge)
    h, w = bench.grid_height, bench.grid_width
    rad = np.full((h, w), duty_a)
    rad[:, w // 2 :] = duty_b
    period = timing.aop_frame_period_ns
    frames = [TargetFrame(w, h, rad, 0, period)]
    base_e = _project_frames(bench, frames, group=timing.planes_per_aop_frame).tiled(trials)
    streams_e = tm.simulate(base_e, _sensor_cfg(bench, "diff_snr", 1), emit=("aop",))
    sd = np.stack([f.sd[0].astype(np.float64) for f in streams_e.aop])  # kernel (+1, 0)
    edge_col = w // 4 - 1  # AOP column just left of the edge
    sd_signal = float(np.abs(sd[:, :, edge_col].mean()))
    sd_noise = float(sd[:, :, edge_col].std(ddof=1))

    infinite = td_noise == 0.0 or sd_noise == 0.0
    return DiffSNRReport(
        td_snr=None if td_noise == 0 else td_signal / td_noise,
        sd_snr=None if sd_noise == 0 else sd_signal / sd_noise,
        td_signal=td_signal,
        td_noise=td_noise,
        sd_signal=sd_signal,
        sd_noise=sd_noise,
        delta_i_electrons=achieved_di,
        saturated=saturated,
        infinite_snr=infinite,
        n_trials=trials,
        td_ci_half_width=_mean_ci_half_width(td_trial_means),
        config_hash=config_hash(bench),
        seed=bench.seed,
    )


_PROTOCOLS = {
    "linearity": run_linearity,
    "uniformity": run_uniformity,
    "snr_dr": run_snr_dr,
    "photon_transfer": run_photon_transfer,
    "evs_latency": run_evs_latency,
    "evs_contrast": run_evs_contrast_threshold,
    "event_saturation": run_event_saturation,
    "diff_snr": run_diff_snr,
}


def run_protocol(name: str, bench: BenchConfig):
    try:
        fn = _PROTOCOLS[name]
    except KeyError:
        raise ProtocolPreconditionError(
            f"unknown protocol {name!r}; available: {sorted(_PROTOCOLS)}"
        ) from None
    return fn(bench)


# --------------------------------------------------------------------------
# report serialization
# --------------------------------------------------------------------------

def _write_atomic(path, text: str) -> None:
    import os
    from pathlib import Path

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_curve_csv(path, curve: dict) -> None:
    """One CSV per curve: columns in insertion order, empty cell for None."""
    cols = list(curve.keys())
    n = len(curve[cols[0]]) if cols else 0
    lines = [",".join(cols)]
    for i in range(n):
        cells = []
        for c in cols:
            v = curve[c][i]
            cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        lines.append(",".join(cells))
    _write_atomic(path, "\n".join(lines) + "\n")


def write_report(report, out_dir, fmt: str = "json") -> list:
    """Write <protocol>.json (canonical) plus one CSV per curve; returns paths."""
    import dataclasses as dc
    from pathlib import Path

    from .config import canonical_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = report.protocol
    paths = []
    if fmt in ("json", "both"):
        p = out / f"{name}.json"
        _write_atomic(p, canonical_json(dc.asdict(report)))
        paths.append(p)
    for curve_name, curve in report.curves().items():
        if not curve:
            continue
        p = out / f"{name}_{curve_name}.csv"
        write_curve_csv(p, curve)
        paths.append(p)
    return paths
