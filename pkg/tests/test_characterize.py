import json
import math

import numpy as np
import pytest

from bvsbench import characterize as ch
from bvsbench.config import build_config
from bvsbench.errors import MetricUndefinedError, ProtocolPreconditionError


def bench(**over):
    data = {
        "grid_width": 64, "grid_height": 32, "seed": 7,
        "mapping": {"dmd_width": 320, "dmd_height": 192},
        "optics": {"phi_max": 20.0},
        "tianmouc": {"qe": 0.6, "full_well": 10000.0, "read_noise": 10.0,
                     "dark_current": 4.0, "adc_bits": 14, "adc_gain": 1.0},
    }
    for key, val in over.items():
        if isinstance(val, dict) and key in data:
            data[key].update(val)
        else:
            data[key] = val
    return build_config(data)


def evs_bench(**evs_over):
    evs = {"theta_on": 0.2, "theta_off": 0.2, "tau_ref_ns": 0.0,
           "f_dark": "inf", "f_max": "inf", "k_f": 0.0, "log_eps": 1e-6,
           "bus_rate": 1e9, "fifo_depth": 10**6}
    evs.update(evs_over)
    return bench(grid_width=32, grid_height=16,
                 mapping={"dmd_width": 160, "dmd_height": 96},
                 optics={"phi_max": 1000.0}, evs=evs)


# ---------------------------------------------------------------- linearity

def test_linearity_noiseless_sensor_is_linear():
    cfg = bench(tianmouc={"shot_noise": False, "read_noise": 0.0, "full_well": 2e4})
    rep = ch.run_linearity(cfg)
    assert rep.max_nonlinearity_pct < 100.0 / rep.full_scale_dn  # within 1 DN
    assert rep.n_levels_used >= 5


def linearity_oracle_le(cfg, levels, alpha):
    """Analytic LE of the LSQ fit on the known (quadratic) mean curve."""
    phot_full = ch._cop_photons_full(cfg)
    t = cfg.tianmouc
    duties = np.array([ch._cop_duty_split(cfg, u)[0] for u in sorted(levels)])
    photons = duties * phot_full
    e = photons * t.qe
    e = e + alpha * e * e + t.dark_current * cfg.timing.cop_ratio
    dn = t.adc_gain * np.minimum(e, t.full_well)
    resp_max = dn.max()
    usable = (dn >= 0.05 * resp_max) & (dn <= 0.95 * resp_max)
    a = np.vstack([photons[usable], np.ones(usable.sum())]).T
    sol, *_ = np.linalg.lstsq(a, dn[usable], rcond=None)
    resid = dn[usable] - (sol[0] * photons[usable] + sol[1])
    return float(np.abs(resid).max() / resp_max * 100.0)


def test_linearity_recovers_injected_quadratic():
    levels = [round(0.05 + 0.1 * i, 2) for i in range(10)]
    # calibrate the quadratic coefficient so the analytic LE is exactly 2%
    # (LE is not linear in the coefficient: the fit window shifts with it)
    cfg0 = bench(tianmouc={"full_well": 1e9})
    alpha = 1e-6
    for _ in range(30):
        le = linearity_oracle_le(cfg0, levels, alpha)
        if abs(le - 2.0) < 1e-9:
            break
        alpha *= 2.0 / le
    cfg = bench(tianmouc={"shot_noise": True, "read_noise": 5.0, "full_well": 1e9,
                          "quad_coeff": alpha})
    oracle = linearity_oracle_le(cfg, levels, alpha)
    assert oracle == pytest.approx(2.0, abs=0.01)
    rep = ch.run_linearity(cfg, levels=levels, frames_per_level=30)
    assert rep.max_nonlinearity_pct == pytest.approx(2.0, abs=0.2)


def test_linearity_preconditions():
    cfg = bench()
    with pytest.raises(ProtocolPreconditionError):
        ch.run_linearity(cfg, levels=[1.0, 1.0, 1.0])
    with pytest.raises(ProtocolPreconditionError):
        ch.run_linearity(cfg, levels=[0.3, 0.4, 0.5, 0.6, 0.7])


# ---------------------------------------------------------------- uniformity

def test_uniformity_null_case():
    cfg = bench(tianmouc={"sigma_dsnu": 0.0, "read_noise": 8.0, "dark_current": 4.0})
    rep = ch.run_uniformity(cfg, n_dark=400, n_half=100)
    assert rep.dsnu_dn < 3 * 8.0 / math.sqrt(400)


def test_uniformity_recovers_dsnu_and_prnu():
    cfg = bench(tianmouc={"sigma_dsnu": 2.0, "sigma_prnu": 0.01,
                          "read_noise": 10.0, "dark_current": 8.0})
    rep = ch.run_uniformity(cfg, n_dark=1000, n_half=1000)
    assert rep.dsnu_dn == pytest.approx(2.0, rel=0.05)
    assert rep.prnu_pct == pytest.approx(1.0, rel=0.1)


def test_uniformity_preconditions():
    cfg = bench()
    with pytest.raises(ProtocolPreconditionError):
        ch.run_uniformity(cfg, n_dark=50, n_half=100)


# ---------------------------------------------------------------- snr / dr

def test_snr_dr_closed_form_recovery():
    cfg = bench()
    rep = ch.run_snr_dr(cfg)
    dark_e = cfg.tianmouc.dark_current * cfg.timing.cop_ratio
    mu_min = (1.0 + math.sqrt(1.0 + 4.0 * 10.0**2)) / 2.0
    oracle = 20.0 * math.log10((10000.0 - dark_e) / mu_min)
    assert rep.dynamic_range_db == pytest.approx(oracle, abs=0.5)


def test_snr_shot_noise_slope_half():
    cfg = bench(tianmouc={"read_noise": 0.0, "dark_current": 0.0, "full_well": 1e9})
    # pure shot noise: start below one electron so the 0 dB crossing exists
    levels = [10 ** (-4.3 + 4.3 * i / 19) for i in range(20)]
    rep = ch.run_snr_dr(cfg, levels=levels, frames_per_level=25)
    duty = np.array(rep.curve["duty"])
    snr = np.array(rep.curve["snr"])
    good = (snr > 3) & np.isfinite(snr) & (duty < 0.7)
    slope = np.polyfit(np.log10(duty[good]), np.log10(snr[good]), 1)[0]
    assert slope == pytest.approx(0.5, abs=0.02)


def test_snr_dr_no_crossing_is_metric_undefined():
    cfg = bench(optics={"phi_max": 0.02})  # everything below the noise floor
    with pytest.raises(MetricUndefinedError):
        ch.run_snr_dr(cfg, levels=[1e-4 * (1 + 0.1 * i) for i in range(20)],
                      frames_per_level=20)


# ---------------------------------------------------------------- photon transfer

def test_photon_transfer_recovers_qe_and_gain():
    cfg = bench(grid_width=96, grid_height=48,
                mapping={"dmd_width": 448, "dmd_height": 256},
                optics={"phi_max": 50.0},
                tianmouc={"qe": 0.6, "full_well": 40000.0, "read_noise": 20.0,
                          "dark_current": 40.0, "adc_bits": 10, "adc_gain": 0.02})
    rep = ch.run_photon_transfer(cfg, frames_per_level=60)
    assert rep.qe_estimate == pytest.approx(0.6, abs=0.03)
    assert rep.system_gain_dn_per_e == pytest.approx(0.02, rel=0.05)


def test_photon_transfer_scale_invariance():
    base = dict(grid_width=96, grid_height=48,
                mapping={"dmd_width": 448, "dmd_height": 256},
                tianmouc={"qe": 0.5, "full_well": 60000.0, "read_noise": 20.0,
                          "dark_current": 40.0, "adc_bits": 10, "adc_gain": 0.02})
    r1 = ch.run_photon_transfer(bench(optics={"phi_max": 40.0}, **base), frames_per_level=50)
    r2 = ch.run_photon_transfer(bench(optics={"phi_max": 80.0}, **base),
                                levels=[l / 2 for l in bench(**base).protocols.photon_transfer.levels],
                                frames_per_level=50)
    assert r1.qe_estimate == pytest.approx(r2.qe_estimate, abs=0.04)


def test_photon_transfer_zero_input_error():
    cfg = bench()
    with pytest.raises(ProtocolPreconditionError):
        ch.run_photon_transfer(cfg, levels=[0.0, 0.0001 / 20])


# ---------------------------------------------------------------- evs protocols

def test_latency_lag_free_is_zero():
    cfg = evs_bench()
    rep = ch.run_evs_latency(cfg, intensities=[0.125, 0.25, 0.375], delta_l=0.7, trials=32)
    assert all(m == 0.0 for m in rep.median_latency_ns)


def test_latency_matches_analytic_crossing():
    tau_s = 1e-3
    cfg = evs_bench(f_dark=1.0 / (2 * math.pi * tau_s), f_max=1e12)
    rep = ch.run_evs_latency(cfg, intensities=[0.25], delta_l=0.7, trials=32)
    dl = rep.achieved_delta_l[0]
    expected = tau_s * 1e9 * math.log(dl / (dl - 0.2))
    assert rep.median_latency_ns[0] == pytest.approx(expected, abs=31_250)


def test_latency_preconditions():
    cfg = evs_bench()
    with pytest.raises(ProtocolPreconditionError):
        ch.run_evs_latency(cfg, intensities=[0.25], delta_l=0.1, trials=32)
    with pytest.raises(ProtocolPreconditionError):
        ch.run_evs_latency(cfg, intensities=[0.25], delta_l=0.7, trials=5)


def test_contrast_threshold_exact_semantics():
    cfg = evs_bench()
    rep = ch.run_evs_contrast_threshold(cfg, contrasts=[0.1, 0.15, 0.25, 0.4])
    assert rep.threshold_estimate == 0.25
    with pytest.raises(ProtocolPreconditionError):
        ch.run_evs_contrast_threshold(cfg, contrasts=[0.05, 0.1, 0.15])


def test_contrast_threshold_with_jitter_within_band():
    sigma = 0.03
    cfg = evs_bench(theta_jitter=sigma)
    contrasts = [0.1 + 0.02 * i for i in range(11)]
    rep = ch.run_evs_contrast_threshold(cfg, contrasts=contrasts)
    assert 0.2 - 2 * sigma <= rep.threshold_estimate <= 0.2 + 2 * sigma


def test_event_saturation_conservation_and_knee():
    cfg = evs_bench(bus_rate=2e5, fifo_depth=512)
    cfg.protocols.event_saturation.cycles = 40
    rep = ch.run_event_saturation(cfg, active_fractions=[0.05, 0.2, 0.8],
                                  delta_l=0.7, flicker_hz=380.0)
    c = rep.curve
    assert c["generated"][0] == c["emitted"][0] + c["dropped"][0]
    assert c["shortfall"][-1] > 0.5
    assert rep.knee_fraction is not None
    # knee moves right (or disappears) when the bus is twice as fast
    cfg2 = evs_bench(bus_rate=4e5, fifo_depth=512)
    cfg2.protocols.event_saturation.cycles = 40
    rep2 = ch.run_event_saturation(cfg2, active_fractions=[0.05, 0.2, 0.8],
                                   delta_l=0.7, flicker_hz=380.0)
    assert rep2.knee_fraction is None or rep2.knee_fraction > rep.knee_fraction


def test_event_saturation_under_capacity():
    cfg = evs_bench(bus_rate=1e8, fifo_depth=10**6)
    cfg.protocols.event_saturation.cycles = 10
    rep = ch.run_event_saturation(cfg, active_fractions=[0.05, 0.1],
                                  delta_l=0.7, flicker_hz=380.0)
    assert rep.knee_fraction is None
    assert all(d == 0 for d in rep.curve["dropped"])
    assert all(s < 0.05 for s in rep.curve["shortfall"])


# ---------------------------------------------------------------- diff snr

def diff_bench(**tm_over):
    t = {"qe": 0.5, "full_well": 1e6, "read_noise": 0.0,
         "g_td": 0.05, "g_sd": 0.05}
    t.update(tm_over)
    return bench(grid_width=32, grid_height=16,
                 mapping={"dmd_width": 160, "dmd_height": 96},
                 optics={"phi_max": 30.0}, tianmouc=t)


def test_diff_snr_shot_noise_oracle():
    cfg = diff_bench()
    cfg.protocols.diff_snr.base_u = 0.25
    cfg.protocols.diff_snr.delta_i_electrons = 157.0
    rep = ch.run_diff_snr(cfg, trials=80)
    mu = 0.5 * (4 * 30.0 * cfg.timing.planes_per_aop_frame) * 0.25
    oracle_noise = 0.05 * math.sqrt(2 * mu)
    assert rep.td_noise == pytest.approx(oracle_noise, rel=0.10)
    assert rep.td_signal == pytest.approx(0.05 * rep.delta_i_electrons, rel=0.05)


def test_diff_snr_scales_with_contrast():
    cfg = diff_bench()
    cfg.protocols.diff_snr.base_u = 0.25
    r1 = ch.run_diff_snr(cfg, delta_i=157.0, trials=60)
    r2 = ch.run_diff_snr(cfg, delta_i=315.0, trials=60)
    assert r2.td_snr / r1.td_snr == pytest.approx(2.0, rel=0.1)


def test_diff_snr_zero_noise_sentinel():
    cfg = diff_bench(shot_noise=False)
    rep = ch.run_diff_snr(cfg, trials=10)
    assert rep.infinite_snr and rep.td_snr is None


def test_diff_snr_saturation_flag():
    cfg = diff_bench(g_td=10.0, g_sd=10.0)
    rep = ch.run_diff_snr(cfg, delta_i=400.0, trials=10)
    assert rep.saturated


# ---------------------------------------------------------------- plumbing

def test_reports_embed_config_hash_and_are_deterministic(tmp_path):
    cfg = evs_bench()
    r1 = ch.run_evs_contrast_threshold(cfg)
    r2 = ch.run_evs_contrast_threshold(cfg)
    assert r1 == r2
    assert len(r1.config_hash) == 64
    paths = ch.write_report(r1, tmp_path)
    data = json.loads((tmp_path / "evs_contrast.json").read_text())
    assert data["config_hash"] == r1.config_hash
    csvs = [p for p in paths if p.suffix == ".csv"]
    assert csvs and csvs[0].read_text().startswith("delta_l,")


def test_unknown_protocol_rejected():
    with pytest.raises(ProtocolPreconditionError):
        ch.run_protocol("frobnicate", evs_bench())
