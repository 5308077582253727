import dataclasses
import math

import numpy as np
import pytest

from bvsbench import dataset as ds
from bvsbench import tianmouc as tm
from bvsbench.config import build_config
from bvsbench.errors import ConfigError, FormatError, GeometryError
from bvsbench.projector import PhotonField
from bvsbench.rng import derive_seed


def bench(**tm_over):
    t = {"qe": 0.5, "full_well": 1e6, "read_noise": 0.0, "shot_noise": False,
         "adc_bits": 14, "adc_gain": 0.2, "g_td": 0.1, "g_sd": 0.1}
    t.update(tm_over)
    return build_config({
        "grid_width": 32, "grid_height": 16, "seed": 5,
        "mapping": {"dmd_width": 160, "dmd_height": 96},
        "optics": {"phi_max": 50.0},
        "tianmouc": t,
    })


def rgb_static(level_rgb, n=3, h=16, w=32):
    out = np.zeros((n, h, w, 3))
    out[..., 0], out[..., 1], out[..., 2] = level_rgb
    return out


def test_black_video_dark_and_zero_td(tmp_path):
    cfg = bench(dark_current=2.0)
    d = ds.convert(rgb_static((0, 0, 0)), cfg, tmp_path / "d")
    dark_dn = round(2.0 * 25 * 0.2)
    for k in range(d.record_count):
        rec = d.record(k)
        assert np.all(rec.cop[0].mosaic == dark_dn)
        for f in rec.aop:
            assert not f.td.any()


def test_static_source_zero_td_all_records(tmp_path):
    rng = np.random.default_rng(9)
    frame = rng.random((16, 32, 3))
    rgb = np.repeat(frame[None], 4, axis=0)
    d = ds.convert(rgb, bench(), tmp_path / "d")
    for k in range(4):
        for f in d.record(k).aop:
            assert not f.td.any()


def test_sd_matches_simulate_on_luma(tmp_path):
    rng = np.random.default_rng(10)
    rgb = np.repeat(rng.random((16, 32, 3))[None], 2, axis=0)
    cfg = bench()
    d = ds.convert(rgb, cfg, tmp_path / "d")
    fields = ds._channel_fields(rgb, cfg)
    luma = PhotonField(
        width=32, height=16, plane_period_ns=fields["R"].plane_period_ns,
        counts=(fields["R"].counts + fields["G"].counts + fields["B"].counts) / 3.0,
        hold=25,
    )
    aop_cfg = dataclasses.replace(cfg.tianmouc, seed=derive_seed(cfg.seed, "dataset.aop"))
    ps = tm.simulate(luma, aop_cfg, emit=("aop",))
    for n in range(50):
        rec = d.record(n // 25)
        assert np.array_equal(ps.aop[n].td, rec.aop[n % 25].td)
        assert np.array_equal(ps.aop[n].sd, rec.aop[n % 25].sd)


def test_pure_red_channel_separation(tmp_path):
    cfg = bench(dark_current=1.0)
    d = ds.convert(rgb_static((0.75, 0.0, 0.0), n=1), cfg, tmp_path / "d")
    m = d.record(0).cop[0].mosaic.astype(float)
    dark_dn = 1.0 * 25 * 0.2
    assert m[0::2, 0::2].mean() > 100  # R sites elevated
    assert m[0::2, 1::2].mean() == pytest.approx(dark_dn, abs=1.0)  # G sites at dark level
    assert m[1::2, 1::2].mean() == pytest.approx(dark_dn, abs=1.0)  # B sites at dark level


def test_blue_edit_leaves_r_sites_unchanged(tmp_path):
    cfg = bench()
    a = ds.convert(rgb_static((0.6, 0.3, 0.1), n=2), cfg, tmp_path / "a")
    b = ds.convert(rgb_static((0.6, 0.3, 0.9), n=2), cfg, tmp_path / "b")
    ma = a.record(1).cop[0].mosaic
    mb = b.record(1).cop[0].mosaic
    assert np.array_equal(ma[0::2, 0::2], mb[0::2, 0::2])
    assert np.array_equal(ma[0::2, 1::2], mb[0::2, 1::2])
    assert not np.array_equal(ma[1::2, 1::2], mb[1::2, 1::2])


def test_roundtrip_bound_noiseless(tmp_path):
    cfg = bench()
    rng = np.random.default_rng(11)
    rgb = rng.random((3, 16, 32, 3))
    d = ds.convert(rgb, cfg, tmp_path / "d")
    rep = ds.verify_roundtrip(d, rgb, cfg)
    m = cfg.timing.planes_per_aop_frame
    k2 = cfg.mapping.k_cop**2
    phot_full = cfg.optics.phi_max * m * cfg.timing.cop_ratio
    bound = 1.0 / (2 * m * k2) + 0.5 / (cfg.tianmouc.adc_gain * cfg.tianmouc.qe * phot_full)
    assert max(rep["mae_r"], rep["mae_g"], rep["mae_b"]) <= bound


def test_roundtrip_read_noise_growth(tmp_path):
    rng = np.random.default_rng(12)
    rgb = rng.random((2, 16, 32, 3)) * 0.5 + 0.25
    sigma_e = 50.0
    cfg = bench(read_noise=sigma_e, dark_current=20.0)
    d = ds.convert(rgb, cfg, tmp_path / "d")
    rep = ds.verify_roundtrip(d, rgb, cfg)
    # folded-Gaussian mean: MAE grows by ~ sigma * sqrt(2/pi) in u units
    phot_full = cfg.optics.phi_max * cfg.timing.planes_per_aop_frame * cfg.timing.cop_ratio
    sigma_u = sigma_e / (cfg.tianmouc.qe * phot_full)
    expected = sigma_u * math.sqrt(2 / math.pi)
    # G averages two sites -> sigma/sqrt(2)
    assert rep["mae_r"] == pytest.approx(expected, rel=0.15)
    assert rep["mae_g"] == pytest.approx(expected / math.sqrt(2), rel=0.15)


def test_manifest_mismatch_rejected(tmp_path):
    cfg = bench()
    rgb = rgb_static((0.5, 0.5, 0.5), n=2)
    d = ds.convert(rgb, cfg, tmp_path / "d")
    with pytest.raises(FormatError):
        ds.verify_roundtrip(d, rgb_static((0.5, 0.5, 0.5), n=3), cfg)


def test_dataset_layout_and_loading(tmp_path):
    cfg = bench()
    d = ds.convert(rgb_static((0.2, 0.4, 0.6), n=2), cfg, tmp_path / "d", source_id="clip7")
    assert (tmp_path / "d" / "manifest.json").exists()
    assert (tmp_path / "d" / "index.csv").exists()
    idx = (tmp_path / "d" / "index.csv").read_text().strip().splitlines()
    assert idx[0] == "record,source_frame_start,source_frame_end,sha256"
    assert len(idx) == 3
    loaded = ds.load_dataset(tmp_path / "d")
    assert loaded.record_count == 2
    assert loaded.manifest["source_id"] == "clip7"
    assert loaded.manifest["config_hash"] == d.manifest["config_hash"]
    rec = loaded.record(0)
    assert len(rec.aop) == 25 == rec.cop_ratio


def test_incomplete_dataset_rejected(tmp_path):
    cfg = bench()
    d = ds.convert(rgb_static((0.2, 0.2, 0.2), n=2), cfg, tmp_path / "d")
    d.record_path(1).unlink()
    with pytest.raises(FormatError):
        ds.load_dataset(tmp_path / "d")
    (tmp_path / "d" / "manifest.json").unlink()
    with pytest.raises(FormatError):
        ds.load_dataset(tmp_path / "d")


def test_grid_and_range_validation(tmp_path):
    cfg = bench()
    with pytest.raises(GeometryError):
        ds.convert(np.zeros((1, 8, 8, 3)), cfg, tmp_path / "d")
    with pytest.raises(ConfigError):
        ds.convert(np.zeros((0, 16, 32, 3)), cfg, tmp_path / "d")
    with pytest.raises(ConfigError):
        ds.convert(np.full((1, 16, 32, 3), 1.5), cfg, tmp_path / "d")


def test_jobs_do_not_change_output(tmp_path):
    cfg = bench(shot_noise=True, read_noise=3.0, sigma_dsnu=1.0)
    rng = np.random.default_rng(13)
    rgb = rng.random((4, 16, 32, 3))
    d1 = ds.convert(rgb, cfg, tmp_path / "j1", jobs=1)
    d8 = ds.convert(rgb, cfg, tmp_path / "j8", jobs=8)
    for k in range(4):
        assert d1.record_path(k).read_bytes() == d8.record_path(k).read_bytes()
