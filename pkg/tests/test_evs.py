import math

import numpy as np
import pytest

from bvsbench import evs
from bvsbench.errors import ConfigError, FormatError
from bvsbench.projector import PhotonField

PLANE_NS = 31_250


def field_from(planes, repeats=1):
    arr = np.asarray(planes, dtype=np.float64)
    return PhotonField(width=arr.shape[2], height=arr.shape[1],
                       plane_period_ns=PLANE_NS, counts=arr, repeats=repeats)


def step_field(i1, i2, n1=2, n2=4, shape=(2, 3)):
    h, w = shape
    planes = np.concatenate([
        np.full((n1, h, w), i1), np.full((n2, h, w), i2),
    ])
    return field_from(planes)


def ideal_cfg(**over):
    base = dict(log_eps=1e-9, bus_rate=1e9, fifo_depth=10**6)
    base.update(over)
    return evs.EVSConfig.ideal(**base)


def test_constant_field_no_events():
    stream, stats = evs.simulate(field_from(np.full((5, 2, 3), 123.0)), ideal_cfg())
    assert len(stream) == 0 and stats.generated == 0


def test_count_law_step_07_theta_02():
    i1 = 100.0
    field = step_field(i1, i1 * math.exp(0.7))
    stream, _ = evs.simulate(field, ideal_cfg())
    per_pixel = np.bincount(
        stream.y.astype(int) * 3 + stream.x.astype(int), minlength=6
    )
    assert np.all(per_pixel == 3)  # floor(0.7 / 0.2) exactly
    assert np.all(stream.polarity == 1)


def test_count_law_various_contrasts():
    # contrasts chosen away from exact theta multiples (float-ln boundaries)
    for dl, expected in ((0.21, 1), (0.39, 1), (0.41, 2), (1.05, 5), (0.19, 0)):
        field = step_field(50.0, 50.0 * math.exp(dl), shape=(1, 1))
        stream, _ = evs.simulate(field, ideal_cfg())
        assert len(stream) == expected, dl


def test_polarity_for_decreasing_intensity():
    field = step_field(200.0, 200.0 * math.exp(-0.5), shape=(1, 2))
    stream, _ = evs.simulate(field, ideal_cfg())
    assert len(stream) == 2 * 2  # floor(0.5/0.2) per pixel
    assert np.all(stream.polarity == -1)


def test_asymmetric_thresholds():
    field = step_field(100.0, 100.0 * math.exp(-0.65), shape=(1, 1))
    stream, _ = evs.simulate(field, ideal_cfg(theta_off=0.3))
    assert len(stream) == 2  # floor(0.65 / 0.3)


def test_analytic_first_crossing_with_lag():
    # tau = 1 ms: first event at tau * ln(dL / (dL - theta)) after the step
    tau_s = 1e-3
    f_dark = 1.0 / (2 * math.pi * tau_s)
    cfg = evs.EVSConfig(theta_on=0.2, theta_off=0.2, tau_ref_ns=0.0,
                        f_dark=f_dark, k_f=0.0, f_max=1e12, log_eps=1e-9,
                        noise_rate_hz=0.0, bus_rate=1e9, fifo_depth=10**6)
    dl = 0.7
    field = step_field(100.0, 100.0 * math.exp(dl), n1=4, n2=40, shape=(1, 1))
    stream, _ = evs.simulate(field, cfg)
    assert len(stream) >= 1
    t_step = 4 * PLANE_NS
    expected = tau_s * 1e9 * math.log(dl / (dl - 0.2))
    assert stream.t_generated_ns[0] - t_step == pytest.approx(expected, abs=2.0)


def test_refractory_period_spaces_events():
    tau_ref = 5 * PLANE_NS
    field = step_field(100.0, 100.0 * math.exp(0.7), n2=40, shape=(1, 1))
    stream, _ = evs.simulate(field, ideal_cfg(tau_ref_ns=float(tau_ref)))
    assert len(stream) == 3
    gaps = np.diff(stream.t_generated_ns)
    assert np.all(gaps >= tau_ref)


def test_ideal_event_count_examples():
    cfg = ideal_cfg()
    assert evs.ideal_event_count(np.full(10, 3.21), cfg) == 0
    ramp = np.linspace(0.0, 1.0, 101)
    assert evs.ideal_event_count(ramp, cfg) == 5  # floor(1.0/0.2)
    saw = []
    for _ in range(4):
        saw.extend(np.linspace(0.0, 0.5, 11))
        saw.extend(np.linspace(0.5, 0.0, 11))
    assert evs.ideal_event_count(np.array(saw), cfg) == 4 * (2 + 2)
    with pytest.raises(ConfigError):
        evs.ideal_event_count(np.zeros(0), cfg)


def test_timestamp_order_and_tiebreak():
    rng = np.random.default_rng(8)
    planes = rng.uniform(50.0, 5000.0, size=(30, 4, 6))
    stream, _ = evs.simulate(field_from(planes), ideal_cfg(theta_on=0.3, theta_off=0.3))
    assert len(stream) > 0
    t = stream.t_ns
    assert np.all(np.diff(t) >= 0)
    gen = stream.t_generated_ns
    key = np.stack([gen, stream.y, stream.x, stream.polarity])
    order = np.lexsort(key[::-1])
    assert np.array_equal(order, np.arange(len(stream)))  # arrival order preserved


def test_bus_saturation_conservation():
    # sustained overload: emitted spacing >= drain, drops make up the difference
    field = field_from(np.concatenate([
        np.full((1, 8, 8), 100.0), np.full((1, 8, 8), 100.0 * math.e),
    ]), repeats=40)
    cfg = ideal_cfg(bus_rate=1e6, fifo_depth=8)
    stream, stats = evs.simulate(field, cfg)
    assert stats.generated == stats.emitted + stats.dropped
    assert stats.dropped > 0
    spacing = np.diff(stream.t_ns)
    assert np.all(spacing >= math.floor(1e9 / cfg.bus_rate) - 1)
    assert stats.max_queue_delay_ns <= cfg.fifo_depth * (1e9 / cfg.bus_rate) + 1


def test_noise_events_poisson_rate():
    field = field_from(np.full((1, 16, 16), 100.0), repeats=320)  # 10 ms
    cfg = ideal_cfg(noise_rate_hz=2000.0)
    stream, stats = evs.simulate(field, cfg)
    expected = 16 * 16 * 2000.0 * (320 * PLANE_NS * 1e-9)
    assert stats.generated == pytest.approx(expected, rel=0.25)
    assert set(np.unique(stream.polarity)) <= {-1, 1}


def test_threshold_jitter_determinism():
    field = step_field(100.0, 100.0 * math.exp(0.3), shape=(8, 8))
    cfg = ideal_cfg(theta_jitter=0.05, seed=21)
    a, _ = evs.simulate(field, cfg)
    b, _ = evs.simulate(field, cfg)
    assert np.array_equal(a.t_ns, b.t_ns) and np.array_equal(a.x, b.x)
    counts = np.bincount(a.y.astype(int) * 8 + a.x.astype(int), minlength=64)
    assert len(np.unique(counts)) > 1  # jitter differentiates pixels


def test_latency_decreases_with_intensity():
    cfg = evs.EVSConfig(theta_on=0.2, theta_off=0.2, tau_ref_ns=0.0,
                        f_dark=50.0, k_f=1.0, f_max=1e12, log_eps=1e-9,
                        noise_rate_hz=0.0, bus_rate=1e9, fifo_depth=10**6)
    latencies = []
    for i1 in (50.0, 200.0, 800.0):
        field = step_field(i1, i1 * math.exp(0.7), n1=2, n2=60, shape=(1, 1))
        stream, _ = evs.simulate(field, cfg)
        latencies.append(stream.t_generated_ns[0] - 2 * PLANE_NS)
    assert latencies[0] > latencies[1] > latencies[2]


def test_evt1_roundtrip_and_csv(tmp_path):
    field = step_field(100.0, 300.0, shape=(2, 2))
    stream, _ = evs.simulate(field, ideal_cfg())
    p = tmp_path / "e.evt1"
    evs.write_evt1(p, stream)
    back = evs.read_evt1(p)
    for attr in ("t_ns", "x", "y", "polarity", "t_generated_ns"):
        assert np.array_equal(getattr(back, attr), getattr(stream, attr))
    csv = tmp_path / "e.csv"
    evs.write_events_csv(csv, stream)
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "t_ns,x,y,polarity,t_generated_ns"
    assert len(lines) == len(stream) + 1


def test_evt1_malformed(tmp_path):
    p = tmp_path / "bad.evt1"
    p.write_bytes(b"EVT2" + b"\x00" * 20)
    with pytest.raises(FormatError):
        evs.read_evt1(p)
    p.write_bytes(b"EVT1" + (1).to_bytes(4, "little") * 3 + (99).to_bytes(8, "little"))
    with pytest.raises(FormatError):
        evs.read_evt1(p)


def test_config_validation():
    with pytest.raises(ConfigError):
        evs.EVSConfig(theta_on=0.0).validate()
    with pytest.raises(ConfigError):
        evs.EVSConfig(bus_rate=0.0).validate()
    with pytest.raises(ConfigError):
        evs.EVSConfig(fifo_depth=0).validate()
