import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bvsbench.cli import main
from bvsbench.stimulus import write_bvsf

GOLDEN = Path(__file__).parent / "golden"
CONFIG = str(GOLDEN / "encode_bench.yaml")


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_encode_golden_byte_identical(tmp_path):
    assert main(["encode", "--config", CONFIG, "--out", str(tmp_path), "--frames", "10"]) == 0
    assert (tmp_path / "planes.dmds").read_bytes() == (GOLDEN / "golden.dmds").read_bytes()


def test_simulate_golden_byte_identical(tmp_path):
    assert main(["simulate", "--config", CONFIG, "--out", str(tmp_path),
                 "--sensor", "tianmouc", "--frames", "10"]) == 0
    assert (tmp_path / "tianmouc.tmoc").read_bytes() == (GOLDEN / "rotating.tmoc").read_bytes()


def test_encode_zero_stimulus_payload_all_zero(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        (GOLDEN / "encode_bench.yaml").read_text()
        + "\n"
    )
    # add an explicit zero stimulus by overriding on a copy
    text = cfg.read_text().replace(
        "stimuli:", "stimuli:\n  dark:\n    kind: Uniform\n    parameters:\n      level: 0.0",
        1,
    )
    cfg.write_text(text)
    assert main(["encode", "--config", str(cfg), "--out", str(tmp_path),
                 "--stimulus", "dark", "--frames", "2"]) == 0
    data = (tmp_path / "planes.dmds").read_bytes()
    assert set(data[36:]) == {0}  # header then all-zero payload


def test_simulate_from_stream_matches_direct(tmp_path):
    assert main(["encode", "--config", CONFIG, "--out", str(tmp_path / "e"),
                 "--frames", "10"]) == 0
    assert main(["simulate", "--config", CONFIG, "--out", str(tmp_path / "a"),
                 "--sensor", "tianmouc", "--frames", "10"]) == 0
    assert main(["simulate", "--config", CONFIG, "--out", str(tmp_path / "b"),
                 "--stream", str(tmp_path / "e" / "planes.dmds"),
                 "--sensor", "tianmouc", "--frames", "10"]) == 0
    assert sha(tmp_path / "a" / "tianmouc.tmoc") == sha(tmp_path / "b" / "tianmouc.tmoc")


def test_simulate_static_evs_empty_event_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    text = (GOLDEN / "encode_bench.yaml").read_text().replace(
        "stimuli:", "stimuli:\n  flat:\n    kind: Uniform\n    parameters:\n      level: 0.5", 1
    )
    cfg.write_text(text)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path),
                 "--stimulus", "flat", "--sensor", "evs", "--frames", "2"]) == 0
    from bvsbench.evs import read_evt1

    assert len(read_evt1(tmp_path / "events.evt1")) == 0
    stats = json.loads((tmp_path / "events_stats.json").read_text())
    assert stats["generated"] == 0


def test_determinism_across_runs_and_jobs(tmp_path):
    digests = []
    for run, jobs in ((1, "1"), (2, "8"), (3, "1")):
        out = tmp_path / f"r{run}"
        assert main(["simulate", "--config", CONFIG, "--out", str(out),
                     "--sensor", "both", "--frames", "10", "--jobs", jobs,
                     "--seed", "777"]) == 0
        digests.append((sha(out / "tianmouc.tmoc"), sha(out / "events.evt1"),
                        sha(out / "events.csv")))
    assert digests[0] == digests[1] == digests[2]


def test_characterize_writes_reports_and_exit_codes(tmp_path):
    assert main(["characterize", "evs_contrast", "--config", CONFIG,
                 "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "evs_contrast.json").read_text())
    assert data["protocol"] == "evs_contrast"
    assert (tmp_path / "evs_contrast_psychometric.csv").exists()
    # unknown protocol -> usage error, exit 2
    assert main(["characterize", "bogus", "--config", CONFIG, "--out", str(tmp_path)]) == 2


def test_validation_error_names_the_invariant(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("mapping:\n  k_cop: 4\n  k_aop: 9\n")
    assert main(["encode", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "k_aop" in err and "2 * k_cop" in err


def test_unknown_config_key_diagnostic(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("tianmouc:\n  quantum: 1\n")
    assert main(["encode", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "tianmouc: unknown key(s) ['quantum']" in capsys.readouterr().err


def test_seed_override_changes_output(tmp_path):
    cfg = tmp_path / "c.yaml"
    text = (GOLDEN / "encode_bench.yaml").read_text().replace(
        "shot_noise: false", "shot_noise: true"
    )
    cfg.write_text(text)
    for seed, name in (("1", "a"), ("2", "b"), ("1", "c")):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name),
                     "--sensor", "tianmouc", "--frames", "5", "--seed", seed]) == 0
    assert sha(tmp_path / "a" / "tianmouc.tmoc") == sha(tmp_path / "c" / "tianmouc.tmoc")
    assert sha(tmp_path / "a" / "tianmouc.tmoc") != sha(tmp_path / "b" / "tianmouc.tmoc")


def test_convert_and_report_pipeline(tmp_path):
    rng = np.random.default_rng(14)
    frames = np.round(rng.random((2, 8, 16)) * 65535) / 65535.0
    write_bvsf(tmp_path / "clip.bvsf", frames)
    assert main(["convert", "--config", CONFIG, "--video", str(tmp_path / "clip.bvsf"),
                 "--out", str(tmp_path / "ds")]) == 0
    assert (tmp_path / "ds" / "manifest.json").exists()
    assert (tmp_path / "ds" / "records" / "000001.tmoc").exists()

    assert main(["characterize", "linearity", "--config", CONFIG,
                 "--out", str(tmp_path / "rep")]) == 0
    assert main(["report", "--report-dir", str(tmp_path / "rep"),
                 "--out", str(tmp_path / "rep")]) == 0
    svg = (tmp_path / "rep" / "linearity.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg
    csv = (tmp_path / "rep" / "linearity_curve.csv").read_text().splitlines()
    assert set(csv[0].split(",")) >= {"u", "mean_dn", "residual_dn"}
    assert len(csv) == 1 + len(json.loads((tmp_path / "rep" / "linearity.json").read_text())["curve"]["u"])


def test_report_determinism(tmp_path):
    assert main(["characterize", "evs_contrast", "--config", CONFIG,
                 "--out", str(tmp_path / "r1")]) == 0
    assert main(["characterize", "evs_contrast", "--config", CONFIG,
                 "--out", str(tmp_path / "r2")]) == 0
    assert sha(tmp_path / "r1" / "evs_contrast.json") == sha(tmp_path / "r2" / "evs_contrast.json")
    for d in ("r1", "r2"):
        assert main(["report", "--report-dir", str(tmp_path / d),
                     "--out", str(tmp_path / d)]) == 0
    assert sha(tmp_path / "r1" / "evs_contrast.svg") == sha(tmp_path / "r2" / "evs_contrast.svg")


def test_missing_config_file():
    assert main(["encode", "--config", "/nonexistent.yaml", "--out", "/tmp/x"]) == 2
