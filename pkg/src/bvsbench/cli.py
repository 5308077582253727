"""Command-line entry point: encode, simulate, characterize, convert, report.

Every command is driven by one YAML bench config, is rerunnable (atomic
output replacement) and deterministic for a fixed --seed, independent of
--jobs. BVSBENCH_LOG sets the log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import characterize as ch
from . import dataset as ds
from . import evs as evs_mod
from . import stimulus as st
from . import svg
from . import tianmouc as tm
from ._kernels import active_backend
from .config import PROTOCOL_NAMES, BenchConfig, load_config
from .encoder import DitherPolicy, encode_sequence, read_dmds, write_dmds
from .errors import (
    BenchError,
    ConfigError,
    MetricUndefinedError,
    ProtocolPreconditionError,
)
from .projector import project

log = logging.getLogger("bvsbench")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PRECONDITION = 2
EXIT_METRIC_UNDEFINED = 3


def _setup_logging() -> None:
    level = os.environ.get("BVSBENCH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _atomic_write_bytes(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _frames_for(cfg: BenchConfig, name: str, n_frames: int):
    program = cfg.stimulus(name)
    return st.generate(program, n_frames)


def _encode(cfg: BenchConfig, stimulus_name: str, n_frames: int, jobs: int):
    frames = _frames_for(cfg, stimulus_name, n_frames)
    policy = DitherPolicy.for_side(cfg.mapping.k_cop)
    return encode_sequence(frames, cfg.mapping, cfg.timing, policy, jobs=jobs)


def cmd_encode(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = _encode(cfg, args.stimulus, args.frames, args.jobs)
    path = out / "planes.dmds"
    _atomic_write_bytes(path, lambda p: write_dmds(p, stream))
    log.info("wrote %s (%d planes, backend=%s)", path, stream.n_planes, active_backend())
    print(path)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sensors = ("tianmouc", "evs") if args.sensor == "both" else (args.sensor,)

    n_frames = args.frames
    if "tianmouc" in sensors and n_frames % cfg.timing.cop_ratio != 0:
        raise ConfigError(
            f"--frames {n_frames} must be a multiple of cop_ratio "
            f"{cfg.timing.cop_ratio} when simulating the dual-pathway sensor"
        )

    if args.stream:
        stream = read_dmds(args.stream)
    else:
        stream = _encode(cfg, args.stimulus, n_frames, args.jobs)

    written = []
    if "tianmouc" in sensors:
        field = project(stream, cfg.mapping, cfg.optics, cfg.grid_width, cfg.grid_height,
                        group=cfg.timing.planes_per_aop_frame)
        streams = tm.simulate(field, cfg.tianmouc)
        path = out / "tianmouc.tmoc"
        _atomic_write_bytes(
            path,
            lambda p: tm.write_tmoc(p, streams, t0_ns=field.t0_ns,
                                    aop_period_ns=cfg.timing.aop_frame_period_ns,
                                    sd_kernels=cfg.tianmouc.sd_kernels),
        )
        written.append(path)
    if "evs" in sensors:
        field = project(stream, cfg.mapping, cfg.optics, cfg.grid_width, cfg.grid_height,
                        group=1)
        events, stats = evs_mod.simulate(field, cfg.evs)
        path = out / "events.evt1"
        _atomic_write_bytes(path, lambda p: evs_mod.write_evt1(p, events))
        csv_path = out / "events.csv"
        _atomic_write_bytes(csv_path, lambda p: evs_mod.write_events_csv(p, events))
        stats_path = out / "events_stats.json"
        from .config import canonical_json

        _atomic_write_bytes(
            stats_path,
            lambda p: p.write_text(
                canonical_json(
                    {
                        "generated": stats.generated,
                        "emitted": stats.emitted,
                        "dropped": stats.dropped,
                        "max_queue_delay_ns": stats.max_queue_delay_ns,
                        "rate_bin_ns": stats.rate_bin_ns,
                        "rate_counts": stats.rate_counts.tolist(),
                    }
                )
            ),
        )
        written.extend([path, csv_path, stats_path])
    for p in written:
        print(p)
    return EXIT_OK


def cmd_characterize(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    report = ch.run_protocol(args.protocol, cfg)
    out = Path(args.out)
    for p in ch.write_report(report, out, fmt=args.format):
        print(p)
    return EXIT_OK


def cmd_convert(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    frames_rgb = _load_rgb(args.video, cfg)
    out = Path(args.out)
    d = ds.convert(frames_rgb, cfg, out, source_id=str(args.video), jobs=args.jobs)
    print(d.root / "manifest.json")
    return EXIT_OK


def _load_rgb(path: str, cfg: BenchConfig) -> np.ndarray:
    """RGB sequence on the bench grid: one load per channel, area-resampled."""
    per_channel = []
    for c in ("R", "G", "B"):
        try:
            frames = st.load_video(path, (cfg.grid_width, cfg.grid_height), channel=c)
        except ConfigError:
            # graymap/BVSF source: replicate luma into all channels
            frames = st.load_video(path, (cfg.grid_width, cfg.grid_height))
        per_channel.append(np.stack([f.radiance for f in frames]))
    return np.stack(per_channel, axis=-1)


def cmd_report(args) -> int:
    report_dir = Path(args.report_dir)
    out = Path(args.out) if args.out else report_dir
    out.mkdir(parents=True, exist_ok=True)
    json_files = sorted(report_dir.glob("*.json"))
    if not json_files:
        raise ConfigError(f"{report_dir}: no report JSON files found")
    made = []
    x_preference = ("u", "delta_l", "fraction", "intensity", "duty")
    for jf in json_files:
        data = json.loads(jf.read_text())
        curve = data.get("curve")
        if not isinstance(curve, dict) or not curve:
            continue
        cols = list(curve.keys())
        x_col = next((c for c in x_preference if c in curve), cols[0])
        x = curve[x_col]
        series = {
            c: vals
            for c, vals in curve.items()
            if c != x_col and all(v is None or isinstance(v, (int, float)) for v in vals)
        }
        if not series:
            continue
        path = out / f"{jf.stem}.svg"
        svg.line_plot(path, x, series, title=data.get("protocol", jf.stem), x_label=x_col)
        made.append(path)
        csv_path = out / f"{jf.stem}_curve.csv"
        ch.write_curve_csv(csv_path, curve)
        made.append(csv_path)
    for p in made:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bvsbench",
        description="DMD-projection test bench simulator for brain-inspired vision sensors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="bench config (YAML)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (results identical)")
        p.add_argument("--format", choices=("json", "csv"), default="json")

    p = sub.add_parser("encode", help="compile a stimulus into a DMDS plane stream")
    common(p)
    p.add_argument("--stimulus", default="default", help="stimulus name from the config")
    p.add_argument("--frames", type=int, default=25, help="high-rate frame count")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("simulate", help="run sensors on a stimulus or plane stream")
    common(p)
    p.add_argument("--stimulus", default="default")
    p.add_argument("--stream", default=None, help="existing .dmds file (skips encoding)")
    p.add_argument("--sensor", choices=("tianmouc", "evs", "both"), default="both")
    p.add_argument("--frames", type=int, default=25)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("characterize", help="run one characterization protocol")
    common(p)
    p.add_argument("protocol", help=f"one of: {', '.join(PROTOCOL_NAMES)}")
    p.set_defaults(fn=cmd_characterize)

    p = sub.add_parser("convert", help="convert an RGB video into a BVS dataset")
    common(p)
    p.add_argument("--video", required=True, help="PGM/PPM sequence or BVSF container")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("report", help="render SVG/CSV bundles from report JSON files")
    p.add_argument("--report-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MetricUndefinedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRIC_UNDEFINED
    except (ConfigError, ProtocolPreconditionError, BenchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
