"""RGB dataset conversion: split-project-recombine into dual-pathway records.

Each source RGB frame is held for one COP period (cop_ratio high-rate frames).
The three color planes are projected through the bench separately; the COP
mosaic takes each Bayer site from its own channel's response, while the AOP
pathway runs on the channel-average (luma) projection. One record per COP
period: the mosaic plus its cop_ratio AOP difference frames.

Records are independent work units: per-frame noise streams are counter-keyed,
so a record worker reconstructs the one preceding AOP frame it needs for the
boundary temporal difference and output is identical to a continuous run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import BenchConfig, canonical_json, config_hash
from .encoder import DitherPolicy, encode_sequence
from .errors import ConfigError, FormatError, GeometryError
from .projector import PhotonField, project
from .rng import derive_seed, substream
from .stimulus import TargetFrame
from .tianmouc import (
    AOPFrame,
    COPFrame,
    PathwayStreams,
    _electrons,
    _fixed_pattern_maps,
    _sd_planes,
    bayer_gain_map,
    quantize_signed7,
    round_half_away,
    write_tmoc,
    read_tmoc,
)

__all__ = ["BVSDataset", "convert", "verify_roundtrip", "load_dataset"]

CHANNELS = ("R", "G", "B")


@dataclass
class BVSDataset:
    root: Path
    manifest: dict

    @property
    def record_count(self) -> int:
        return int(self.manifest["record_count"])

    def record_path(self, index: int) -> Path:
        return self.root / "records" / f"{index:06d}.tmoc"

    def record(self, index: int) -> PathwayStreams:
        streams, _, _, _ = read_tmoc(self.record_path(index))
        return streams


def _channel_fields(rgb: np.ndarray, bench: BenchConfig) -> dict[str, PhotonField]:
    """Projected photon field per channel, one entry per AOP frame, held
    cop_ratio planes each (records are static within a COP period)."""
    n, h, w, _ = rgb.shape
    timing = bench.timing
    period = timing.aop_frame_period_ns
    policy = DitherPolicy.for_side(bench.mapping.k_cop)
    fields = {}
    for ci, name in enumerate(CHANNELS):
        frames = [
            TargetFrame(w, h, np.ascontiguousarray(rgb[k, :, :, ci]), k * period, period)
            for k in range(n)
        ]
        stream = encode_sequence(frames, bench.mapping, bench.timing, policy)
        base = project(stream, bench.mapping, bench.optics, w, h,
                       group=timing.planes_per_aop_frame)
        fields[name] = PhotonField(
            width=w, height=h,
            plane_period_ns=base.plane_period_ns,
            counts=base.counts,
            hold=timing.cop_ratio,
        )
    return fields


def _aop_intensity(luma: PhotonField, frame_idx: int, cfg, dsnu, prnu) -> np.ndarray:
    """Electrons of one AOP frame on the 2x2-aggregated grid."""
    s = luma.plane(frame_idx)  # ppf == 1: one field plane per AOP frame
    h2, w2 = luma.height // 2, luma.width // 2
    photons = s.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    rng = substream(cfg.seed, "tianmouc.aop", frame_idx)
    return _electrons(photons, cfg, dsnu, prnu, cfg.dark_current, rng)


def _convert_record(
    k: int,
    fields: dict[str, PhotonField],
    luma: PhotonField,
    bench: BenchConfig,
    cop_cfgs: dict,
    aop_cfg,
    maps: dict,
) -> PathwayStreams:
    timing = bench.timing
    ratio = timing.cop_ratio
    h, w = bench.grid_height, bench.grid_width

    # COP: each Bayer site from its own channel's response.
    gain_map = bayer_gain_map(w, h, bench.tianmouc.bayer_gains)
    dn_max = (1 << bench.tianmouc.adc_bits) - 1
    mosaic = np.zeros((h, w), dtype=np.uint16)
    site_masks = {
        "R": (np.arange(h)[:, None] % 2 == 0) & (np.arange(w)[None, :] % 2 == 0),
        "G": (np.arange(h)[:, None] % 2) != (np.arange(w)[None, :] % 2),
        "B": (np.arange(h)[:, None] % 2 == 1) & (np.arange(w)[None, :] % 2 == 1),
    }
    dsnu_c, prnu_c = maps["cop"]
    for name in CHANNELS:
        photons = fields[name].plane(k * ratio) * ratio  # static within the record
        cfg = cop_cfgs[name]
        rng = substream(cfg.seed, "tianmouc.cop", k)
        electrons = _electrons(photons * gain_map, cfg, dsnu_c, prnu_c,
                               cfg.dark_current * ratio, rng)
        dn = np.clip(round_half_away(cfg.adc_gain * electrons), 0, dn_max).astype(np.uint16)
        mosaic[site_masks[name]] = dn[site_masks[name]]

    cop = COPFrame(index=k, timestamp_ns=k * ratio * timing.aop_frame_period_ns, mosaic=mosaic)

    # AOP: channel-average projection; the boundary TD needs the previous frame.
    dsnu_a, prnu_a = maps["aop"]
    prev = None
    if k > 0:
        prev = _aop_intensity(luma, k * ratio - 1, aop_cfg, dsnu_a, prnu_a)
    aop = []
    for n in range(k * ratio, (k + 1) * ratio):
        intensity = _aop_intensity(luma, n, aop_cfg, dsnu_a, prnu_a)
        if prev is None:
            td = np.zeros_like(intensity, dtype=np.int8)
        else:
            td = quantize_signed7(aop_cfg.g_td * (intensity - prev))
        sd = _sd_planes(intensity, aop_cfg.sd_kernels, aop_cfg.g_sd)
        aop.append(AOPFrame(index=n, timestamp_ns=n * timing.aop_frame_period_ns, td=td, sd=sd))
        prev = intensity

    return PathwayStreams(cop=[cop], aop=aop, cop_ratio=ratio)


def convert(rgb: np.ndarray, bench: BenchConfig, out_dir: str | Path,
            source_id: str = "video", jobs: int = 1,
            aop_merge: str = "mean") -> BVSDataset:
    """Convert an (n, H, W, 3) RGB sequence in [0,1] into a dataset directory.

    Layout: manifest.json (written last, atomically), records/NNNNNN.tmoc,
    index.csv with per-record checksums. One source frame -> one record.
    The difference pathway runs on the merged channel projection: "mean"
    (channel average, the default) or "max" (brightest channel per pixel).
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 4 or rgb.shape[3] != 3 or rgb.shape[0] == 0:
        raise ConfigError("expected a non-empty (n, height, width, 3) RGB array")
    if rgb.shape[1] != bench.grid_height or rgb.shape[2] != bench.grid_width:
        raise GeometryError(
            f"source grid {rgb.shape[2]}x{rgb.shape[1]} incompatible with bench "
            f"{bench.grid_width}x{bench.grid_height}"
        )
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ConfigError("RGB values must lie in [0, 1]")

    if aop_merge not in ("mean", "max"):
        raise ConfigError(f"aop_merge must be 'mean' or 'max', got {aop_merge!r}")
    n_records = rgb.shape[0]
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)

    fields = _channel_fields(rgb, bench)
    stacked = np.stack([fields[c].counts for c in CHANNELS])
    merged = stacked.mean(axis=0) if aop_merge == "mean" else stacked.max(axis=0)
    luma = PhotonField(
        width=bench.grid_width,
        height=bench.grid_height,
        plane_period_ns=fields["R"].plane_period_ns,
        counts=merged,
        hold=bench.timing.cop_ratio,
    )

    cop_cfgs = {
        name: dataclasses.replace(bench.tianmouc, seed=derive_seed(bench.seed, f"dataset.cop.{name}"))
        for name in CHANNELS
    }
    aop_cfg = dataclasses.replace(bench.tianmouc, seed=derive_seed(bench.seed, "dataset.aop"))
    maps = {
        "cop": _fixed_pattern_maps(bench.tianmouc, bench.grid_width, bench.grid_height, "cop"),
        "aop": _fixed_pattern_maps(bench.tianmouc, bench.grid_width // 2,
                                   bench.grid_height // 2, "aop"),
    }

    checksums = [""] * n_records

    def build(k: int) -> None:
        rec = _convert_record(k, fields, luma, bench, cop_cfgs, aop_cfg, maps)
        path = out / "records" / f"{k:06d}.tmoc"
        tmp = path.with_suffix(".tmp")
        write_tmoc(tmp, rec, t0_ns=k * bench.timing.cop_ratio * bench.timing.aop_frame_period_ns,
                   aop_period_ns=bench.timing.aop_frame_period_ns,
                   sd_kernels=bench.tianmouc.sd_kernels)
        os.replace(tmp, path)
        checksums[k] = hashlib.sha256(path.read_bytes()).hexdigest()

    if jobs > 1 and n_records > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(build, range(n_records)))
    else:
        for k in range(n_records):
            build(k)

    with open(out / "index.csv", "w", newline="") as fh:
        fh.write("record,source_frame_start,source_frame_end,sha256\n")
        for k in range(n_records):
            fh.write(f"{k:06d},{k},{k},{checksums[k]}\n")

    manifest = {
        "record_count": n_records,
        "grid": [bench.grid_width, bench.grid_height],
        "cop_ratio": bench.timing.cop_ratio,
        "source_id": source_id,
        "channel_gains": list(bench.tianmouc.bayer_gains),
        "config_hash": config_hash(bench),
        "config": bench.to_dict(),
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(canonical_json(manifest))
    os.replace(tmp, out / "manifest.json")
    return BVSDataset(root=out, manifest=manifest)


def load_dataset(root: str | Path) -> BVSDataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{root}: no manifest.json (not a complete dataset)")
    manifest = json.loads(mpath.read_text())
    for k in range(int(manifest["record_count"])):
        if not (root / "records" / f"{k:06d}.tmoc").exists():
            raise FormatError(f"{root}: manifest promises record {k:06d} but it is missing")
    return BVSDataset(root=root, manifest=manifest)


def verify_roundtrip(dataset: BVSDataset, rgb: np.ndarray, bench: BenchConfig) -> dict:
    """Reconstruct RGB from the COP mosaics and report per-channel mean
    absolute error in radiance units, at Bayer-cell resolution."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[0] != dataset.record_count:
        raise FormatError(
            f"manifest mismatch: {dataset.record_count} records vs {rgb.shape[0]} source frames"
        )
    t = bench.tianmouc
    timing = bench.timing
    phot_full = bench.optics.phi_max * timing.planes_per_aop_frame * timing.cop_ratio
    gains = dict(zip(CHANNELS, t.bayer_gains))
    dark_dn = (t.dark_current * timing.cop_ratio) * t.adc_gain

    abs_err = {c: 0.0 for c in CHANNELS}
    n_cells = 0
    for k in range(dataset.record_count):
        mosaic = dataset.record(k).cop[0].mosaic.astype(np.float64)
        src = rgb[k]
        h, w = mosaic.shape
        # per-channel site values at Bayer-cell resolution
        rec = {
            "R": mosaic[0::2, 0::2],
            "G": 0.5 * (mosaic[0::2, 1::2] + mosaic[1::2, 0::2]),
            "B": mosaic[1::2, 1::2],
        }
        ref = {
            "R": src[0::2, 0::2, 0],
            "G": 0.5 * (src[0::2, 1::2, 1] + src[1::2, 0::2, 1]),
            "B": src[1::2, 1::2, 2],
        }
        for c in CHANNELS:
            u_rec = (rec[c] - dark_dn) / (t.adc_gain * t.qe * phot_full * gains[c])
            abs_err[c] += float(np.abs(u_rec - ref[c]).sum())
        n_cells += (h // 2) * (w // 2)

    mae = {c: abs_err[c] / n_cells for c in CHANNELS}
    return {
        "record_count": dataset.record_count,
        "mae_r": mae["R"],
        "mae_g": mae["G"],
        "mae_b": mae["B"],
        "mae_mean": sum(mae.values()) / 3.0,
    }
