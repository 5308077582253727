"""Bench configuration: one strict, nested, hashable record driving every command.

Configs are YAML key-value trees. Parsing is strict: unknown keys raise with
their dotted path, and every module invariant is validated at load time so a
config that loads is a config that runs. All sensor randomness derives from
the single top-level seed through labelled sub-streams.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .encoder import BlockMapping, DitherPolicy, TimingConfig
from .errors import ConfigError
from .evs import EVSConfig
from .projector import OpticalConfig
from .rng import derive_seed
from .stimulus import KINDS, StimulusProgram
from .tianmouc import TianmoucConfig

__all__ = ["BenchConfig", "load_config", "config_hash", "canonical_json", "PROTOCOL_NAMES"]

DEFAULT_SEED = 0xB5BE9C81

_STIMULUS_PARAMS = {
    "Uniform": {"level"},
    "Ramp": {"start", "stop"},
    "Step": {"level_before", "level_after", "step_after_frame"},
    "RotatingPattern": {"omega_rad_s", "spokes", "u_low", "u_high"},
    "FlickerGrid": {"active_fraction", "flicker_hz", "u_low", "u_high"},
    "Video": {"path", "channel"},
}


@dataclass
class LinearityParams:
    levels: list = field(default_factory=lambda: [round(0.05 + 0.1 * i, 2) for i in range(10)])
    frames_per_level: int = 20


@dataclass
class UniformityParams:
    n_dark: int = 200
    n_half: int = 200


@dataclass
class SnrDrParams:
    u_min_exp: float = -4.0
    u_max_exp: float = 0.0
    n_levels: int = 25
    frames_per_level: int = 20

    @property
    def levels(self) -> list:
        step = (self.u_max_exp - self.u_min_exp) / (self.n_levels - 1)
        return [10.0 ** (self.u_min_exp + i * step) for i in range(self.n_levels)]


@dataclass
class PhotonTransferParams:
    levels: list = field(default_factory=lambda: [round(0.05 + 0.075 * i, 3) for i in range(10)])
    frames_per_level: int = 100


@dataclass
class EvsLatencyParams:
    intensities: list = field(default_factory=lambda: [0.0625 * i for i in range(1, 11)])
    delta_l: float = 0.7
    trials: int = 32
    settle_frames: int = 2
    hold_frames: int = 2


@dataclass
class EvsContrastParams:
    contrasts: list = field(default_factory=lambda: [0.1, 0.15, 0.25, 0.4])
    base_u: float = 0.5
    settle_frames: int = 2
    hold_frames: int = 2


@dataclass
class EventSaturationParams:
    active_fractions: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4, 0.8])
    delta_l: float = 0.7
    flicker_hz: float = 378.0
    u_low: float = 0.25
    cycles: int = 8


@dataclass
class DiffSnrParams:
    base_u: float = 0.25
    delta_i_electrons: float = 50.0
    trials: int = 50
    static_gap: int = 3


@dataclass
class ProtocolsConfig:
    linearity: LinearityParams = field(default_factory=LinearityParams)
    uniformity: UniformityParams = field(default_factory=UniformityParams)
    snr_dr: SnrDrParams = field(default_factory=SnrDrParams)
    photon_transfer: PhotonTransferParams = field(default_factory=PhotonTransferParams)
    evs_latency: EvsLatencyParams = field(default_factory=EvsLatencyParams)
    evs_contrast: EvsContrastParams = field(default_factory=EvsContrastParams)
    event_saturation: EventSaturationParams = field(default_factory=EventSaturationParams)
    diff_snr: DiffSnrParams = field(default_factory=DiffSnrParams)


PROTOCOL_NAMES = tuple(f.name for f in fields(ProtocolsConfig))


@dataclass
class BenchConfig:
    grid_width: int = 320
    grid_height: int = 160
    seed: int = DEFAULT_SEED
    output_dir: str = "out"
    stimuli: dict = field(default_factory=dict)
    mapping: BlockMapping = None  # defaults to centered on the grid
    timing: TimingConfig = field(default_factory=TimingConfig)
    optics: OpticalConfig = field(default_factory=OpticalConfig)
    tianmouc: TianmoucConfig = field(default_factory=TianmoucConfig)
    evs: EVSConfig = field(default_factory=EVSConfig)
    protocols: ProtocolsConfig = field(default_factory=ProtocolsConfig)

    def __post_init__(self):
        if self.mapping is None:
            self.mapping = BlockMapping.centered(self.grid_width, self.grid_height)

    def validate(self) -> None:
        if self.grid_width < 2 or self.grid_height < 2 or self.grid_width % 2 or self.grid_height % 2:
            raise ConfigError("grid dimensions must be even and >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in u64")
        self.mapping.validate()
        self.mapping.check_grid(self.grid_width, self.grid_height)
        self.timing.validate()
        self.optics.validate()
        self.tianmouc.validate()
        self.evs.validate()
        DitherPolicy.for_side(self.mapping.k_cop).validate()
        for name, prog in self.stimuli.items():
            prog.validate()
            if (prog.width, prog.height) != (self.grid_width, self.grid_height):
                raise ConfigError(f"stimuli.{name}: grid {prog.width}x{prog.height} "
                                  f"differs from bench grid")

    def stimulus(self, name: str = "default") -> StimulusProgram:
        if name not in self.stimuli:
            raise ConfigError(
                f"no stimulus named {name!r}; configured: {sorted(self.stimuli) or 'none'}"
            )
        return self.stimuli[name]

    def to_dict(self) -> dict:
        return _as_plain(self)


# --------------------------------------------------------------------------
# strict construction from plain dicts
# --------------------------------------------------------------------------

_SCALARS = (int, float, str, bool)


def _coerce_scalar(value, target, path):
    if target is float:
        if isinstance(value, str):
            # YAML 1.1 only recognizes exponents with a sign ("1e9" stays a
            # string); accept anything Python parses as a float.
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build_dataclass(cls, data: dict, path: str, exclude: tuple = ()):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name: hints.get(f.name) for f in fields(cls) if f.name not in exclude}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; allowed: {sorted(known)}")
    kwargs = {}
    for name, ftype in known.items():
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        value = data[name]
        if isinstance(ftype, type) and dataclasses.is_dataclass(ftype):
            kwargs[name] = _build_dataclass(ftype, value, sub)
        elif ftype in (int, float, bool, str):
            kwargs[name] = _coerce_scalar(value, ftype, sub)
        elif ftype is list:
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[name] = value
        elif ftype is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "mapping": BlockMapping,
    "timing": TimingConfig,
    "optics": OpticalConfig,
    "tianmouc": TianmoucConfig,
    "evs": EVSConfig,
}

_PROTOCOL_TYPES = {
    "linearity": LinearityParams,
    "uniformity": UniformityParams,
    "snr_dr": SnrDrParams,
    "photon_transfer": PhotonTransferParams,
    "evs_latency": EvsLatencyParams,
    "evs_contrast": EvsContrastParams,
    "event_saturation": EventSaturationParams,
    "diff_snr": DiffSnrParams,
}


def _build_stimulus(name: str, data: dict, grid: tuple, frame_period_ns: int) -> StimulusProgram:
    path = f"stimuli.{name}"
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    if "kind" not in data:
        raise ConfigError(f"{path}: missing 'kind'")
    kind = data["kind"]
    if kind not in KINDS:
        raise ConfigError(f"{path}.kind: unknown kind {kind!r}; expected one of {KINDS}")
    params = dict(data.get("parameters", {}))
    unknown = set(data) - {"kind", "parameters"}
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; use 'parameters'")
    bad = set(params) - _STIMULUS_PARAMS[kind]
    if bad:
        raise ConfigError(
            f"{path}.parameters: {sorted(bad)} not valid for {kind}; "
            f"allowed: {sorted(_STIMULUS_PARAMS[kind])}"
        )
    return StimulusProgram(
        kind=kind,
        parameters=params,
        width=grid[0],
        height=grid[1],
        frame_period_ns=frame_period_ns,
    )


def build_config(data: dict, seed_override: int | None = None) -> BenchConfig:
    """BenchConfig from a plain dict; strict keys, full validation."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level: expected a mapping")
    top_allowed = {
        "grid_width", "grid_height", "seed", "output_dir", "stimuli",
        "mapping", "timing", "optics", "tianmouc", "evs", "protocols",
    }
    unknown = set(data) - top_allowed
    if unknown:
        raise ConfigError(f"top level: unknown key(s) {sorted(unknown)}; allowed: {sorted(top_allowed)}")

    grid_w = _coerce_scalar(data.get("grid_width", 320), int, "grid_width")
    grid_h = _coerce_scalar(data.get("grid_height", 160), int, "grid_height")
    seed = _coerce_scalar(data.get("seed", DEFAULT_SEED), int, "seed")
    if seed_override is not None:
        seed = seed_override
    output_dir = _coerce_scalar(data.get("output_dir", "out"), str, "output_dir")

    sections = {}
    for key, cls in _SECTION_TYPES.items():
        # tianmouc.timing always mirrors the bench timing section
        exclude = ("timing",) if key == "tianmouc" else ()
        sections[key] = _build_dataclass(cls, data.get(key, {}), key, exclude=exclude)

    if "mapping" not in data:
        sections["mapping"] = BlockMapping.centered(grid_w, grid_h)
    elif "offset_x" not in data["mapping"] and "offset_y" not in data["mapping"]:
        m = sections["mapping"]
        sections["mapping"] = dataclasses.replace(
            m,
            offset_x=max(0, (m.dmd_width - grid_w * m.k_cop) // 2),
            offset_y=max(0, (m.dmd_height - grid_h * m.k_cop) // 2),
        )

    protocols_data = data.get("protocols", {})
    if not isinstance(protocols_data, dict):
        raise ConfigError("protocols: expected a mapping")
    unknown = set(protocols_data) - set(_PROTOCOL_TYPES)
    if unknown:
        raise ConfigError(f"protocols: unknown protocol(s) {sorted(unknown)}")
    protocols = ProtocolsConfig(**{
        name: _build_dataclass(cls, protocols_data.get(name, {}), f"protocols.{name}")
        for name, cls in _PROTOCOL_TYPES.items()
    })

    timing = sections["timing"]
    stimuli = {
        name: _build_stimulus(name, sdata, (grid_w, grid_h), timing.aop_frame_period_ns)
        for name, sdata in (data.get("stimuli") or {}).items()
    }

    # Sensor seeds derive from the top-level seed unless pinned explicitly.
    if "seed" not in data.get("tianmouc", {}):
        sections["tianmouc"].seed = derive_seed(seed, "tianmouc")
    if "seed" not in data.get("evs", {}):
        sections["evs"].seed = derive_seed(seed, "evs")
    sections["tianmouc"].timing = timing

    cfg = BenchConfig(
        grid_width=grid_w,
        grid_height=grid_h,
        seed=seed,
        output_dir=output_dir,
        stimuli=stimuli,
        mapping=sections["mapping"],
        timing=timing,
        optics=sections["optics"],
        tianmouc=sections["tianmouc"],
        evs=sections["evs"],
        protocols=protocols,
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path, seed_override: int | None = None) -> BenchConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return build_config(data, seed_override=seed_override)


# --------------------------------------------------------------------------
# canonical serialization + hashing
# --------------------------------------------------------------------------

def _as_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
        return obj
    if isinstance(obj, _SCALARS) or obj is None:
        return obj
    if hasattr(obj, "tolist"):
        return _as_plain(obj.tolist())
    return str(obj)


def canonical_json(obj: Any) -> str:
    """Sorted-key JSON with a trailing newline; inf/nan encoded as strings."""
    return json.dumps(_as_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_hash(cfg: BenchConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode("utf-8")).hexdigest()
