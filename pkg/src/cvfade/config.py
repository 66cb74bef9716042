"""Run configuration: a TOML file validated into frozen dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .alphabet import Alphabet, build_alphabet, calibrated
from .channel import NOISE_AT, BeamGeometry, ChannelParams


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending location."""


@dataclass(frozen=True)
class AlphabetSpec:
    kind: str = "four"
    amplitude: float = 1.0
    priors: tuple | None = None
    amplitudes: tuple | None = None  # calibration override: ((re, im), ...)

    def build(self) -> Alphabet:
        if self.amplitudes is not None:
            return calibrated([complex(re, im) for re, im in self.amplitudes], self.priors)
        base = build_alphabet(self.kind, self.amplitude)
        if self.priors is not None:
            return calibrated(base.amplitudes, self.priors)
        return base


@dataclass(frozen=True)
class ChannelSpec:
    source: str = "fixed"  # fixed | geometry | file
    transmission: float = 1.0
    file: str | None = None
    beam_radius: float = 1.0
    aperture_radius: float = 1.0
    jitter_sigma: float = 0.0
    efficiency: float = 1.0
    excess_noise: float = 0.0
    noise_at: str = "receiver"

    def params(self) -> ChannelParams:
        return ChannelParams(self.efficiency, self.excess_noise, 0.0, self.noise_at)

    def geometry(self) -> BeamGeometry:
        return BeamGeometry(self.beam_radius, self.aperture_radius, self.jitter_sigma)


@dataclass(frozen=True)
class DetectionSpec:
    n_slots: int = 100000
    seed: int = 0
    bin_width: float = 0.009
    min_count: int = 0
    retained_mass: float | None = None
    raw_scale: float = 1.0
    lo_tracks_channel: bool = True
    write_records: bool = True
    q_samples: int = 270000


@dataclass(frozen=True)
class CertifySpec:
    cutoff: int | None = None
    sigma: tuple = (0.0, 1.0, 2.0, 3.0)
    log_base: float = 2.0
    trusted_loss: bool = False
    tol: float = 1e-7
    state_rate: float = 2.22e6


@dataclass(frozen=True)
class SweepSpec:
    transmission: float = 0.63
    families: tuple = ("two", "four")
    amplitudes: tuple = tuple(round(0.1 * i, 1) for i in range(1, 17))
    # reaches past 2T, where heterodyne-and-reprepare makes every alphabet separable
    epsilons: tuple = (0.0, 0.01, 0.05, 0.1, 0.2, 0.4, 0.8, 1.0, 1.3)


@dataclass(frozen=True)
class RunConfig:
    alphabet: AlphabetSpec = field(default_factory=AlphabetSpec)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    detection: DetectionSpec = field(default_factory=DetectionSpec)
    certify: CertifySpec = field(default_factory=CertifySpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    output: str = "run"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short hash of the canonical JSON form; the output directory is not hashed."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, section: str | None = None, **changes) -> "RunConfig":
        if section is None:
            return dataclasses.replace(self, **changes)
        sub = dataclasses.replace(getattr(self, section), **changes)
        validate_section(section, sub)
        return dataclasses.replace(self, **{section: sub})


SECTIONS = {
    "alphabet": AlphabetSpec,
    "channel": ChannelSpec,
    "detection": DetectionSpec,
    "certify": CertifySpec,
    "sweep": SweepSpec,
}


def _line_of(text: str, section: str | None, key: str) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line.strip("[] ")
            continue
        if current == section and line.split("=", 1)[0].strip().strip('"') == key:
            return i
    return None


def _where(source: str, text: str, section: str | None, key: str) -> str:
    path = f"{section}.{key}" if section else key
    line = _line_of(text, section, key) if text else None
    return f"{source}:{line}: {path}" if line else f"{source}: {path}"


def _coerce(value: Any, ftype: str, where: str):
    if isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if "int" in ftype and "float" not in ftype and isinstance(value, float):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if "float" in ftype and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if "bool" in ftype and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if ftype == "str" and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _check(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def validate_section(name: str, spec) -> None:
    w = name
    if name == "alphabet":
        _check(spec.kind in ("two", "four", "custom"), f"{w}.kind", "must be two, four or custom")
        _check(spec.amplitude >= 0 and math.isfinite(spec.amplitude), f"{w}.amplitude", "must be >= 0")
        _check(spec.kind != "custom" or spec.amplitudes is not None, f"{w}.amplitudes", "required for kind=custom")
        if spec.amplitudes is not None:
            _check(all(len(a) == 2 for a in spec.amplitudes), f"{w}.amplitudes", "entries must be [re, im] pairs")
        try:
            spec.build()
        except ValueError as exc:
            raise ConfigError(f"{w}: {exc}") from None
    elif name == "channel":
        _check(spec.source in ("fixed", "geometry", "file"), f"{w}.source", "must be fixed, geometry or file")
        _check(0 <= spec.transmission <= 1, f"{w}.transmission", "must be in [0, 1]")
        _check(spec.source != "file" or bool(spec.file), f"{w}.file", "required for source=file")
        _check(spec.noise_at in NOISE_AT, f"{w}.noise_at", f"must be one of {NOISE_AT}")
        try:
            spec.params()
            if spec.source == "geometry":
                spec.geometry()
        except ValueError as exc:
            raise ConfigError(f"{w}: {exc}") from None
    elif name == "detection":
        _check(spec.n_slots > 0, f"{w}.n_slots", "must be positive")
        _check(spec.bin_width > 0, f"{w}.bin_width", "must be positive")
        _check(spec.min_count >= 0, f"{w}.min_count", "must be >= 0")
        _check(spec.retained_mass is None or 0 < spec.retained_mass <= 1, f"{w}.retained_mass", "must be in (0, 1]")
        _check(spec.raw_scale > 0, f"{w}.raw_scale", "must be positive")
        _check(spec.q_samples >= 0, f"{w}.q_samples", "must be >= 0")
    elif name == "certify":
        _check(spec.cutoff is None or spec.cutoff >= 2, f"{w}.cutoff", "must be >= 2")
        _check(len(spec.sigma) > 0 and all(s >= 0 for s in spec.sigma), f"{w}.sigma", "need levels >= 0")
        _check(spec.log_base > 1, f"{w}.log_base", "must be > 1")
        _check(0 < spec.tol < 1e-2, f"{w}.tol", "must be in (0, 1e-2)")
        _check(spec.state_rate >= 0, f"{w}.state_rate", "must be >= 0")
    elif name == "sweep":
        _check(0 < spec.transmission <= 1, f"{w}.transmission", "must be in (0, 1]")
        _check(len(spec.amplitudes) > 0, f"{w}.amplitudes", "grid is empty")
        _check(len(spec.epsilons) > 0 and min(spec.epsilons) >= 0, f"{w}.epsilons", "need values >= 0")
        _check(all(f in ("two", "four") for f in spec.families), f"{w}.families", "entries must be two or four")


def parse_config(data: dict, source: str = "<config>", text: str = "") -> RunConfig:
    kwargs = {}
    for key, value in data.items():
        if key == "output":
            if not isinstance(value, dict) or set(value) - {"directory"}:
                bad = next(iter(set(value) - {"directory"}), key) if isinstance(value, dict) else key
                raise ConfigError(f"{_where(source, text, 'output', bad)}: unknown key")
            kwargs["output"] = str(value.get("directory", "run"))
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{_where(source, text, None, key)}: unknown section")
        if not isinstance(value, dict):
            raise ConfigError(f"{_where(source, text, None, key)}: expected a table")
        cls = SECTIONS[key]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        sub = {}
        for k, v in value.items():
            where = _where(source, text, key, k)
            if k not in fields:
                raise ConfigError(f"{where}: unknown key (allowed: {', '.join(sorted(fields))})")
            sub[k] = _coerce(v, str(fields[k].type), where)
        try:
            spec = cls(**sub)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{key}] {exc}") from None
        validate_section(key, spec)
        kwargs[key] = spec
    cfg = RunConfig(**kwargs)
    for name in SECTIONS:
        if name not in kwargs:
            validate_section(name, getattr(cfg, name))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(data, str(path), text)
    # relative channel files resolve against the config's directory
    if cfg.channel.file and not Path(cfg.channel.file).is_absolute():
        cfg = cfg.replace("channel", file=str(path.parent / cfg.channel.file))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """TOML text that loads back to ``cfg``."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (tuple, list)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    out = []
    d = cfg.to_dict()
    for name in SECTIONS:
        out.append(f"[{name}]")
        for k, v in d[name].items():
            if v is not None:
                out.append(f"{k} = {fmt(v)}")
        out.append("")
    out.append("[output]")
    out.append(f"directory = {fmt(cfg.output)}")
    return "\n".join(out) + "\n"
