"""Audit configuration loaded from JSON or TOML."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import Schema
from .detect import DISTANCES
from .mitigate import DISTANCE_KINDS
from .model import GBDTParams

MODES = ("whitebox", "blackbox_column", "blackbox_subprocess")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShapSettings:
    max_background: int = 256
    seed: int = 0


@dataclass(frozen=True)
class DetectionSettings:
    distance: str = "wasserstein1"
    k_permutations: int = 5
    ratio_threshold: float = 3.0
    floor: float = 1e-3
    kl_bins: int = 50
    hist_bins: int = 30


@dataclass(frozen=True)
class MitigationSettings:
    w_fp: float = 1.0
    w_fn: float = 1.0
    distance: str = "shap_only"
    seed: int = 0
    calibration_bins: int = 10
    calibration_tolerance: float = 0.1
    calibration_min_count: int = 30
    holdout_fraction: float | None = None


@dataclass(frozen=True)
class OracleSettings:
    command: tuple[str, ...] = ()
    batch_size: int = 1024
    timeout: float = 300.0


@dataclass(frozen=True)
class AuditConfig:
    data: str
    schema: Schema
    seed: int
    mode: str = "whitebox"
    model: GBDTParams = GBDTParams()
    shap: ShapSettings = ShapSettings()
    detection: DetectionSettings = DetectionSettings()
    mitigation: MitigationSettings = MitigationSettings()
    oracle: OracleSettings = OracleSettings()
    out: str = "shapaudit_out"
    base_dir: str = field(default=".", compare=False)

    def data_path(self) -> Path:
        p = Path(self.data)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def canonical(self) -> dict[str, Any]:
        """Config content that determines results (output location excluded)."""
        d = asdict(self)
        d.pop("out")
        d.pop("base_dir")
        d["data"] = Path(self.data).name
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       distance: str | None = None) -> "AuditConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out is not None:
            cfg = replace(cfg, out=out)
        if distance is not None:
            if distance not in DISTANCES:
                raise ConfigError(f"distance must be one of {DISTANCES}")
            cfg = replace(cfg, detection=replace(cfg.detection, distance=distance))
        return cfg


def _section(cls, raw: Any, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table/object")
    unknown = set(raw) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(raw: dict[str, Any], base_dir: str | Path = ".") -> AuditConfig:
    known = {"data", "schema", "seed", "mode", "model", "shap", "detection", "mitigation", "oracle", "out"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    for key in ("data", "schema", "seed"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("seed must be an integer")
    mode = raw.get("mode", "whitebox")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    try:
        schema = Schema.from_dict(raw["schema"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    oracle_raw = dict(raw.get("oracle") or {})
    if "command" in oracle_raw:
        cmd = oracle_raw["command"]
        oracle_raw["command"] = tuple(cmd.split() if isinstance(cmd, str) else cmd)
    cfg = AuditConfig(
        data=str(raw["data"]),
        schema=schema,
        seed=raw["seed"],
        mode=mode,
        model=_section(GBDTParams, raw.get("model"), "model"),
        shap=_section(ShapSettings, raw.get("shap"), "shap"),
        detection=_section(DetectionSettings, raw.get("detection"), "detection"),
        mitigation=_section(MitigationSettings, raw.get("mitigation"), "mitigation"),
        oracle=_section(OracleSettings, oracle_raw or None, "oracle"),
        out=str(raw.get("out", "shapaudit_out")),
        base_dir=str(base_dir),
    )
    if cfg.detection.distance not in DISTANCES:
        raise ConfigError(f"detection.distance must be one of {DISTANCES}")
    if cfg.detection.k_permutations < 1:
        raise ConfigError("detection.k_permutations must be >= 1")
    if cfg.mitigation.distance not in DISTANCE_KINDS:
        raise ConfigError(f"mitigation.distance must be one of {DISTANCE_KINDS}")
    if mode == "blackbox_column" and schema.score is None:
        raise ConfigError("mode blackbox_column requires schema.score")
    if mode == "blackbox_subprocess" and not cfg.oracle.command:
        raise ConfigError("mode blackbox_subprocess requires oracle.command")
    return cfg


def load_config(path: str | Path) -> AuditConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)
