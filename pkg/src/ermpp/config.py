"""Experiment configuration: INI text with typed sections and strict keys.

Every key has a parser; unknown sections or keys fail with the file line
they appear on. The parsed config serializes to canonical JSON, whose
sha256 is the config digest stamped on every emitted artifact.
"""

from __future__ import annotations

import configparser
import hashlib
import inspect
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .averaging import SMPAConfig
from .data import GENERATORS, GeneratorSpec
from .errors import ConfigError
from .pipeline import ABLATION_ROWS, ComponentToggles, TrainSchedule
from .pretrain import PretrainConfig

MODES = ("loo", "ablation", "smpa")


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def parse_optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _parser_for(default: Any, annotation: str = "") -> Callable[[str], Any]:
    if isinstance(default, bool):
        return parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, (tuple, list)):
        return parse_float_list
    if default is None and "int" in annotation:
        return parse_optional_int
    return str


def _dataclass_parsers(cls) -> dict[str, Callable[[str], Any]]:
    return {f.name: _parser_for(f.default, str(f.type)) for f in fields(cls)}


EXPERIMENT_KEYS: dict[str, Callable[[str], Any]] = {
    "seed": int,
    "num_seeds": int,
    "mode": str,
    "workers": int,
    "out_dir": str,
    "held_out": parse_str_list,
    "label": str,
}
MODEL_KEYS = {"hidden_dims": parse_int_list, "use_batchnorm": parse_bool, "init_checkpoint": str}
ABLATION_KEYS = {"rows": parse_int_list}


def _dataset_parsers(family: str) -> dict[str, Callable[[str], Any]]:
    sig = inspect.signature(GENERATORS[family])
    return {n: _parser_for(p.default) for n, p in sig.parameters.items() if n != "seed"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    num_seeds: int = 1
    mode: str = "loo"
    workers: int = 1
    out_dir: str = "out"
    held_out: tuple[str, ...] | None = None
    label: str = ""
    dataset: GeneratorSpec = field(default_factory=lambda: GeneratorSpec("rotated_blobs", {}, 0))
    hidden_dims: tuple[int, ...] = (32, 32)
    use_batchnorm: bool = True
    init_checkpoint: str | None = None
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    toggles: ComponentToggles = field(default_factory=ComponentToggles)
    ablation_rows: tuple[int, ...] = tuple(ABLATION_ROWS)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    smpa: SMPAConfig = field(default_factory=SMPAConfig)
    source: str = ""

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.num_seeds)]

    def to_dict(self) -> dict:
        out = {
            "experiment": dict(seed=self.seed, num_seeds=self.num_seeds, mode=self.mode,
                               held_out=list(self.held_out) if self.held_out else None, label=self.label),
            "dataset": self.dataset.to_dict(),
            "model": dict(hidden_dims=list(self.hidden_dims), use_batchnorm=self.use_batchnorm,
                          init_checkpoint=self.init_checkpoint),
            "schedule": self.schedule.to_dict(),
            "pretrain": self.pretrain.to_dict(),
        }
        if self.mode == "ablation":
            out["ablation"] = {"rows": list(self.ablation_rows)}
        else:
            out["toggles"] = self.toggles.to_dict()
        if self.mode == "smpa":
            out["smpa"] = {k: v for k, v in asdict(self.smpa).items() if k not in ("seed", "bn_frozen")}
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """sha256 of the canonical JSON; worker count and output paths are excluded."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _line_of(lines: list[str], section: str, key: str | None = None) -> int:
    current = None
    for no, raw in enumerate(lines, 1):
        m = re.match(r"\s*\[([^\]]+)\]", raw)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", raw, re.I):
            return no
    return 0


class _Reader:
    def __init__(self, text: str, origin: str):
        self.origin = origin
        self.lines = text.splitlines()
        self.cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
        try:
            self.cp.read_string(text, source=origin)
        except configparser.Error as e:
            raise ConfigError(f"{origin}: {e}") from None

    def fail(self, section: str, key: str | None, msg: str) -> ConfigError:
        line = _line_of(self.lines, section, key)
        where = f"{self.origin}:{line}" if line else self.origin
        return ConfigError(f"{where}: {msg}")

    def section(self, name: str, parsers: dict[str, Callable[[str], Any]]) -> dict[str, Any]:
        if not self.cp.has_section(name):
            return {}
        out = {}
        for key, raw in self.cp.items(name):
            if key not in parsers:
                known = ", ".join(sorted(parsers))
                raise self.fail(name, key, f"unknown key {key!r} in [{name}] (known: {known})")
            try:
                out[key] = parsers[key](raw)
            except (TypeError, ValueError) as e:
                raise self.fail(name, key, f"bad value for {key!r} in [{name}]: {e}") from None
        return out


SECTIONS = ("experiment", "dataset", "model", "schedule", "toggles", "ablation", "pretrain", "smpa")


def parse_config(text: str, origin: str = "<config>") -> ExperimentConfig:
    r = _Reader(text, origin)
    for name in r.cp.sections():
        if name not in SECTIONS:
            raise r.fail(name, None, f"unknown section [{name}] (known: {', '.join(SECTIONS)})")

    exp = r.section("experiment", EXPERIMENT_KEYS)
    seed = exp.get("seed")
    if seed is None:
        if os.environ.get("ERMPP_DETERMINISTIC", "1") != "0":
            seed = 0
        else:
            seed = int(np.random.SeedSequence().entropy % 2**31)
    mode = exp.get("mode", "loo")
    if mode not in MODES:
        raise r.fail("experiment", "mode", f"mode must be one of {MODES}, got {mode!r}")
    for key in ("num_seeds", "workers"):
        if exp.get(key, 1) < 1:
            raise r.fail("experiment", key, f"{key} must be >= 1")

    family = r.cp.get("dataset", "family", fallback="rotated_blobs")
    if family not in GENERATORS:
        raise r.fail("dataset", "family", f"unknown dataset family {family!r} (known: {', '.join(GENERATORS)})")
    ds_params = r.section("dataset", dict(_dataset_parsers(family), family=str))
    ds_params.pop("family", None)
    sig = inspect.signature(GENERATORS[family])
    params = {n: p.default for n, p in sig.parameters.items() if n != "seed"}
    params.update(ds_params)
    params = {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}

    model = r.section("model", MODEL_KEYS)
    sched = r.section("schedule", _dataclass_parsers(TrainSchedule))
    tog = r.section("toggles", _dataclass_parsers(ComponentToggles))
    abl = r.section("ablation", ABLATION_KEYS)
    pre = r.section("pretrain", _dataclass_parsers(PretrainConfig))
    smpa_keys = {k: v for k, v in _dataclass_parsers(SMPAConfig).items() if k not in ("seed", "bn_frozen")}
    smp = r.section("smpa", smpa_keys)

    rows = abl.get("rows", tuple(ABLATION_ROWS))
    bad = [n for n in rows if n not in ABLATION_ROWS]
    if bad or not rows:
        raise r.fail("ablation", "rows", f"ablation rows must be drawn from {sorted(ABLATION_ROWS)}, got {list(rows)}")
    try:
        schedule = TrainSchedule(**sched)
        schedule.validate()
        toggles = ComponentToggles(**tog)
        for t in ([toggles] if mode != "ablation" else [ABLATION_ROWS[n] for n in rows]):
            schedule.resolve(t)
    except ConfigError as e:
        raise r.fail("schedule", None, str(e)) from None
    hidden = model.get("hidden_dims", (32, 32))
    if any(h < 1 for h in hidden):
        raise r.fail("model", "hidden_dims", "hidden widths must be >= 1")

    return ExperimentConfig(
        seed=seed,
        num_seeds=exp.get("num_seeds", 1),
        mode=mode,
        workers=exp.get("workers", 1),
        out_dir=exp.get("out_dir", "out"),
        held_out=exp.get("held_out"),
        label=exp.get("label", ""),
        dataset=GeneratorSpec(family, params, seed),
        hidden_dims=hidden,
        use_batchnorm=model.get("use_batchnorm", True),
        init_checkpoint=model.get("init_checkpoint"),
        schedule=schedule,
        toggles=toggles,
        ablation_rows=tuple(rows),
        pretrain=PretrainConfig(**pre),
        smpa=SMPAConfig(**smp),
        source=text,
    )


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {str(p)!r}: {e.strerror}") from None
    return parse_config(text, str(p))
