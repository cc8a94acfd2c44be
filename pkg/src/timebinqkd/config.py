"""Experiment configuration files (YAML).

Schema (every key optional; an empty file runs the eight reference points)::

    seed: 1                    # base seed for Monte Carlo runs
    monte_carlo: false
    optimize: false            # grid-optimise mu1, mu2, p_Z_bob per point
    fiber_db_per_km: 0.204     # used only for points given as length_km
    workers: 1
    output: {format: csv, path: report.csv}
    defaults:                  # applied to every point, overridable per point
      f_ec: 1.16
      eps_sec: 1.0e-9
      eps_corr: 1.0e-9
      block_size: 10000000
      gamma_constant: 21
      detector: {efficiency: 0.2, dead_time: 2.0e-5, extra_loss_db: 2.21, timing_jitter: 2.0e-10}
    points:
      - {protocol: 4D, length_km: 65, mu1: 0.2}
      - {protocol: 2D, loss_db: 23, p_Z_bob: 0.5, dark_count_rate: 100}
    sweep:
      protocols: [2D, 4D]
      from_db: 0
      to_db: 45
      step_db: 0.5

Per-point keys: ``protocol``, ``loss_db`` or ``length_km``, ``mu1``, ``mu2``,
``p_Z_alice``, ``p_Z_bob``, ``dark_count_rate``, ``intrinsic_error_Z``,
``intrinsic_error_X`` plus any key of ``defaults``. Unset values come from the
closest reference operating point and the calibrated noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .defaults import CALIBRATED_NOISE, NoiseParams
from .finitekey import SecurityParams
from .reference import FIBER_DB_PER_KM, REFERENCE_POINTS
from .session import SessionConfig, protocol_name


class ConfigError(ValueError):
    def __init__(self, path: str, message: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{path or '<root>'}: {message}{where}")
        self.path, self.line = path, line


_SECURITY_KEYS = {"eps_sec", "eps_corr", "eps_1", "eps_2", "block_size"}
_SESSION_KEYS = {"f_ec", "gamma_constant"}
_DETECTOR_KEYS = {"efficiency", "dead_time", "extra_loss_db", "timing_jitter"}
_NOISE_KEYS = {"dark_count_rate", "intrinsic_error_Z", "intrinsic_error_X"}
_POINT_KEYS = {"protocol", "loss_db", "length_km", "mu1", "mu2", "p_Z_alice", "p_Z_bob"}
_DEFAULT_KEYS = _SECURITY_KEYS | _SESSION_KEYS | _NOISE_KEYS | {"detector"}
_TOP_KEYS = {"seed", "monte_carlo", "optimize", "fiber_db_per_km", "workers", "output", "defaults", "points", "sweep"}


# -- YAML with line numbers ----------------------------------------------------

def _plain(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = _plain(k, path, {})
            if not isinstance(key, str):
                raise ConfigError(path, f"keys must be strings, got {key!r}", k.start_mark.line + 1)
            out[key] = _plain(v, f"{path}.{key}" if path else key, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return _scalar(node)


def _scalar(node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def parse_yaml(text: str) -> tuple[object, dict]:
    """YAML document as plain Python objects plus a ``path -> line`` map."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("", f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from None
    if node is None:
        return {}, {}
    lines = {}
    return _plain(node, "", lines), lines


# -- schema ----------------------------------------------------------------------

@dataclass(frozen=True)
class PointSpec:
    protocol: str
    loss_db: float
    overrides: dict = field(default_factory=dict)

    def session_config(self, defaults: dict | None = None, monte_carlo: bool = False) -> SessionConfig:
        opts = {**(defaults or {}), **self.overrides}
        name = protocol_name(self.protocol)
        base = CALIBRATED_NOISE[name]
        noise = NoiseParams(
            opts.get("dark_count_rate", base.dark_count_rate),
            opts.get("intrinsic_error_Z", base.intrinsic_error_Z),
            opts.get("intrinsic_error_X", base.intrinsic_error_X),
        )
        security = SecurityParams(**{k: opts[k] for k in _SECURITY_KEYS if k in opts})
        kwargs = {k: opts[k] for k in _SESSION_KEYS if k in opts}
        cfg = SessionConfig.for_point(name, self.loss_db, mu1=opts.get("mu1"), mu2=opts.get("mu2"),
                                      p_Z_alice=opts.get("p_Z_alice"), p_Z_bob=opts.get("p_Z_bob"),
                                      noise=noise, security=security, monte_carlo=monte_carlo, **kwargs)
        det = opts.get("detector")
        if det:
            cfg = cfg.replace(link=replace(cfg.link, detector=replace(cfg.link.detector, **det)))
        return cfg


@dataclass(frozen=True)
class SweepSpec:
    protocols: tuple = ("2D", "4D")
    from_db: float = 0.0
    to_db: float = 45.0
    step_db: float = 0.5

    def losses(self) -> list[float]:
        if self.to_db < self.from_db:
            return []
        n = int(math.floor((self.to_db - self.from_db) / self.step_db + 1e-9)) + 1
        return [round(self.from_db + i * self.step_db, 10) for i in range(n)]

    def points(self) -> list[PointSpec]:
        return [PointSpec(p, loss) for p in self.protocols for loss in self.losses()]


@dataclass(frozen=True)
class ExperimentConfig:
    points: tuple = ()
    sweep: SweepSpec | None = None
    defaults: dict = field(default_factory=dict)
    seed: int | None = None
    monte_carlo: bool = False
    optimize: bool = False
    fiber_db_per_km: float = FIBER_DB_PER_KM
    workers: int = 1
    output_format: str = "csv"
    output_path: str | None = None

    def all_points(self) -> list[PointSpec]:
        pts = list(self.points)
        if self.sweep is not None:
            pts.extend(self.sweep.points())
        return pts

    def session_configs(self) -> list[SessionConfig]:
        return [p.session_config(self.defaults, self.monte_carlo) for p in self.all_points()]


def default_points() -> tuple:
    return tuple(PointSpec(name, p.loss_db) for name in ("2D", "4D") for p in REFERENCE_POINTS[name])


class _Validator:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, path, message):
        raise ConfigError(path, message, self.lines.get(path))

    def mapping(self, value, path, allowed):
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        for k in value:
            if k not in allowed:
                self.fail(f"{path}.{k}" if path else k, f"unknown key; allowed: {', '.join(sorted(allowed))}")
        return value

    def number(self, value, path, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-9" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        if integer and (not float(value).is_integer()):
            self.fail(path, f"expected an integer, got {value!r}")
        if not math.isfinite(value):
            self.fail(path, "must be finite")
        if lo is not None and (value < lo or (lo_open and value == lo)):
            self.fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
        if hi is not None and (value > hi or (hi_open and value == hi)):
            self.fail(path, f"must be {'<' if hi_open else '<='} {hi}, got {value}")
        return int(value) if integer else float(value)

    def boolean(self, value, path):
        if not isinstance(value, bool):
            self.fail(path, f"expected true/false, got {value!r}")
        return value

    def protocol(self, value, path):
        try:
            return protocol_name(value)
        except (ValueError, TypeError):
            self.fail(path, f"unknown protocol {value!r}; expected 2D or 4D")

    def options(self, raw, path, allowed):
        out = {}
        for k, v in raw.items():
            p = f"{path}.{k}"
            if k not in allowed:
                continue
            if k in ("eps_sec", "eps_corr", "eps_1", "eps_2"):
                out[k] = self.number(v, p, 0, 1, lo_open=True, hi_open=True)
            elif k == "block_size":
                out[k] = self.number(v, p, 1, integer=True)
            elif k == "f_ec":
                out[k] = self.number(v, p, 1)
            elif k == "gamma_constant":
                out[k] = self.number(v, p, 0, lo_open=True)
            elif k == "dark_count_rate":
                out[k] = self.number(v, p, 0)
            elif k in ("intrinsic_error_Z", "intrinsic_error_X"):
                out[k] = self.number(v, p, 0, 1)
            elif k in ("mu1", "mu2"):
                out[k] = self.number(v, p, 0, lo_open=True)
            elif k in ("p_Z_alice", "p_Z_bob"):
                out[k] = self.number(v, p, 0, 1, lo_open=True, hi_open=True)
            elif k == "detector":
                det = self.mapping(v, p, _DETECTOR_KEYS)
                out[k] = {}
                for dk, dv in det.items():
                    dp = f"{p}.{dk}"
                    if dk == "efficiency":
                        out[k][dk] = self.number(dv, dp, 0, 1, lo_open=True)
                    elif dk == "dead_time":
                        out[k][dk] = self.number(dv, dp, 0, lo_open=True)
                    else:
                        out[k][dk] = self.number(dv, dp, 0)
        return out


def parse_config(text: str) -> ExperimentConfig:
    data, lines = parse_yaml(text)
    v = _Validator(lines)
    if data in (None, {}):
        return ExperimentConfig(points=default_points())
    v.mapping(data, "", _TOP_KEYS)

    kw = {}
    if "seed" in data:
        kw["seed"] = v.number(data["seed"], "seed", 0, 2**63 - 1, integer=True)
    for key in ("monte_carlo", "optimize"):
        if key in data:
            kw[key] = v.boolean(data[key], key)
    if "workers" in data:
        kw["workers"] = v.number(data["workers"], "workers", 1, integer=True)
    per_km = FIBER_DB_PER_KM
    if "fiber_db_per_km" in data:
        per_km = kw["fiber_db_per_km"] = v.number(data["fiber_db_per_km"], "fiber_db_per_km", 0, lo_open=True)
    if "output" in data:
        out = v.mapping(data["output"], "output", {"format", "path"})
        if "format" in out:
            if out["format"] not in ("csv", "json"):
                v.fail("output.format", f"expected csv or json, got {out['format']!r}")
            kw["output_format"] = out["format"]
        if "path" in out:
            if not isinstance(out["path"], str):
                v.fail("output.path", "expected a string")
            kw["output_path"] = out["path"]

    defaults = {}
    if "defaults" in data:
        raw = v.mapping(data["defaults"], "defaults", _DEFAULT_KEYS)
        defaults = v.options(raw, "defaults", _DEFAULT_KEYS)

    points = []
    if "points" in data:
        if not isinstance(data["points"], list):
            v.fail("points", "expected a list of points")
        for i, raw in enumerate(data["points"]):
            path = f"points[{i}]"
            raw = v.mapping(raw, path, _POINT_KEYS | _DEFAULT_KEYS)
            if "protocol" not in raw:
                v.fail(path, "missing required key 'protocol'")
            proto = v.protocol(raw["protocol"], f"{path}.protocol")
            if ("loss_db" in raw) == ("length_km" in raw):
                v.fail(path, "give exactly one of loss_db or length_km")
            if "loss_db" in raw:
                loss = v.number(raw["loss_db"], f"{path}.loss_db", 0)
            else:
                loss = v.number(raw["length_km"], f"{path}.length_km", 0) * per_km
            opts = v.options(raw, path, _POINT_KEYS | _DEFAULT_KEYS)
            merged = {**defaults, **opts}
            mu1, mu2 = merged.get("mu1"), merged.get("mu2")
            if mu1 is not None and mu2 is not None and not mu1 > mu2:
                v.fail(f"{path}.mu2", f"decoy intensity must be below mu1 ({mu2} >= {mu1})")
            points.append(PointSpec(proto, loss, opts))

    sweep = None
    if "sweep" in data:
        raw = v.mapping(data["sweep"], "sweep", {"protocols", "from_db", "to_db", "step_db"})
        sk = {}
        if "protocols" in raw:
            protos = raw["protocols"] if isinstance(raw["protocols"], list) else [raw["protocols"]]
            sk["protocols"] = tuple(v.protocol(p, f"sweep.protocols[{i}]") for i, p in enumerate(protos))
        for key in ("from_db", "to_db"):
            if key in raw:
                sk[key] = v.number(raw[key], f"sweep.{key}", 0)
        if "step_db" in raw:
            sk["step_db"] = v.number(raw["step_db"], "sweep.step_db", 0, lo_open=True)
        sweep = SweepSpec(**sk)
    elif "points" not in data:
        points = list(default_points())
    return ExperimentConfig(points=tuple(points), sweep=sweep, defaults=defaults, **kw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_config(text)


def derive_seeds(seed: int | None, n: int) -> list[int | None]:
    """Independent per-point seeds from one base seed (None stays None)."""
    if seed is None:
        return [None] * n
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


_TARGET_KEYS = {"loss_db", "length_km", "mu1", "mu2", "p_Z_alice", "p_Z_bob", "qber", "phi_Z"}


def parse_targets(text: str):
    """Calibration targets: ``{protocol, cutoff_db?, fiber_db_per_km?, points: [...]}``.

    Each point needs ``loss_db`` (or ``length_km``), ``mu1``, ``mu2``, ``p_Z_bob``
    and ``qber``; ``p_Z_alice`` defaults to 0.9 and ``phi_Z`` is optional.
    Returns ``(protocol, targets, cutoff_db or None)``.
    """
    from .calibration import CalibrationTarget

    data, lines = parse_yaml(text)
    v = _Validator(lines)
    v.mapping(data, "", {"protocol", "cutoff_db", "fiber_db_per_km", "points"})
    for key in ("protocol", "points"):
        if key not in data:
            v.fail("", f"missing required key {key!r}")
    proto = v.protocol(data["protocol"], "protocol")
    cutoff = v.number(data["cutoff_db"], "cutoff_db", 0) if "cutoff_db" in data else None
    per_km = v.number(data.get("fiber_db_per_km", FIBER_DB_PER_KM), "fiber_db_per_km", 0, lo_open=True)
    if not isinstance(data["points"], list) or not data["points"]:
        v.fail("points", "expected a non-empty list")
    targets = []
    for i, raw in enumerate(data["points"]):
        path = f"points[{i}]"
        v.mapping(raw, path, _TARGET_KEYS)
        for key in ("mu1", "mu2", "p_Z_bob", "qber"):
            if key not in raw:
                v.fail(path, f"missing required key {key!r}")
        if ("loss_db" in raw) == ("length_km" in raw):
            v.fail(path, "give exactly one of loss_db or length_km")
        loss = (v.number(raw["loss_db"], f"{path}.loss_db", 0) if "loss_db" in raw
                else v.number(raw["length_km"], f"{path}.length_km", 0) * per_km)
        mu1 = v.number(raw["mu1"], f"{path}.mu1", 0, lo_open=True)
        mu2 = v.number(raw["mu2"], f"{path}.mu2", 0, mu1, lo_open=True, hi_open=True)
        prob = lambda k, default=None: v.number(raw.get(k, default), f"{path}.{k}", 0, 1, lo_open=True, hi_open=True)
        rate = lambda k: v.number(raw[k], f"{path}.{k}", 0, 1) if k in raw else None
        targets.append(CalibrationTarget(loss, mu1, mu2, prob("p_Z_alice", 0.9), prob("p_Z_bob"),
                                         rate("qber"), rate("phi_Z")))
    return proto, targets, cutoff


def load_targets(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_targets(text)
