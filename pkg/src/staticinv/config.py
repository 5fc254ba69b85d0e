"""
Run configuration: a flat ``section.key = value`` text file.

Sections and keys (defaults in brackets)::

    paths.node              Tetgen .node file of the rest/template mesh
    paths.ele               Tetgen .ele file
    paths.fixed             fixed-vertex index file (0-based, one per line)
    paths.labels            per-element cluster label file
    paths.poses             poses JSON (training observations)
    paths.observed_neutral  .node file: full mesh fitted to the neutral observation
    paths.heldout           poses JSON for validation

    physics.density         [1000.0]  kg/m^3
    physics.gravity         [9.81]    m/s^2, magnitude for synthesized poses
    physics.poisson         [0.43]
    physics.neutral_pose    [0]       index of the pose whose gravity seeds the rest guess

    solver.residual_tol     [none]    N; none = force-scale default
    solver.tol_scale        [1.0]
    solver.max_newton_iters [100]
    solver.inversion_threshold [0.2]
    solver.polish_iters     [0]       extra Newton steps past the tolerance

    inverse.*               every InverseConfig field (alpha=none selects the default)

    synth.cells             [2,2,10]
    synth.cell_size         [0.01]    m
    synth.fixed_face        [x-]
    synth.bands             [3]
    synth.band_axis         [z]
    synth.plane             [yz]
    synth.step_deg          [30.0]
    synth.heldout_angles    [-45,45]

    validate.naive_E        [none]    Pa; none = softest recovered cluster modulus

    threads                 [1]       worker count for per-pose evaluation, or "auto"

Unknown keys are an error. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field

from .forward import SolverConfig
from .inverse import InverseConfig

__all__ = ["ConfigError", "PathsConfig", "PhysicsConfig", "SynthConfig", "ValidateConfig", "RunConfig",
           "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid configuration or missing input file."""


@dataclass
class PathsConfig:
    node: str | None = None
    ele: str | None = None
    fixed: str | None = None
    labels: str | None = None
    poses: str | None = None
    observed_neutral: str | None = None
    heldout: str | None = None


@dataclass
class PhysicsConfig:
    density: float = 1000.0
    gravity: float = 9.81
    poisson: float = 0.43
    neutral_pose: int = 0


@dataclass
class SynthConfig:
    cells: tuple = (2, 2, 10)
    cell_size: float = 0.01
    fixed_face: str = "x-"
    bands: int = 3
    band_axis: str = "z"
    plane: str = "yz"
    step_deg: float = 30.0
    heldout_angles: tuple = (-45.0, 45.0)


@dataclass
class ValidateConfig:
    naive_E: float | None = None


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    inverse: InverseConfig = field(default_factory=InverseConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    threads: str = "1"

    SECTIONS = ("paths", "physics", "solver", "inverse", "synth", "validate")

    def thread_count(self) -> int:
        if str(self.threads).lower() == "auto":
            return os.cpu_count() or 1
        n = int(self.threads)
        if n < 1:
            raise ConfigError("threads must be >= 1 or 'auto'")
        return n

    def to_flat(self) -> dict:
        out = {}
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                out[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        out["threads"] = self.threads
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            if v is None:
                v = "none"
            elif isinstance(v, list):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat(cls, flat: dict, base_dir=None) -> "RunConfig":
        groups: dict[str, dict] = {s: {} for s in cls.SECTIONS}
        threads = "1"
        for key, raw in flat.items():
            if key == "threads":
                threads = str(raw)
                continue
            sec, _, name = key.partition(".")
            if sec not in groups or not name:
                raise ConfigError(f"unknown config key {key!r}")
            groups[sec][name] = raw
        kwargs = {}
        for sec, values in groups.items():
            klass = {f.name: f for f in dataclasses.fields(cls)}[sec].default_factory
            hints = typing.get_type_hints(klass)
            known = {f.name: f for f in dataclasses.fields(klass)}
            conv = {}
            for name, raw in values.items():
                if name not in known:
                    raise ConfigError(f"unknown config key {sec}.{name!r}")
                try:
                    conv[name] = _convert(raw, hints[name], known[name].default)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {sec}.{name}: {raw!r} ({exc})") from None
                if sec == "paths" and conv[name] is not None and base_dir is not None:
                    conv[name] = os.path.normpath(os.path.join(base_dir, conv[name]))
            try:
                kwargs[sec] = klass(**conv)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {exc}") from None
        return cls(threads=threads, **kwargs)


def _convert(raw, hint, default):
    if isinstance(raw, str):
        s = raw.strip()
        if s.lower() in ("none", "null", ""):
            return None
    else:
        s = raw
    if raw is None:
        return None
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    target = args[0] if args else hint
    if target is tuple or isinstance(default, tuple):
        items = s.split(",") if isinstance(s, str) else list(s)
        elem = type(default[0]) if default else float
        return tuple(elem(str(x).strip()) if elem is not str else str(x).strip() for x in items)
    if target is bool:
        return str(s).lower() in ("1", "true", "yes", "on")
    if target is int:
        return int(s)
    if target is float:
        return float(s)
    return str(s)


def parse_config(text: str, base_dir=None) -> RunConfig:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        flat[key.strip()] = value.strip()
    return RunConfig.from_flat(flat, base_dir)


def load_config(path) -> RunConfig:
    """Read a config file; relative paths resolve against the file's directory."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))
