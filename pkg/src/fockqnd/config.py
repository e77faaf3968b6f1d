"""Run configuration: presets, TOML parsing and exact serialization.

Configs are flat-sectioned TOML::

    preset = "paper-sec6"
    mode = "trajectory"

    [physics]
    eta = 0.5

    [integrator]
    t_final = 2e-3
    seed = 7

Precedence, lowest first: built-in defaults, the named preset, keys in the
file, command-line flags. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, fields

import tomli

from .model import PhysicalParams

MODES = ("trajectory", "ensemble", "unconditional", "full-model", "validate")
QUBIT_STATES = ("g", "e", "+x", "-x", "+y", "-y", "mixed")

# Common factor applied to chi and gamma in the fast preset. With the quoted
# chi the qubit precession (2 chi n) is far slower than the measurement rate
# and the spontaneous-emission background, so conditioning onto a number
# state takes longer than the mean time between thermal jumps. Scaling chi
# and gamma together keeps the jump-to-conditioning ordering and makes the
# precession comb resolvable in the record.
SCALE_FACTOR = 100.0

_REFERENCE = dict(
    omega_c=5e10, omega_m=2 * math.pi * 1e7, Delta=5e10, epsilon=0.0, mu=1e7, Q_m=2e7,
    Gamma_q=1e4, chi_override=2.56e3, gprime_override=-7.56e5, n0m=2.0, eta=1.0, mass=1e-15,
)

PRESETS: dict[str, dict[str, dict]] = {
    "paper-sec6": {"physics": dict(_REFERENCE)},
    "paper-sec6-scaled": {
        "physics": dict(_REFERENCE, chi_override=_REFERENCE["chi_override"] * SCALE_FACTOR,
                        Q_m=_REFERENCE["Q_m"] / SCALE_FACTOR),
        # explicit Euler-type drift stability needs dt < Gamma / (2 chi N)^2
        "integrator": {"dt": 1e-9},
        "model": {"n_levels": 20},
    },
}


class ConfigError(ValueError):
    """Malformed, incomplete or out-of-range configuration."""


def _physics_keys() -> tuple[str, ...]:
    return tuple(f.name for f in fields(PhysicalParams))


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one run.

    ``dt = None`` selects the engine's rate-based default step.
    """

    mode: str
    physics: PhysicalParams
    preset: str | None = None
    # model
    feedback: bool = True
    n_levels: int = 30
    n_cavity: int = 4
    qubit0: str = "g"
    nbar0: float = 2.0
    fock0: int | None = None
    # integrator
    dt: float | None = None
    t_final: float = 1e-3
    seed: int = 0
    renorm_every: int = 1
    diag_every: int = 100
    sample_every: int = 100
    record_every: int = 1
    # ensemble
    ensemble: int = 1
    workers: int = 1
    # output
    out: str = "runs/out"
    strict: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        if self.qubit0 not in QUBIT_STATES:
            raise ConfigError(f"qubit0 must be one of {QUBIT_STATES}")
        if self.n_levels < 2 or self.n_cavity < 2:
            raise ConfigError("n_levels and n_cavity must be >= 2")
        if self.nbar0 < 0:
            raise ConfigError("nbar0 must be >= 0")
        if self.fock0 is not None and not 0 <= self.fock0 < self.n_levels:
            raise ConfigError("fock0 must lie inside the truncation")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if not self.t_final > 0:
            raise ConfigError("t_final must be > 0")
        for name in ("renorm_every", "diag_every", "sample_every", "record_every",
                     "ensemble", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.mode == "ensemble" and self.ensemble < 2:
            raise ConfigError("ensemble mode needs ensemble >= 2")
        if self.feedback and self.physics.eta == 0:
            raise ConfigError("feedback requires eta > 0")


# section -> keys accepted there (physics keys map onto PhysicalParams)
_SECTIONS = {
    "physics": _physics_keys(),
    "model": ("feedback", "n_levels", "n_cavity", "qubit0", "nbar0", "fock0"),
    "integrator": ("dt", "t_final", "seed", "renorm_every", "diag_every", "sample_every",
                   "record_every"),
    "ensemble": ("ensemble", "workers"),
    "output": ("out", "strict"),
}
_TOP = ("mode", "preset")
_INT_KEYS = {"n_levels", "n_cavity", "fock0", "seed", "renorm_every", "diag_every",
             "sample_every", "record_every", "ensemble", "workers"}
_BOOL_KEYS = {"feedback", "strict"}
_STR_KEYS = {"qubit0", "out", "mode", "preset"}


def _coerce(key: str, value):
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if key in _INT_KEYS:
        if int(value) != value:
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    return float(value)


def _flatten(doc: dict) -> dict:
    flat: dict = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise ConfigError(f"unknown section [{key}]")
            for k, v in value.items():
                if k not in _SECTIONS[key]:
                    raise ConfigError(f"unknown key {k!r} in [{key}]")
                flat[k] = _coerce(k, v)
        elif key in _TOP:
            flat[key] = _coerce(key, value)
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return flat


def resolve(values: dict) -> RunConfig:
    """Build a :class:`RunConfig` from flat overrides on top of a preset."""
    values = dict(values)
    preset = values.get("preset")
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        for section in PRESETS[preset].values():
            merged.update(section)
    merged.update(values)
    if not merged.get("mode"):
        raise ConfigError("missing required key 'mode'")

    phys_keys = set(_physics_keys())
    phys = {k: v for k, v in merged.items() if k in phys_keys}
    rest = {k: v for k, v in merged.items() if k not in phys_keys}
    for req in ("omega_c", "omega_m", "Delta"):
        if req not in phys:
            raise ConfigError(f"missing required key {req!r} in [physics]")
    if "Q_m" in values and "gamma" not in values:
        phys.pop("gamma", None)
    if "gamma" in values and "Q_m" not in values:
        phys.pop("Q_m", None)
    try:
        pp = PhysicalParams(**phys)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return RunConfig(physics=pp, **rest)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse TOML text, apply ``overrides`` (flat keys) and validate."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    flat = _flatten(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            flat[k] = _coerce(k, v)
    return resolve(flat)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)  # shortest round-trip decimal
    if isinstance(v, str):
        return json.dumps(v)
    raise TypeError(f"cannot serialize {v!r}")


def as_flat_dict(cfg: RunConfig) -> dict:
    """All resolved values keyed as in the config file; ``None`` dropped."""
    out = {"mode": cfg.mode, "preset": cfg.preset}
    out.update(dataclasses.asdict(cfg.physics))
    for f in fields(RunConfig):
        if f.name not in ("mode", "preset", "physics"):
            out[f.name] = getattr(cfg, f.name)
    return {k: v for k, v in out.items() if v is not None}


def serialize(cfg: RunConfig) -> str:
    """Exact TOML text for ``cfg``; ``parse_config(serialize(cfg)) == cfg``.

    Every key is written explicitly, so the preset name is informational.
    """
    flat = as_flat_dict(cfg)
    lines = [f"{k} = {_toml_value(flat[k])}" for k in _TOP if k in flat]
    for section, keys in _SECTIONS.items():
        body = [f"{k} = {_toml_value(flat[k])}" for k in keys if k in flat]
        if body:
            lines += ["", f"[{section}]", *body]
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with flat keys replaced (physics keys included)."""
    flat = as_flat_dict(cfg)
    flat.update({k: v for k, v in changes.items()})
    flat = {k: v for k, v in flat.items() if v is not None}
    if "gamma" in changes and changes["gamma"] is not None:
        flat.pop("Q_m", None)
    if "Q_m" in changes and changes["Q_m"] is not None:
        flat.pop("gamma", None)
    return resolve(flat)


__all__ = [
    "ConfigError",
    "MODES",
    "PRESETS",
    "RunConfig",
    "SCALE_FACTOR",
    "as_flat_dict",
    "parse_config",
    "resolve",
    "serialize",
    "with_overrides",
]
