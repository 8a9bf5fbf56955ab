"""Plain-text experiment configuration.

A config is an INI file with the sections ``problem``, ``scheme``,
``metamodel``, ``budget``, ``output`` and (for option pricing) ``optstop``.
Unspecified keys fall back to the problem's standard settings.  Every key
the runner understands is listed in :data:`KEYS`; anything else is an
error.

Overrides use ``section.key=value`` or a bare ``key=value`` when the key
name is unique.  The bare names ``problem``, ``scheme`` and ``metamodel``
stand for the ``name``/``type`` key of that section.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .schemes import SCHEMES, RunSettings

__all__ = ["ConfigError", "KEYS", "REQUIRED", "ExperimentConfig", "load_config", "parse_config", "bundled_config"]


class ConfigError(ValueError):
    pass


def _int_tuple(text):
    return tuple(int(v) for v in _split(text))


def _float_tuple(text):
    return tuple(float(v) for v in _split(text))


def _split(text):
    return [v for v in text.replace(",", " ").split() if v]


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, RunSettings field or None)
KEYS = {
    "problem": {"name": (str, None)},
    "scheme": {
        "name": (str, "scheme"),
        "eta": (float, "eta"),
        "ladder": (_int_tuple, "ladder"),
        "r_range": (_int_tuple, "r_range"),
        "c_bt": (float, "c_bt"),
        "n_candidates": (int, "n_candidates"),
        "n_polish": (int, "n_polish"),
        "polish_iters": (int, "polish_iters"),
        "absur_mu": (_bool, "absur_mu"),
    },
    "metamodel": {
        "type": (str, "metamodel"),
        "noise_mode": (str, "noise_mode"),
        "tau2": (float, "tau2"),
        "refit_every": (int, "refit_every"),
        "n_starts": (int, "n_starts"),
        "refit_starts": (int, "refit_starts"),
    },
    "budget": {
        "N_T": (int, "N_T"),
        "k0": (int, "k0"),
        "r0": (int, "r0"),
        "T_sim": (float, "T_sim"),
        "theta": (_float_tuple, "theta"),
        "M": (int, "M"),
        "test_mode": (str, "test_mode"),
        "macro_reps": (int, None),
    },
    "output": {"dir": (str, None), "seed": (int, None)},
    "optstop": {
        "K": (float, None),
        "rate": (float, None),
        "sigma": (float, None),
        "dt": (float, None),
        "T": (float, None),
        "z0": (_float_tuple, None),
        "delta": (float, None),
        "form": (str, None),
        "n_paths": (int, None),
        "scale": (float, None),
    },
}

REQUIRED = (("problem", "name"), ("scheme", "name"))
ALIASES = {"problem": ("problem", "name"), "scheme": ("scheme", "name"), "metamodel": ("metamodel", "type")}
OPTSTOP_PROBLEMS = ("put2d", "call3d")

DEFAULTS_DOC = """\
Required keys: [problem] name, [scheme] name.
Everything else defaults to the problem's standard settings:
  problem names: branin2d-gauss, branin2d-hetT, hartman6, put2d, call3d
  scheme names: """ + ", ".join(SCHEMES) + """
  [metamodel] type = gp | tgp
  [budget] macro_reps = 1; [output] seed = 0
See the bundled configs (adbatch/data/*.cfg) for complete examples."""


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    settings: RunSettings
    macro_reps: int = 1
    seed: int = 0
    out_dir: str | None = None
    optstop: dict = dataclasses.field(default_factory=dict)
    raw: dict = dataclasses.field(default_factory=dict)

    @property
    def is_optstop(self) -> bool:
        return self.problem in OPTSTOP_PROBLEMS

    def to_ini(self) -> str:
        """Deterministic text snapshot of the resolved raw key-values."""
        lines = []
        for sec in KEYS:
            items = self.raw.get(sec, {})
            if items:
                lines.append(f"[{sec}]")
                lines += [f"{k} = {items[k]}" for k in sorted(items)]
                lines.append("")
        return "\n".join(lines)


def _resolve_override(key: str) -> tuple[str, str]:
    if "." in key:
        sec, k = key.split(".", 1)
        return sec, k
    if key in ALIASES:
        return ALIASES[key]
    hits = [sec for sec, keys in KEYS.items() if key in keys]
    if len(hits) == 1:
        return hits[0], key
    if not hits:
        raise ConfigError(f"unknown key {key!r}")
    raise ConfigError(f"ambiguous key {key!r}; use one of " + ", ".join(f"{s}.{key}" for s in hits))


def _problem_defaults(name: str) -> tuple[dict, dict]:
    if name in OPTSTOP_PROBLEMS:
        from .optstop import CALL3D, PUT2D

        cfg = PUT2D if name == "put2d" else CALL3D
        p, h = cfg["params"], cfg["payoff"]
        opt = {
            "K": h.K,
            "rate": p.rate,
            "sigma": p.sigma,
            "dt": p.dt,
            "T": p.T,
            "z0": p.z0,
            "delta": p.delta,
            "form": getattr(h, "form", "average"),
            "n_paths": 100_000,
            "scale": 0.1 * h.K,
        }
        return dict(cfg["settings"]), opt
    from .benchmarks import PROBLEMS

    if name not in PROBLEMS:
        valid = sorted(PROBLEMS) + list(OPTSTOP_PROBLEMS)
        raise ConfigError(f"unknown problem {name!r}; valid problems: {', '.join(valid)}")
    return dict(PROBLEMS[name]().defaults), {}


def parse_config(sections: dict, overrides=()) -> ExperimentConfig:
    """Validate raw ``{section: {key: text}}`` data and resolve defaults."""
    raw = {sec: dict(vals) for sec, vals in sections.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = (s.strip() for s in item.split("=", 1))
        sec, k = _resolve_override(key)
        raw.setdefault(sec, {})[k] = val

    typed = {}
    for sec, vals in raw.items():
        if sec not in KEYS:
            raise ConfigError(f"unknown section [{sec}]; valid sections: {', '.join(KEYS)}")
        for k, text in vals.items():
            if k not in KEYS[sec]:
                raise ConfigError(f"unknown key {k!r} in [{sec}]; valid keys: {', '.join(KEYS[sec])}")
            try:
                typed[(sec, k)] = KEYS[sec][k][0](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{k}: {exc}") from None
    missing = [f"{s}.{k}" for s, k in REQUIRED if (s, k) not in typed]
    if missing:
        raise ConfigError(f"missing required key(s) {', '.join(missing)}\n{DEFAULTS_DOC}")

    problem = typed[("problem", "name")]
    fields, optstop = _problem_defaults(problem)
    if typed.get(("scheme", "name")) not in SCHEMES:
        raise ConfigError(f"unknown scheme {typed[('scheme', 'name')]!r}; valid schemes: {', '.join(SCHEMES)}")
    for (sec, k), v in typed.items():
        target = KEYS[sec][k][1]
        if target is not None:
            fields[target] = v
        elif sec == "optstop":
            if problem not in OPTSTOP_PROBLEMS:
                raise ConfigError(f"[optstop] keys only apply to {', '.join(OPTSTOP_PROBLEMS)}")
            optstop[k] = v
    try:
        settings = RunSettings(**fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(
        problem=problem,
        settings=settings,
        macro_reps=typed.get(("budget", "macro_reps"), 1),
        seed=typed.get(("output", "seed"), 0),
        out_dir=typed.get(("output", "dir")),
        optstop=optstop,
        raw=raw,
    )


def _read_ini(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep N_T and K case-sensitive
    cp.read_string(text)
    return {sec: dict(cp[sec]) for sec in cp.sections()}


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read an INI file (or a bundled config name such as ``branin2d``)."""
    p = Path(path)
    text = p.read_text() if p.exists() else bundled_config(str(path))
    return parse_config(_read_ini(text), overrides)


def bundled_config(name: str) -> str:
    stem = Path(name).name.removesuffix(".cfg")
    res = resources.files("adbatch").joinpath(f"data/{stem}.cfg")
    if not res.is_file():
        raise ConfigError(f"config {name!r} not found")
    return res.read_text()
