"""Run configuration: flat `key = value` files with [section] headers.

Booleans are true/false, lists comma-separated.  Unknown sections or keys are
rejected so typos cannot silently fall back to defaults.  The SCHEMA mapping
below doubles as the documentation of every key and its default.
"""

import configparser
from dataclasses import dataclass, field

__all__ = ["ConfigError", "RunConfig", "load_config", "SCHEMA"]


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true/false, got {s!r}")


def _floats(s):
    return tuple(float(p) for p in s.split(",") if p.strip())


def _strs(s):
    return tuple(p.strip() for p in s.split(",") if p.strip())


# section -> key -> (parser, default)
SCHEMA = {
    "problem": {
        "name": (str, "flower"),
        "epsilon": (float, 1.0),
        "amplitude": (float, 0.1),
    },
    "mesh": {
        "box": (_floats, ()),  # x_min, x_max, y_min, y_max; empty = problem default
        "nx": (int, 8),
        "ny": (int, 0),  # 0 = same as nx
        "kind": (str, ""),  # "" = problem default
        "levels": (int, 5),
    },
    "space": {
        "family": (str, ""),  # "" = matches the mesh kind
        "degree": (int, 1),
    },
    "stabilization": {
        "realization": (str, "face"),
        "gamma_c": (float, 0.01),
        "gamma_b": (float, 0.01),
        "gamma": (float, 0.01),
        "gamma_mass": (float, 0.01),
    },
    "quadrature": {
        "order": (int, 0),  # 0 = 2*degree + 2
        "depth": (int, 0),  # 0 = 2 for degree <= 1 else 4
    },
    "solver": {
        "dense_threshold": (int, 4000),
    },
    "time": {
        "t_end": (float, 1.0),
        "cfl": (float, 0.1),
        "scheme": (str, ""),  # "" = euler for degree 0, rk3 otherwise
        "rk3_literal": (_bool, False),
        "snapshots": (_floats, ()),
    },
    "scan": {
        "count": (int, 1000),
        "gammas": (_floats, (1e-4, 1e-2, 1.0, 1e2)),
        "variants": (_strs, ("full", "gc", "gb", "none")),
        "excluded_delta": (float, 0.25),
    },
    "output": {
        "dir": (str, "out"),
        "plots": (_bool, False),
        "dump_matrix": (_bool, False),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, section, key):
        return self.values[f"{section}.{key}"]


def _defaults():
    return {
        f"{sec}.{key}": default
        for sec, keys in SCHEMA.items()
        for key, (_, default) in keys.items()
    }


def load_config(path=None, overrides=None):
    """Parse a config file; ``overrides`` maps "section.key" to raw strings."""
    values = _defaults()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                values[f"{sec}.{key}"] = _parse(sec, key, raw)
    for dotted, raw in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown override {dotted!r}")
        values[dotted] = _parse(sec, key, raw)
    return RunConfig(values)


def _parse(sec, key, raw):
    parse, _ = SCHEMA[sec][key]
    try:
        return parse(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {sec}.{key}: {raw!r} ({exc})") from exc
