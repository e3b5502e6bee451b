"""Flat key=value run configuration with per-task defaults.

Config files hold one ``key = value`` pair per line (``#`` comments and
blank lines ignored); keys are dotted per module, e.g. ``train.lr``.
Command-line ``--set key=value`` overrides file values; ``--seed`` overrides
the master seed. Every key has a documented default below; some defaults
depend on the task (the published hyperparameters differ between tasks).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{v}'")


def _int_list(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _opt_float(v):
    if v is None or str(v).strip().lower() in ("", "none", "default"):
        return None
    return float(v)


def _str(v):
    return str(v)


# key -> (parser, default, help); None default means "task-dependent" or unset
KEY_SPECS = {
    "task": (_str, "nonlinear", "one of nonlinear | seir | darcy"),
    "seed": (int, 0, "master seed; all randomness derives from it"),
    "out_dir": (_str, None, "output directory (fallback: $CFM_OUT_DIR, then '.')"),
    "paths.dataset": (_str, None, "dataset file to read or write"),
    "paths.checkpoint": (_str, None, "checkpoint file to read or write"),
    "data.tuples_per_n_obs": (int, None, "tuples per observation count (task default)"),
    "data.n_obs": (_int_list, None, "observation counts, e.g. '4,5,6,7,8' (task default)"),
    "data.sigma": (_opt_float, None, "noise scale override (task default if unset)"),
    "net.arch": (_str, "transformer", "velocity net: transformer | mlp"),
    "net.n_emb": (int, 32, "embedding width"),
    "net.n_head": (int, 4, "attention heads"),
    "net.n_layer": (int, None, "transformer blocks (task default: 4/6/4)"),
    "net.rope_base": (float, 10000.0, "rotary embedding base"),
    "net.mlp_hidden": (int, 256, "hidden width of the mlp variant"),
    "net.mlp_n_obs": (int, 4, "fixed observation count of the mlp variant"),
    "net.init_seed": (int, 0, "parameter init stream"),
    "train.lr": (float, None, "Adam learning rate (task default: 8e-4/8e-4/3e-4)"),
    "train.epochs": (int, None, "training epochs (task default)"),
    "train.batch_size": (int, 256, "tuples per batch"),
    "train.accum_window": (int, 4, "batches accumulated per optimizer step"),
    "train.checkpoint_every": (int, 0, "optimizer steps between checkpoints (0: off)"),
    "sampler.steps": (int, 50, "ODE integration steps"),
    "sampler.method": (_str, "euler", "euler | midpoint | rk4"),
    "sampler.ensemble": (int, 10, "posterior draws per inference"),
    "chain.n_samples": (int, 10000, "MCMC chain length"),
    "chain.burn_in": (float, 0.5, "burn-in fraction discarded"),
    "chain.sigma_obs": (_opt_float, None, "likelihood noise (task default if unset)"),
    "chain.proposal_scale": (_opt_float, None, "proposal std (auto-tuned if unset)"),
    "chain.tune": (_bool, True, "tune proposal scale toward 20-40% acceptance"),
    "eval.n_obs_list": (_int_list, None, "sweep observation counts (task default)"),
    "eval.trials": (int, 25, "fresh instances per observation count"),
    "eval.n_inferences": (int, 10000, "instances for the reconstruction error"),
    "seir.shifted_ramp": (_bool, True, "use the monotone (1+tanh)/2 rate ramp"),
    "darcy.sigma_w": (float, 0.05, "boundary bump width parameter"),
    "instance.n_obs": (int, None, "observation count of the conditioning instance"),
    "instance.seed": (int, 1, "stream for drawing the conditioning instance"),
    "paths.n_paths": (int, 32, "trajectories for the straightness probe"),
}

# task-dependent defaults, applied when the key is not set explicitly
TASK_DEFAULTS = {
    "nonlinear": {
        "net.n_layer": 4,
        "train.lr": 8e-4,
        "train.epochs": 16,
        "data.tuples_per_n_obs": 100_000,
        "data.n_obs": (1,),
        "eval.n_obs_list": (1,),
        "instance.n_obs": 1,
    },
    "seir": {
        "net.n_layer": 6,
        "train.lr": 8e-4,
        "train.epochs": 30,
        "data.tuples_per_n_obs": 20_000,
        "data.n_obs": (4, 5, 6, 7, 8),
        "eval.n_obs_list": (4, 5, 6, 7, 8),
        "instance.n_obs": 8,
    },
    "darcy": {
        "net.n_layer": 4,
        "train.lr": 3e-4,
        "train.epochs": 40,
        "data.tuples_per_n_obs": 4_000,
        "data.n_obs": (4, 5, 6, 7, 8),
        "eval.n_obs_list": (4, 5, 6, 7, 8),
        "instance.n_obs": 8,
    },
}


class ConfigError(ValueError):
    pass


def parse_value(key, raw):
    if key not in KEY_SPECS:
        known = "\n  ".join(sorted(KEY_SPECS))
        raise ConfigError(f"unknown config key '{key}'; valid keys:\n  {known}")
    parser = KEY_SPECS[key][0]
    try:
        return parser(raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad value for '{key}': {err}") from err


def parse_config_text(text):
    """Parse flat 'key = value' lines into a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        out[key] = parse_value(key, raw.strip())
    return out


def load_config_file(path):
    """Read a config from a flat-text file or from a run manifest (.json)."""
    with open(path) as f:
        text = f.read()
    if path.endswith(".json"):
        manifest = json.loads(text)
        explicit = manifest.get("config", manifest)
        return {k: parse_value(k, v) for k, v in explicit.items()}
    return parse_config_text(text)


@dataclass
class RunConfig:
    """Fully resolved configuration: every key has a value."""
    values: dict = field(default_factory=dict)
    explicit: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def task_name(self):
        return self.values["task"]

    def out_dir(self):
        d = self.values["out_dir"]
        if d is None:
            d = os.environ.get("CFM_OUT_DIR", ".")
        return d


def resolve(explicit: dict) -> RunConfig:
    """Fill in defaults (task-dependent where applicable)."""
    unknown = set(explicit) - set(KEY_SPECS)
    if unknown:
        known = "\n  ".join(sorted(KEY_SPECS))
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}; valid keys:\n  {known}")
    explicit = {k: parse_value(k, v) for k, v in explicit.items()}
    task = explicit.get("task", KEY_SPECS["task"][1])
    if task not in TASK_DEFAULTS:
        raise ConfigError(f"unknown task '{task}'; expected one of {sorted(TASK_DEFAULTS)}")
    values = {}
    overrides = TASK_DEFAULTS[task]
    for key, (_, default, _h) in KEY_SPECS.items():
        if key in explicit:
            values[key] = explicit[key]
        elif key in overrides:
            values[key] = overrides[key]
        else:
            values[key] = default
    return RunConfig(values=values, explicit=dict(explicit))


def config_reference():
    """Human-readable key reference (key, default, help)."""
    lines = []
    for key, (_, default, help_) in sorted(KEY_SPECS.items()):
        d = "task-dependent" if any(key in o for o in TASK_DEFAULTS.values()) else repr(default)
        lines.append(f"{key:26s} default={d:16s} {help_}")
    return "\n".join(lines)


def serializable(values: dict) -> dict:
    """JSON-safe copy of a (possibly tuple-valued) config dict."""
    out = {}
    for k, v in values.items():
        if isinstance(v, tuple):
            out[k] = ",".join(str(x) for x in v)
        else:
            out[k] = v
    return out
