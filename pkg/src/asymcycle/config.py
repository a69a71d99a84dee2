"""Flat, sectioned run configuration.

Config files are INI-style text. Keys are addressed by dotted names built from
the section path and the key, e.g. ``[loss]`` / ``mu = 0.1`` is ``loss.mu``.
Keys that appear before the first section header live at the top level
(``seed``).  Command-line overrides use the same dotted names and win over the
file.
"""

import configparser
import hashlib
import json
import re
from dataclasses import dataclass

from . import __version__

_ROOT = "__root__"

DEFAULTS = {
    "seed": 0,
    "run.out_dir": "runs",
    "run.name": "run",
    "data.x_dir": "",
    "data.y_dir": "",
    "data.x_test_dir": "",
    "data.y_test_dir": "",
    "data.base_size": 512,
    "data.expand_size": 588,
    "data.crop_size": 512,
    "data.hflip_prob": 0.5,
    "data.workers": 1,
    "model.base_channels": 64,
    "model.n_residual_blocks_F": 6,
    "model.n_residual_blocks_G": 2,
    "model.dense_layers": 6,
    "model.dense_growth": 288,
    "model.discriminator.base_channels": 64,
    "model.discriminator.n_down_layers": 4,
    "model.discriminator.kernel": 4,
    "model.discriminator.activation": "relu",
    "loss.lambda_gan": 1.0,
    "loss.lambda_dual": 10.0,
    "loss.lambda_id": 5.0,
    "loss.mu": 1.0,
    "loss.use_identity": True,
    "loss.use_semantic": True,
    "loss.use_feature": True,
    "loss.identity_mode": "output_domain",
    "train.epochs": 200,
    "train.batch_size": 1,
    "train.lr": 2e-4,
    "train.adam_beta1": 0.5,
    "train.adam_beta2": 0.999,
    "train.init_std": 0.02,
    "train.buffer_size": 50,
    "train.lr_decay": "none",
    "train.checkpoint_every": 1,
    "train.update_order": "g_then_d",
    "train.steps_per_epoch": 0,
    "train.n_samples": 4,
    "train.dtype": "float32",
    "backends.feature.kind": "stub_feature",
    "backends.feature.path": "",
    "backends.edge.kind": "stub_edge",
    "backends.edge.path": "",
    "backends.distance.kind": "stub_distance",
    "backends.distance.path": "",
    "backends.inception.kind": "stub_feature",
    "backends.inception.path": "",
}

CHOICES = {
    "model.discriminator.activation": ("relu", "leaky_relu"),
    "loss.identity_mode": ("output_domain", "input_domain"),
    "train.lr_decay": ("none", "linear_after_half"),
    "train.update_order": ("g_then_d", "d_then_g"),
    "train.dtype": ("float32", "float64"),
}

# Keys that locate inputs/outputs rather than define the experiment.
_NON_DIGEST_KEYS = {"run.out_dir", "run.name"}

# Loss-term ablations studied for the dual-consistency objective.
ABLATIONS = {
    "full": {},
    "only_lsgan": {"loss.use_identity": False, "loss.use_semantic": False, "loss.use_feature": False},
    "no_identity": {"loss.use_identity": False},
    "no_semantic": {"loss.use_semantic": False},
    "no_feature": {"loss.use_feature": False},
}

MU_SWEEP = (20.0, 5.0, 1.0, 0.1)


class ConfigError(ValueError):
    """Raised for unreadable config text, unknown keys or ill-typed values."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


def coerce(key, raw, line=None):
    """Convert a raw string (or python value) to the type of ``DEFAULTS[key]``."""
    if key not in DEFAULTS:
        raise ConfigError("unknown config key", key, line)
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                value = raw
            else:
                text = str(raw).strip().lower()
                if text in ("1", "true", "yes", "on"):
                    value = True
                elif text in ("0", "false", "no", "off"):
                    value = False
                else:
                    raise ValueError(raw)
        elif isinstance(default, int):
            value = int(str(raw).strip())
        elif isinstance(default, float):
            value = float(str(raw).strip())
        else:
            value = str(raw).strip()
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", key, line) from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{value!r} not one of {CHOICES[key]}", key, line)
    return value


def _line_of(text, section, option):
    current = _ROOT
    pattern = re.compile(rf"^\s*{re.escape(option)}\s*[=:]", re.IGNORECASE)
    for lineno, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"^\s*\[(.+)\]\s*$", line)
        if header:
            current = header.group(1).strip()
        elif current == section and pattern.match(line):
            return lineno
    return None


def parse_config_text(text):
    """Parse config text into a dict of dotted keys (only the keys present)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        # Top-level keys need a section for configparser; the header shifts line numbers by one.
        parser.read_string(f"[{_ROOT}]\n{text}")
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", f"{_dotted(exc.section, exc.option)}", exc.lineno - 1) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", None, exc.lineno - 1) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"unparseable line {line!r}", None, lineno - 1) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None

    values = {}
    for section in parser.sections():
        for option, raw in parser.items(section):
            key = _dotted(section, option)
            values[key] = coerce(key, raw, _line_of(text, section, option))
    return values


def _dotted(section, option):
    return option if section == _ROOT else f"{section}.{option}"


def parse_override(item):
    """Parse ``--loss.mu=0.1`` / ``loss.mu=0.1`` into ``("loss.mu", 0.1)``."""
    item = item.lstrip("-")
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    return key, coerce(key, raw)


def resolve(path=None, overrides=(), text=None):
    """Defaults, then the config file, then overrides."""
    config = dict(DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    if text is not None:
        config.update(parse_config_text(text))
    for item in overrides:
        if isinstance(item, tuple):
            key, value = item
            config[key] = coerce(key, value)
        else:
            key, value = parse_override(item)
            config[key] = value
    return config


def digest(config):
    """Hex digest of the experiment-defining part of a resolved config."""
    payload = {k: v for k, v in sorted(config.items()) if k not in _NON_DIGEST_KEYS}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def dumps(config):
    """Render a resolved config back to config-file text."""
    sections = {}
    for key in sorted(config):
        section, _, option = key.rpartition(".")
        sections.setdefault(section, []).append((option, config[key]))
    lines = []
    for option, value in sections.pop("", []):
        lines.append(f"{option} = {_render(value)}")
    for section, items in sections.items():
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{option} = {_render(value)}" for option, value in items)
    return "\n".join(lines) + "\n"


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_digest: str
    artifact_version: str
    timestamp: str

    @classmethod
    def create(cls, command, config):
        from datetime import datetime, timezone

        return cls(command, digest(config), __version__, datetime.now(timezone.utc).isoformat())

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2)
