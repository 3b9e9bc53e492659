"""Run configuration: a flat ``key = value`` text file plus ``--key value``
overrides. Precedence is command line, then file, then defaults.

Lines starting with ``#`` are comments. Keys may use hyphens or underscores.
Relative paths in a file resolve against that file's directory; relative
paths given on the command line resolve against the working directory.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import CtxPpiError
from .finetune import MlpConfig
from .model import ModelConfig
from .pretrain import TrainConfig
from .synth import SyntheticSpec


class ConfigError(CtxPpiError):
    """Bad key, bad value, or a missing mandatory setting."""


PATH_KEYS = ("ppi_path", "deg_path", "lr_path", "hierarchy_path", "labels_path", "graph_dir", "out")

# keys that feed the config hash; everything that changes what training computes
HASHED_KEYS = (
    "latent_dim", "n_protein_layers", "n_attention_heads", "n_metagraph_layers",
    "lr", "ratios", "negative_ratio", "seed",
)


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    out: Path | None = None
    threads: int = 1

    ppi_path: Path | None = None
    deg_path: Path | None = None
    lr_path: Path | None = None
    hierarchy_path: Path | None = None
    labels_path: Path | None = None
    graph_dir: Path | None = None
    min_nodes: int = 10

    latent_dim: int = 32
    n_protein_layers: int = 2
    n_attention_heads: int = 2
    n_metagraph_layers: int = 1

    epochs: int = 100
    lr: float = 1e-2
    ratios: tuple = (0.8, 0.1, 0.1)
    negative_ratio: float = 1.0
    resume: bool = False

    mlp_hidden: int = 32
    mlp_lr: float = 0.01
    mlp_epochs: int = 200
    test_fraction: float = 0.2

    genes: tuple = ()
    baseline_dim: int | None = None

    n_proteins: int = 500
    n_contexts: int = 8
    n_blocks: int = 8
    blocks_per_context: int | None = 3
    p_intra: float = 0.15
    p_inter: float = 0.01
    activation_rate: float = 0.8
    background_rate: float = 0.05
    risk_block: int = 0
    n_positive: int = 40
    n_negative: int = 40
    n_celltypes: int = 2
    p_metagraph: float = 0.3

    def validate(self, need_seed=True):
        if need_seed and self.seed is None:
            raise ConfigError("a seed is required (set seed in the config file or pass --seed)")
        if self.out is None:
            raise ConfigError("an output directory is required (--out)")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigError(f"ratios must be three non-negative numbers, got {self.ratios}")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ConfigError(f"ratios must sum to 1, got {sum(self.ratios)}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.epochs < 0 or self.mlp_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        return self

    def model_config(self):
        return ModelConfig(self.latent_dim, self.n_protein_layers, self.n_attention_heads,
                           self.n_metagraph_layers, self.seed)

    def train_config(self):
        return TrainConfig(self.epochs, self.lr, tuple(self.ratios), self.negative_ratio, self.seed)

    def mlp_config(self):
        return MlpConfig(self.mlp_hidden, self.mlp_lr, self.mlp_epochs, self.test_fraction)

    def synthetic_spec(self):
        return SyntheticSpec(
            n_proteins=self.n_proteins, n_contexts=self.n_contexts, n_blocks=self.n_blocks,
            p_intra=self.p_intra, p_inter=self.p_inter, activation_rate=self.activation_rate,
            blocks_per_context=self.blocks_per_context, background_rate=self.background_rate,
            risk_block=self.risk_block, n_positive=self.n_positive, n_negative=self.n_negative,
            n_celltypes=self.n_celltypes, p_metagraph=self.p_metagraph, min_nodes=self.min_nodes,
        )

    def config_hash(self):
        """sha256 over the settings that determine training. Epoch count is
        left out so a run can be resumed with a longer schedule."""
        payload = {k: getattr(self, k) for k in HASHED_KEYS}
        payload["ratios"] = list(payload["ratios"])
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def as_dict(self):
        d = asdict(self)
        return {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key, text, base):
    default = getattr(RunConfig, key)
    text = text.strip()
    if key in PATH_KEYS:
        p = Path(text).expanduser()
        return (p if p.is_absolute() else base / p).resolve()
    if key in ("seed", "baseline_dim", "blocks_per_context"):
        if text.lower() in ("", "none") and key != "seed":
            return None
        return int(text)
    if key == "ratios":
        return tuple(float(x) for x in text.split(","))
    if key == "genes":
        return tuple(g.strip() for g in text.split(",") if g.strip())
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    raise ValueError(f"no converter for {key!r}")


def _set(values, raw_key, text, base, source):
    key = raw_key.strip().replace("-", "_")
    if key not in _FIELDS:
        raise ConfigError(f"{source}: unknown setting {raw_key!r}")
    try:
        values[key] = _convert(key, text, base)
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value for {key}: {exc}") from None


def read_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    values = {}
    base = path.resolve().parent
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        _set(values, key, value, base, f"{path}:{lineno}")
    return values


def parse_overrides(tokens, cwd=None):
    """``["--epochs", "5", "--lr=0.1"]`` to a value dict."""
    base = Path(cwd or Path.cwd())
    values = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, _, value = tok[2:].partition("=")
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"{tok} needs a value")
            key, value = tok[2:], tokens[i + 1]
            i += 2
        _set(values, key, value, base, "command line")
    return values


def load_config(path=None, overrides=(), cwd=None, validate=True):
    """Defaults, then the file at ``path`` (if any), then ``overrides``
    (a token list or an already-converted dict)."""
    values = read_config_file(path) if path is not None else {}
    values.update(overrides if isinstance(overrides, dict) else parse_overrides(list(overrides), cwd))
    cfg = replace(RunConfig(), **values)
    return cfg.validate() if validate else cfg
