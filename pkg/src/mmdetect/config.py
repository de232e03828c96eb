"""Flat key=value run configuration.

One ``key=value`` pair per line, ``#`` starts a comment, unknown keys are
rejected, and command-line flags override file values.  The fully resolved
config is echoed into every checkpoint so evaluation can rebuild the model
without guessing hyperparameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import BadParam


@dataclass
class TrainConfig:
    seed: int = -1                 # mandatory; -1 means unset
    corpus: str = ""               # manifest path (CLI runs)
    vqvae: str = ""                # vqvae checkpoint path (CLI runs)
    lr: float = 1e-4
    clip_len: int = 10
    crop: int = 32
    batch_size: int = 8
    max_steps: int = 500
    val_every: int = 50
    train_fraction: float = 0.9    # 9:1 train/validation split
    provider: str = "mock"         # mock | file
    sigma: float = 1.0             # mock signal strength
    features: str = ""             # feature file path (file provider)
    interval_s: float = 6.0        # feature cache grid spacing
    layers: int = 4
    heads: int = 4
    dim: int = 64
    patch: int = 8
    n_max: int = 16
    backbone: str = "conv-stem"
    mlp_ratio: int = 2
    gate_hidden: int = 16
    use_recon: bool = True
    use_mmfr: bool = True
    use_fusion: bool = True

    def validate(self):
        if self.seed < 0:
            raise BadParam("seed is mandatory")
        if self.provider not in ("mock", "file"):
            raise BadParam(f"provider must be mock|file, got {self.provider!r}")
        if self.provider == "file" and not self.features:
            raise BadParam("file provider needs features=<path>")
        if self.clip_len > self.n_max:
            raise BadParam(f"clip_len {self.clip_len} > n_max {self.n_max}")
        if self.use_fusion and not self.use_mmfr:
            raise BadParam("fusion requires mmfr")
        if not 0.0 < self.train_fraction < 1.0:
            raise BadParam(f"train_fraction must be in (0,1), got {self.train_fraction}")


_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    typ = _FIELDS[key]
    if typ == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise BadParam(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise BadParam(f"{key}: expected {typ}, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse key=value lines into typed values; unknown keys are errors."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadParam(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELDS:
            raise BadParam(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def resolve_config(file_path: str | Path | None = None,
                   overrides: dict | None = None) -> TrainConfig:
    """File values first, then overrides; validates the result."""
    values: dict = {}
    if file_path:
        values.update(parse_config_text(Path(file_path).read_text(encoding="utf-8")))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise BadParam(f"unknown config key {key!r}")
        values[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def render_config(cfg: TrainConfig) -> str:
    """Canonical text form: sorted key=value lines."""
    items = asdict(cfg)
    return "\n".join(f"{k}={items[k]}" for k in sorted(items)) + "\n"


def config_from_echo(text: str) -> TrainConfig:
    cfg = TrainConfig(**parse_config_text(text))
    cfg.validate()
    return cfg
