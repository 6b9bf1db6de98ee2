"""Run configuration: flat ``key = value`` files with typed, documented defaults."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


ABLATIONS = {
    "max_pool_aggregator": ("aggregator", "max_pool"),
    "avg_embedding": ("review_encoder", "avg_embedding"),
    "remove_position": ("use_position", False),
    "remove_ui_bias": ("use_ui_bias", False),
    "remove_aux_loss": ("use_aux_loss", False),
    "add_item_dynamic": ("item_dynamic", True),
}

# fields that change parameter shapes or the forward computation
ARCH_FIELDS = (
    "d_w", "d_s", "d_r", "d_latent", "heads", "width", "match_hidden", "M", "T", "L", "k_max",
    "aggregator", "review_encoder", "use_position", "use_ui_bias", "item_dynamic", "share_towers",
)


@dataclass
class Config:
    # data
    corpus: str = ""
    embeddings: str = ""
    out: str = "runs/zarm"
    split: str = "8,1,1"
    min_count: int = 1
    coverage: float = 0.9
    # sizes (N=0 derives the profile size from the coverage rule)
    N: int = 0
    T: int = 10
    L: int = 30
    M: int = 60
    d_w: int = 300
    d_s: int = 100
    d_r: int = 100
    d_latent: int = 32
    heads: int = 2
    width: int = 3
    k_max: int = 8
    match_hidden: int = 16
    # regularisation: after embeddings, after each block FFN, before prediction
    dropout_embed: float = 0.2
    dropout_ffn: float = 0.3
    dropout_pred: float = 0.5
    # optimisation
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    precision: str = "float32"
    workers: int = 1
    record_seconds: bool = True
    # model variants
    aggregator: str = "attention"
    review_encoder: str = "hierarchical"
    use_position: bool = True
    use_ui_bias: bool = True
    use_aux_loss: bool = True
    item_dynamic: bool = False
    share_towers: bool = False

    def validate(self) -> "Config":
        positive = ("T", "L", "M", "d_w", "d_s", "d_r", "d_latent", "heads", "width",
                    "match_hidden", "batch_size", "workers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("N", "epochs", "k_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.width % 2 == 0:
            raise ConfigError(f"width must be odd, got {self.width}")
        if self.d_s % self.heads or self.d_r % self.heads:
            raise ConfigError(f"d_s and d_r must be divisible by heads={self.heads}")
        if self.aggregator not in ("attention", "max_pool"):
            raise ConfigError(f"aggregator must be attention or max_pool, got {self.aggregator!r}")
        if self.review_encoder not in ("hierarchical", "avg_embedding"):
            raise ConfigError(f"review_encoder must be hierarchical or avg_embedding, got {self.review_encoder!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("dropout_embed", "dropout_ffn", "dropout_pred"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if not 0 < self.coverage <= 1:
            raise ConfigError("coverage must be in (0, 1]")
        self.ratios()
        return self

    def ratios(self) -> tuple[float, ...]:
        try:
            parts = tuple(float(x) for x in self.split.split(","))
        except ValueError as exc:
            raise ConfigError(f"split must be comma-separated numbers, got {self.split!r}") from exc
        if len(parts) != 3 or any(p <= 0 for p in parts):
            raise ConfigError(f"split needs three positive ratios, got {self.split!r}")
        return parts

    def apply_ablation(self, name: str) -> None:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        key, value = ABLATIONS[name]
        setattr(self, key, value)

    def set(self, key: str, raw) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, key, _coerce(key, types[key], raw))

    def arch_hash(self) -> str:
        arch = {k: getattr(self, k) for k in ARCH_FIELDS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        lines = ["# resolved configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def _coerce(key: str, typ: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from exc
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def load_config(path: str | Path, base: Config | None = None) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)
