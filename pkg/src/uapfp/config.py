"""Pipeline configuration: one JSON document, nested per module, with dotted overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .verify import VerifyConfig
from .zoo import DataConfig, ZooConfig

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{k}: {m}" for k, m in self.errors))


@dataclass
class UapConfig:
    xi: float | None = None  # None: derived from the victim's training inputs
    target_fooling: float = 0.8
    max_epochs: int = 10
    overshoot: float = 0.02
    max_iter: int = 50
    L: int | None = None  # UAPs per model for the subspace analysis; None means one per input dimension
    n_points: int | None = 250  # victim inputs used to build each subspace UAP; None uses all

    def validate(self):
        if self.xi is not None and not self.xi > 0:
            raise ValueError("uap.xi must be positive")
        if not 0.0 < self.target_fooling <= 1.0:
            raise ValueError("uap.target_fooling must lie in (0, 1]")
        if self.max_epochs < 1 or self.max_iter < 1:
            raise ValueError("uap.max_epochs and uap.max_iter must be >= 1")
        if self.L is not None and self.L < 2:
            raise ValueError("uap.L must be >= 2")
        if self.n_points is not None and self.n_points < 1:
            raise ValueError("uap.n_points must be >= 1")


@dataclass
class FingerprintConfig:
    n: int = 100
    k: int = 200
    top_k: int | None = None

    def validate(self):
        if self.n < 1:
            raise ValueError("fingerprint.n must be >= 1")
        if self.k < 1:
            raise ValueError("fingerprint.k must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("fingerprint.top_k must be >= 1 or null")


@dataclass
class EncoderConfig:
    tau: float = 0.5
    batch_size: int = 512
    epochs: int = 60
    learning_rate: float = 1e-3
    hidden: list = field(default_factory=lambda: [512, 128])
    embedding_dim: int = 64

    def validate(self):
        if not self.tau > 0:
            raise ValueError("encoder.tau must be positive")
        if self.batch_size < 2:
            raise ValueError("encoder.batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("encoder.epochs must be >= 1")
        if self.embedding_dim < 1:
            raise ValueError("encoder.embedding_dim must be >= 1")


@dataclass
class AblateConfig:
    n_values: list = field(default_factory=lambda: [10, 30, 50, 70, 100])
    top_k_values: list = field(default_factory=lambda: [1, 3])
    overlap_rates: list = field(default_factory=lambda: [0.0, 0.3, 0.6, 0.9])
    overlap_models: int = 3  # homologous models per overlap level
    recovery_min: float = 0.78
    recovery_max: float = 0.94
    recovery_bin: float = 0.02
    n_borderpoints: int = 20

    def validate(self):
        if not self.n_values or any(n < 1 for n in self.n_values):
            raise ValueError("ablate.n_values must be a non-empty list of positive counts")
        if any(k < 1 for k in self.top_k_values):
            raise ValueError("ablate.top_k_values must be >= 1")
        if any(not 0.0 <= r <= 1.0 for r in self.overlap_rates):
            raise ValueError("ablate.overlap_rates must lie in [0, 1]")
        if self.overlap_models < 1 or self.n_borderpoints < 1:
            raise ValueError("ablate.overlap_models and ablate.n_borderpoints must be >= 1")
        if not (self.recovery_bin > 0 and self.recovery_min < self.recovery_max):
            raise ValueError("ablate recovery range is empty")


@dataclass
class RobustnessConfig:
    prune_rates: list = field(default_factory=lambda: [0.2, 0.4, 0.6])
    finetune_iterations: int = 10
    finetune_fraction: float = 0.2  # share of the test set the attacker fine-tunes on
    finetune_lr: float = 1e-3  # keeps fine-tuned accuracy within 0.05 of the original
    adv_iterations: int = 270
    adv_step: int = 30
    adv_per_iter: int = 128
    adv_learning_rate: float = 1e-3
    adv_models: int = 6  # how many held-out piracy models go through adversarial training

    def validate(self):
        if any(not 0.0 <= r < 1.0 for r in self.prune_rates):
            raise ValueError("robustness.prune_rates must lie in [0, 1)")
        if self.finetune_iterations < 1 or self.adv_iterations < 1:
            raise ValueError("robustness iteration counts must be >= 1")
        if not 0.0 < self.finetune_fraction <= 1.0:
            raise ValueError("robustness.finetune_fraction must lie in (0, 1]")
        if self.adv_step < 1 or self.adv_per_iter < 1 or self.adv_models < 0:
            raise ValueError("robustness.adv_step, adv_per_iter must be >= 1 and adv_models >= 0")


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs"
    run_id: str = ""  # empty: "seed-<seed>"
    data: DataConfig = field(default_factory=DataConfig)
    zoo: ZooConfig = field(default_factory=ZooConfig)
    uap: UapConfig = field(default_factory=UapConfig)
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)
    schema_version: int = CONFIG_SCHEMA_VERSION

    def validate(self):
        errors = []
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            errors.append(("schema_version", f"expected {CONFIG_SCHEMA_VERSION}, got {self.schema_version!r}"))
        for f in fields(self):
            sub = getattr(self, f.name)
            if is_dataclass(sub):
                try:
                    sub.validate()
                except (ValueError, TypeError) as exc:
                    errors.append((f.name, str(exc)))
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def run_dir(self) -> Path:
        base = os.environ.get("UAPFP_OUT") or self.out
        return Path(base) / (self.run_id or f"seed-{self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, doc, prefix, errors):
    if not isinstance(doc, dict):
        errors.append((prefix or "<root>", "expected an object"))
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            errors.append((path, "unknown field"))
            continue
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, path, errors)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append((prefix or "<root>", str(exc)))
        return cls()


def config_from_dict(doc) -> PipelineConfig:
    errors = []
    cfg = _build(PipelineConfig, doc, "", errors)
    try:
        cfg.validate()
    except ConfigError as exc:
        errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_value(text: str):
    """JSON literal if it parses (numbers, lists, null, true), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings to a config document (a modified copy)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError([(item, "override must look like key=value")])
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([(key, f"{p} is not an object")])
        node[parts[-1]] = parse_value(raw)
    return doc


def load_config(path=None, overrides=None, seed=None, out=None) -> PipelineConfig:
    """Read, override and validate a config.  ``path=None`` starts from the defaults."""
    if path is None:
        doc = PipelineConfig().to_dict()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError([("config", f"file not found: {p}")])
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([("config", f"invalid JSON: {exc}")]) from exc
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    return config_from_dict(doc)


def save_config(cfg: PipelineConfig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
