"""Flat ``section.key = value`` experiment configs."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    name: str = "glyphs"  # nbody | glyphs | shapes | idx-images
    n_train: int = 2000
    n_val: int = 0
    n_test: int = 500
    seed: int = 0
    group: str = "c8"  # group used to rotate generated glyphs
    n_classes: int = 8
    n_particles: int = 5
    n_steps: int = 1000
    dt: float = 1e-3
    softening: float = 0.1
    n_points: int = 128
    symmetric_class: bool = False
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""


@dataclass
class ModelConfig:
    canonicalizer: str = "learned"  # learned | none (ablations via ablation_mode)
    canon_group: str = "c8"
    canon_layers: int = 2  # VN layers; 0 gives the linear variant
    canon_hidden: int = 8
    canon_channels: str = "8,8,1"
    canon_mode: str = "global"  # global | local (partial route)
    canon_translation: str = "centroid"  # centroid | learned
    predictor: str = "cnn"  # cnn | gnn | deepsets | mlp
    hidden: int = 64
    layers: int = 4
    cnn_layout: str = "desk"  # desk | paper
    output_rep: str = "invariant"
    fallback_identity: bool = False


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    early_stopping_patience: int = 20
    augment: bool = False
    record_wall_ms: bool = False
    reinit_predictor_after: int = 0
    degenerate_abort_rate: float = 0.1


@dataclass
class AuditConfig:
    group: str = "c4"
    n_transforms: int = 4
    tol: float = 1e-6
    n_samples: int = 250
    exhaustive: bool = False
    seed: int = 0


@dataclass
class EvalConfig:
    split: str = "test"
    transform: str = "rotated"  # none | rotated
    group: str = "c8"
    seed: int = 0


@dataclass
class BenchConfig:
    repetitions: int = 20
    batch: int = 32
    orders: str = "4,8,16,32,64"
    task: str = "shapes"


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    ablation_mode: str = "learned"  # learned | frozen | pca | none


SECTIONS = ("task", "model", "training", "audit", "eval", "bench")
ENUMS = {
    "task.name": ("nbody", "glyphs", "shapes", "idx-images"),
    "ablation_mode": ("learned", "frozen", "pca", "none"),
    "model.canonicalizer": ("learned", "none"),
    "model.canon_mode": ("global", "local"),
    "model.canon_translation": ("centroid", "learned"),
    "model.predictor": ("cnn", "gnn", "deepsets", "mlp"),
    "model.cnn_layout": ("desk", "paper", "small"),
    "model.output_rep": ("invariant", "positions"),
    "eval.transform": ("none", "rotated"),
    "eval.split": ("train", "val", "test"),
}
# Fields allowed to be zero; everything else numeric must be positive.
NONNEGATIVE = {"task.seed", "training.seed", "audit.seed", "eval.seed", "training.epochs",
               "training.weight_decay", "training.reinit_predictor_after", "task.n_val",
               "model.canon_layers", "training.degenerate_abort_rate"}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def set_value(cfg: ExperimentConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key == "ablation_mode":
        cfg.ablation_mode = raw.strip()
        return
    if "." not in key:
        raise ConfigError(f"unknown key {key!r}")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r} in key {key!r}")
    sub = getattr(cfg, section)
    if name not in {f.name for f in fields(sub)}:
        raise ConfigError(f"unknown key {key!r}")
    setattr(sub, name, _coerce(key, raw, getattr(sub, name)))


def parse_lines(lines, cfg: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    cfg = cfg if cfg is not None else ExperimentConfig()
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = text.split("=", 1)
        try:
            set_value(cfg, key, raw.strip())
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path, overrides: list[str] = ()) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cfg = parse_lines(p.read_text().splitlines(), source=str(p))
    cfg = parse_lines(overrides, cfg, source="--set")
    validate(cfg)
    return cfg


def items(cfg: ExperimentConfig):
    """``(key, value)`` pairs in declaration order."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            out += [(f"{f.name}.{g.name}", getattr(v, g.name)) for g in fields(v)]
        else:
            out.append((f.name, v))
    return out


def validate(cfg: ExperimentConfig) -> None:
    for key, v in items(cfg):
        if key in ENUMS and v not in ENUMS[key]:
            raise ConfigError(f"{key}: {v!r} not in {ENUMS[key]}")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            continue
        if key in NONNEGATIVE:
            if v < 0:
                raise ConfigError(f"{key}: must be nonnegative, got {v}")
        elif v <= 0:
            raise ConfigError(f"{key}: must be positive, got {v}")


def dump(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in items(cfg)]
    if cfg.training.reinit_predictor_after:
        lines.append(f"# two-phase: predictor re-initialised after epoch {cfg.training.reinit_predictor_after},"
                     " canonicalizer and optimizer state for it kept")
    return "\n".join(lines) + "\n"
