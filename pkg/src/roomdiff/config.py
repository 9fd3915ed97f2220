"""Run configuration: one schema drives the config-file parser, the CLI
flags, and the --help text.

Config files are plain text `key = value` lines ('#' starts a comment).
Unknown keys are rejected; CLI flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, make_dataclass

from .datagen import GeneratorConfig
from .denoiser import DenoiserConfig
from .diffusion import make_schedule
from .errors import ConfigError
from .evaluation import FeatureExtractor, SymSpec
from .scene import NormalizationSpec
from .training import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    help: str


SCHEMA = (
    # global
    Key("seed", int, 0, "base random seed for the command"),
    Key("threads", int, 1, "worker threads; 1 guarantees bitwise runs"),
    # diffusion schedule
    Key("timesteps", int, 1000, "diffusion steps T"),
    Key("beta_start", float, 1e-4, "first beta of the linear schedule"),
    Key("beta_end", float, 0.02, "last beta of the linear schedule"),
    # scene representation
    Key("num_slots", int, 8, "object slots N per scene tensor"),
    Key("code_dim", int, 8, "shape-code dimensions F (0 disables codes)"),
    Key("classes", str, "empty,bed,nightstand,wardrobe,lamp,desk,chair,table",
        "comma-separated class table; first entry must be 'empty'"),
    Key("room_half_x", float, 3.0, "location normalization half-extent x"),
    Key("room_half_y", float, 3.0, "location normalization half-extent y"),
    Key("room_half_z", float, 2.0, "location normalization half-extent z"),
    Key("size_scale", float, 1.5, "size normalization half-extent"),
    # denoiser
    Key("width", int, 96, "trunk channels"),
    Key("depth", int, 2, "conv+attention blocks"),
    Key("heads", int, 4, "attention heads"),
    Key("time_dim", int, 128, "sinusoidal time embedding width"),
    Key("text_dim", int, 0, "token embedding width; 0 disables text"),
    # training
    Key("batch_size", int, 32, "scenes per optimization step"),
    Key("train_steps", int, 20000, "total optimization steps"),
    Key("lr_init", float, 2e-4, "initial learning rate"),
    Key("lr_decay", float, 0.5, "learning-rate decay factor"),
    Key("lr_decay_interval", int, 3000, "steps between decays"),
    Key("lambda_iou", float, 1.0, "weight of the overlap penalty"),
    Key("iou_sharpness", float, 10.0, "softplus sharpness of the smooth IoU"),
    Key("eval_interval", int, 1000, "steps between running-loss reports"),
    Key("checkpoint_interval", int, 5000, "steps between checkpoints"),
    # generator
    Key("room_type", str, "toy_bedroom", "corpus recipe tag"),
    Key("scene_count", int, 512, "scenes to generate"),
    Key("symmetry_prob", float, 0.7, "mirrored nightstand-pair probability"),
    Key("nightstand_solo_prob", float, 0.5,
        "lone-nightstand probability when no pair"),
    Key("wardrobe_prob", float, 0.8, "wardrobe occurrence probability"),
    Key("lamp_prob", float, 0.9, "lamp occurrence probability"),
    Key("desk_prob", float, 0.5, "desk occurrence probability"),
    Key("chair_given_desk", float, 0.9, "chair probability with a desk"),
    Key("chair_given_no_desk", float, 0.1, "chair probability without"),
    Key("table_prob", float, 0.3, "table occurrence probability"),
    Key("rejection_iou", float, 0.01, "max pairwise IoU during placement"),
    Key("min_objects", int, 3, "minimum objects per scene"),
    Key("max_objects", int, 13, "maximum objects per scene (capped at N)"),
    # shape library
    Key("shape_library", str, "", "prototype library path; empty = build"),
    Key("prototypes_per_class", int, 6, "prototypes per class when building"),
    Key("codec_epochs", int, 400, "shape codec training epochs"),
    Key("codec_lr", float, 3e-3, "shape codec learning rate"),
    # metrics
    Key("feature_seed", int, 7, "random-projection feature seed"),
    Key("sca_epochs", int, 200, "logistic-probe training epochs"),
    Key("sca_reshuffles", int, 5, "probe split reshuffles"),
    Key("sym_size_tol", float, 0.10, "symmetric-pair size tolerance"),
    Key("sym_offaxis_tol", float, 0.15, "symmetric-pair off-axis tolerance, m"),
    Key("sym_height_tol", float, 0.05, "symmetric-pair height tolerance, m"),
    Key("sym_angle_tol_deg", float, 15.0, "symmetric-pair angle tolerance"),
)

_BY_NAME = {k.name: k for k in SCHEMA}

RunConfig = make_dataclass(
    "RunConfig", [(k.name, k.type, field(default=k.default)) for k in SCHEMA])


def _parse_value(key: Key, raw: str):
    try:
        if key.type is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes"):
                return True
            if low in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return key.type(raw.strip())
    except ValueError as exc:
        raise ConfigError(
            f"bad value for '{key.name}': {raw!r}") from exc


def parse_config_file(path) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(
                        f"{path}:{lineno}: expected 'key = value'")
                name, raw = (s.strip() for s in stripped.split("=", 1))
                if name not in _BY_NAME:
                    raise ConfigError(f"unknown config key '{name}'")
                values[name] = _parse_value(_BY_NAME[name], raw)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return values


def load_config(path=None, overrides=None) -> "RunConfig":
    """Defaults, then file values, then CLI overrides; validates the result."""
    values = {k.name: k.default for k in SCHEMA}
    if path:
        values.update(parse_config_file(path))
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name not in _BY_NAME:
            raise ConfigError(f"unknown config key '{name}'")
        values[name] = value
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def class_table(cfg) -> tuple:
    return tuple(s.strip() for s in cfg.classes.split(",") if s.strip())


def validate(cfg) -> None:
    classes = class_table(cfg)
    if len(classes) < 2 or classes[0] != "empty":
        raise ConfigError("classes must start with 'empty' and name at "
                          "least one real class")
    if len(set(classes)) != len(classes):
        raise ConfigError("duplicate class names")
    if cfg.num_slots < 1:
        raise ConfigError("num_slots must be positive")
    if cfg.code_dim < 0:
        raise ConfigError("code_dim must be >= 0")
    if not 0 < cfg.beta_start <= cfg.beta_end < 1:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    if cfg.timesteps < 2:
        raise ConfigError("timesteps must be >= 2")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    try:
        train_config(cfg)
        denoiser_config(cfg, vocab_size=max(1, cfg.text_dim))
        generator_config(cfg)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc


def norm_spec(cfg) -> NormalizationSpec:
    return NormalizationSpec(
        classes=class_table(cfg), code_dim=cfg.code_dim,
        location_scale=[cfg.room_half_x, cfg.room_half_y, cfg.room_half_z],
        size_scale=[cfg.size_scale] * 3)


def schedule(cfg):
    return make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)


def denoiser_config(cfg, vocab_size: int = 0) -> DenoiserConfig:
    return DenoiserConfig(
        num_slots=cfg.num_slots, num_classes=len(class_table(cfg)),
        code_dim=cfg.code_dim, width=cfg.width, depth=cfg.depth,
        heads=cfg.heads, time_dim=cfg.time_dim, text_dim=cfg.text_dim,
        vocab_size=vocab_size if cfg.text_dim > 0 else 0)


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size, total_steps=cfg.train_steps,
        lr_init=cfg.lr_init, lr_decay=cfg.lr_decay,
        lr_decay_interval=cfg.lr_decay_interval, seed=cfg.seed,
        lambda_iou=cfg.lambda_iou, iou_sharpness=cfg.iou_sharpness,
        eval_interval=cfg.eval_interval,
        checkpoint_interval=cfg.checkpoint_interval, threads=cfg.threads)


def generator_config(cfg) -> GeneratorConfig:
    return GeneratorConfig(
        room_type=cfg.room_type, scene_count=cfg.scene_count, seed=cfg.seed,
        num_slots=cfg.num_slots, classes=class_table(cfg),
        symmetry_prob=cfg.symmetry_prob,
        nightstand_solo_prob=cfg.nightstand_solo_prob,
        wardrobe_prob=cfg.wardrobe_prob, lamp_prob=cfg.lamp_prob,
        desk_prob=cfg.desk_prob, chair_given_desk=cfg.chair_given_desk,
        chair_given_no_desk=cfg.chair_given_no_desk,
        table_prob=cfg.table_prob, rejection_iou=cfg.rejection_iou,
        min_objects=cfg.min_objects, max_objects=cfg.max_objects)


def sym_spec(cfg) -> SymSpec:
    return SymSpec(cfg.sym_size_tol, cfg.sym_offaxis_tol,
                   cfg.sym_height_tol, cfg.sym_angle_tol_deg)


def feature_extractor(cfg) -> FeatureExtractor:
    return FeatureExtractor(seed=cfg.feature_seed)


def config_snapshot(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
