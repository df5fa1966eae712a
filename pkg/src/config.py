"""
Configuration for glyphprior.

Process-wide defaults come from the environment (a `.env` file is honoured via
python-dotenv); stage configuration lives in human-readable KEY=value files that
are validated into pydantic models. Nested sections use a double underscore,
e.g. ``LOSSES__PER=0.05`` or ``DEGRADATION__NOISE_PROB=0.5``.
"""

import hashlib
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

load_dotenv()

DEVICE = os.getenv("GLYPHPRIOR_DEVICE", "cpu")
SEED = int(os.getenv("GLYPHPRIOR_SEED", "0"))
LOG_LEVEL = os.getenv("GLYPHPRIOR_LOG_LEVEL", "INFO")
FONT_DIR = os.getenv("GLYPHPRIOR_FONT_DIR")
BACKGROUND_DIR = os.getenv("GLYPHPRIOR_BACKGROUND_DIR")
RUN_SLOW = os.getenv("GLYPHPRIOR_RUN_SLOW", "0") == "1"

HR_HEIGHT = 128
STRUCTURE_SIZE = 128
ENCODER_HEIGHT = 32
ENCODER_STRIDE = 4


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelProfile(_Section):
    """Network widths. `desk` uses 512-d code and style vectors."""

    name: str = "desk"
    code_dim: int = 512
    w_dim: int = 512
    mapping_layers: int = 4
    synthesis_channels: Dict[int, int] = Field(
        default_factory=lambda: {4: 256, 8: 256, 16: 128, 32: 128, 64: 64, 128: 32}
    )
    backbone_channels: Tuple[int, int, int, int, int] = (32, 64, 128, 256, 256)
    d_model: int = 256
    transformer_layers: int = 4
    transformer_heads: int = 4
    max_tokens: int = 512
    sr_channels: Dict[int, int] = Field(default_factory=lambda: {32: 128, 64: 64, 128: 32})
    recon_blocks: int = 2
    recognizer_dim: int = 128
    disc_channels: int = 32

    @classmethod
    def named(cls, name: str) -> "ModelProfile":
        if name == "desk":
            return cls()
        if name == "tiny":
            return cls(
                name="tiny",
                code_dim=128,
                w_dim=128,
                synthesis_channels={4: 128, 8: 128, 16: 64, 32: 64, 64: 32, 128: 16},
                backbone_channels=(16, 32, 64, 128, 128),
                d_model=128,
                transformer_layers=2,
                transformer_heads=4,
                sr_channels={32: 64, 64: 32, 128: 16},
                recon_blocks=1,
                recognizer_dim=64,
                disc_channels=16,
            )
        raise ConfigError(f"Unknown model profile '{name}' (expected 'desk' or 'tiny')")


class RenderConfig(_Section):
    hr_height: int = HR_HEIGHT
    n_max: int = 16
    width_multiple: int = 32
    font_size_range: Tuple[int, int] = (56, 96)
    # affine jitter: +-5 degrees rotation, +-5% shear
    rotation_deg: float = 5.0
    shear: float = 0.05
    spacing_range: Tuple[int, int] = (2, 12)
    x_margin_range: Tuple[int, int] = (4, 24)
    y_jitter: int = 8
    min_contrast: float = 0.35
    background_dir: Optional[str] = BACKGROUND_DIR
    background_prob: float = 0.0
    random_text: bool = True
    resample_limit: int = 20

    split_csv_fields = field_validator("font_size_range", "spacing_range", "x_margin_range", mode="before")(_split_csv)


class DegradationConfig(_Section):
    chain_style: Literal["fixed", "shuffle", "random"] = "random"
    blur_prob: float = 0.9
    anisotropic_prob: float = 0.5
    kernel_size_range: Tuple[int, int] = (3, 21)
    sigma_range: Tuple[float, float] = (0.2, 3.0)
    resize_prob: float = 0.9
    resize_factor_range: Tuple[float, float] = (0.5, 1.5)
    resize_methods: List[Literal["nearest", "bilinear", "bicubic"]] = ["bilinear", "bicubic"]
    noise_prob: float = 0.9
    noise_sigma_range: Tuple[float, float] = (0.0, 0.1)
    jpeg_prob: float = 0.9
    quality_range: Tuple[int, int] = (30, 95)
    color_jitter_prob: float = 0.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2

    split_csv_fields = field_validator(
        "kernel_size_range",
        "sigma_range",
        "resize_factor_range",
        "resize_methods",
        "noise_sigma_range",
        "quality_range",
        mode="before",
    )(_split_csv)

    @classmethod
    def disabled(cls) -> "DegradationConfig":
        return cls(blur_prob=0.0, resize_prob=0.0, noise_prob=0.0, jpeg_prob=0.0, color_jitter_prob=0.0)


class LossWeights(_Section):
    # per=0.05 is the reference perceptual weight; the rest are tuned defaults.
    rec: float = Field(1.0, ge=0)
    per: float = Field(0.05, ge=0)
    ctc: float = Field(1.0, ge=0)
    box_l1: float = Field(5.0, ge=0)
    box_giou: float = Field(2.0, ge=0)
    adv: float = Field(0.01, ge=0)
    structure: float = Field(1.0, ge=0)

    @field_validator("*")
    @classmethod
    def check_finite(cls, v: float) -> float:
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("loss weights must be finite")
        return v


class TrainConfig(_Section):
    stage: Literal["pretrain-recognizer", "pretrain-prior", "train-sr"] = "train-sr"
    profile: str = "desk"
    charset_path: Optional[str] = None
    charset_size: Optional[int] = None
    font_dir: Optional[str] = FONT_DIR
    n_fonts: int = 4
    corpus_path: Optional[str] = None
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    out_dir: str = "runs/default"
    recognizer_ckpt: Optional[str] = None
    prior_ckpt: Optional[str] = None
    resume: Optional[str] = None

    batch_size: int = 2
    pretrain_batch_size: int = 16
    lr_main: float = Field(1e-4, gt=0)
    lr_prior_finetune: float = Field(1e-6, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay: float = 0.5
    plateau_patience: int = 3
    plateau_threshold: float = 0.01
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    scale: int = 4
    prior_scales: List[int] = [32, 64]
    seed: int = SEED
    max_steps: int = 1000
    checkpoint_every: int = 500
    validate_every: int = 250
    log_every: int = 10
    val_samples: int = 32
    fixed_samples: int = 0
    deterministic: bool = False
    num_workers: int = 0
    device: str = DEVICE

    lambda_recog: float = Field(1.0, ge=0)
    recognizer_target_acc: float = 0.99
    prior_eval_samples: int = 500
    train_guidance: Literal["ground_truth", "predicted"] = "ground_truth"
    detection_box_mode: Literal["max", "mean"] = "max"
    paste_mode: Literal["residual", "replace"] = "residual"
    vgg19_weights: Optional[str] = None

    losses: LossWeights = Field(default_factory=LossWeights)
    render: RenderConfig = Field(default_factory=RenderConfig)
    degradation: DegradationConfig = Field(default_factory=DegradationConfig)

    split_csv_fields = field_validator("prior_scales", mode="before")(_split_csv)

    @model_validator(mode="after")
    def check_scales(self) -> "TrainConfig":
        if not self.prior_scales:
            raise ValueError("prior_scales must be non-empty")
        if len(set(self.prior_scales)) != len(self.prior_scales):
            raise ValueError("prior_scales must not repeat")
        if not set(self.prior_scales) <= {32, 64}:
            raise ValueError(f"prior_scales must be a subset of {{32, 64}}, got {self.prior_scales}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        ModelProfile.named(self.profile)
        return self

    @property
    def model_profile(self) -> ModelProfile:
        return ModelProfile.named(self.profile)

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            continue
        parts = key.lower().split("__")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Config key '{key}' collides with a scalar setting")
        node[parts[-1]] = value
    return nested


def _merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    if not Path(path).is_file():
        raise ConfigError(f"Config file not found: {path}")
    return _nest(dict(dotenv_values(path)))


def load_train_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Load a TrainConfig from a KEY=value file, then apply CLI overrides."""
    values = read_config_file(path)
    if overrides:
        values = _merge(values, _nest(overrides))
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid configuration: {problems}") from e
