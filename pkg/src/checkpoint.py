"""
Checkpoint files.

A checkpoint is a single torch file holding every model and optimizer state of
a stage, the step counter, the validated config (and its hash), the charset
and the Python/NumPy/torch RNG states, so a resumed run continues exactly
where it stopped.
"""

import logging
import os
import random
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from src.config import TrainConfig
from src.errors import CheckpointMismatchError
from src.textgen import Charset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "glyphprior-checkpoint"
CHECKPOINT_VERSION = 1


def capture_rng_state() -> Dict[str, Any]:
    state = {"python": random.getstate(), "numpy": np.random.get_state(), "torch": torch.get_rng_state()}
    if torch.cuda.is_available():
        state["cuda"] = torch.cuda.get_rng_state_all()
    return state


def restore_rng_state(state: Dict[str, Any]) -> None:
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])
    if "cuda" in state and torch.cuda.is_available():
        torch.cuda.set_rng_state_all(state["cuda"])


def save_checkpoint(
    path: str,
    stage: str,
    step: int,
    config: TrainConfig,
    charset: Charset,
    models: Dict[str, nn.Module],
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": step,
        "config": config.model_dump(mode="json"),
        "config_hash": config.config_hash(),
        "charset": list(charset.chars),
        "charset_hash": charset.hash,
        "models": {name: m.state_dict() for name, m in models.items()},
        "optimizers": {name: o.state_dict() for name, o in (optimizers or {}).items()},
        "rng": capture_rng_state(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info(f"Saved {stage} checkpoint at step {step} to {path}")
    return path


def load_checkpoint(path: str, stage: Optional[str] = None) -> Dict[str, Any]:
    if not Path(path).is_file():
        raise CheckpointMismatchError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path} is not a glyphprior checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"Unsupported checkpoint version {payload.get('version')} in {path}")
    if stage is not None and payload["stage"] != stage:
        raise CheckpointMismatchError(f"{path} holds a '{payload['stage']}' checkpoint, expected '{stage}'")
    return payload


def checkpoint_charset(payload: Dict[str, Any]) -> Charset:
    return Charset(payload["charset"])


def checkpoint_config(payload: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(**payload["config"])


def check_charset(payload: Dict[str, Any], charset: Charset) -> None:
    if payload["charset_hash"] != charset.hash:
        raise CheckpointMismatchError(
            f"Charset mismatch: checkpoint has {len(payload['charset'])} characters "
            f"(hash {payload['charset_hash'][:12]}), run uses {charset.M} (hash {charset.hash[:12]})"
        )


def check_resume(payload: Dict[str, Any], config: TrainConfig) -> None:
    """Resuming only makes sense with the config the run started with (ignoring resume/max_steps)."""
    ignore = {"resume", "max_steps"}
    saved = {k: v for k, v in payload["config"].items() if k not in ignore}
    current = {k: v for k, v in config.model_dump(mode="json").items() if k not in ignore}
    if saved != current:
        changed = sorted(k for k in set(saved) | set(current) if saved.get(k) != current.get(k))
        raise CheckpointMismatchError(f"Cannot resume: config differs in {changed}")


def restore_models(payload: Dict[str, Any], models: Dict[str, nn.Module]) -> None:
    for name, module in models.items():
        if name not in payload["models"]:
            raise CheckpointMismatchError(f"Checkpoint has no '{name}' weights")
        try:
            module.load_state_dict(payload["models"][name])
        except RuntimeError as e:
            raise CheckpointMismatchError(f"Incompatible '{name}' weights: {e}") from e


def restore_optimizers(payload: Dict[str, Any], optimizers: Dict[str, torch.optim.Optimizer]) -> None:
    for name, optimizer in optimizers.items():
        if name in payload["optimizers"]:
            optimizer.load_state_dict(payload["optimizers"][name])
