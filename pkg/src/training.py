"""
Training stages.

1. pretrain_recognizer: a structure-mask classifier, frozen afterwards.
2. pretrain_prior: the codebook generator against a mask discriminator, with
   the frozen recognizer as a recognition regularizer.
3. train_sr: encoder, decoder and prior transforms end to end; the pretrained
   generator is fine-tuned in its own low-rate parameter group.

Every random draw inside a step comes from a generator derived from
(seed, stream, step), and the global RNGs are checkpointed, so a resumed run
repeats the uninterrupted one step for step.
"""

import json
import logging
import os
import random
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset, Sampler, Subset
from tqdm import tqdm

from src.checkpoint import (
    check_charset,
    check_resume,
    checkpoint_charset,
    checkpoint_config,
    load_checkpoint,
    restore_models,
    restore_optimizers,
    restore_rng_state,
    save_checkpoint,
)
from src.config import LossWeights, TrainConfig
from src.dataset import ManifestDataset, SyntheticTextDataset, pad_collate, read_manifest
from src.encoder import ctc_greedy_decode
from src.errors import CheckpointMismatchError, ConfigError, MetricInputError, NonFiniteLossError, TrainingDivergedError
from src.losses import (
    ConditionedDiscriminator,
    FeatureExtractor,
    box_losses,
    ctc_loss_batch,
    ctc_min_length,
    hinge_d,
    hinge_g,
    rec_loss,
    rec_loss_terms,
    structure_loss,
    total_sr_loss,
)
from src.metrics import MetricsReport, SampleMetrics, psnr, ssim
from src.priorgan import PriorDiscriminator, StructureGenerator, interpolate_w, pretrain_step
from src.recognizer import StructureRecognizer, freeze
from src.srnet import Guidance, StructurePriorSR, character_crops
from src.textgen import Charset, GlyphFont, discover_font_sources, load_fonts, read_corpus, render_structure_batch

logger = logging.getLogger(__name__)

STREAM_BATCH = 1
STREAM_STRUCTURE = 2
SYNTHETIC_TRAIN_SIZE = 1_000_000
VAL_OFFSET = 10_000_000


# ---------------------------------------------------------------------------
# Determinism and schedules
# ---------------------------------------------------------------------------


def set_determinism(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(step)]))


def progress(iterable, **kwargs):
    return tqdm(iterable, disable=None, **kwargs)


@dataclass(frozen=True)
class PlateauRule:
    """Multiply the lr by `factor` whenever validation loss fails to improve by `threshold` (relative) for `patience` validations."""

    patience: int = 3
    threshold: float = 0.01
    factor: float = 0.5

    def lr_scale(self, history: Sequence[float]) -> float:
        scale = 1.0
        best: Optional[float] = None
        stale = 0
        for value in history:
            if best is None or value < best * (1.0 - self.threshold):
                best = value
                stale = 0
                continue
            stale += 1
            if stale >= self.patience:
                scale *= self.factor
                stale = 0
        return scale


class DivergenceDetector:
    """Raises once the monitored loss stays above factor x its first value for `patience` consecutive steps."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.streak = 0

    def update(self, loss: float) -> None:
        if self.initial is None:
            self.initial = abs(loss)
            return
        if loss > self.factor * self.initial:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience:
            raise TrainingDivergedError(
                f"Loss {loss:.4g} exceeded {self.factor}x the initial {self.initial:.4g} for {self.streak} steps"
            )

    def state_dict(self) -> Dict:
        return {"initial": self.initial, "streak": self.streak}

    def load_state_dict(self, state: Dict) -> None:
        self.initial = state.get("initial")
        self.streak = state.get("streak", 0)


class StepBatchSampler(Sampler):
    """Batch indices for steps [start, end); batch k depends only on (seed, k)."""

    def __init__(self, n: int, batch_size: int, seed: int, start: int, end: int):
        if n < 1:
            raise ConfigError("Training set is empty")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.start = start
        self.end = end

    def __iter__(self) -> Iterator[List[int]]:
        for step in range(self.start, self.end):
            rng = step_rng(self.seed, STREAM_BATCH, step)
            yield rng.choice(self.n, size=self.batch_size, replace=self.n < self.batch_size).tolist()

    def __len__(self) -> int:
        return max(self.end - self.start, 0)


class TrainingLog:
    """JSONL log, one {step, terms, lr, validation} object per line."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("", encoding="utf-8")

    def write(self, step: int, terms: Dict[str, float], lr: Dict[str, float], validation: Optional[Dict] = None) -> None:
        entry = {"step": step, "terms": terms, "lr": lr, "validation": validation}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Shared setup
# ---------------------------------------------------------------------------


def resolve_charset(config: TrainConfig) -> Charset:
    charset = Charset.from_file(config.charset_path) if config.charset_path else Charset.default()
    if config.charset_size:
        charset = charset.subset(config.charset_size)
    return charset


def build_fonts(config: TrainConfig, charset: Charset) -> List[GlyphFont]:
    return load_fonts(discover_font_sources(config.n_fonts, config.font_dir), charset)


def _adam(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr_main, betas=(config.beta1, config.beta2))


def prior_optimizers(generator: StructureGenerator, config: TrainConfig) -> Tuple[torch.optim.Adam, torch.optim.SparseAdam]:
    """Dense Adam for mapping and synthesis, SparseAdam for the codebook so untouched rows never move."""
    generator.codebook.sparse = True
    dense = _adam(generator.synthesis_parameters(), config)
    codes = torch.optim.SparseAdam([generator.codebook.table], lr=config.lr_main, betas=(config.beta1, config.beta2))
    return dense, codes


def _resume(
    config: TrainConfig,
    stage: str,
    charset: Charset,
    models: Dict[str, nn.Module],
    optimizers: Dict[str, torch.optim.Optimizer],
) -> Tuple[int, Dict]:
    if not config.resume:
        return 0, {}
    payload = load_checkpoint(config.resume, stage)
    check_charset(payload, charset)
    check_resume(payload, config)
    restore_models(payload, models)
    restore_optimizers(payload, optimizers)
    restore_rng_state(payload["rng"])
    logger.info(f"Resumed {stage} from {config.resume} at step {payload['step']}")
    return payload["step"], payload["extra"]


def _structures(codes: Sequence[int], fonts: Sequence[GlyphFont], rng: np.random.Generator, config: TrainConfig, device) -> torch.Tensor:
    masks = render_structure_batch(list(codes), fonts, rng, config.render)
    return torch.from_numpy(masks).float()[:, None].to(device)


# ---------------------------------------------------------------------------
# Stage 1a: structure recognizer
# ---------------------------------------------------------------------------


def pretrain_recognizer(config: TrainConfig) -> Path:
    set_determinism(config.seed, config.deterministic)
    device = torch.device(config.device)
    charset = resolve_charset(config)
    fonts = build_fonts(config, charset)
    recognizer = StructureRecognizer(charset.M, dim=config.model_profile.recognizer_dim).to(device)
    optimizer = _adam(recognizer.parameters(), config)
    models, optimizers = {"recognizer": recognizer}, {"recognizer": optimizer}
    start, extra = _resume(config, "pretrain-recognizer", charset, models, optimizers)

    out_dir = Path(config.out_dir)
    log = TrainingLog(out_dir / "recognizer_log.jsonl", append=start > 0)
    ckpt_path = out_dir / "recognizer.pt"
    recent = deque(extra.get("recent_accuracy", []), maxlen=10)
    done = start
    recognizer.train()
    for step in progress(range(start, config.max_steps), desc="recognizer", initial=start, total=config.max_steps):
        rng = step_rng(config.seed, STREAM_STRUCTURE, step)
        codes = rng.integers(0, charset.M, size=config.pretrain_batch_size)
        masks = _structures(codes, fonts, rng, config, device)
        targets = torch.from_numpy(codes).long().to(device)
        logits = recognizer(masks)
        loss = F.cross_entropy(logits, targets)
        if not torch.isfinite(loss):
            raise NonFiniteLossError("recog", float(loss))
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        recent.append(float((logits.argmax(dim=1) == targets).float().mean()))

        done = step + 1
        if done % config.log_every == 0:
            log.write(done, {"recog": float(loss), "accuracy": recent[-1]}, {"main": config.lr_main})
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(ckpt_path, "pretrain-recognizer", done, config, charset, models, optimizers, {"recent_accuracy": list(recent)})
        if len(recent) == recent.maxlen and np.mean(recent) >= config.recognizer_target_acc:
            logger.info(f"Recognizer reached {np.mean(recent):.3f} train accuracy at step {done}")
            break

    accuracy = float(np.mean(recent)) if recent else 0.0
    return save_checkpoint(
        ckpt_path, "pretrain-recognizer", done, config, charset, models, optimizers,
        {"recent_accuracy": list(recent), "train_accuracy": accuracy},
    )


def load_recognizer(path: str, charset: Charset, device) -> StructureRecognizer:
    payload = load_checkpoint(path, "pretrain-recognizer")
    check_charset(payload, charset)
    saved = checkpoint_config(payload)
    recognizer = StructureRecognizer(charset.M, dim=saved.model_profile.recognizer_dim)
    restore_models(payload, {"recognizer": recognizer})
    return freeze(recognizer.to(device))


# ---------------------------------------------------------------------------
# Stage 1b: prior
# ---------------------------------------------------------------------------


@torch.no_grad()
def prior_recognition_accuracy(generator: StructureGenerator, recognizer: nn.Module, n: int = 500, seed: int = 0, batch_size: int = 50) -> float:
    """Fraction of random (c, w) draws whose generated structure the recognizer classifies as c."""
    device = generator.codebook.table.device
    gen = torch.Generator().manual_seed(seed)
    correct = 0
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        codes = torch.randint(0, generator.num_codes, (m,), generator=gen)
        z = torch.randn(m, generator.z_dim, generator=gen)
        structure = generator(codes.to(device), generator.map_latent(z.to(device))).structure
        correct += int((recognizer.predict(structure).cpu() == codes).sum())
    return correct / n


@torch.no_grad()
def interpolation_consistency(generator: StructureGenerator, recognizer: nn.Module, pairs: int = 20, steps: int = 10, seed: int = 0) -> float:
    """Fraction of w-interpolants between two random styles that keep the character's class."""
    device = generator.codebook.table.device
    gen = torch.Generator().manual_seed(seed)
    hits = 0
    for _ in range(pairs):
        c = int(torch.randint(0, generator.num_codes, (1,), generator=gen))
        w = generator.map_latent(torch.randn(2, generator.z_dim, generator=gen).to(device))
        ws = torch.cat(interpolate_w(w[0:1], w[1:2], steps))
        codes = torch.full((steps,), c, dtype=torch.long, device=device)
        hits += int((recognizer.predict(generator(codes, ws).structure) == c).sum())
    return hits / (pairs * steps)


def pretrain_prior(config: TrainConfig) -> Path:
    if not config.recognizer_ckpt:
        raise ConfigError("pretrain-prior needs RECOGNIZER_CKPT; train one with pretrain-recognizer first")
    set_determinism(config.seed, config.deterministic)
    device = torch.device(config.device)
    charset = resolve_charset(config)
    fonts = build_fonts(config, charset)
    recognizer = load_recognizer(config.recognizer_ckpt, charset, device)
    profile = config.model_profile

    generator = StructureGenerator(charset.M, profile, config.prior_scales).to(device)
    discriminator = PriorDiscriminator(profile.disc_channels).to(device)
    g_optimizer, code_optimizer = prior_optimizers(generator, config)
    d_optimizer = _adam(discriminator.parameters(), config)
    models = {"generator": generator, "discriminator": discriminator}
    optimizers = {"generator": g_optimizer, "codebook": code_optimizer, "discriminator": d_optimizer}
    start, extra = _resume(config, "pretrain-prior", charset, models, optimizers)
    detector = DivergenceDetector(config.divergence_factor, config.divergence_patience)
    detector.load_state_dict(extra.get("divergence", {}))

    out_dir = Path(config.out_dir)
    log = TrainingLog(out_dir / "prior_log.jsonl", append=start > 0)
    ckpt_path = out_dir / "prior.pt"
    done = start
    for step in progress(range(start, config.max_steps), desc="prior", initial=start, total=config.max_steps):
        rng = step_rng(config.seed, STREAM_STRUCTURE, step)
        codes = rng.integers(0, charset.M, size=config.pretrain_batch_size)
        z = torch.from_numpy(rng.standard_normal((len(codes), generator.z_dim))).float().to(device)
        c_index = torch.from_numpy(codes).long().to(device)

        def gt_renderer(c: torch.Tensor) -> torch.Tensor:
            return _structures(c.tolist(), fonts, rng, config, device)

        report = pretrain_step(
            generator, discriminator, recognizer, g_optimizer, d_optimizer, c_index, z, gt_renderer, config.lambda_recog, code_optimizer
        )
        detector.update(report["adv_d"] + report["recog"])

        done = step + 1
        if done % config.log_every == 0:
            log.write(done, report, {"main": config.lr_main})
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(ckpt_path, "pretrain-prior", done, config, charset, models, optimizers, {"divergence": detector.state_dict()})

    accuracy = prior_recognition_accuracy(generator, recognizer, config.prior_eval_samples, config.seed)
    logger.info(f"Recognizer accuracy on generated structures: {accuracy:.3f}")
    return save_checkpoint(
        ckpt_path, "pretrain-prior", done, config, charset, models, optimizers,
        {"divergence": detector.state_dict(), "prior_accuracy": accuracy},
    )


# ---------------------------------------------------------------------------
# Stage 2: super-resolution
# ---------------------------------------------------------------------------


def build_sr_model(config: TrainConfig, charset: Charset) -> StructurePriorSR:
    return StructurePriorSR(
        charset.M,
        config.scale,
        config.model_profile,
        config.prior_scales,
        paste_mode=config.paste_mode,
        detection_box_mode=config.detection_box_mode,
    )


def build_feature_extractor(config: TrainConfig) -> FeatureExtractor:
    if config.vgg19_weights:
        return FeatureExtractor.from_vgg19(config.vgg19_weights)
    return FeatureExtractor.random(config.seed)


def load_prior(generator: StructureGenerator, path: str, charset: Charset) -> None:
    """Load pretrained prior weights; the checkpoint must match both the charset and the generator's scale set."""
    payload = load_checkpoint(path, "pretrain-prior")
    check_charset(payload, charset)
    saved = tuple(sorted(checkpoint_config(payload).prior_scales))
    if saved != generator.prior_scales:
        raise CheckpointMismatchError(
            f"Prior checkpoint {path} was trained with scales {list(saved)}, this run uses {list(generator.prior_scales)}"
        )
    restore_models(payload, {"generator": generator})
    logger.info(f"Loaded structure prior from {path} (step {payload['step']})")


def load_sr_model(path: str, device="cpu") -> Tuple[StructurePriorSR, Charset, TrainConfig]:
    payload = load_checkpoint(path, "train-sr")
    config = checkpoint_config(payload)
    charset = checkpoint_charset(payload)
    model = build_sr_model(config, charset)
    restore_models(payload, {"sr": model})
    return model.to(device).eval(), charset, config


def sr_optimizer(model: StructurePriorSR, config: TrainConfig) -> torch.optim.Adam:
    """Main group at lr_main; prior group at lr_prior_finetune, or frozen and left out when that is 0."""
    groups = [{"params": model.main_parameters(), "lr": config.lr_main, "initial_lr": config.lr_main, "name": "main"}]
    if config.lr_prior_finetune > 0:
        groups.append(
            {"params": model.prior_parameters(), "lr": config.lr_prior_finetune, "initial_lr": config.lr_prior_finetune, "name": "prior"}
        )
    else:
        for p in model.prior_parameters():
            p.requires_grad_(False)
    return torch.optim.Adam(groups, betas=(config.beta1, config.beta2))


def apply_lr_scale(optimizer: torch.optim.Optimizer, scale: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = group["initial_lr"] * scale


def current_lrs(optimizer: torch.optim.Optimizer) -> Dict[str, float]:
    return {group.get("name", str(i)): group["lr"] for i, group in enumerate(optimizer.param_groups)}


def build_sr_datasets(config: TrainConfig, charset: Charset) -> Tuple[Dataset, Dataset]:
    fonts: Optional[List[GlyphFont]] = None
    corpus = read_corpus(config.corpus_path) if config.corpus_path else None
    if config.train_manifest:
        train: Dataset = ManifestDataset(read_manifest(config.train_manifest, charset=charset), config.scale, config.degradation)
    else:
        fonts = build_fonts(config, charset)
        length = config.fixed_samples or SYNTHETIC_TRAIN_SIZE
        train = SyntheticTextDataset(length, config.seed, charset, fonts, config.scale, corpus, config.render, config.degradation)
    if config.val_manifest:
        val: Dataset = ManifestDataset(read_manifest(config.val_manifest, charset=charset), config.scale, config.degradation)
    elif config.fixed_samples:
        val = Subset(train, range(min(config.val_samples, len(train))))
    else:
        fonts = fonts or build_fonts(config, charset)
        val = SyntheticTextDataset(
            config.val_samples, config.seed, charset, fonts, config.scale, corpus, config.render, config.degradation, offset=VAL_OFFSET
        )
    return train, val


def sr_step(
    model: StructurePriorSR,
    discriminator: ConditionedDiscriminator,
    extractor: Optional[FeatureExtractor],
    optimizer: torch.optim.Optimizer,
    d_optimizer: torch.optim.Optimizer,
    batch: Dict,
    weights: LossWeights,
    train_guidance: str = "ground_truth",
    device="cpu",
) -> Dict[str, float]:
    """One discriminator update (when adv > 0) followed by one update of the SR model; returns the loss report."""
    lr = batch["lr"].to(device)
    hr = batch["hr"].to(device)
    texts = [t.tolist() for t in batch["text"]]
    boxes = [b.to(device) for b in batch["boxes"]]
    guidance = None
    if train_guidance == "ground_truth":
        guidance = Guidance(codes=[t.to(device) for t in batch["text"]], boxes=boxes)
    out = model(lr, guidance)

    pixel, perceptual = rec_loss_terms(out.sr, hr, extractor if weights.per > 0 else None)
    terms = {"pixel": pixel, "perceptual": perceptual}
    T = out.encoder.num_timesteps
    feasible = [b for b, t in enumerate(texts) if ctc_min_length(t) <= T]
    if len(feasible) < len(texts):
        logger.debug(f"Skipping CTC for {len(texts) - len(feasible)} lines too long for {T} timesteps")
    if feasible:
        terms["ctc"] = ctc_loss_batch(out.encoder.logits[feasible], [texts[b] for b in feasible])
    terms["box_l1"], terms["box_giou"] = box_losses(out.encoder.boxes, boxes)

    d_report: Dict[str, float] = {}
    aligned = out.priors is not None and all(int(c.numel()) == len(t) for c, t in zip(out.guidance.codes, texts))
    if aligned:
        s_sr = out.priors.structure
        s_hr = torch.cat([s.to(device) for s in batch["structures"]])[:, None]
        terms["structure"] = structure_loss(s_sr, s_hr)
        if weights.adv > 0:
            sr_crops = character_crops(out.sr, out.guidance.boxes)
            hr_crops = character_crops(hr, out.guidance.boxes)
            adv_d = hinge_d(discriminator(hr_crops, s_hr), discriminator(sr_crops.detach(), s_sr.detach()))
            if not torch.isfinite(adv_d):
                raise NonFiniteLossError("adv_d", float(adv_d))
            d_optimizer.zero_grad(set_to_none=True)
            adv_d.backward()
            d_optimizer.step()
            terms["adv"] = hinge_g(discriminator(sr_crops, s_sr))
            d_report["adv_d"] = float(adv_d)

    total, report = total_sr_loss(terms, weights)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    report.update(d_report)
    return report


@torch.no_grad()
def validate(
    model: StructurePriorSR,
    dataset: Dataset,
    charset: Charset,
    device="cpu",
    extractor: Optional[FeatureExtractor] = None,
    per: float = 0.05,
    oracle: bool = False,
    **meta,
) -> MetricsReport:
    """PSNR / SSIM / sequence accuracy one image at a time; `oracle` scores HR as if it were the SR output."""
    if len(dataset) == 0:
        raise MetricInputError("Validation set is empty")
    was_training = model.training
    model.eval()
    rows = []
    for i in range(len(dataset)):
        item = dataset[i]
        lr = item["lr"][None].to(device)
        hr = item["hr"][None].to(device)
        sr = hr if oracle else model(lr).sr
        pred = [code for code, _, _ in ctc_greedy_decode(model.encoder.encode(sr).logits[0])]
        sr_np = sr[0].cpu().numpy().transpose(1, 2, 0)
        hr_np = hr[0].cpu().numpy().transpose(1, 2, 0)
        text_gt = charset.decode(item["text"].tolist())
        text_pred = charset.decode(pred)
        rows.append(
            SampleMetrics(
                id=int(item["id"]),
                psnr=psnr(sr_np, hr_np),
                ssim=ssim(sr_np, hr_np),
                text_gt=text_gt,
                text_pred=text_pred,
                correct=text_gt == text_pred,
                rec_loss=float(rec_loss(sr, hr, extractor, per if extractor is not None else 0.0)),
            )
        )
    model.train(was_training)
    return MetricsReport.from_rows(rows, **meta)


def validate_checkpoint(ckpt_path: str, manifest_path: str, device="cpu", oracle: bool = False) -> MetricsReport:
    model, charset, config = load_sr_model(ckpt_path, device)
    manifest = read_manifest(manifest_path, charset=charset)
    dataset = ManifestDataset(manifest, config.scale, config.degradation)
    extractor = build_feature_extractor(config).to(device)
    return validate(
        model, dataset, charset, device, extractor, config.losses.per, oracle,
        checkpoint=str(ckpt_path), manifest=str(manifest_path),
    )


def train_sr(config: TrainConfig, prior_checkpoint: Optional[str] = None) -> Path:
    set_determinism(config.seed, config.deterministic)
    device = torch.device(config.device)
    charset = resolve_charset(config)
    model = build_sr_model(config, charset).to(device)
    prior_path = prior_checkpoint or config.prior_ckpt
    if prior_path and not config.resume:
        load_prior(model.generator, prior_path, charset)
    elif not config.resume:
        logger.warning("No prior checkpoint given; the structure generator starts from random weights")

    optimizer = sr_optimizer(model, config)
    discriminator = ConditionedDiscriminator(config.model_profile.disc_channels).to(device)
    d_optimizer = _adam(discriminator.parameters(), config)
    extractor = build_feature_extractor(config).to(device)
    models = {"sr": model, "discriminator": discriminator}
    optimizers = {"main": optimizer, "discriminator": d_optimizer}
    start, extra = _resume(config, "train-sr", charset, models, optimizers)

    history: List[float] = list(extra.get("val_history", []))
    plateau = PlateauRule(config.plateau_patience, config.plateau_threshold, config.lr_decay)
    apply_lr_scale(optimizer, plateau.lr_scale(history))
    detector = DivergenceDetector(config.divergence_factor, config.divergence_patience)
    detector.load_state_dict(extra.get("divergence", {}))

    train_set, val_set = build_sr_datasets(config, charset)
    loader = DataLoader(
        train_set,
        batch_sampler=StepBatchSampler(len(train_set), config.batch_size, config.seed, start, config.max_steps),
        collate_fn=pad_collate,
        num_workers=0 if config.deterministic else config.num_workers,
        generator=torch.Generator().manual_seed(config.seed),
    )
    out_dir = Path(config.out_dir)
    log = TrainingLog(out_dir / "train_sr_log.jsonl", append=start > 0)
    ckpt_path = out_dir / "sr.pt"

    def state() -> Dict:
        return {"val_history": history, "divergence": detector.state_dict()}

    step = start
    model.train()
    for batch in progress(loader, desc="train-sr", initial=start, total=config.max_steps):
        report = sr_step(model, discriminator, extractor, optimizer, d_optimizer, batch, config.losses, config.train_guidance, device)
        detector.update(report["total"])
        step += 1

        validation = None
        if config.validate_every and step % config.validate_every == 0:
            metrics = validate(model, val_set, charset, device, extractor, config.losses.per)
            history.append(metrics.rec_loss_mean)
            apply_lr_scale(optimizer, plateau.lr_scale(history))
            validation = metrics.summary()
            logger.info(f"step {step}: val PSNR {metrics.psnr_mean:.2f} dB, accuracy {metrics.seq_accuracy:.3f}")
        if step % config.log_every == 0 or validation is not None:
            log.write(step, report, current_lrs(optimizer), validation)
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(ckpt_path, "train-sr", step, config, charset, models, optimizers, state())

    return save_checkpoint(ckpt_path, "train-sr", step, config, charset, models, optimizers, state())
