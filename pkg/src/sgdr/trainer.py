"""Adversarial training loop, learning-rate schedule, checkpoints and inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import losses as L
from .domain import AugmentConfig, Image2D, SegMask
from .metrics import EvalReport, evaluate
from .networks import (
    DISCRIMINATORS,
    GENERATOR_SIDE,
    ModelBundle,
    NetworkSpec,
    as_batch,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)
from .phantom import SOURCE, TARGET, DatasetManifest, DomainLoader, _sub_seed, load_eval_set

log = logging.getLogger(__name__)

TRAIN_LOG = "train_log.jsonl"
HISTORY_LOG = "metrics_history.jsonl"
CHECKPOINT_DIR = "checkpoints"


class InvalidStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    use_content_discriminator: bool = True
    use_feature_discriminator: bool = True
    use_Lv_seg: bool = True
    # source-only segmenter: only L^x_seg, no translation, no critics
    no_adaptation: bool = False


@dataclass(frozen=True)
class TrainConfig:
    epochs_constant: int = 150
    epochs_decay: int = 150
    batch_size: int = 4
    lr_seg: float = 1e-3
    lr_other: float = 1e-4
    adam_betas: Tuple[float, float] = (0.5, 0.999)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    checkpoint_every: int = 10
    width_multiplier: float = 0.25
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    seg_v_full_path: bool = True
    feature_adv_form: str = "lsgan"

    def __post_init__(self):
        if self.lr_seg <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs_constant < 0 or self.epochs_decay < 0 or self.total_epochs < 1:
            raise ValueError("need at least one epoch")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """64x64, width 0.25, 30 constant + 30 decaying epochs."""
        base = dict(epochs_constant=30, epochs_decay=30, width_multiplier=0.25, checkpoint_every=10)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig fields {sorted(unknown)}")
        if isinstance(d.get("weights"), dict):
            d["weights"] = L.LossWeights(**d["weights"])
        if isinstance(d.get("ablation"), dict):
            d["ablation"] = AblationFlags(**d["ablation"])
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    def no_adaptation(self) -> "TrainConfig":
        return replace(self, ablation=replace(self.ablation, no_adaptation=True))


def lr_at_epoch(config: TrainConfig, epoch: int, base_lr: float) -> float:
    """Constant for ``epochs_constant`` epochs, then linear decay towards zero."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if epoch < config.epochs_constant:
        return base_lr
    return base_lr * (1.0 - (epoch - config.epochs_constant) / config.epochs_decay)


def collate(batch) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    x = torch.from_numpy(np.stack([s.image.pixels for s in batch]))[:, None]
    if hasattr(batch[0], "mask"):
        return x, torch.from_numpy(np.stack([s.mask.labels for s in batch]).astype(np.int64))
    return x, None


@dataclass
class Forward:
    """Intermediate tensors of one pass through the translation cycle."""

    x: torch.Tensor
    x_gt: torch.Tensor
    y: Optional[torch.Tensor] = None
    c_x: Optional[torch.Tensor] = None
    c_y: Optional[torch.Tensor] = None
    s_x: Optional[tuple] = None
    s_y: Optional[tuple] = None
    u: Optional[torch.Tensor] = None
    v: Optional[torch.Tensor] = None
    c_u: Optional[torch.Tensor] = None
    c_v: Optional[torch.Tensor] = None
    x_prime: Optional[torch.Tensor] = None
    y_prime: Optional[torch.Tensor] = None
    x_hat: Optional[torch.Tensor] = None
    y_hat: Optional[torch.Tensor] = None
    z1: Optional[torch.Tensor] = None
    z2: Optional[torch.Tensor] = None
    z1_rec: Optional[torch.Tensor] = None
    z2_rec: Optional[torch.Tensor] = None
    pred_x: Optional[torch.Tensor] = None
    pred_v: Optional[torch.Tensor] = None
    pred_y: Optional[torch.Tensor] = None


def _style(encoder, img, gen):
    mean, logvar = encoder(img)
    sample, _ = reparameterize(mean, logvar, gen)
    return mean, logvar, sample


def forward_pass(models: ModelBundle, x, x_gt, y, config: TrainConfig, gen: torch.Generator) -> Forward:
    """Disentangle, swap, re-encode and segment.  Noise comes only from ``gen``."""
    m, flags = models, config.ablation
    f = Forward(x=x, x_gt=x_gt, y=y)
    f.c_x = m.E_c_src(x)
    f.pred_x = m.S_seg(f.c_x)
    if flags.no_adaptation:
        return f
    f.c_y = m.E_c_tgt(y)
    f.s_x = _style(m.E_s_src, x, gen)
    f.s_y = _style(m.E_s_tgt, y, gen)
    # cross-domain translation
    f.u = m.G_src(f.c_y, f.s_x[2])
    f.v = m.G_tgt(f.c_x, f.s_y[2])
    # second round on the translated images
    f.c_u = m.E_c_src(f.u)
    f.c_v = m.E_c_tgt(f.v)
    s_u = _style(m.E_s_src, f.u, gen)
    s_v = _style(m.E_s_tgt, f.v, gen)
    f.x_prime = m.G_src(f.c_v, s_u[2])
    f.y_prime = m.G_tgt(f.c_u, s_v[2])
    f.x_hat = m.G_src(f.c_x, f.s_x[2])
    f.y_hat = m.G_tgt(f.c_y, f.s_y[2])
    # latent regression from prior draws
    f.z1 = torch.randn(f.s_x[0].shape, generator=gen, dtype=x.dtype)
    f.z2 = torch.randn(f.s_y[0].shape, generator=gen, dtype=x.dtype)
    f.z1_rec = m.E_s_src(m.G_src(f.c_x, f.z1))[0]
    f.z2_rec = m.E_s_tgt(m.G_tgt(f.c_y, f.z2))[0]
    # segmentation on the translated source and on the real target
    c_v_seg = f.c_v if config.seg_v_full_path else m.E_c_tgt(f.v.detach())
    f.pred_v = m.S_seg(c_v_seg)
    f.pred_y = m.S_seg(f.c_y)
    return f


def generator_terms(models: ModelBundle, f: Forward, config: TrainConfig) -> Dict[str, torch.Tensor]:
    """Encoder/generator/segmenter objective terms against the current critics."""
    m, flags = models, config.ablation
    zero = f.x.new_zeros(())
    if flags.no_adaptation:
        return {"seg_x": L.seg_loss(f.pred_x, f.x_gt)}
    terms = {
        "cc": L.cross_cycle_loss(f.x, f.x_prime, f.y, f.y_prime),
        "recon": L.self_recon_loss(f.x, f.x_hat, f.y, f.y_hat),
        "domain_adv": L.lsgan_loss(m.D_src(f.u), side=L.GENERATOR)
        + L.lsgan_loss(m.D_tgt(f.v), side=L.GENERATOR),
        "seg_x": L.seg_loss(f.pred_x, f.x_gt),
        "seg_v": L.seg_loss(f.pred_v, f.x_gt) if flags.use_Lv_seg else zero,
        "kl": L.kl_loss((f.s_x[0], f.s_x[1])) + L.kl_loss((f.s_y[0], f.s_y[1])),
        "latent": L.latent_regression_loss(f.z1, f.z1_rec, f.z2, f.z2_rec),
        "c_adv": zero,
        "f_adv": zero,
    }
    if flags.use_content_discriminator:
        terms["c_adv"] = L.content_adv_loss(m.D_content(f.c_x), m.D_content(f.c_y), L.ENCODER)
    if flags.use_feature_discriminator:
        terms["f_adv"] = L.feature_adv_loss(None, m.D_feature(f.pred_y), L.GENERATOR,
                                            config.feature_adv_form)
    return terms


def discriminator_terms(models: ModelBundle, f: Forward, config: TrainConfig) -> Dict[str, torch.Tensor]:
    """Critic losses on detached inputs; disabled critics are absent."""
    m, flags = models, config.ablation
    if flags.no_adaptation:
        return {}
    out = {
        "D_src": L.lsgan_loss(m.D_src(f.u.detach()), m.D_src(f.x), L.DISCRIMINATOR),
        "D_tgt": L.lsgan_loss(m.D_tgt(f.v.detach()), m.D_tgt(f.y), L.DISCRIMINATOR),
    }
    if flags.use_content_discriminator:
        out["D_content"] = L.content_adv_loss(m.D_content(f.c_x.detach()), m.D_content(f.c_y.detach()),
                                              L.DISCRIMINATOR)
    if flags.use_feature_discriminator:
        out["D_feature"] = L.feature_adv_loss(m.D_feature(f.pred_v.detach()), m.D_feature(f.pred_y.detach()),
                                              L.DISCRIMINATOR, config.feature_adv_form)
    return out


class Trainer:
    """Owns the bundle and its optimizers; the only writer of parameters.

    Shared blocks appear once in the encoder/generator optimizer, so each
    shared tensor is stepped exactly once per iteration.
    """

    def __init__(self, config: TrainConfig, spec: Optional[NetworkSpec] = None,
                 models: Optional[ModelBundle] = None):
        self.config = config
        if models is None:
            torch.manual_seed(config.seed)
            models = ModelBundle(spec or NetworkSpec(config.width_multiplier))
        self.models = models
        betas = tuple(config.adam_betas)
        self.opt_gen = torch.optim.Adam([
            {"params": models.unique_parameters(GENERATOR_SIDE), "lr": config.lr_other, "name": "other"},
            {"params": list(models.S_seg.parameters()), "lr": config.lr_seg, "name": "seg"},
        ], betas=betas)
        self.opt_disc = {
            name: torch.optim.Adam(getattr(models, name).parameters(), lr=config.lr_other, betas=betas)
            for name in DISCRIMINATORS
        }
        self.epoch = 0

    def set_epoch(self, epoch: int) -> Dict[str, float]:
        self.epoch = epoch
        lr_other = lr_at_epoch(self.config, epoch, self.config.lr_other)
        lr_seg = lr_at_epoch(self.config, epoch, self.config.lr_seg)
        for group in self.opt_gen.param_groups:
            group["lr"] = lr_seg if group["name"] == "seg" else lr_other
        for opt in self.opt_disc.values():
            for group in opt.param_groups:
                group["lr"] = lr_other
        return {"lr_other": lr_other, "lr_seg": lr_seg}

    def train_step(self, x, x_gt, y, step_seed: int) -> L.LossReport:
        """One iteration: critics first on detached inputs, then everything else."""
        if y is not None and x.shape[0] != y.shape[0]:
            raise ValueError("source and target batches must have equal size")
        m, cfg = self.models, self.config
        gen = torch.Generator().manual_seed(_sub_seed(cfg.seed, 7, step_seed))
        f = forward_pass(m, x, x_gt, y, cfg, gen)

        disc = discriminator_terms(m, f, cfg)
        for name, loss in disc.items():
            value = float(loss.detach())
            if not math.isfinite(value):
                raise L.TrainingDivergenceError(name, value)
            opt = self.opt_disc[name]
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

        for name in DISCRIMINATORS:
            getattr(m, name).requires_grad_(False)
        try:
            terms = generator_terms(m, f, cfg)
            report = L.total_loss(terms, cfg.weights, disc)
            self.opt_gen.zero_grad(set_to_none=True)
            report.total_tensor.backward()
            self.opt_gen.step()
        finally:
            for name in DISCRIMINATORS:
                getattr(m, name).requires_grad_(True)
        report.total_tensor = None
        return report

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "opt_gen": self.opt_gen.state_dict(),
            "opt_disc": {k: v.state_dict() for k, v in self.opt_disc.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.opt_gen.load_state_dict(state["opt_gen"])
        for k, v in state["opt_disc"].items():
            self.opt_disc[k].load_state_dict(v)
        self.epoch = state["epoch"]


def inference_encoder(config: TrainConfig) -> str:
    # the source-only baseline never trains the target encoder
    return "E_c_src" if config.ablation.no_adaptation else "E_c_tgt"


def infer(models: ModelBundle, image, encoder: str = "E_c_tgt") -> SegMask:
    """Argmax of the segmentation head on target content; no translation."""
    if models is None or not isinstance(models, ModelBundle):
        raise InvalidStateError("no model loaded")
    if any(p.is_meta for p in models.parameters()):
        raise InvalidStateError("model parameters were never materialized")
    spacing = image.spacing_mm if isinstance(image, Image2D) else (1.0, 1.0)
    x = as_batch(image).to(next(models.parameters()).dtype)
    with torch.no_grad():
        probs = models.S_seg(getattr(models, encoder)(x))
    return SegMask(probs.argmax(dim=1)[0].numpy().astype(np.uint8), spacing)


def evaluate_models(models: ModelBundle, samples, encoder: str = "E_c_tgt") -> EvalReport:
    preds = [infer(models, s.image, encoder) for s in samples]
    return evaluate(preds, [s.mask for s in samples], samples[0].image.spacing_mm)


@dataclass
class TrainResult:
    checkpoint: Path
    checkpoints: List[Path]
    history: List[dict]
    out_dir: Path


def history_row(epoch: int, report: EvalReport) -> dict:
    return {
        "epoch": epoch,
        "dice": report.dice,
        "assd": report.assd,
        "mean_dice": report.mean_dice,
        "mean_assd": report.mean_assd,
        "num_degenerate": report.num_degenerate,
    }


def _keep_rows(path: Path, max_epoch: int) -> List[str]:
    if not path.exists():
        return []
    return [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["epoch"] < max_epoch]


def checkpoint_paths(out_dir, epoch: int) -> Tuple[Path, Path]:
    d = Path(out_dir) / CHECKPOINT_DIR
    return d / f"epoch_{epoch:04d}.ckpt", d / f"epoch_{epoch:04d}.state.pt"


def train(manifest: DatasetManifest, config: TrainConfig, out_dir, resume_from=None,
          stop_after_epoch: Optional[int] = None) -> TrainResult:
    """Run the full schedule; evaluate and checkpoint every ``checkpoint_every``
    epochs and after the last one.

    ``resume_from`` is a ``.ckpt`` written by an earlier call with the same
    config; ``stop_after_epoch`` ends this call early (the schedule is still
    computed from the full epoch count).
    """
    out_dir = Path(out_dir)
    (out_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    spec = NetworkSpec(config.width_multiplier, manifest.image_size)
    trainer = Trainer(config, spec)
    start_epoch = 0
    if resume_from is not None:
        resume_from = Path(resume_from)
        load_checkpoint(resume_from, trainer.models)
        state = torch.load(resume_from.with_name(resume_from.name.replace(".ckpt", ".state.pt")),
                           weights_only=False)
        trainer.load_state_dict(state)
        start_epoch = state["epoch"] + 1

    src = DomainLoader(manifest, SOURCE, config.batch_size, config.seed, config.augment)
    tgt = None
    if not config.ablation.no_adaptation:
        tgt = DomainLoader(manifest, TARGET, config.batch_size, config.seed, config.augment)
    larger = max(len(src), len(tgt) if tgt is not None else 0)
    steps_per_epoch = math.ceil(larger / config.batch_size)
    eval_set = load_eval_set(manifest)
    encoder = inference_encoder(config)

    train_log, hist_log = out_dir / TRAIN_LOG, out_dir / HISTORY_LOG
    kept_train = _keep_rows(train_log, start_epoch)
    kept_hist = _keep_rows(hist_log, start_epoch + 1)
    history = [json.loads(ln) for ln in kept_hist]
    checkpoints: List[Path] = []
    last_epoch = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)

    with open(train_log, "w") as tl, open(hist_log, "w") as hl:
        for ln in kept_train:
            tl.write(ln + "\n")
        for ln in kept_hist:
            hl.write(ln + "\n")
        for epoch in range(start_epoch, last_epoch):
            lrs = trainer.set_epoch(epoch)
            for i in range(steps_per_epoch):
                step = epoch * steps_per_epoch + i
                x, x_gt = collate(src.batch_at(step))
                y = collate(tgt.batch_at(step))[0] if tgt is not None else None
                report = trainer.train_step(x, x_gt, y, step)
                tl.write(report.to_line(step=step, epoch=epoch, **lrs) + "\n")
            tl.flush()
            done = epoch + 1
            if done % config.checkpoint_every == 0 or done == config.total_epochs or done == last_epoch:
                ev = evaluate_models(trainer.models, eval_set, encoder)
                row = history_row(done, ev)
                history.append(row)
                hl.write(json.dumps(row) + "\n")
                hl.flush()
                ckpt, state_path = checkpoint_paths(out_dir, epoch)
                save_checkpoint(trainer.models, ckpt, meta={
                    "epoch": epoch, "inference_encoder": encoder, "config": config.to_dict(),
                })
                torch.save(trainer.state_dict(), state_path)
                checkpoints.append(ckpt)
                log.info("epoch %d: mean dice %.2f, mean assd %.2f", done, ev.mean_dice, ev.mean_assd)
    return TrainResult(checkpoints[-1] if checkpoints else None, checkpoints, history, out_dir)
