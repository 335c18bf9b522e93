"""Objective terms.

Every reduction is a mean over pixels / patches / batch so the weights do not
depend on resolution.  Inputs are torch tensors; probability maps are
``(B, K, H, W)`` or ``(K, H, W)`` and label maps ``(B, H, W)`` or ``(H, W)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Mapping, Optional

import torch
import torch.nn.functional as F

from .domain import StyleCode

DICE_EPS = 1e-5
CE_EPS = 1e-8

DISCRIMINATOR = "discriminator"
ENCODER = "encoder"
GENERATOR = "generator"


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    lambda_cc: float = 10.0
    lambda_recon: float = 10.0
    lambda_latent: float = 10.0
    lambda_c_adv: float = 1.0
    lambda_domain_adv: float = 1.0
    lambda_seg: float = 1.0
    lambda_f_adv: float = 1.0
    lambda_KL: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


# LossReport term -> weight field; seg_x and seg_v together form the segmentation loss
TERM_WEIGHTS = {
    "cc": "lambda_cc",
    "recon": "lambda_recon",
    "c_adv": "lambda_c_adv",
    "domain_adv": "lambda_domain_adv",
    "seg_x": "lambda_seg",
    "seg_v": "lambda_seg",
    "f_adv": "lambda_f_adv",
    "kl": "lambda_KL",
    "latent": "lambda_latent",
}
TERMS = tuple(TERM_WEIGHTS)
DISC_TERMS = ("D_src", "D_tgt", "D_content", "D_feature")


@dataclass
class LossReport:
    terms: Dict[str, float]
    total: float
    disc: Dict[str, float]
    total_tensor: Optional[torch.Tensor] = None

    def as_row(self) -> Dict[str, float]:
        """Fixed field order: terms, total, discriminator losses."""
        row = {k: self.terms.get(k, 0.0) for k in TERMS}
        row["total"] = self.total
        row.update({k: self.disc.get(k, 0.0) for k in DISC_TERMS})
        return row

    def to_line(self, **prefix) -> str:
        return json.dumps({**prefix, **self.as_row()})


def _batched(probs, target):
    if probs.dim() == 3:
        probs = probs[None]
    target = torch.as_tensor(target)
    if target.dim() == 2:
        target = target[None]
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ValueError(f"probability map {tuple(probs.shape)} vs labels {tuple(target.shape)}")
    return probs, target.long()


def _one_hot(target, k, dtype):
    return F.one_hot(target, k).permute(0, 3, 1, 2).to(dtype)


def dice_loss(probs, target) -> torch.Tensor:
    """Soft Dice averaged over the foreground classes and the batch."""
    probs, target = _batched(probs, target)
    g = _one_hot(target, probs.shape[1], probs.dtype)
    inter = (probs * g).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + g.sum(dim=(2, 3))
    dice = (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    return 1.0 - dice[:, 1:].mean()


def ce_loss(probs, target) -> torch.Tensor:
    probs, target = _batched(probs, target)
    p = probs.gather(1, target[:, None]).squeeze(1)
    return -torch.log(p.clamp_min(CE_EPS)).mean()


def seg_loss(probs, target) -> torch.Tensor:
    return dice_loss(probs, target) + ce_loss(probs, target)


def seg_loss_total(pred_x, gt_x, pred_v, gt_v) -> torch.Tensor:
    # v is rendered from x's content, so gt_v is x's own annotation
    return seg_loss(pred_x, gt_x) + seg_loss(pred_v, gt_v)


def _bce(scores, label: float):
    return F.binary_cross_entropy_with_logits(scores, torch.full_like(scores, label))


def content_adv_loss(scores_src, scores_tgt, side: str) -> torch.Tensor:
    """Domain classification for the critic, 0.5-confusion for the encoders."""
    if side == DISCRIMINATOR:
        return 0.5 * (_bce(scores_src, 1.0) + _bce(scores_tgt, 0.0))
    if side == ENCODER:
        return 0.5 * (_bce(scores_src, 0.5) + _bce(scores_tgt, 0.5))
    raise ValueError(f"unknown side {side!r}")


def lsgan_loss(scores_fake, scores_real=None, side: str = GENERATOR) -> torch.Tensor:
    if side == GENERATOR:
        return ((scores_fake - 1) ** 2).mean()
    if side == DISCRIMINATOR:
        if scores_real is None:
            raise ValueError("the discriminator side of the least-squares loss needs real scores")
        return (scores_fake ** 2).mean() + ((scores_real - 1) ** 2).mean()
    raise ValueError(f"unknown side {side!r}")


def feature_adv_loss(scores_v, scores_y, side: str, form: str = "lsgan") -> torch.Tensor:
    """Critic on segmentation maps: maps of translated source images count as
    real, maps of genuine target images as fake."""
    if form == "lsgan":
        if side == DISCRIMINATOR:
            return ((scores_v - 1) ** 2).mean() + (scores_y ** 2).mean()
        if side == GENERATOR:
            return ((scores_y - 1) ** 2).mean()
    elif form == "log":
        if side == DISCRIMINATOR:
            return -(F.logsigmoid(scores_v).mean() + F.logsigmoid(-scores_y).mean())
        if side == GENERATOR:
            return -F.logsigmoid(scores_y).mean()
    else:
        raise ValueError(f"unknown feature adversarial form {form!r}")
    raise ValueError(f"unknown side {side!r}")


def kl_loss(code) -> torch.Tensor:
    """KL(N(mean, exp(log_variance)) || N(0, I)) summed over dims, batch-mean."""
    if isinstance(code, StyleCode):
        mean, logvar = code.mean, code.log_variance
    else:
        mean, logvar = code
    mean, logvar = torch.as_tensor(mean), torch.as_tensor(logvar)
    kl = 0.5 * (mean ** 2 + logvar.exp() - logvar - 1).sum(dim=-1)
    return kl.mean()


def _l1_pair(a, a_rec, b, b_rec):
    for p, q in ((a, a_rec), (b, b_rec)):
        if p.shape != q.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    return (a_rec - a).abs().mean() + (b_rec - b).abs().mean()


def cross_cycle_loss(x, x_prime, y, y_prime) -> torch.Tensor:
    return _l1_pair(x, x_prime, y, y_prime)


def self_recon_loss(x, x_hat, y, y_hat) -> torch.Tensor:
    return _l1_pair(x, x_hat, y, y_hat)


def latent_regression_loss(z, z_rec_src, z2, z_rec_tgt) -> torch.Tensor:
    return _l1_pair(z, z_rec_src, z2, z_rec_tgt)


def _as_float(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(terms: Mapping[str, object], weights: LossWeights = LossWeights(),
               disc: Optional[Mapping[str, float]] = None) -> LossReport:
    """Weighted sum of the objective terms.

    Missing terms count as 0.  Raises :class:`TrainingDivergenceError` naming
    the first non-finite term.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    values = {}
    for name in TERMS:
        v = _as_float(terms.get(name, 0.0))
        if not math.isfinite(v):
            raise TrainingDivergenceError(name, v)
        values[name] = v
    total_t = None
    for name, v in terms.items():
        w = getattr(weights, TERM_WEIGHTS[name])
        if isinstance(v, torch.Tensor):
            total_t = w * v if total_t is None else total_t + w * v
    total = sum(getattr(weights, TERM_WEIGHTS[n]) * values[n] for n in TERMS)
    return LossReport(values, total, {k: _as_float(v) for k, v in (disc or {}).items()}, total_t)


def weights_dict(weights: LossWeights) -> Dict[str, float]:
    return asdict(weights)
