"""Core data types for slices, label maps and latent codes, plus preprocessing."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("background", "MYO", "LV", "RV")
NUM_CLASSES = 4
FOREGROUND_CLASSES = (1, 2, 3)
STYLE_DIM = 8


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class InvalidRangeError(ValueError):
    pass


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class Image2D:
    pixels: np.ndarray
    spacing_mm: Tuple[float, float] = (1.0, 1.0)
    domain_tag: Domain = Domain.SOURCE

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"Image2D expects a 2D grid, got shape {px.shape}")
        if px.shape[0] % 4 or px.shape[1] % 4:
            raise ValueError(f"image dims must be divisible by 4, got {px.shape}")
        if px.size and (px.min() < -1.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [-1, 1]")
        _check_spacing(self.spacing_mm)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "domain_tag", Domain(self.domain_tag))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray
    spacing_mm: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"SegMask expects a 2D grid, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= NUM_CLASSES):
            raise ValueError(f"labels must be in 0..{NUM_CLASSES - 1}")
        if not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integers")
        _check_spacing(self.spacing_mm)
        object.__setattr__(self, "labels", lab.astype(np.uint8))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class StyleCode:
    """Gaussian posterior over the 8-d style space plus one reparameterized draw.

    ``sample = mean + exp(0.5 * log_variance) * eps``; ``eps`` is kept so the
    draw can be reproduced.  Arrays may carry a leading batch dimension.
    """

    mean: "object"
    log_variance: "object"
    sample: "object"
    eps: "object" = None

    def __post_init__(self):
        if self.mean.shape[-1] != STYLE_DIM or self.log_variance.shape[-1] != STYLE_DIM:
            raise ValueError(f"style codes are {STYLE_DIM}-dimensional")


@dataclass(frozen=True)
class ContentMap:
    features: "object"  # torch.Tensor, (C, h, w) or (B, C, h, w)

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return tuple(self.features.shape[-2:])


@dataclass(frozen=True)
class LabeledSample:
    image: Image2D
    mask: SegMask

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in shape")


@dataclass(frozen=True)
class UnlabeledSample:
    image: Image2D


Sample = Union[LabeledSample, UnlabeledSample]


def _check_spacing(spacing):
    if len(spacing) != 2 or any(float(s) <= 0 for s in spacing):
        raise ValueError(f"spacing must be two positive reals, got {spacing}")


def normalize_intensity(raw, lo: float, hi: float,
                        spacing_mm=(1.0, 1.0), domain_tag=Domain.SOURCE) -> Image2D:
    """Clip ``raw`` to ``[lo, hi]`` and map it affinely onto ``[-1, 1]``."""
    if not hi > lo:
        raise InvalidRangeError(f"intensity window needs hi > lo, got lo={lo}, hi={hi}")
    raw = np.clip(np.asarray(raw, dtype=np.float64), lo, hi)
    out = 2.0 * (raw - lo) / (hi - lo) - 1.0
    # float32 rounding can step a hair outside the interval
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    return Image2D(out, spacing_mm, domain_tag)


def one_hot(mask: SegMask, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = mask.labels if isinstance(mask, SegMask) else np.asarray(mask)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise EncodingError(f"label {int(labels.max())} out of range for {num_classes} classes")
    return (np.arange(num_classes)[:, None, None] == labels[None]).astype(np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_rotate: float = 0.5
    max_angle_deg: float = 15.0

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def augment(sample: Sample, rng_seed: int, config: AugmentConfig = AugmentConfig()) -> Sample:
    """Random flips and rotations, applied identically to image and mask.

    Draw order is fixed (hflip, vflip, rot90, small rotation) so a seed
    always produces the same transform.
    """
    rng = np.random.default_rng(rng_seed)
    do_hflip = rng.random() < config.p_hflip
    do_vflip = rng.random() < config.p_vflip
    k90 = int(rng.integers(1, 4)) if rng.random() < config.p_rot90 else 0
    h, w = sample.image.shape
    if h != w and k90 % 2:
        k90 = 2  # quarter turns would change the shape of a non-square slice
    angle = float(rng.uniform(-config.max_angle_deg, config.max_angle_deg)) \
        if rng.random() < config.p_rotate else 0.0

    img = sample.image.pixels
    lab = sample.mask.labels if isinstance(sample, LabeledSample) else None

    def spatial(a, order):
        if do_hflip:
            a = a[:, ::-1]
        if do_vflip:
            a = a[::-1, :]
        if k90:
            a = np.rot90(a, k90)
        if angle != 0.0:
            a = ndimage.rotate(a, angle, reshape=False, order=order, mode="nearest")
        return np.ascontiguousarray(a)

    new_img = np.clip(spatial(img, 1), -1.0, 1.0).astype(np.float32)
    image = replace(sample.image, pixels=new_img)
    if lab is None:
        return UnlabeledSample(image)
    mask = replace(sample.mask, labels=spatial(lab, 0))
    return LabeledSample(image, mask)
