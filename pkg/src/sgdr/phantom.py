"""Synthetic two-modality cardiac phantom benchmark, on-disk format and loaders.

Each sample is a single file::

    offset  size  field
    0       4     magic b"SGDR"
    4       2     format version (uint16, currently 1)
    6       1     dtype code (1 = float32 image)
    7       1     flags: bit0 has mask, bit1 eval-only labels, bit2 target domain
    8       4     H (uint32)
    12      4     W (uint32)
    16      8     row spacing in mm (float64)
    24      8     column spacing in mm (float64)
    32      4*H*W image, row-major float32
    ...     H*W   mask, row-major uint8 (only if bit0 is set)

All multi-byte fields are little-endian.  The manifest is JSON and is written
after every sample file, so a directory with a manifest is complete.
"""

from __future__ import annotations

import json
import shutil
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, stats

from .domain import (
    CLASS_NAMES,
    AugmentConfig,
    Domain,
    Image2D,
    LabeledSample,
    SegMask,
    UnlabeledSample,
    augment,
    normalize_intensity,
)

MAGIC = b"SGDR"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<4sHBBIIdd")
_DTYPE_F32 = 1
_FLAG_MASK, _FLAG_EVAL, _FLAG_TARGET = 1, 2, 4

SOURCE = "source"
TARGET = "target"
TARGET_EVAL = "target_eval"
DOMAIN_KEYS = (SOURCE, TARGET, TARGET_EVAL)
_STREAM = {SOURCE: 0, TARGET: 1, TARGET_EVAL: 2}


class EvalLabelAccessError(PermissionError):
    """Raised when a training code path touches held-out target labels."""


class SampleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StyleParams:
    """Appearance of one synthetic modality.

    ``class_intensity`` gives the pre-lookup base intensity of BG, MYO, LV, RV;
    the lookup is a monotone piecewise-linear contrast curve over [0, 1].
    """

    class_intensity: Tuple[float, float, float, float]
    lookup_x: Tuple[float, ...] = (0.0, 1.0)
    lookup_y: Tuple[float, ...] = (0.0, 1.0)
    noise_sigma: float = 0.0
    bias_field_strength: float = 0.0
    domain: str = SOURCE

    def __post_init__(self):
        if len(self.class_intensity) != 4:
            raise ValueError("class_intensity needs one entry per class")
        xs, ys = np.asarray(self.lookup_x), np.asarray(self.lookup_y)
        if xs.shape != ys.shape or xs.size < 2:
            raise ValueError("lookup knots must be paired and at least two")
        if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) < 0):
            raise ValueError("lookup curve must be monotone")

    def class_values(self) -> np.ndarray:
        return np.interp(np.asarray(self.class_intensity, float), self.lookup_x, self.lookup_y)


# BG < MYO < LV < RV: a bright-blood look
SOURCE_STYLE = StyleParams(
    class_intensity=(0.05, 0.35, 0.65, 0.90),
    lookup_x=(0.0, 0.5, 1.0), lookup_y=(0.0, 0.45, 1.0),
    noise_sigma=0.03, bias_field_strength=0.10, domain=SOURCE,
)
# LV < BG < RV < MYO: MYO/LV ordering inverted, stronger inhomogeneity
TARGET_STYLE = StyleParams(
    class_intensity=(0.35, 0.85, 0.25, 0.60),
    lookup_x=(0.0, 0.5, 1.0), lookup_y=(0.0, 0.6, 1.0),
    noise_sigma=0.05, bias_field_strength=0.30, domain=TARGET,
)


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    num_source: int = 40
    num_target: int = 40
    num_eval_target: int = 10
    anatomy_seed: int = 0
    spacing_mm: Tuple[float, float] = (1.0, 1.0)
    source_style: StyleParams = SOURCE_STYLE
    target_style: StyleParams = TARGET_STYLE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spacing_mm"] = list(self.spacing_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("source_style", "target_style"):
            if key in d and isinstance(d[key], dict):
                sd = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = StyleParams(**sd)
        if "spacing_mm" in d:
            d["spacing_mm"] = tuple(d["spacing_mm"])
        return cls(**d)


@dataclass
class SampleRecord:
    file: str
    anatomy_seed: int
    render_seed: int


@dataclass
class DatasetManifest:
    root: Path
    image_size: int
    spacing_mm: Tuple[float, float]
    domains: Dict[str, List[SampleRecord]]
    spec: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION
    class_names: Tuple[str, ...] = CLASS_NAMES

    @property
    def num_source(self) -> int:
        return len(self.domains[SOURCE])

    @property
    def num_target(self) -> int:
        return len(self.domains[TARGET])

    @property
    def num_eval(self) -> int:
        return len(self.domains[TARGET_EVAL])

    def paths(self, domain: str) -> List[Path]:
        return [self.root / rec.file for rec in self.domains[domain]]

    def to_json(self) -> str:
        role = {SOURCE: "labeled", TARGET: "unlabeled", TARGET_EVAL: "eval"}
        payload = {
            "format": "sgdr-dataset",
            "version": self.version,
            "image_size": self.image_size,
            "spacing_mm": list(self.spacing_mm),
            "class_names": list(self.class_names),
            "counts": {"M": self.num_source, "N": self.num_target, "eval": self.num_eval},
            "domains": {
                key: {
                    "role": role[key],
                    "count": len(self.domains[key]),
                    "samples": [asdict(r) for r in self.domains[key]],
                }
                for key in DOMAIN_KEYS
            },
            "spec": self.spec,
        }
        return json.dumps(payload, indent=2) + "\n"


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    payload = json.loads(path.read_text())
    if payload.get("format") != "sgdr-dataset":
        raise SampleFormatError(f"{path} is not a dataset manifest")
    if payload["version"] != FORMAT_VERSION:
        raise SampleFormatError(f"unsupported manifest version {payload['version']}")
    domains = {
        key: [SampleRecord(**r) for r in payload["domains"][key]["samples"]]
        for key in DOMAIN_KEYS
    }
    return DatasetManifest(
        root=path.parent,
        image_size=payload["image_size"],
        spacing_mm=tuple(payload["spacing_mm"]),
        domains=domains,
        spec=payload.get("spec", {}),
        version=payload["version"],
        class_names=tuple(payload["class_names"]),
    )


# ---------------------------------------------------------------- sample files

def write_sample(path, image: Image2D, mask: Optional[SegMask] = None, eval_only: bool = False):
    h, w = image.shape
    flags = 0
    if mask is not None:
        if mask.shape != image.shape:
            raise ValueError("mask and image shapes differ")
        flags |= _FLAG_MASK
    if eval_only:
        flags |= _FLAG_EVAL
    if image.domain_tag == Domain.TARGET:
        flags |= _FLAG_TARGET
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _DTYPE_F32, flags, h, w, *image.spacing_mm)
    body = image.pixels.astype("<f4").tobytes(order="C")
    if mask is not None:
        body += mask.labels.astype(np.uint8).tobytes(order="C")
    Path(path).write_bytes(header + body)


def read_sample(path, allow_eval_labels: bool = False):
    """Read one sample file.

    Eval-only files raise :class:`EvalLabelAccessError` unless the caller is
    the evaluation path and says so via ``allow_eval_labels``.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SampleFormatError(f"{path}: truncated header")
    magic, version, dtype, flags, h, w, sr, sc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SampleFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION or dtype != _DTYPE_F32:
        raise SampleFormatError(f"{path}: unsupported version/dtype {version}/{dtype}")
    if flags & _FLAG_EVAL and not allow_eval_labels:
        raise EvalLabelAccessError(f"{path} holds eval-only target labels")
    n = h * w
    expected = _HEADER.size + 4 * n + (n if flags & _FLAG_MASK else 0)
    if len(raw) != expected:
        raise SampleFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size).reshape(h, w)
    domain = Domain.TARGET if flags & _FLAG_TARGET else Domain.SOURCE
    image = Image2D(pixels.astype(np.float32), (sr, sc), domain)
    if not flags & _FLAG_MASK:
        return UnlabeledSample(image)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=_HEADER.size + 4 * n).reshape(h, w)
    return LabeledSample(image, SegMask(labels.copy(), (sr, sc)))


# ------------------------------------------------------------------ generation

def _sub_seed(*entropy) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1, np.uint64)[0])


def _try_anatomy(rng: np.random.Generator, size: int) -> Optional[np.ndarray]:
    s = float(size)
    cy, cx = s / 2 + rng.uniform(-0.08, 0.08, size=2) * s
    r_lv = rng.uniform(0.09, 0.14) * s
    ecc = rng.uniform(0.75, 1.0)
    theta = rng.uniform(0.0, 2 * np.pi)
    thick = max(2.0, rng.uniform(0.04, 0.07) * s)
    rv_offset = rng.uniform(0.4, 0.7)
    rv_a = rng.uniform(0.8, 1.0)
    rv_b = rng.uniform(1.2, 1.5)

    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)

    lv = (u / r_lv) ** 2 + (v / (r_lv * ecc)) ** 2 <= 1.0
    epi_u, epi_v = r_lv + thick, r_lv * ecc + thick
    epi = (u / epi_u) ** 2 + (v / epi_v) ** 2 <= 1.0
    rv = ((u - rv_offset * epi_u) / (rv_a * epi_u)) ** 2 + (v / (rv_b * epi_v)) ** 2 <= 1.0
    rv &= ~epi

    labels = np.zeros((size, size), np.uint8)
    labels[rv] = 3
    labels[epi] = 1
    labels[lv] = 2

    # structures must stay clear of the border and be single 4-connected blobs
    fg = labels > 0
    if fg[0].any() or fg[-1].any() or fg[:, 0].any() or fg[:, -1].any():
        return None
    for c in (1, 2, 3):
        _, n = ndimage.label(labels == c)
        if n != 1:
            return None
    if (labels == 3).sum() < 0.004 * size * size:
        return None
    # LV must be enclosed by MYO
    grown = ndimage.binary_dilation(labels == 2)
    if np.any(np.isin(labels[grown], (0, 3))):
        return None
    # myocardium at least two pixels thick everywhere along the LV rim
    if np.any(np.isin(labels[ndimage.binary_dilation(labels == 2, iterations=2)], (0, 3))):
        return None
    return labels


def generate_anatomy(seed: int, size: int = 64, spacing_mm=(1.0, 1.0)) -> SegMask:
    """Random LV disc in a MYO annulus with an RV crescent on one side."""
    if size < 32:
        raise ValueError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    while True:
        labels = _try_anatomy(rng, size)
        if labels is not None:
            return SegMask(labels, spacing_mm)


def _bias_field(rng: np.random.Generator, shape) -> np.ndarray:
    """Smooth field in [-1, 1] from a handful of low-frequency cosines."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    yy, xx = yy / h, xx / w
    out = np.zeros(shape)
    for fy in range(3):
        for fx in range(3):
            amp, py, px = rng.normal(), rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)
            out += amp * np.cos(np.pi * fy * yy + py) * np.cos(np.pi * fx * xx + px) / (1 + fy + fx)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def render_modality(mask: SegMask, style: StyleParams, seed: int) -> Image2D:
    rng = np.random.default_rng(seed)
    values = style.class_values()
    img = values[mask.labels]
    field_ = _bias_field(rng, mask.shape)
    img = img * (1.0 + style.bias_field_strength * field_)
    img = img + rng.normal(0.0, 1.0, mask.shape) * style.noise_sigma
    domain = Domain.TARGET if style.domain != SOURCE else Domain.SOURCE
    return normalize_intensity(img, 0.0, 1.0, mask.spacing_mm, domain)


def phantom_seeds(spec: PhantomSpec) -> Dict[str, List[Tuple[int, int]]]:
    """(anatomy_seed, render_seed) per sample; anatomy seeds never repeat across sets."""
    counts = {SOURCE: spec.num_source, TARGET: spec.num_target, TARGET_EVAL: spec.num_eval_target}
    used = set()
    out = {}
    for key in DOMAIN_KEYS:
        stream = _STREAM[key]
        seeds = []
        for i in range(counts[key]):
            bump = 0
            a = _sub_seed(spec.anatomy_seed, stream, i, bump)
            while a in used:
                bump += 1
                a = _sub_seed(spec.anatomy_seed, stream, i, bump)
            used.add(a)
            seeds.append((a, _sub_seed(spec.anatomy_seed, 10 + stream, i)))
        out[key] = seeds
    return out


def make_sample(spec: PhantomSpec, key: str, anatomy_seed: int, render_seed: int):
    mask = generate_anatomy(anatomy_seed, spec.image_size, spec.spacing_mm)
    style = spec.source_style if key == SOURCE else spec.target_style
    image = render_modality(mask, style, render_seed)
    return LabeledSample(image, mask)


def build_dataset(spec: PhantomSpec, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    created_root = not out_dir.exists()
    written: List[Path] = []
    made_dirs: List[Path] = []
    prefix = {SOURCE: "src", TARGET: "tgt", TARGET_EVAL: "eval"}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        domains = {}
        for key, seeds in phantom_seeds(spec).items():
            sub = out_dir / key
            if not sub.exists():
                sub.mkdir()
                made_dirs.append(sub)
            records = []
            for i, (a_seed, r_seed) in enumerate(seeds):
                sample = make_sample(spec, key, a_seed, r_seed)
                rel = f"{key}/{prefix[key]}_{i:04d}.sgdr"
                # target-train files never carry labels; eval labels are gated by a flag
                mask = None if key == TARGET else sample.mask
                write_sample(out_dir / rel, sample.image, mask, eval_only=key == TARGET_EVAL)
                written.append(out_dir / rel)
                records.append(SampleRecord(rel, a_seed, r_seed))
            domains[key] = records
        manifest = DatasetManifest(
            root=out_dir, image_size=spec.image_size, spacing_mm=tuple(spec.spacing_mm),
            domains=domains, spec=spec.to_dict(),
        )
        (out_dir / MANIFEST_NAME).write_text(manifest.to_json())
        return manifest
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        for d in reversed(made_dirs):
            shutil.rmtree(d, ignore_errors=True)
        if created_root:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise


# --------------------------------------------------------------------- loading

class DomainLoader:
    """Seeded, epoch-wise shuffled batches from one training domain.

    Batches are addressed by global step over an endless stream of
    permutations, so the smaller domain simply cycles and any step can be
    reproduced without replaying the ones before it.
    """

    def __init__(self, manifest: DatasetManifest, domain: str, batch_size: int, rng_seed: int,
                 augment_config: Optional[AugmentConfig] = None):
        if domain == TARGET_EVAL:
            raise EvalLabelAccessError("the eval split is not available to training loaders")
        if domain not in (SOURCE, TARGET):
            raise KeyError(domain)
        self.domain = domain
        self.samples = [read_sample(p) for p in manifest.paths(domain)]
        if not 0 < batch_size <= len(self.samples):
            raise ValueError(f"batch_size {batch_size} vs {len(self.samples)} samples in {domain}")
        self.batch_size = batch_size
        self.seed = int(rng_seed)
        self.augment_config = augment_config
        self._perms: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def permutation(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            rng = np.random.default_rng([self.seed, _STREAM[self.domain], epoch])
            self._perms[epoch] = rng.permutation(len(self.samples))
        return self._perms[epoch]

    def indices_at(self, step: int) -> List[int]:
        n = len(self.samples)
        out = []
        for pos in range(step * self.batch_size, (step + 1) * self.batch_size):
            out.append(int(self.permutation(pos // n)[pos % n]))
        return out

    def batch_at(self, step: int):
        batch = [self.samples[i] for i in self.indices_at(step)]
        if self.augment_config is not None:
            batch = [
                augment(s, _sub_seed(self.seed, 100 + _STREAM[self.domain], step, j), self.augment_config)
                for j, s in enumerate(batch)
            ]
        return batch


def load_batch(manifest: DatasetManifest, domain: str, batch_size: int, rng_seed: int, step: int = 0):
    return DomainLoader(manifest, domain, batch_size, rng_seed).batch_at(step)


def load_eval_set(manifest: DatasetManifest) -> List[LabeledSample]:
    """Held-out labeled target slices; for evaluation code only."""
    return [read_sample(p, allow_eval_labels=True) for p in manifest.paths(TARGET_EVAL)]


def histogram_distance(images_a: Sequence[Image2D], images_b: Sequence[Image2D], bins: int = 64) -> float:
    """1-Wasserstein distance between pooled intensity histograms on [-1, 1]."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    ha = np.histogram(np.concatenate([i.pixels.ravel() for i in images_a]), edges)[0]
    hb = np.histogram(np.concatenate([i.pixels.ravel() for i in images_b]), edges)[0]
    return float(stats.wasserstein_distance(centers, centers, ha, hb))
