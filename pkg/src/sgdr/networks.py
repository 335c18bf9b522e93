"""Encoders, generators, segmentation head and discriminators.

Layer ladders (``b = round(64 * width_multiplier)``, ``C = 4b``)::

    content encoder   conv1 7x7/1 (1->b), conv2 3x3/2 (b->2b), conv3 3x3/2 (2b->C),
                      conv4..conv6 3x3/1 (C->C), each + IN + ReLU; res1..res8 at C.
                      res6..res8 are shared by the two domains.
    style encoder     conv1 7x7/1 (1->b), conv2..conv5 4x4/2 (->2b->C->C->C), ReLU,
                      global average pool, fc_mean / fc_logvar (C->8).
    generator         res1..res3 at C with the style vector concatenated to the block
                      input (shared by the two generators), up1 x2 3x3 (C->2b),
                      up2 x2 3x3 (2b->b), up3 x1 3x3 (b->b), out 7x7 (b->1) + tanh.
    segmentation head res1..res4 at C, up1/up2/up3 as the generator, out 1x1 (b->K),
                      softmax.
    patch disc.       conv1 4x4/2 (in->b) LReLU, conv2 4x4/2 (b->2b) IN LReLU,
                      conv3 4x4/1 (2b->C) IN LReLU, conv4 4x4/1 (C->1).
    content disc.     conv1 3x3/2 (C->C) LReLU, conv2/conv3 3x3/1 IN LReLU, conv4 1x1 (C->1).

Instance norm has no affine parameters, so a residual branch whose last conv
is zeroed contributes exactly nothing.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .domain import NUM_CLASSES, STYLE_DIM, ContentMap, Image2D, StyleCode


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    width_multiplier: float = 0.25
    image_size: int = 64
    style_dim: int = STYLE_DIM
    num_classes: int = NUM_CLASSES
    shared_layers: int = 3

    def __post_init__(self):
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must lie in (0, 1]")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")

    @property
    def base(self) -> int:
        return max(1, int(round(64 * self.width_multiplier)))

    @property
    def content_channels(self) -> int:
        return 4 * self.base


def _in(x):
    return F.instance_norm(x, eps=1e-5)


def _lrelu(x):
    return F.leaky_relu(x, 0.2)


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=(k - 1) // 2)


class ResBlock(nn.Module):
    """conv-IN-ReLU-conv-IN plus identity skip."""

    def __init__(self, channels: int, extra_in: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels + extra_in, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, style: Optional[torch.Tensor] = None):
        h = x
        if style is not None:
            s = style[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
            h = torch.cat([x, s], dim=1)
        h = F.relu(_in(self.conv1(h)))
        return x + _in(self.conv2(h))


class ContentEncoder(nn.Module):
    def __init__(self, spec: NetworkSpec, shared: List[ResBlock]):
        super().__init__()
        b, c = spec.base, spec.content_channels
        self.conv1 = _conv(1, b, 7)
        self.conv2 = _conv(b, 2 * b, 3, stride=2)
        self.conv3 = _conv(2 * b, c, 3, stride=2)
        self.conv4 = _conv(c, c, 3)
        self.conv5 = _conv(c, c, 3)
        self.conv6 = _conv(c, c, 3)
        n_own = 8 - len(shared)
        for i in range(n_own):
            setattr(self, f"res{i + 1}", ResBlock(c))
        for j, block in enumerate(shared):
            setattr(self, f"res{n_own + j + 1}", block)

    def trunk(self, x):
        for i in range(1, 7):
            x = F.relu(_in(getattr(self, f"conv{i}")(x)))
        return x

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"content encoder needs H, W divisible by 4, got {tuple(x.shape[-2:])}")
        x = self.trunk(x)
        for i in range(1, 9):
            x = getattr(self, f"res{i}")(x)
        return x


class StyleEncoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        b, c = spec.base, spec.content_channels
        self.conv1 = _conv(1, b, 7)
        self.conv2 = _conv(b, 2 * b, 4, stride=2)
        self.conv3 = _conv(2 * b, c, 4, stride=2)
        self.conv4 = _conv(c, c, 4, stride=2)
        self.conv5 = _conv(c, c, 4, stride=2)
        self.fc_mean = nn.Linear(c, spec.style_dim)
        self.fc_logvar = nn.Linear(c, spec.style_dim)

    def forward(self, x):
        for i in range(1, 6):
            x = F.relu(getattr(self, f"conv{i}")(x))
        x = x.mean(dim=(2, 3))
        return self.fc_mean(x), self.fc_logvar(x)


class _Upsampler(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        b, c = spec.base, spec.content_channels
        self.up1 = _conv(c, 2 * b, 3)
        self.up2 = _conv(2 * b, b, 3)
        self.up3 = _conv(b, b, 3)

    def upsample(self, x):
        x = F.relu(_in(self.up1(F.interpolate(x, scale_factor=2, mode="nearest"))))
        x = F.relu(_in(self.up2(F.interpolate(x, scale_factor=2, mode="nearest"))))
        return F.relu(_in(self.up3(x)))


class Generator(_Upsampler):
    def __init__(self, spec: NetworkSpec, shared: List[ResBlock]):
        super().__init__(spec)
        self.style_dim = spec.style_dim
        for j, block in enumerate(shared):
            setattr(self, f"res{j + 1}", block)
        self.n_res = len(shared)
        self.out = _conv(spec.base, 1, 7)

    def forward(self, content, style):
        if style.dim() != 2 or style.shape[1] != self.style_dim:
            raise ShapeError(f"style must be (B, {self.style_dim}), got {tuple(style.shape)}")
        x = content
        for i in range(1, self.n_res + 1):
            x = getattr(self, f"res{i}")(x, style)
        return torch.tanh(self.out(self.upsample(x)))


class SegmentationHead(_Upsampler):
    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        c = spec.content_channels
        for i in range(1, 5):
            setattr(self, f"res{i}", ResBlock(c))
        self.out = nn.Conv2d(spec.base, spec.num_classes, 1)

    def logits(self, content):
        x = content
        for i in range(1, 5):
            x = getattr(self, f"res{i}")(x)
        return self.out(self.upsample(x))

    def forward(self, content):
        return torch.softmax(self.logits(content), dim=1)


class PatchDiscriminator(nn.Module):
    """PatchGAN-style critic producing a raw (un-squashed) score map."""

    def __init__(self, in_channels: int, spec: NetworkSpec, norm: bool = True):
        super().__init__()
        b, c = spec.base, spec.content_channels
        self.norm = norm
        self.conv1 = nn.Conv2d(in_channels, b, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(b, 2 * b, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * b, c, 4, stride=1, padding=1)
        self.conv4 = nn.Conv2d(c, 1, 4, stride=1, padding=1)

    def forward(self, x):
        n = _in if self.norm else (lambda t: t)
        x = _lrelu(self.conv1(x))
        x = _lrelu(n(self.conv2(x)))
        x = _lrelu(n(self.conv3(x)))
        return self.conv4(x)


class ContentDiscriminator(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.content_channels
        self.conv1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        self.conv3 = nn.Conv2d(c, c, 3, padding=1)
        self.conv4 = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        x = _lrelu(self.conv1(x))
        x = _lrelu(_in(self.conv2(x)))
        x = _lrelu(_in(self.conv3(x)))
        return self.conv4(x)


def patch_score_size(n: int) -> int:
    """Side length of the patch discriminator's score map for an n-pixel input."""
    for k, s in ((4, 2), (4, 2), (4, 1), (4, 1)):
        n = (n + 2 - k) // s + 1
    return n


GENERATOR_SIDE = ("E_c_src", "E_c_tgt", "E_s_src", "E_s_tgt", "G_src", "G_tgt")
DISCRIMINATORS = ("D_src", "D_tgt", "D_content", "D_feature")


class ModelBundle(nn.Module):
    """All networks of the framework.

    The last ``shared_layers`` residual blocks of the two content encoders and
    the residual blocks of the two generators are single module instances
    registered under both owners, so they hold one set of parameters.
    """

    def __init__(self, spec: NetworkSpec = NetworkSpec()):
        super().__init__()
        self.spec = spec
        c = spec.content_channels
        enc_shared = [ResBlock(c) for _ in range(spec.shared_layers)]
        gen_shared = [ResBlock(c, extra_in=spec.style_dim) for _ in range(spec.shared_layers)]
        self.E_c_src = ContentEncoder(spec, enc_shared)
        self.E_c_tgt = ContentEncoder(spec, enc_shared)
        self.E_s_src = StyleEncoder(spec)
        self.E_s_tgt = StyleEncoder(spec)
        self.G_src = Generator(spec, gen_shared)
        self.G_tgt = Generator(spec, gen_shared)
        self.S_seg = SegmentationHead(spec)
        self.D_src = PatchDiscriminator(1, spec)
        self.D_tgt = PatchDiscriminator(1, spec)
        self.D_content = ContentDiscriminator(spec)
        self.D_feature = PatchDiscriminator(spec.num_classes, spec)

    def unique_parameters(self, names: Iterable[str]) -> List[nn.Parameter]:
        seen, out = set(), []
        for name in names:
            for p in getattr(self, name).parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def unique_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())  # nn.Module.parameters() dedups

    def naive_parameter_count(self) -> int:
        return sum(p.numel() for name, _ in self.named_children() for p in getattr(self, name).parameters())

    def shared_aliases(self) -> Dict[str, str]:
        """Map every alias name of a shared tensor to its canonical name."""
        canonical = {id(p): n for n, p in self.named_parameters()}
        aliases = {}
        for name, p in self.named_parameters(remove_duplicate=False):
            if canonical[id(p)] != name:
                aliases[name] = canonical[id(p)]
        return aliases


def expected_parameter_count(spec: NetworkSpec) -> int:
    """Closed-form count of distinct trainable scalars in a :class:`ModelBundle`."""
    b, c, k, sd = spec.base, spec.content_channels, spec.num_classes, spec.style_dim

    def conv(cin, cout, ks):
        return ks * ks * cin * cout + cout

    def res(ch, extra=0):
        return conv(ch + extra, ch, 3) + conv(ch, ch, 3)

    trunk = conv(1, b, 7) + conv(b, 2 * b, 3) + conv(2 * b, c, 3) + 3 * conv(c, c, 3)
    own_res = (8 - spec.shared_layers) * res(c)
    content = 2 * (trunk + own_res) + spec.shared_layers * res(c)
    style = conv(1, b, 7) + conv(b, 2 * b, 4) + conv(2 * b, c, 4) + 2 * conv(c, c, 4) + 2 * (c * sd + sd)
    ups = conv(c, 2 * b, 3) + conv(2 * b, b, 3) + conv(b, b, 3)
    gen = 2 * (ups + conv(b, 1, 7)) + spec.shared_layers * res(c, sd)
    seg = 4 * res(c) + ups + conv(b, k, 1)

    def patch(cin):
        return conv(cin, b, 4) + conv(b, 2 * b, 4) + conv(2 * b, c, 4) + conv(c, 1, 4)

    content_disc = conv(c, c, 3) * 3 + conv(c, 1, 1)
    return content + 2 * style + gen + seg + 2 * patch(1) + patch(k) + content_disc


# -------------------------------------------------------------- forward ops

def as_batch(image) -> torch.Tensor:
    """Image2D, (H, W), (1, H, W) or (B, 1, H, W) -> (B, 1, H, W) float tensor."""
    if isinstance(image, Image2D):
        return torch.from_numpy(image.pixels)[None, None]
    x = torch.as_tensor(image)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


def encode_content(encoder: ContentEncoder, image) -> ContentMap:
    return ContentMap(encoder(as_batch(image)))


def reparameterize(mean, log_variance, generator: Optional[torch.Generator] = None, eps=None):
    if eps is None:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * log_variance) * eps, eps


def encode_style(encoder: StyleEncoder, image, generator: Optional[torch.Generator] = None) -> StyleCode:
    mean, logvar = encoder(as_batch(image))
    sample, eps = reparameterize(mean, logvar, generator)
    return StyleCode(mean, logvar, sample, eps)


def generate(generator: Generator, content, style) -> torch.Tensor:
    feats = content.features if isinstance(content, ContentMap) else content
    style = torch.as_tensor(style, dtype=feats.dtype)
    if style.dim() == 1:
        style = style[None].expand(feats.shape[0], -1)
    return generator(feats, style)


def segment(head: SegmentationHead, content) -> torch.Tensor:
    feats = content.features if isinstance(content, ContentMap) else content
    return head(feats)


def discriminate_patch(disc: PatchDiscriminator, image) -> torch.Tensor:
    return disc(as_batch(image))


def discriminate_content(disc: ContentDiscriminator, content) -> torch.Tensor:
    return disc(content.features if isinstance(content, ContentMap) else content)


def discriminate_feature(disc: PatchDiscriminator, probs) -> torch.Tensor:
    probs = torch.as_tensor(probs)
    return disc(probs if probs.dim() == 4 else probs[None])


def shape_table(spec: NetworkSpec, size: int) -> Dict[str, Tuple[int, ...]]:
    """Trace one forward pass and record the shape at every named stage."""
    bundle = ModelBundle(NetworkSpec(spec.width_multiplier, size, spec.style_dim,
                                     spec.num_classes, spec.shared_layers))
    x = torch.zeros(1, 1, size, size)
    table = {"input": tuple(x.shape)}
    enc = bundle.E_c_src
    h = x
    with torch.no_grad():
        for i in range(1, 7):
            h = F.relu(_in(getattr(enc, f"conv{i}")(h)))
            table[f"content.conv{i}"] = tuple(h.shape)
        for i in range(1, 9):
            h = getattr(enc, f"res{i}")(h)
        table["content"] = tuple(h.shape)
        mean, _ = bundle.E_s_src(x)
        table["style.mean"] = tuple(mean.shape)
        table["generated"] = tuple(bundle.G_src(h, mean).shape)
        table["segmentation"] = tuple(bundle.S_seg(h).shape)
        table["D_src"] = tuple(bundle.D_src(x).shape)
        table["D_content"] = tuple(bundle.D_content(h).shape)
        table["D_feature"] = tuple(bundle.D_feature(bundle.S_seg(h)).shape)
    return table


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(bundle: ModelBundle, path, meta: Optional[dict] = None) -> None:
    """Write a zip archive: one little-endian float32 ``.npy`` per canonical
    parameter name plus ``manifest.json`` with the shared-name aliases."""
    path = Path(path)
    manifest = {
        "format": "sgdr-checkpoint",
        "version": 1,
        "spec": bundle.spec.__dict__,
        "aliases": bundle.shared_aliases(),
        "parameters": [],
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, p in bundle.named_parameters():
            buf = io.BytesIO()
            np.save(buf, p.detach().cpu().numpy().astype("<f4"))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
            manifest["parameters"].append(name)
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)


def read_checkpoint_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path, bundle: Optional[ModelBundle] = None) -> Tuple[ModelBundle, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != "sgdr-checkpoint":
            raise ValueError(f"{path} is not an sgdr checkpoint")
        if bundle is None:
            bundle = ModelBundle(NetworkSpec(**manifest["spec"]))
        params = dict(bundle.named_parameters())
        missing = set(params) - set(manifest["parameters"])
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name in manifest["parameters"]:
                arr = np.load(io.BytesIO(zf.read(f"{name}.npy")))
                params[name].copy_(torch.from_numpy(arr.astype(np.float32)))
    return bundle, manifest.get("meta", {})
