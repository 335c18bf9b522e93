import numpy as np
import pytest
import torch

from sgdr.domain import STYLE_DIM, ContentMap, Image2D
from sgdr.networks import (
    ModelBundle,
    NetworkSpec,
    PatchDiscriminator,
    ResBlock,
    ShapeError,
    discriminate_content,
    encode_content,
    encode_style,
    expected_parameter_count,
    generate,
    load_checkpoint,
    patch_score_size,
    read_checkpoint_manifest,
    reparameterize,
    save_checkpoint,
    segment,
    shape_table,
)

SMALL = NetworkSpec(width_multiplier=0.0625, image_size=32)


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    return ModelBundle(SMALL)


def _image(seed=0, size=32):
    return torch.rand(2, 1, size, size, generator=torch.Generator().manual_seed(seed)) * 2 - 1


class TestShapes:
    @pytest.mark.parametrize("size,content,score,cscore", [(32, 8, 6, 4), (64, 16, 14, 8), (192, 48, 46, 24)])
    def test_shape_table(self, size, content, score, cscore):
        t = shape_table(SMALL, size)
        c = SMALL.content_channels
        assert t["content"] == (1, c, content, content)
        assert t["style.mean"] == (1, STYLE_DIM)
        assert t["generated"] == (1, 1, size, size)
        assert t["segmentation"] == (1, 4, size, size)
        assert t["D_src"] == (1, 1, score, score) and patch_score_size(size) == score
        assert t["D_feature"] == t["D_src"]
        assert t["D_content"] == (1, 1, cscore, cscore)

    def test_indivisible_input(self, bundle):
        with pytest.raises(ShapeError):
            bundle.E_c_src(torch.zeros(1, 1, 30, 32))

    def test_bad_style_shape(self, bundle):
        c = bundle.E_c_src(_image())
        with pytest.raises(ShapeError):
            bundle.G_src(c, torch.zeros(2, 5))


class TestBlocks:
    def test_zero_residual_branch_is_identity(self):
        block = ResBlock(4)
        with torch.no_grad():
            block.conv2.weight.zero_()
            block.conv2.bias.zero_()
        x = torch.randn(2, 4, 8, 8)
        assert torch.equal(block(x), x)

    def test_patch_translation_equivariance(self):
        # total stride 4: a 4-pixel shift moves the score map by one cell;
        # cells 3..10 of a 64-px input never see padding
        torch.manual_seed(1)
        disc = PatchDiscriminator(1, NetworkSpec(0.125), norm=False)
        big = torch.randn(1, 1, 68, 64)
        a, b = disc(big[:, :, :64]), disc(big[:, :, 4:])
        torch.testing.assert_close(b[0, 0, 3:10, 3:11], a[0, 0, 4:11, 3:11], atol=1e-5, rtol=1e-5)

    def test_zero_weight_discriminator_is_constant(self):
        disc = PatchDiscriminator(1, NetworkSpec(0.125))
        with torch.no_grad():
            for p in disc.parameters():
                p.zero_()
            disc.conv4.bias.fill_(0.3)
        out = disc(torch.randn(1, 1, 32, 32))
        assert torch.all(out == 0.3)


class TestEncoders:
    def test_content_map(self, bundle):
        c = encode_content(bundle.E_c_src, Image2D(np.zeros((32, 32))))
        assert isinstance(c, ContentMap) and c.features.shape == (1, SMALL.content_channels, 8, 8)

    def test_style_length_and_reparameterization(self, bundle):
        code = encode_style(bundle.E_s_src, _image(), torch.Generator().manual_seed(0))
        assert code.mean.shape == (2, 8) and code.sample.shape == (2, 8)
        torch.testing.assert_close(code.sample, code.mean + torch.exp(0.5 * code.log_variance) * code.eps)

    def test_vanishing_variance_gives_mean(self):
        m = torch.randn(3, 8)
        s, _ = reparameterize(m, torch.full((3, 8), -80.0), torch.Generator().manual_seed(0))
        torch.testing.assert_close(s, m)

    def test_seed_changes_sample_not_mean(self, bundle):
        a = encode_style(bundle.E_s_src, _image(), torch.Generator().manual_seed(0))
        b = encode_style(bundle.E_s_src, _image(), torch.Generator().manual_seed(1))
        assert torch.equal(a.mean, b.mean) and not torch.equal(a.sample, b.sample)


class TestGeneratorAndHead:
    def test_generator_range_and_determinism(self, bundle):
        c = encode_content(bundle.E_c_src, _image())
        s = torch.randn(2, 8) * 5
        a, b = generate(bundle.G_tgt, c, s), generate(bundle.G_tgt, c, s)
        assert a.shape == (2, 1, 32, 32) and torch.equal(a, b)
        assert a.min() >= -1 and a.max() <= 1

    def test_single_style_vector_broadcasts(self, bundle):
        c = encode_content(bundle.E_c_src, _image())
        s = torch.randn(8)
        torch.testing.assert_close(generate(bundle.G_src, c, s), generate(bundle.G_src, c, s.expand(2, 8)))

    def test_segmentation_is_distribution(self, bundle):
        p = segment(bundle.S_seg, encode_content(bundle.E_c_tgt, _image()))
        assert p.shape == (2, 4, 32, 32) and p.min() >= 0
        torch.testing.assert_close(p.sum(dim=1), torch.ones(2, 32, 32))


def test_content_critic_gradient_reaches_encoder():
    torch.manual_seed(3)
    b = ModelBundle(NetworkSpec(0.0625, 16)).double()
    x = _image(5, 16).double()
    w = b.E_c_src.conv1.weight

    def f():
        return discriminate_content(b.D_content, b.E_c_src(x)).sum()

    f().backward()
    g = float(w.grad[0, 0, 3, 3])
    h = 1e-6
    with torch.no_grad():
        w[0, 0, 3, 3] += h
        up = float(f())
        w[0, 0, 3, 3] -= 2 * h
        down = float(f())
        w[0, 0, 3, 3] += h
    assert g != 0
    assert g == pytest.approx((up - down) / (2 * h), rel=1e-4)


class TestSharing:
    def test_mutating_shared_block_changes_other_encoder(self):
        torch.manual_seed(0)
        b = ModelBundle(NetworkSpec(0.25))
        x = _image(size=64)
        before = b.E_c_tgt(x).detach().clone()
        with torch.no_grad():
            b.E_c_src.res8.conv1.weight.add_(0.5)
        assert not torch.equal(before, b.E_c_tgt(x))
        assert b.E_c_src.res6 is b.E_c_tgt.res6 and b.G_src.res1 is b.G_tgt.res1
        assert b.E_c_src.res5 is not b.E_c_tgt.res5

    @pytest.mark.parametrize("w,count", [(0.25, 2_425_114), (0.0625, 157_174)])
    def test_parameter_count(self, w, count):
        b = ModelBundle(NetworkSpec(w))
        assert b.unique_parameter_count() == expected_parameter_count(b.spec) == count
        assert b.naive_parameter_count() > count

    def test_aliases(self, bundle):
        aliases = bundle.shared_aliases()
        assert len(aliases) == 24
        assert aliases["E_c_tgt.res6.conv1.weight"] == "E_c_src.res6.conv1.weight"
        assert aliases["G_tgt.res3.conv2.bias"] == "G_src.res3.conv2.bias"


class TestCheckpoint:
    def test_roundtrip(self, bundle, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(bundle, path, {"epoch": 3})
        torch.manual_seed(99)
        fresh, meta = load_checkpoint(path, ModelBundle(SMALL))
        assert meta == {"epoch": 3}
        for (n, p), (_, q) in zip(bundle.named_parameters(), fresh.named_parameters()):
            assert torch.equal(p, q), n
        assert fresh.E_c_src.res7 is fresh.E_c_tgt.res7
        x = _image()
        torch.testing.assert_close(bundle.S_seg(bundle.E_c_tgt(x)), fresh.S_seg(fresh.E_c_tgt(x)))

    def test_bytes_deterministic(self, bundle, tmp_path):
        save_checkpoint(bundle, tmp_path / "a.ckpt")
        save_checkpoint(bundle, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert len(read_checkpoint_manifest(tmp_path / "a.ckpt")["aliases"]) == 24

    def test_builds_bundle_from_manifest(self, bundle, tmp_path):
        save_checkpoint(bundle, tmp_path / "c.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "c.ckpt")
        assert loaded.spec == SMALL
