"""Generator contracts: shapes, variant structure, fusion algebra, gradients."""

import pytest
import torch

from sctfuse.backbone import MODE_STANDIN, load_backbone, standin_geometry
from sctfuse.errors import ConfigError, ShapeError
from sctfuse.generator import (
    VARIANTS,
    ConcatFusion,
    CrossFusion,
    FusionGenerator,
    GeneratorConfig,
    align_to,
    build_generator,
)

TINY_CH = (4, 8, 16, 32)


def handle(dim=32, depth=4, seed=0):
    return load_backbone(MODE_STANDIN, geometry=standin_geometry(depth=depth, embed_dim=dim), seed=seed)


def tiny_model(variant="cross-fusion", size=32, seed=0):
    torch.manual_seed(seed)
    cfg = GeneratorConfig(variant=variant, encoder_channels=TINY_CH, input_size=size)
    return build_generator(cfg, handle())


# Independent parameter-count oracle, layer shape by layer shape.


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def block_params(cin, cout):
    return conv_params(cin, cout, 3) + 2 * cout + conv_params(cout, cout, 3) + 2 * cout


def encoder_params(ch):
    total, prev = 0, 1
    for c in ch:
        total += block_params(prev, c)
        prev = c
    return total


def decoder_params(ch):
    total = 0
    for i in range(len(ch) - 1, 0, -1):
        total += ch[i] * ch[i - 1] * 4 + ch[i - 1]  # transposed 2x2
        total += block_params(2 * ch[i - 1], ch[i - 1])
    return total + conv_params(ch[0], 1, 1)


def cross_fusion_params(d, c):
    return conv_params(d, c, 1) + conv_params(2 * c, c, 3) + 2 * c + conv_params(c, c, 3)


def concat_fusion_params(d, c):
    return conv_params(d, c, 1) + conv_params(2 * c, c, 1)


class TestConfig:
    def test_defaults(self):
        cfg = GeneratorConfig()
        assert cfg.encoder_channels == (64, 128, 256, 512)
        assert cfg.input_size == 256 and cfg.levels == 4

    def test_channel_count_must_match_levels(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(encoder_channels=(64, 128, 256))

    def test_input_size_divisibility(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(encoder_channels=TINY_CH, input_size=40)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(variant="transformer-only")

    def test_dict_roundtrip(self):
        cfg = GeneratorConfig(variant="concat", encoder_channels=TINY_CH, input_size=64)
        assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg

    def test_backbone_required_unless_cnn_only(self):
        cfg = GeneratorConfig(encoder_channels=TINY_CH, input_size=32)
        with pytest.raises(ConfigError):
            build_generator(cfg, None)
        cnn_cfg = GeneratorConfig(variant="cnn-only", encoder_channels=TINY_CH, input_size=32)
        assert build_generator(cnn_cfg, None) is not None


class TestAlign:
    def test_same_size_is_identity_object(self):
        x = torch.randn(1, 3, 8, 8)
        assert align_to(x, (8, 8)) is x

    def test_resize_shape(self):
        assert align_to(torch.randn(1, 3, 2, 2), (8, 8)).shape == (1, 3, 8, 8)

    def test_constant_preserved(self):
        x = torch.full((1, 1, 2, 2), 3.5)
        assert torch.allclose(align_to(x, (16, 16)), torch.full((1, 1, 16, 16), 3.5))


class TestEncoder:
    def test_shape_trace_tiny(self):
        model = tiny_model()
        grids = model.cnn_encode(torch.zeros(1, 1, 32, 32))
        assert [g.shape for g in grids] == [
            (1, 4, 32, 32),
            (1, 8, 16, 16),
            (1, 16, 8, 8),
            (1, 32, 4, 4),
        ]
        assert [g.source for g in grids] == ["cnn"] * 4

    def test_zero_input_finite(self):
        model = tiny_model()
        for g in model.cnn_encode(torch.zeros(2, 1, 32, 32)):
            g.validate_finite()

    def test_rejects_wrong_spatial(self):
        with pytest.raises(ShapeError):
            tiny_model(size=32).cnn_encode(torch.zeros(1, 1, 64, 64))

    def test_vit_only_has_no_encoder(self):
        with pytest.raises(ConfigError):
            tiny_model("vit-only").cnn_encode(torch.zeros(1, 1, 32, 32))


class TestFusionModules:
    def test_cross_fusion_output_channels(self):
        cf = CrossFusion(vit_dim=32, channels=8).eval()
        out = cf(torch.randn(2, 8, 16, 16), torch.randn(2, 32, 2, 2))
        assert out.shape == (2, 8, 16, 16)

    def test_residual_starts_at_zero(self):
        cf = CrossFusion(vit_dim=32, channels=8).eval()
        f_cnn, f_vit = torch.randn(1, 8, 8, 8), torch.randn(1, 32, 2, 2)
        assert torch.equal(cf(f_cnn, f_vit), cf.merge(f_cnn, f_vit))

    def test_zeroed_residual_reproduces_merge_bitwise(self):
        torch.manual_seed(3)
        cf = CrossFusion(vit_dim=32, channels=8).eval()
        with torch.no_grad():
            cf.refine.weight.normal_()
            cf.refine.bias.normal_()
        f_cnn, f_vit = torch.randn(2, 8, 8, 8), torch.randn(2, 32, 4, 4)
        assert not torch.equal(cf(f_cnn, f_vit), cf.merge(f_cnn, f_vit))
        with torch.no_grad():
            cf.refine.weight.zero_()
            cf.refine.bias.zero_()
        assert torch.equal(cf(f_cnn, f_vit), cf.merge(f_cnn, f_vit))

    def test_aligned_input_skips_resize(self):
        # transformer grid already at CNN resolution: still well-formed
        cf = CrossFusion(vit_dim=16, channels=4).eval()
        out = cf(torch.randn(1, 4, 8, 8), torch.randn(1, 16, 8, 8))
        assert out.shape == (1, 4, 8, 8)

    def test_batch_mismatch_rejected(self):
        cf = CrossFusion(vit_dim=16, channels=4)
        with pytest.raises(ShapeError):
            cf(torch.randn(2, 4, 8, 8), torch.randn(1, 16, 2, 2))

    def test_concat_fusion_shape(self):
        m = ConcatFusion(vit_dim=32, channels=8)
        assert m(torch.randn(1, 8, 16, 16), torch.randn(1, 32, 2, 2)).shape == (1, 8, 16, 16)

    def test_fuse_level_checks_channels(self):
        model = tiny_model()
        grids = model.cnn_encode(torch.zeros(1, 1, 32, 32))
        with pytest.raises(ShapeError):
            model.fuse_level(grids[1], grids[1], level=1)

    def test_cross_fuse_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        for channels in (2, 3):
            cf = CrossFusion(vit_dim=8, channels=channels).double().eval()
            with torch.no_grad():
                cf.refine.weight.normal_(0, 0.5)
                cf.refine.bias.normal_(0, 0.5)
            f_cnn = torch.randn(1, channels, 8, 8, dtype=torch.float64, requires_grad=True)
            f_vit = torch.randn(1, 8, 2, 2, dtype=torch.float64, requires_grad=True)
            w = torch.randn(1, channels, 8, 8, dtype=torch.float64)

            def scalar(a, b):
                return (cf(a, b) * w).sum()

            scalar(f_cnn, f_vit).backward()
            eps = 1e-6
            gen = torch.Generator().manual_seed(0)
            for src, grad in ((f_cnn, f_cnn.grad), (f_vit, f_vit.grad)):
                flat = src.detach().clone().reshape(-1)
                for _ in range(6):
                    j = int(torch.randint(flat.numel(), (1,), generator=gen))
                    plus, minus = flat.clone(), flat.clone()
                    plus[j] += eps
                    minus[j] -= eps
                    args_p = (plus.reshape(src.shape), f_vit) if src is f_cnn else (f_cnn, plus.reshape(src.shape))
                    args_m = (minus.reshape(src.shape), f_vit) if src is f_cnn else (f_cnn, minus.reshape(src.shape))
                    fd = (scalar(*args_p) - scalar(*args_m)).item() / (2 * eps)
                    an = grad.reshape(-1)[j].item()
                    assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)


class TestParameterCounts:
    def test_cross_fusion_module_oracle(self):
        cf = CrossFusion(vit_dim=768, channels=64)
        assert sum(p.numel() for p in cf.parameters()) == cross_fusion_params(768, 64)

    def test_concat_fusion_module_oracle(self):
        m = ConcatFusion(vit_dim=768, channels=64)
        assert sum(p.numel() for p in m.parameters()) == concat_fusion_params(768, 64)

    def test_variant_totals_match_oracle(self):
        d = 32
        expected = {
            "cnn-only": encoder_params(TINY_CH) + decoder_params(TINY_CH),
            "concat": encoder_params(TINY_CH)
            + decoder_params(TINY_CH)
            + sum(concat_fusion_params(d, c) for c in TINY_CH),
            "cross-fusion": encoder_params(TINY_CH)
            + decoder_params(TINY_CH)
            + sum(cross_fusion_params(d, c) for c in TINY_CH),
            "vit-only": decoder_params(TINY_CH) + sum(conv_params(d, c, 1) for c in TINY_CH),
        }
        for variant, count in expected.items():
            model = tiny_model(variant)
            assert model.trainable_parameter_count() == count, variant

    def test_variant_ordering(self):
        counts = {v: tiny_model(v).trainable_parameter_count() for v in VARIANTS}
        assert counts["cnn-only"] < counts["concat"] <= counts["cross-fusion"]

    def test_cross_minus_concat_is_residual_stack(self):
        diff = (
            tiny_model("cross-fusion").trainable_parameter_count()
            - tiny_model("concat").trainable_parameter_count()
        )
        assert diff == sum(25 * c * c + 3 * c for c in TINY_CH)

    def test_backbone_invisible_to_parameters(self):
        model = tiny_model()
        names = [n for n, _ in model.named_parameters()]
        assert all("backbone" not in n for n in names)
        assert all(p.requires_grad for _, p in model.named_parameters())


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shape_closure_32(self, variant):
        model = tiny_model(variant).eval()
        with torch.no_grad():
            out = model(torch.rand(2, 1, 32, 32) * 2 - 1)
        assert out.shape == (2, 1, 32, 32)

    def test_shape_closure_64(self):
        torch.manual_seed(0)
        cfg = GeneratorConfig(encoder_channels=(4, 8, 16, 32), input_size=64)
        model = build_generator(cfg, handle()).eval()
        with torch.no_grad():
            assert model(torch.zeros(1, 1, 64, 64)).shape == (1, 1, 64, 64)

    def test_cnn_only_never_calls_backbone(self):
        model = tiny_model("cnn-only")
        assert model.backbone.call_count == 0
        model(torch.zeros(1, 1, 32, 32))
        assert model.backbone.call_count == 0

    def test_fusion_variants_call_backbone_once_per_forward(self):
        for variant in ("cross-fusion", "concat", "vit-only"):
            model = tiny_model(variant)
            model(torch.zeros(1, 1, 32, 32))
            assert model.backbone.call_count == 1, variant

    def test_eval_forward_deterministic(self):
        model = tiny_model().eval()
        x = torch.rand(1, 1, 32, 32) * 2 - 1
        with torch.no_grad():
            assert torch.equal(model(x), model(x))

    def test_rejects_wrong_size(self):
        with pytest.raises(ShapeError):
            tiny_model(size=32)(torch.zeros(1, 1, 64, 64))

    def test_gradient_reaches_all_trainable_and_no_backbone_params(self):
        model = tiny_model()
        x = torch.rand(2, 1, 32, 32) * 2 - 1
        target = torch.rand(2, 1, 32, 32) * 2 - 1
        (model(x) - target).abs().mean().backward()
        missing = [n for n, p in model.named_parameters() if p.grad is None]
        assert missing == []
        assert all(p.grad is None for p in model.backbone.model.parameters())

    def test_decode_validates_grid_count(self):
        model = tiny_model()
        grids = model.cnn_encode(torch.zeros(1, 1, 32, 32))
        with pytest.raises(ShapeError):
            model.decode(grids[:3])

    def test_decode_validates_channels(self):
        model = tiny_model()
        grids = model.cnn_encode(torch.zeros(1, 1, 32, 32))
        with pytest.raises(ShapeError):
            model.decode(list(reversed(grids)))
