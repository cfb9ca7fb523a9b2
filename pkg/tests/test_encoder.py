"""Conformer block and encoder contracts."""

import numpy as np
import pytest

from qieemo import tensor as T
from qieemo.encoder import (BlockOutputs, EncoderConfig, Spectrogram, backbone_config,
                            block_forward, conv_step, downsample_step, encoder_forward,
                            ffn_half_step, frame_index_map, init_encoder_params, mhsa_step,
                            temporal_schedule)
from qieemo.errors import ConfigError, InputError
from qieemo.gradcheck import finite_diff_check
from qieemo.params import ParamStore
from qieemo.rng import Xoshiro256StarStar
from qieemo.tensor import Tensor

TINY = EncoderConfig(num_blocks=2, model_dim=8, num_heads=2, ffn_expansion=2,
                     conv_kernel=3, downsample_after=(), num_symbols=5, input_bins=6)


@pytest.fixture
def tiny_params():
    return init_encoder_params(TINY, Xoshiro256StarStar(77))


def rand(seed, *shape):
    return Xoshiro256StarStar(seed).normals(shape)


def zero_(store, path):
    store[path].data = np.zeros_like(store[path].data)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            EncoderConfig(model_dim=10, num_heads=4).validate()
        with pytest.raises(ConfigError):
            EncoderConfig(conv_kernel=4).validate()
        with pytest.raises(ConfigError):
            EncoderConfig(num_blocks=4, downsample_after=(4,)).validate()
        EncoderConfig().validate()

    def test_backbones(self):
        assert backbone_config(1).downsample_after == (4, 8)
        assert backbone_config(2).downsample_after == ()
        with pytest.raises(ConfigError):
            backbone_config(3)

    def test_spectrogram_validation(self):
        with pytest.raises(InputError):
            Spectrogram(Tensor(np.zeros((3, 6))))
        with pytest.raises(InputError):
            Spectrogram(Tensor(np.full((8, 6), np.nan)))


class TestFfnHalfStep:
    def test_zeroed_branch_is_identity(self, tiny_params):
        zero_(tiny_params, "encoder.block_01.ffn1.out.weight")
        x = rand(1, 5, 8)
        out = ffn_half_step(Tensor(x), tiny_params, "encoder.block_01.ffn1")
        np.testing.assert_array_equal(out.data, x)

    def test_branch_linear_in_out_projection(self, tiny_params):
        x = Tensor(rand(2, 5, 8))
        prefix = "encoder.block_01.ffn1"
        delta1 = ffn_half_step(x, tiny_params, prefix).data - x.data
        tiny_params[prefix + ".out.weight"].data *= 2.0
        tiny_params[prefix + ".out.bias"].data *= 2.0
        delta2 = ffn_half_step(x, tiny_params, prefix).data - x.data
        np.testing.assert_allclose(delta2, 2.0 * delta1, atol=1e-12)

    def test_gradient_wrt_in_projection(self, tiny_params):
        x = Tensor(rand(3, 4, 8))
        prefix = "encoder.block_01.ffn1"
        path = prefix + ".in.weight"

        def f(cand):
            tiny_params.replace(path, cand)
            return T.mean_all(ffn_half_step(x, tiny_params, prefix))

        report = finite_diff_check(f, Tensor(tiny_params[path].data.copy()),
                                   rng=Xoshiro256StarStar(5))
        assert report.passed, report


class TestMhsaStep:
    def test_uniform_attention_closed_form(self):
        # single head; q/k zero and v/out identity; rows pre-normalized so the
        # internal pre-norm is (up to eps) the identity
        cfg = EncoderConfig(num_blocks=1, model_dim=2, num_heads=1, conv_kernel=3,
                            downsample_after=(), input_bins=2)
        params = init_encoder_params(cfg, Xoshiro256StarStar(4))
        p = "encoder.block_01.mhsa"
        for proj in ("q", "k"):
            zero_(params, f"{p}.{proj}.weight")
        params[p + ".v.weight"].data = np.eye(2)
        params[p + ".out.weight"].data = np.eye(2)
        x = np.array([[1.0, -1.0], [-1.0, 1.0], [1.0, -1.0]])
        out = mhsa_step(Tensor(x), params, p, num_heads=1)
        expected = x + x.mean(axis=0)
        np.testing.assert_allclose(out.data, expected, atol=1e-4)

    def test_zero_out_projection_is_identity(self, tiny_params):
        zero_(tiny_params, "encoder.block_01.mhsa.out.weight")
        x = rand(6, 5, 8)
        out = mhsa_step(Tensor(x), tiny_params, "encoder.block_01.mhsa", TINY.num_heads)
        np.testing.assert_array_equal(out.data, x)

    def test_attention_rows_stochastic(self, tiny_params):
        x = Tensor(rand(7, 6, 8) * 2)
        _, maps = mhsa_step(x, tiny_params, "encoder.block_01.mhsa", TINY.num_heads,
                            with_attention=True)
        assert len(maps) == TINY.num_heads
        for attn in maps:
            np.testing.assert_allclose(attn.data.sum(axis=-1), np.ones(6), atol=1e-6)
            assert (attn.data >= 0).all()


class TestConvStep:
    def test_zeroed_branch_is_identity(self, tiny_params):
        zero_(tiny_params, "encoder.block_01.conv.pw2.weight")
        x = rand(8, 5, 8)
        out = conv_step(Tensor(x), tiny_params, "encoder.block_01.conv")
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input_zero_biases(self, tiny_params):
        out = conv_step(Tensor(np.zeros((4, 8))), tiny_params, "encoder.block_01.conv")
        np.testing.assert_array_equal(out.data, np.zeros((4, 8)))

    def test_gradient(self, tiny_params):
        def f(x):
            return T.mean_all(conv_step(x, tiny_params, "encoder.block_01.conv"))

        report = finite_diff_check(f, Tensor(rand(9, 4, 8)), rng=Xoshiro256StarStar(6))
        assert report.passed, report


class TestBlockForward:
    def test_all_branches_zeroed_gives_layer_norm(self, tiny_params):
        p = "encoder.block_01"
        for path in (f"{p}.ffn1.out.weight", f"{p}.mhsa.out.weight",
                     f"{p}.conv.pw2.weight", f"{p}.ffn2.out.weight"):
            zero_(tiny_params, path)
        x = Tensor(rand(10, 5, 8))
        out = block_forward(x, tiny_params, p, TINY)
        expected = T.layer_norm(x, tiny_params[p + ".final_norm.gamma"],
                                tiny_params[p + ".final_norm.beta"], TINY.eps)
        np.testing.assert_array_equal(out.data, expected.data)

    def test_output_is_normalized(self, tiny_params):
        out = block_forward(Tensor(rand(11, 6, 8) * 3), tiny_params, "encoder.block_01", TINY)
        assert np.abs(out.data.mean(axis=-1)).max() <= 1e-6
        np.testing.assert_allclose(out.data.var(axis=-1), np.ones(6), atol=1e-3)

    def test_end_to_end_gradient(self):
        cfg = EncoderConfig(num_blocks=1, model_dim=8, num_heads=2, ffn_expansion=2,
                            conv_kernel=3, downsample_after=(), input_bins=8)
        params = init_encoder_params(cfg, Xoshiro256StarStar(12))

        def f(x):
            return T.mean_all(block_forward(x, params, "encoder.block_01", cfg))

        report = finite_diff_check(f, Tensor(rand(13, 3, 8)), rng=Xoshiro256StarStar(7))
        assert report.passed, report


class TestDownsample:
    def test_shapes(self, tiny_params):
        cfg = EncoderConfig(num_blocks=2, model_dim=8, num_heads=2, conv_kernel=3,
                            downsample_after=(1,), input_bins=6)
        params = init_encoder_params(cfg, Xoshiro256StarStar(3))
        p = "encoder.downsample_01"
        assert downsample_step(Tensor(rand(1, 8, 8)), params, p).shape == (4, 8)
        assert downsample_step(Tensor(rand(2, 7, 8)), params, p).shape == (4, 8)
        with pytest.raises(InputError):
            downsample_step(Tensor(rand(3, 1, 8)), params, p)

    def test_gradient(self):
        cfg = EncoderConfig(num_blocks=2, model_dim=8, num_heads=2, conv_kernel=3,
                            downsample_after=(1,), input_bins=6)
        params = init_encoder_params(cfg, Xoshiro256StarStar(8))

        def f(x):
            return T.mean_all(downsample_step(x, params, "encoder.downsample_01"))

        report = finite_diff_check(f, Tensor(rand(14, 6, 8)), rng=Xoshiro256StarStar(9))
        assert report.passed, report


class TestEncoderForward:
    def test_single_block_composition(self):
        cfg = EncoderConfig(num_blocks=1, model_dim=8, num_heads=2, ffn_expansion=2,
                            conv_kernel=3, downsample_after=(), input_bins=6)
        params = init_encoder_params(cfg, Xoshiro256StarStar(21))
        spec = Spectrogram(Tensor(rand(15, 6, 6)))
        outs = encoder_forward(spec, cfg, params)
        assert len(outs.blocks) == 1
        direct = block_forward(
            T.add(T.matmul(spec.values, params["encoder.input_proj.weight"]),
                  params["encoder.input_proj.bias"]),
            params, "encoder.block_01", cfg)
        np.testing.assert_array_equal(outs.final.data, direct.data)

    def test_backbone1_halving_schedule(self):
        cfg = backbone_config(1, model_dim=8, num_heads=2, ffn_expansion=1,
                              conv_kernel=3, input_bins=6)
        params = init_encoder_params(cfg, Xoshiro256StarStar(22))
        spec = Spectrogram(Tensor(rand(16, 32, 6)))
        outs = encoder_forward(spec, cfg, params)
        assert outs.frame_counts() == [32] * 4 + [16] * 4 + [8] * 4
        assert temporal_schedule(cfg, 32) == outs.frame_counts()

    def test_backbone2_keeps_length(self):
        cfg = backbone_config(2, num_blocks=3, model_dim=8, num_heads=2,
                              ffn_expansion=1, conv_kernel=3, input_bins=6)
        params = init_encoder_params(cfg, Xoshiro256StarStar(23))
        outs = encoder_forward(Spectrogram(Tensor(rand(17, 9, 6))), cfg, params)
        assert outs.frame_counts() == [9, 9, 9]

    def test_odd_length_schedule_uses_ceil(self):
        cfg = EncoderConfig(num_blocks=3, model_dim=8, num_heads=2, ffn_expansion=1,
                            conv_kernel=3, downsample_after=(1, 2), input_bins=6)
        assert temporal_schedule(cfg, 11) == [11, 6, 3]

    def test_too_short_utterance_names_minimum(self):
        cfg = backbone_config(1, model_dim=8, num_heads=2, conv_kernel=3, input_bins=6)
        params = init_encoder_params(cfg, Xoshiro256StarStar(24))
        with pytest.raises(InputError, match="8"):
            encoder_forward(Spectrogram(Tensor(rand(18, 6, 6))), cfg, params)

    def test_deterministic(self, tiny_params):
        spec = Spectrogram(Tensor(rand(19, 7, 6)))
        a = encoder_forward(spec, TINY, tiny_params)
        b = encoder_forward(spec, TINY, tiny_params)
        for x, y in zip(a.blocks, b.blocks):
            assert (x.data == y.data).all()

    def test_frame_index_map_matches_schedule(self):
        cfg = EncoderConfig(num_blocks=3, model_dim=8, num_heads=2, conv_kernel=3,
                            downsample_after=(1, 2), input_bins=6)
        idx = frame_index_map(cfg, 11)
        assert [len(v) for v in idx] == temporal_schedule(cfg, 11)
        np.testing.assert_array_equal(idx[1], [0, 2, 4, 6, 8, 10])
        np.testing.assert_array_equal(idx[2], [0, 4, 8])

    def test_whole_encoder_gradient(self):
        cfg = EncoderConfig(num_blocks=2, model_dim=8, num_heads=2, ffn_expansion=2,
                            conv_kernel=3, downsample_after=(1,), input_bins=6)
        params = init_encoder_params(cfg, Xoshiro256StarStar(25))

        def f(x):
            outs = encoder_forward(Spectrogram(x), cfg, params)
            return T.mean_all(outs.final)

        report = finite_diff_check(f, Tensor(rand(20, 6, 6)), rng=Xoshiro256StarStar(10))
        assert report.passed, report
