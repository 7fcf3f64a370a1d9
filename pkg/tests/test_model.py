import numpy as np
import pytest
import torch

from croplandws.errors import ConfigError
from croplandws.model import (
    InferenceModel,
    ModelConfig,
    UTAE,
    build_model,
    load_checkpoint,
    prepare_input,
    save_checkpoint,
    sinusoidal_encoding,
)
from croplandws.sits import SITSCube

CFG = ModelConfig(levels=2, channel_widths=(8, 16, 32), input_channels=3)


def random_input(t=4, c=3, h=16, w=16, seed=0, cfg=CFG):
    rng = np.random.default_rng(seed)
    frames = torch.as_tensor(
        rng.normal(size=(1, t, c + 1, h, w)).astype(np.float32)
    )
    validity = torch.ones((1, t, h, w))
    return frames, validity


class TestConfig:
    def test_width_count_must_match_levels(self):
        with pytest.raises(ConfigError):
            ModelConfig(levels=2, channel_widths=(8, 16))

    def test_widths_strictly_increase(self):
        with pytest.raises(ConfigError):
            ModelConfig(levels=2, channel_widths=(16, 16, 32))

    def test_spatial_divisibility_checked_at_forward(self):
        model = build_model(CFG)
        frames, validity = random_input(h=18, w=18)
        with pytest.raises(ConfigError):
            model(frames, validity[:, :, :18, :18])


class TestSpatialEncoder:
    def test_pyramid_shapes(self):
        cfg = ModelConfig(levels=1, channel_widths=(8, 16), input_channels=3)
        model = build_model(cfg)
        frames, _ = random_input(t=1, h=8, w=8)
        pyramid = model.encode_spatial(frames)
        assert [tuple(e.shape) for e in pyramid] == [(1, 1, 8, 8, 8), (1, 1, 16, 4, 4)]

    def test_identical_frames_give_identical_features(self):
        model = build_model(CFG)
        frames, _ = random_input(t=1)
        doubled = frames.repeat(1, 2, 1, 1, 1)
        pyramid = model.encode_spatial(doubled)
        for level in pyramid:
            assert torch.equal(level[:, 0], level[:, 1])

    def test_forward_is_sensitive_to_input(self):
        model = build_model(CFG)
        frames, _ = random_input()
        perturbed = frames.clone()
        perturbed[0, 0, 0, 3, 3] += 0.1
        p1 = model.encode_spatial(frames)
        p2 = model.encode_spatial(perturbed)
        for a, b in zip(p1, p2):
            assert (a - b).abs().max() > 0


class TestTemporalAttention:
    def test_single_frame_attention_is_one(self):
        model = build_model(CFG)
        frames, validity = random_input(t=1)
        attn = model.attend_temporal(model.encode_spatial(frames), validity, [1])
        for a in attn:
            assert torch.allclose(a, torch.ones_like(a))

    def test_equal_scores_give_uniform_weights(self):
        model = build_model(CFG)
        cfg = ModelConfig(levels=2, channel_widths=(8, 16, 32), input_channels=3,
                          use_positional_encoding=False)
        model = build_model(cfg)
        frames, validity = random_input(t=4)
        frames = frames[:, :1].repeat(1, 4, 1, 1, 1)  # identical frames, PE off
        attn = model.attend_temporal(model.encode_spatial(frames), validity, [1, 2, 3, 4])
        for a in attn:
            assert torch.allclose(a, torch.full_like(a, 0.25), atol=1e-6)

    def test_masked_frame_gets_zero_weight_and_renormalizes(self):
        model = build_model(CFG)
        frames, validity = random_input(t=5)
        validity = validity.clone()
        validity[:, 3] = 0
        attn = model.attend_temporal(model.encode_spatial(frames), validity, list(range(1, 6)))
        for a in attn:
            assert (a[:, 3] == 0).all()
            assert torch.allclose(a.sum(dim=1), torch.ones_like(a[:, 0]), atol=1e-5)

    def test_all_invalid_pixel_falls_back_to_uniform(self):
        model = build_model(CFG)
        frames, validity = random_input(t=4)
        validity = torch.zeros_like(validity)
        before = model.temporal.fallback_pixels
        attn = model.attend_temporal(model.encode_spatial(frames), validity, [1, 2, 3, 4])
        assert model.temporal.fallback_pixels > before
        for a in attn:
            assert torch.allclose(a, torch.full_like(a, 0.25))

    def test_weights_sum_to_one_on_random_validity(self):
        model = build_model(CFG)
        frames, validity = random_input(t=6)
        rng = np.random.default_rng(2)
        validity = torch.as_tensor(
            (rng.random((1, 6, 16, 16)) < 0.7).astype(np.float32)
        )
        attn = model.attend_temporal(model.encode_spatial(frames), validity, list(range(1, 7)))
        for a in attn:
            assert torch.allclose(a.sum(dim=1), torch.ones_like(a[:, 0]), atol=1e-5)
            assert (a >= 0).all()


class TestFuseDecodePredict:
    def test_single_frame_fuse_equals_conv_of_frame(self):
        model = build_model(CFG)
        frames, validity = random_input(t=1)
        pyramid = model.encode_spatial(frames)
        attn = model.attend_temporal(pyramid, validity, [1])
        fused = model.fuse_temporal(pyramid, attn)
        for level, (feats, conv) in enumerate(zip(pyramid, model.fuse_convs)):
            assert torch.allclose(fused[level], conv(feats[:, 0]), atol=1e-6)

    def test_fuse_matches_loop_oracle(self):
        model = build_model(CFG)
        frames, validity = random_input(t=4)
        pyramid = model.encode_spatial(frames)
        attn = model.attend_temporal(pyramid, validity, [1, 2, 3, 4])
        fused = model.fuse_temporal(pyramid, attn)
        for level, (feats, conv) in enumerate(zip(pyramid, model.fuse_convs)):
            acc = torch.zeros_like(feats[:, 0])
            for t in range(4):
                acc = acc + attn[level][:, t, None] * feats[:, t]
            assert torch.allclose(fused[level], conv(acc), atol=1e-5)

    def test_decoder_reaches_full_resolution(self):
        model = build_model(CFG)
        frames, validity = random_input(t=2)
        probs, maps = model(frames, validity)
        assert maps[-1].shape[-2:] == (16, 16)
        assert maps[0].shape[-2:] == (4, 4)

    def test_zero_features_with_zero_biases_give_zero_maps(self):
        model = build_model(CFG)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if "bias" in name:
                    p.zero_()
        fused = [
            torch.zeros(1, 8, 16, 16),
            torch.zeros(1, 16, 8, 8),
            torch.zeros(1, 32, 4, 4),
        ]
        for m in model.decode(fused):
            assert (m == 0).all()

    def test_softmax_symmetry_and_saturation(self):
        model = build_model(CFG)
        maps = [torch.zeros(1, 8, 4, 4)]
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        probs = model.predict(maps)
        assert torch.allclose(probs, torch.full_like(probs, 0.5))
        # saturated logits stay finite
        big = torch.tensor([[[[1000.0]], [[-1000.0]]]])
        out = torch.softmax(big, dim=1)
        assert torch.isfinite(out).all()
        assert out[0, 0, 0, 0] == 1.0

    def test_probabilities_sum_to_one(self):
        model = build_model(CFG)
        frames, validity = random_input(t=3)
        probs, _ = model(frames, validity)
        assert torch.allclose(probs.sum(dim=1), torch.ones_like(probs[:, 0]), atol=1e-6)


class TestForward:
    def test_shape_contract(self):
        cfg = ModelConfig(levels=2, channel_widths=(8, 16, 32), input_channels=5)
        model = build_model(cfg)
        frames = torch.randn(1, 2, 6, 64, 64)
        validity = torch.ones(1, 2, 64, 64)
        probs, maps = model(frames, validity)
        assert tuple(probs.shape) == (1, 2, 64, 64)
        assert len(maps) == 3

    def test_deterministic_in_eval_mode(self):
        model = build_model(CFG).eval()
        frames, validity = random_input(t=3)
        with torch.no_grad():
            p1, _ = model(frames, validity)
            p2, _ = model(frames, validity)
        assert torch.equal(p1, p2)

    def test_frame_permutation_invariance_only_without_positions(self):
        # frames and validity permute together; period labels stay slot-keyed,
        # so only the positional encoding can notice the reordering
        frames, validity = random_input(t=4)
        perm = [2, 0, 3, 1]
        for use_pe, should_match in [(False, True), (True, False)]:
            cfg = ModelConfig(
                levels=2, channel_widths=(8, 16, 32), input_channels=3,
                use_positional_encoding=use_pe,
            )
            model = build_model(cfg, seed=3).eval()
            with torch.no_grad():
                p1, _ = model(frames, validity, [1, 2, 3, 4])
                p2, _ = model(frames[:, perm], validity[:, perm], [1, 2, 3, 4])
            matches = bool(torch.allclose(p1, p2, atol=1e-5))
            assert matches == should_match

    def test_gradcheck_small(self):
        cfg = ModelConfig(levels=1, channel_widths=(4, 8), input_channels=2)
        model = build_model(cfg, seed=1).double()
        frames = torch.randn(1, 2, 3, 8, 8, dtype=torch.float64)
        validity = torch.ones(1, 2, 8, 8, dtype=torch.float64)

        def loss_fn():
            with torch.no_grad():
                probs, _ = model(frames, validity)
            return -(torch.log(probs.clamp_min(1e-8))).mean()

        with torch.enable_grad():
            probs, _ = model(frames, validity)
            loss = -(torch.log(probs.clamp_min(1e-8))).mean()
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None]
        rng = np.random.default_rng(0)
        checked = 0
        for p in params[:: max(1, len(params) // 8)]:
            flat = p.detach().reshape(-1)
            idx = int(rng.integers(flat.numel()))
            eps = 1e-6 * max(1.0, abs(float(flat[idx])))
            with torch.no_grad():
                flat[idx] += eps
            up = float(loss_fn())
            with torch.no_grad():
                flat[idx] -= 2 * eps
            down = float(loss_fn())
            with torch.no_grad():
                flat[idx] += eps
            fd = (up - down) / (2 * eps)
            an = float(p.grad.reshape(-1)[idx])
            assert fd == pytest.approx(an, rel=1e-4, abs=1e-8)
            checked += 1
        assert checked >= 3


class TestSinusoidalEncoding:
    def test_shape_and_range(self):
        enc = sinusoidal_encoding(torch.arange(1, 13), 16)
        assert enc.shape == (12, 16)
        assert enc.abs().max() <= 1.0

    def test_distinct_positions_differ(self):
        enc = sinusoidal_encoding(torch.arange(1, 13), 16)
        assert (enc[0] - enc[5]).abs().max() > 0.1


class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        model = build_model(CFG, seed=7).eval()
        mean, std = np.zeros(3), np.ones(3)
        path = save_checkpoint(tmp_path / "ckpt.pt", model, mean, std, extra={"note": "t"})
        loaded, m2, s2, extra = load_checkpoint(path)
        assert extra == {"note": "t"}
        frames, validity = random_input(t=2)
        with torch.no_grad():
            p1, _ = model(frames, validity)
            p2, _ = loaded(frames, validity)
        assert torch.equal(p1, p2)

    def test_bad_version_rejected(self, tmp_path):
        model = build_model(CFG)
        path = save_checkpoint(tmp_path / "c.pt", model, np.zeros(3), np.ones(3))
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ConfigError):
            load_checkpoint(path)


class TestInferenceModel:
    def test_predict_probabilities_shape_and_norm(self):
        model = build_model(CFG).eval()
        wrapper = InferenceModel(model, np.zeros(3), np.ones(3))
        rng = np.random.default_rng(1)
        cube = SITSCube(
            rng.random((4, 3, 16, 16)).astype(np.float32),
            [1, 2, 3, 4],
            np.ones((4, 16, 16), dtype=np.uint8),
        )
        probs = wrapper.predict_probabilities(cube)
        assert probs.shape == (2, 16, 16)
        assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-6

    def test_prepare_input_appends_validity_channel(self):
        rng = np.random.default_rng(5)
        cube = SITSCube(
            rng.random((2, 3, 8, 8)).astype(np.float32),
            [1, 2],
            np.ones((2, 8, 8), dtype=np.uint8),
        )
        cube.validity[0, 0, 0] = 0
        frames, validity = prepare_input(cube, np.zeros(3), np.ones(3))
        assert frames.shape == (1, 2, 4, 8, 8)
        assert frames[0, 0, 3, 0, 0] == 0.0  # validity channel mirrors the raster
        assert frames[0, 0, 0, 0, 0] == 0.0  # invalid reflectance zeroed
        assert validity[0, 0, 0, 0] == 0
