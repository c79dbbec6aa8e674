"""Zero-init cross-attention fusion and the reconstruction head."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import finite_difference_check
from diffhdr.reconstruction import (
    ReconstructionHead,
    ZeroInitCrossAttention,
    attention_rowsum_check,
    load_reconstruction,
    reconstruct,
    save_reconstruction,
    zica_fuse,
)


def make_block(c_t=4, c_p=6, control_scale=1.0, seed=0):
    torch.manual_seed(seed)
    return ZeroInitCrossAttention(c_t, c_p, control_scale=control_scale)


def randomize_zero_conv(block, seed=1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        block.zero_conv.weight.copy_(torch.randn(block.zero_conv.weight.shape, generator=gen))
        block.zero_conv.bias.copy_(torch.randn(block.zero_conv.bias.shape, generator=gen))


class TestZeroInitBlock:
    def test_fresh_block_is_identity_on_temporal(self):
        block = make_block()
        f_r = torch.randn(2, 4, 8, 8)
        for seed in range(3):
            f_d = torch.randn(2, 6, 8, 8, generator=torch.Generator().manual_seed(seed))
            out = zica_fuse(block, f_r, f_d)
            assert torch.equal(out, f_r)

    def test_zero_control_scale_annihilates_trained_branch(self):
        block = make_block(control_scale=0.0)
        randomize_zero_conv(block)
        f_r = torch.randn(1, 4, 8, 8)
        f_d = torch.randn(1, 6, 8, 8)
        assert torch.equal(block(f_r, f_d), f_r)

    def test_zero_init_parameters_start_at_zero(self):
        block = make_block()
        assert torch.all(block.zero_conv.weight == 0)
        assert torch.all(block.zero_conv.bias == 0)

    def test_spatial_mismatch_rejected(self):
        block = make_block()
        with pytest.raises(ValueError, match="spatial"):
            block(torch.randn(1, 4, 8, 8), torch.randn(1, 6, 4, 4))

    def test_single_token_matches_straight_line_oracle(self):
        """1x1 spatial: the softmax over one key is 1, so the correction is
        just the zero conv applied to the value vector."""
        block = make_block(c_t=2, c_p=2, control_scale=0.7, seed=3).eval()
        randomize_zero_conv(block, seed=4)
        f_r = torch.randn(1, 2, 1, 1)
        f_d = torch.randn(1, 2, 1, 1)
        out = block(f_r, f_d)
        with torch.no_grad():
            fd = block.channel_map(f_d)
            kv = block.norm_kv(fd)
            v = block.to_v(kv.reshape(1, 2, 1).transpose(1, 2))  # one token
            corr = block.zero_conv(v.transpose(1, 2).reshape(1, 2, 1, 1))
            expected = f_r + 0.7 * corr
        assert (out - expected).abs().max().item() < 1e-6

    def test_single_key_attention_weights_are_one(self):
        block = make_block(c_t=2, c_p=2)
        w = block.attention_weights(torch.randn(1, 2, 1, 1), torch.randn(1, 2, 1, 1))
        assert torch.all(w == 1.0)

    def test_rowsum_check_below_tolerance(self):
        block = make_block()
        dev = attention_rowsum_check(block, torch.randn(1, 4, 8, 8), torch.randn(1, 6, 8, 8))
        assert dev < 1e-6

    def test_rowsums_match_independent_softmax(self):
        """64-token case recomputed with a straight-line numpy softmax."""
        block = make_block(c_t=4, c_p=4, seed=5)
        f_r = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        f_d = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        block = block.double()
        with torch.no_grad():
            fd = block.channel_map(f_d)
            q = block.to_q(block.norm_q(f_r).reshape(1, 4, 64).transpose(1, 2)).numpy()[0]
            k = block.to_k(block.norm_kv(fd).reshape(1, 4, 64).transpose(1, 2)).numpy()[0]
            got = block.attention_weights(f_r, f_d).numpy()[0]
        logits = q @ k.T / math.sqrt(4)
        ex = np.exp(logits - logits.max(axis=1, keepdims=True))
        expected = ex / ex.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(6)
        block = ZeroInitCrossAttention(2, 3, control_scale=1.0).double()
        randomize_zero_conv(block, seed=7)
        f_r = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        f_d = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        target = torch.randn(1, 2, 4, 4, dtype=torch.float64)

        def loss_fn():
            return ((block(f_r, f_d) - target) ** 2).mean()

        worst = finite_difference_check(loss_fn, list(block.parameters()), max_coords_per_param=10)
        assert worst < 1e-3, f"worst relative gradient error {worst}"


def make_inputs(size=32, c_t=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    prior_channels = {1: 16, 2: 16, 4: 8, 8: 8}
    temporal = {
        s: torch.randn(1, c_t, size * s // 8, size * s // 8, generator=gen)
        for s in (1, 2, 4, 8)
    }
    prior = {
        s: torch.randn(1, prior_channels[s], size * s // 8, size * s // 8, generator=gen)
        for s in (1, 2, 4, 8)
    }
    return temporal, prior, prior_channels


class TestReconstructionHead:
    def test_untrained_head_ignores_prior_bitwise(self):
        temporal, prior, prior_channels = make_inputs()
        torch.manual_seed(0)
        head = ReconstructionHead(8, prior_channels).eval()
        zeros = {s: torch.zeros_like(p) for s, p in prior.items()}
        with torch.no_grad():
            a = head(temporal, prior)
            b = head(temporal, zeros)
        assert torch.equal(a, b)

    def test_zero_control_scale_ignores_prior_after_training(self):
        temporal, prior, prior_channels = make_inputs(seed=1)
        torch.manual_seed(1)
        head = ReconstructionHead(8, prior_channels, control_scale=0.0).eval()
        for s in (1, 2, 4, 8):
            randomize_zero_conv(head.zica[str(s)], seed=s)
        zeros = {s: torch.zeros_like(p) for s, p in prior.items()}
        with torch.no_grad():
            a = head(temporal, prior)
            b = head(temporal, zeros)
        assert torch.equal(a, b)

    def test_output_in_unit_range(self):
        temporal, prior, prior_channels = make_inputs(seed=2)
        head = ReconstructionHead(8, prior_channels).eval()
        with torch.no_grad():
            out = head(temporal, prior)
        assert out.min().item() >= 0.0 and out.max().item() <= 1.0
        assert out.shape == (1, 3, 32, 32)

    def test_scale_set_mismatch_rejected(self):
        temporal, prior, prior_channels = make_inputs()
        head = ReconstructionHead(8, prior_channels)
        del temporal[4]
        with pytest.raises(ValueError, match="scale sets"):
            head(temporal, prior)

    def test_one_step_grows_every_zero_conv(self):
        temporal, prior, prior_channels = make_inputs(seed=3)
        torch.manual_seed(3)
        head = ReconstructionHead(8, prior_channels)
        opt = torch.optim.Adam(head.parameters(), lr=1e-3)
        target = torch.rand(1, 3, 32, 32)
        loss = (head(temporal, prior) - target).abs().mean()
        assert loss.item() > 0
        loss.backward()
        opt.step()
        for s in (1, 2, 4, 8):
            theta = head.zica[str(s)].zero_conv
            grown = theta.weight.abs().max().item() > 0 or theta.bias.abs().max().item() > 0
            assert grown, f"zero conv at scale {s} did not move"

    def test_reconstruct_returns_nonnegative_hdr(self):
        temporal, prior, prior_channels = make_inputs(seed=4)
        head = ReconstructionHead(8, prior_channels).eval()
        frame = reconstruct(head, temporal, prior, hdr_peak=4.0, mu=5000.0, index=3)
        assert frame.index == 3
        assert frame.pixels.shape == (32, 32, 3)
        assert frame.pixels.min() >= 0.0

    def test_checkpoint_roundtrip(self, tmp_path):
        temporal, prior, prior_channels = make_inputs(seed=5)
        torch.manual_seed(5)
        head = ReconstructionHead(8, prior_channels, control_scale=0.5).eval()
        for s in (1, 2, 4, 8):
            randomize_zero_conv(head.zica[str(s)], seed=10 + s)
        path = str(tmp_path / "recon.pt")
        save_reconstruction(head, path, extra_manifest={"mu": 5000.0, "dataset_peak": 4.0})
        loaded, manifest = load_reconstruction(path)
        assert manifest["control_scale"] == 0.5
        with torch.no_grad():
            assert torch.equal(head(temporal, prior), loaded(temporal, prior))

    def test_windowed_attention_used_at_fine_scale(self):
        # 64x64 full-res features exceed the token threshold
        temporal, prior, prior_channels = make_inputs(size=64, seed=6)
        head = ReconstructionHead(8, prior_channels).eval()
        block = head.zica["8"]
        q, kv, win = block._tokens(temporal[8], block.channel_map(prior[8]))
        assert win == 8
        with torch.no_grad():
            out = head(temporal, prior)
        assert out.shape == (1, 3, 64, 64)
