"""LDR synthesis, 6-channel inputs, and sequence serialization."""

import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffhdr.datapipe import (
    FrameSequence,
    HDRFrame,
    LDRFrame,
    build_network_input,
    linearize,
    load_sequence,
    make_sequence,
    quantization_bound,
    quantize,
    save_sequence,
    sequences_equal,
    synthesize_ldr,
)
from diffhdr.toydata import make_toy_hdr_video

# frozen with a high-precision evaluator: 0.25**(1/2.2) = 0.53252054471998134,
# nearest 8-bit code 136
QUARTER_GAMMA_CODE = 136
# frozen: 0.5**2.2 = 0.21763764082403103
HALF_POW_GAMMA = 0.21763764082403103


def flat_hdr(value, index=0):
    return HDRFrame(pixels=np.full((4, 4, 3), value, dtype=np.float32), index=index)


class TestSynthesizeLDR:
    def test_zero_radiance_maps_to_zero(self):
        ldr = synthesize_ldr(flat_hdr(0.0), exposure=1.0)
        assert np.all(ldr.pixels == 0.0)

    def test_overrange_radiance_clips_to_one(self):
        ldr = synthesize_ldr(flat_hdr(2.0), exposure=1.0)
        assert np.all(ldr.pixels == 1.0)

    def test_quarter_radiance_quantizes_to_frozen_code(self):
        ldr = synthesize_ldr(flat_hdr(0.25), exposure=1.0, bit_depth=8)
        expected = np.float32(QUARTER_GAMMA_CODE) / np.float32(255.0)
        assert np.all(ldr.pixels == expected)

    def test_nonpositive_exposure_rejected(self):
        with pytest.raises(ValueError, match="exposure"):
            synthesize_ldr(flat_hdr(0.5), exposure=0.0)
        with pytest.raises(ValueError, match="exposure"):
            synthesize_ldr(flat_hdr(0.5), exposure=-1.0)

    def test_deterministic_without_noise(self):
        hdr = HDRFrame(pixels=np.random.default_rng(0).random((8, 8, 3)).astype(np.float32))
        a = synthesize_ldr(hdr, 4.0)
        b = synthesize_ldr(hdr, 4.0)
        assert np.array_equal(a.pixels, b.pixels)

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError, match="rng"):
            synthesize_ldr(flat_hdr(0.5), 1.0, noise_sigma=0.01)

    def test_noise_is_seed_deterministic(self):
        hdr = flat_hdr(0.3)
        a = synthesize_ldr(hdr, 1.0, noise_sigma=0.01, rng=np.random.default_rng(7))
        b = synthesize_ldr(hdr, 1.0, noise_sigma=0.01, rng=np.random.default_rng(7))
        assert np.array_equal(a.pixels, b.pixels)


class TestNetworkInput:
    def test_saturated_pixel_linearizes_to_one(self):
        ldr = LDRFrame(pixels=np.ones((2, 2, 3), dtype=np.float32), exposure=1.0)
        ni = build_network_input(ldr)
        assert np.allclose(ni.linear, 1.0)

    def test_zero_pixel_linearizes_to_zero(self):
        ldr = LDRFrame(pixels=np.zeros((2, 2, 3), dtype=np.float32), exposure=16.0)
        ni = build_network_input(ldr)
        assert np.all(ni.linear == 0.0)

    def test_half_pixel_at_exposure_four(self):
        ldr = LDRFrame(pixels=np.full((2, 2, 3), 0.5, dtype=np.float32), exposure=4.0)
        ni = build_network_input(ldr)
        assert np.allclose(ni.linear, HALF_POW_GAMMA / 4.0, rtol=1e-6)

    def test_first_three_channels_equal_source(self):
        rng = np.random.default_rng(3)
        ldr = LDRFrame(pixels=quantize(rng.random((6, 5, 3)).astype(np.float32)), exposure=8.0)
        ni = build_network_input(ldr)
        assert np.array_equal(ni.ldr, ldr.pixels)

    @given(value=st.floats(0.0, 1.0), exposure=st.floats(0.01, 64.0))
    @settings(max_examples=50, deadline=None)
    def test_channel_invariant_relative(self, value, exposure):
        ldr = LDRFrame(pixels=np.full((2, 2, 3), value, dtype=np.float32), exposure=exposure)
        ni = build_network_input(ldr)
        expected = np.power(ni.ldr.astype(np.float64), 2.2) / exposure
        np.testing.assert_allclose(ni.linear, expected, rtol=1e-6)


class TestSequences:
    def test_two_exposure_cycling(self):
        hdr = [flat_hdr(0.1, i) for i in range(4)]
        seq = make_sequence(hdr, [1.0, 8.0])
        assert [f.exposure for f in seq.frames] == [1.0, 8.0, 1.0, 8.0]

    def test_three_exposure_cycling(self):
        hdr = [flat_hdr(0.1, i) for i in range(5)]
        seq = make_sequence(hdr, [1.0, 4.0, 16.0])
        assert [f.exposure for f in seq.frames] == [1.0, 4.0, 16.0, 1.0, 4.0]

    def test_reference_defaults_to_center(self):
        seq = make_sequence([flat_hdr(0.1, i) for i in range(5)], [1.0, 8.0])
        assert seq.reference_index == 2

    def test_empty_frames_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            make_sequence([], [1.0, 8.0])

    @pytest.mark.parametrize("pattern", [[1.0], [1.0, 2.0, 4.0, 8.0]])
    def test_bad_pattern_length_rejected(self, pattern):
        with pytest.raises(ValueError, match="pattern"):
            make_sequence([flat_hdr(0.1)], pattern)

    def test_pattern_invariant_enforced_by_type(self):
        hdr = [flat_hdr(0.1, i) for i in range(2)]
        seq = make_sequence(hdr, [1.0, 8.0])
        with pytest.raises(ValueError, match="pattern"):
            FrameSequence(
                frames=seq.frames[::-1],
                hdr_targets=seq.hdr_targets,
                exposure_pattern=[1.0, 8.0],
                reference_index=0,
            )

    def test_well_exposed_roundtrip_within_bound(self):
        hdr_frames = make_toy_hdr_video(num_frames=4, size=32, seed=5)
        seq = make_sequence(hdr_frames, [1.0, 8.0])
        for frame, hdr in zip(seq.frames, seq.hdr_targets):
            well = hdr.pixels.astype(np.float64) * frame.exposure <= 1.0
            err = np.abs(linearize_frame(frame) - hdr.pixels.astype(np.float64))
            bound = quantization_bound(frame.ldr, frame.exposure)
            assert np.all(err[well] <= bound[well] + 1e-12)


def linearize_frame(frame):
    return np.power(frame.ldr.astype(np.float64), 2.2) / frame.exposure


class TestQuantizationBoundExhaustive:
    """Brute-force scan of the entire 8-bit code grid at its cell edges."""

    @pytest.mark.parametrize("exposure", [1.0, 8.0])
    def test_all_codes_at_cell_edges(self, exposure):
        gamma = 2.2
        codes = np.arange(256)
        display = codes / 255.0
        lo = np.clip((codes - 0.5) / 255.0, 0.0, 1.0) ** gamma
        hi = np.clip((codes + 0.5) / 255.0, 0.0, 1.0) ** gamma
        linearized = display**gamma
        bound = quantization_bound(display.reshape(-1, 1, 1), exposure, gamma).reshape(-1)
        for v_edge in (lo, hi):
            err = np.abs(linearized - v_edge) / exposure
            assert np.all(err <= bound + 1e-15)

    @pytest.mark.parametrize("exposure", [1.0, 8.0])
    def test_dense_grid_scan(self, exposure):
        # every representable 16-bit radiance that stays well-exposed
        v = np.linspace(0.0, 1.0, 65536)
        hdr = HDRFrame(pixels=np.repeat(v, 3).reshape(-1, 1, 3).astype(np.float32) / exposure)
        ldr = synthesize_ldr(hdr, exposure)
        err = np.abs(
            np.power(ldr.pixels.astype(np.float64), 2.2) / exposure
            - hdr.pixels.astype(np.float64)
        )
        bound = quantization_bound(ldr.pixels, exposure)
        assert np.all(err <= bound + 1e-12)


class TestSequenceIO:
    def test_save_load_roundtrip(self, tmp_path):
        hdr = make_toy_hdr_video(num_frames=4, size=16, seed=2)
        seq = make_sequence(hdr, [1.0, 8.0])
        save_sequence(seq, str(tmp_path / "seq"))
        loaded = load_sequence(str(tmp_path / "seq"))
        assert sequences_equal(seq, loaded)

    def test_hdr_storage_is_lossless(self, tmp_path):
        hdr = make_toy_hdr_video(num_frames=2, size=16, seed=4)
        seq = make_sequence(hdr, [1.0, 8.0])
        save_sequence(seq, str(tmp_path / "seq"))
        loaded = load_sequence(str(tmp_path / "seq"))
        for a, b in zip(seq.hdr_targets, loaded.hdr_targets):
            assert np.abs(a.pixels - b.pixels).max() == 0.0

    def test_missing_sidecar_names_it(self, tmp_path):
        os.makedirs(tmp_path / "seq")
        with pytest.raises(FileNotFoundError, match="sequence.json"):
            load_sequence(str(tmp_path / "seq"))

    def test_missing_frame_file_named(self, tmp_path):
        hdr = make_toy_hdr_video(num_frames=2, size=16, seed=4)
        seq = make_sequence(hdr, [1.0, 8.0])
        save_sequence(seq, str(tmp_path / "seq"))
        os.remove(tmp_path / "seq" / "ldr_0001.png")
        with pytest.raises(FileNotFoundError, match="ldr_0001.png"):
            load_sequence(str(tmp_path / "seq"))

    def test_serialization_is_bit_deterministic(self, tmp_path):
        hdr = make_toy_hdr_video(num_frames=3, size=16, seed=9)
        seq = make_sequence(hdr, [1.0, 8.0])
        digests = []
        for name in ("a", "b"):
            save_sequence(seq, str(tmp_path / name))
            h = hashlib.sha256()
            for f in sorted(os.listdir(tmp_path / name)):
                h.update(open(tmp_path / name / f, "rb").read())
            digests.append(h.hexdigest())
        assert digests[0] == digests[1]

    def test_non_8bit_save_rejected(self, tmp_path):
        hdr = make_toy_hdr_video(num_frames=2, size=16, seed=4)
        seq = make_sequence(hdr, [1.0, 8.0], bit_depth=10)
        with pytest.raises(ValueError, match="8-bit"):
            save_sequence(seq, str(tmp_path / "seq"))
