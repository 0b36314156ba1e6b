import numpy as np
import pytest
from scipy import ndimage

from fabtwin.exceptions import InvalidInputError, InvalidSpecError
from fabtwin.patterns import (STRUCTURE_KINDS, SynthSpec, augment_dataset, augment_rotations,
                              make_eval_structure, rot90_cw, synth_fourier_pattern)


def max_inscribed_diameters(mask):
    """Brute-force per-component largest inscribed disk diameter (pixels)."""
    labels, n = ndimage.label(mask)
    padded = np.pad(mask, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    return [2 * dist[labels == k].max() - 1 for k in range(1, n + 1)]


class TestFourierPattern:
    def test_fill_fraction_after_cleanup(self):
        spec = SynthSpec(size=64, passband_low=2, passband_high=8, fill_target=0.5)
        for seed in range(10):
            frac = synth_fourier_pattern(spec, seed).mean()
            assert 0.40 <= frac <= 0.60

    def test_quantile_threshold_before_cleanup(self):
        spec = SynthSpec(size=64, passband_low=2, passband_high=8, fill_target=0.3,
                         cleanup_iterations=0)
        assert abs(synth_fourier_pattern(spec, 5).mean() - 0.3) <= 0.02

    def test_deterministic(self):
        spec = SynthSpec(size=64)
        assert np.array_equal(synth_fourier_pattern(spec, 42), synth_fourier_pattern(spec, 42))
        assert not np.array_equal(synth_fourier_pattern(spec, 42), synth_fourier_pattern(spec, 43))

    def test_min_feature_cleanup(self):
        spec = SynthSpec(size=64, passband_low=2, passband_high=12, min_feature_px=5,
                         cleanup_iterations=1)
        for seed in range(5):
            diam = max_inscribed_diameters(synth_fourier_pattern(spec, seed))
            assert diam and min(diam) >= 3

    @pytest.mark.parametrize("law", ["uniform", "gaussian"])
    def test_both_phases_present(self, law):
        for seed in range(50):
            fill = 0.2 + 0.6 * (seed / 49)
            spec = SynthSpec(size=48, passband_low=1, passband_high=6, fill_target=fill,
                             amplitude_law=law)
            m = synth_fourier_pattern(spec, seed)
            assert 0 < m.sum() < m.size

    def test_empty_annulus(self):
        spec = SynthSpec(size=8, passband_low=1.1, passband_high=1.2)
        with pytest.raises(InvalidSpecError):
            synth_fourier_pattern(spec, 0)

    @pytest.mark.parametrize("kwargs", [dict(passband_low=4, passband_high=4),
                                        dict(passband_high=40),
                                        dict(min_feature_px=0),
                                        dict(amplitude_law="cauchy")])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(InvalidSpecError):
            SynthSpec(size=64, **kwargs)


class TestEvalStructures:
    def test_cross_areas(self):
        assert make_eval_structure("cross100").sum() == 200 * 100 * 2 - 100 * 100 == 30000
        assert make_eval_structure("cross25").sum() == 200 * 25 * 2 - 25 ** 2 == 9375

    def test_square(self):
        assert make_eval_structure("square").sum() == 100 * 100

    @pytest.mark.parametrize("kind", ["cross50", "cross100", "square", "target50", "target100"])
    def test_rotation_invariant(self, kind):
        m = make_eval_structure(kind)
        assert np.array_equal(rot90_cw(m), m)

    @pytest.mark.parametrize("kind", STRUCTURE_KINDS)
    def test_inside_central_window(self, kind):
        m = make_eval_structure(kind)
        inner = m[28:228, 28:228]
        assert inner.sum() == m.sum() > 0

    def test_target_geometry(self):
        m = make_eval_structure("target50")
        ring = 200 ** 2 - 100 ** 2
        cross = 2 * 120 * 50 - 50 ** 2
        overlap = 4 * 10 * 50  # arms reach 10 px into the ring on each side
        assert m.sum() == ring + cross - overlap

    def test_scaled_analog(self):
        m = make_eval_structure("cross25", canvas_px=64, region_px=50, arm_width=6)
        assert m.shape == (64, 64)
        assert m.sum() == 50 * 6 * 2 - 36
        assert np.array_equal(rot90_cw(m), m)

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            make_eval_structure("hexagon")

    def test_canvas_smaller_than_region(self):
        with pytest.raises(InvalidInputError):
            make_eval_structure("square", canvas_px=100)


class TestRotations:
    def test_clockwise_convention(self):
        m = np.array([[1, 0], [0, 0]])
        assert rot90_cw(m).tolist() == [[0, 1], [0, 0]]

    def test_four_quarter_turns_identity(self):
        m = np.random.default_rng(0).integers(0, 2, (5, 5))
        out = m
        for _ in range(4):
            out = rot90_cw(out)
        assert np.array_equal(out, m)

    def test_pairs_rotate_together(self):
        a = np.random.default_rng(1).integers(0, 2, (6, 6))
        b = np.random.default_rng(2).integers(0, 2, (6, 6))
        out = augment_rotations((a, b))
        assert len(out) == 4
        for k, (ra, rb) in enumerate(out):
            assert np.array_equal(ra, np.rot90(a, -k))
            assert np.array_equal(rb, np.rot90(b, -k))
            assert ra.sum() == a.sum() and rb.sum() == b.sum()

    def test_dataset_growth(self):
        rng = np.random.default_rng(0)
        pairs = [(rng.integers(0, 2, (4, 4)), rng.integers(0, 2, (4, 4))) for _ in range(31)]
        assert len(augment_dataset(pairs)) == 124

    def test_non_square(self):
        with pytest.raises(InvalidInputError):
            augment_rotations((np.zeros((2, 3)), np.zeros((2, 3))))
