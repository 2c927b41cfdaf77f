"""Generator oracles and the properties the verification math leans on."""

import numpy as np
import pytest

from chaosmark import chaos


KEY = chaos.ChaoticParams(r=3.9, x0=0.5, epsilon=0.01, length=100)


class TestValidation:
    def test_paper_key_is_valid(self):
        assert chaos.validate_params(KEY) == []

    def test_x0_boundary_excluded(self):
        bad = chaos.ChaoticParams(3.9, 0.0, 0.01, 100)
        violations = chaos.validate_params(bad)
        assert len(violations) == 1
        assert "x0" in violations[0]

    def test_r_below_chaotic_band(self):
        bad = chaos.ChaoticParams(3.0, 0.5, 0.01, 100)
        violations = chaos.validate_params(bad)
        assert len(violations) == 1
        assert "r" in violations[0]

    def test_each_violation_reported_distinctly(self):
        bad = chaos.ChaoticParams(3.0, -0.5, -1.0, -2)
        violations = chaos.validate_params(bad)
        assert len(violations) == 4

    def test_permissive_band_for_search_box_only(self):
        low_r = chaos.ChaoticParams(1.0, 0.5, 0.01, 10)
        assert chaos.validate_params(low_r, chaotic_band=False) == []
        assert chaos.validate_params(low_r) != []
        # zero r is outside even the permissive box
        assert chaos.validate_params(
            chaos.ChaoticParams(0.0, 0.5, 0.01, 10), chaotic_band=False
        ) != []

    def test_require_valid_raises(self):
        with pytest.raises(chaos.InvalidParamsError):
            chaos.require_valid(chaos.ChaoticParams(3.9, 1.5, 0.01, 10))


class TestGeneration:
    def test_zero_length_returns_empty(self):
        out = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.9, 0.5, 0.01, 0))
        assert out.shape == (0,)

    def test_hand_iterated_prefix(self):
        out = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.9, 0.5, 0.01, 2))
        # 3.9*0.5*0.5 and 3.9*0.975*0.025, worked by hand
        assert abs(out[0] - 0.975) <= 1e-12
        assert abs(out[1] - 0.0950625) <= 1e-12

    def test_third_element(self):
        out = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.9, 0.5, 0.01, 3))
        assert out[2] == pytest.approx(0.3355, abs=1e-4)

    def test_seed_never_emitted(self):
        # update-then-store: element 0 is already the first iterate
        out = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.9, 0.5, 0.01, 1))
        assert out[0] != 0.5
        assert out[0] == (3.9 * 0.5) * (1.0 - 0.5)

    def test_invalid_params_rejected_before_generation(self):
        with pytest.raises(chaos.InvalidParamsError):
            chaos.generate_chaotic_sequence(chaos.ChaoticParams(4.2, 0.5, 0.01, 5))


class TestProperties:
    def test_determinism(self):
        a = chaos.generate_chaotic_sequence(KEY)
        b = chaos.generate_chaotic_sequence(KEY)
        assert np.array_equal(a, b)

    def test_range_over_random_keys(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            params = chaos.ChaoticParams(
                r=rng.uniform(chaos.CHAOTIC_R_MIN, chaos.CHAOTIC_R_MAX),
                x0=rng.uniform(1e-6, 1.0 - 1e-6),
                epsilon=rng.uniform(1e-6, 0.05),
                length=257,
            )
            values = chaos.generate_chaotic_sequence(params)
            assert np.all(values > 0.0) and np.all(values < 1.0)

    def test_recurrence_holds_exactly(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            r = rng.uniform(chaos.CHAOTIC_R_MIN, chaos.CHAOTIC_R_MAX)
            params = chaos.ChaoticParams(r, rng.uniform(0.1, 0.9), 0.01, 64)
            v = chaos.generate_chaotic_sequence(params)
            for i in range(len(v) - 1):
                # same operation order as the implementation, so exact equality
                assert v[i + 1] == (r * v[i]) * (1.0 - v[i])

    def test_sensitivity_to_x0(self):
        # a 1e-9 seed difference must blow past 0.1 within 100 steps; this is
        # what makes guessing the key hopeless
        base = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.9, 0.3, 0.01, 100))
        near = chaos.generate_chaotic_sequence(
            chaos.ChaoticParams(3.9, 0.3 + 1e-9, 0.01, 100)
        )
        assert np.max(np.abs(base - near)) > 0.1

    def test_critical_point_absorbs_tiny_perturbations(self):
        # x0 = 0.5 sits at the map's critical point: the first step squares a
        # 1e-9 perturbation down to ~4e-18, below float64 resolution next to
        # 0.975, so the two orbits are bit-identical. Divergence-from-the-seed
        # arguments do not apply at exactly 0.5.
        base = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.9, 0.5, 0.01, 100))
        near = chaos.generate_chaotic_sequence(
            chaos.ChaoticParams(3.9, 0.5 + 1e-9, 0.01, 100)
        )
        assert np.array_equal(base, near)

    def test_mirrored_seeds_share_an_orbit(self):
        # f(x) = f(1-x): x0 and 1-x0 generate the same sequence, so recovered
        # seeds are only identifiable up to this fold
        a = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.87, 0.23, 0.01, 64))
        b = chaos.generate_chaotic_sequence(chaos.ChaoticParams(3.87, 0.77, 0.01, 64))
        assert a == pytest.approx(b, abs=1e-12)

    def test_long_sequence_stays_inside_open_interval(self):
        params = chaos.ChaoticParams(3.99, 0.25, 0.01, 1_000_000)
        values = chaos.generate_chaotic_sequence(params)
        assert values.min() > 0.0
        assert values.max() < 1.0


class TestBatch:
    def test_rows_bit_equal_to_scalar_path(self):
        rng = np.random.default_rng(3)
        rs = rng.uniform(3.57, 4.0, size=8)
        xs = rng.uniform(0.05, 0.95, size=8)
        rows = chaos.generate_batch(rs, xs, 50)
        for i in range(8):
            scalar = chaos.generate_chaotic_sequence(
                chaos.ChaoticParams(rs[i], xs[i], 0.01, 50)
            )
            assert np.array_equal(rows[i], scalar)

    def test_batch_accepts_permissive_r(self):
        rows = chaos.generate_batch(np.array([2.5]), np.array([0.5]), 4)
        assert rows.shape == (1, 4)

    def test_batch_shape_mismatch(self):
        with pytest.raises(ValueError):
            chaos.generate_batch(np.array([3.9, 3.8]), np.array([0.5]), 4)

    def test_batch_rejects_bad_values(self):
        with pytest.raises(chaos.InvalidParamsError):
            chaos.generate_batch(np.array([3.9]), np.array([1.5]), 4)
