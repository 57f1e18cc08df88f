import math

import numpy as np
import pytest

from wclab import adapters, linalg
from wclab.adapters import AdapterConfig, Method, SpPolicy
from wclab.errors import ConfigError, DegenerateColumnError, MethodStateError, ShapeError

ALL_METHODS = list(Method)


def _rel_fro(a, b):
    return linalg.frobenius_norm(a - b) / max(linalg.frobenius_norm(a), 1e-300)


def _config(method, r=3, rp=2, **kw):
    return AdapterConfig(method, rank_r=r, rotation_rank_rp=rp, **kw)


class TestConfig:
    def test_rank_exceeds_layer(self):
        with pytest.raises(ConfigError):
            _config(Method.LORA, r=9).validate_for_shape(8, 8)

    def test_rotation_rank_exceeds_n(self):
        with pytest.raises(ConfigError):
            _config(Method.SORA, r=2, rp=9).validate_for_shape(16, 8)

    def test_bad_scalars(self):
        with pytest.raises(ConfigError):
            AdapterConfig(Method.LORA, rank_r=0)
        with pytest.raises(ConfigError):
            AdapterConfig(Method.LORA, rank_r=2, scale_s=-1.0)
        with pytest.raises(ConfigError):
            SpPolicy.epsilon(0.0)

    def test_default_policy_is_epsilon(self):
        cfg = AdapterConfig(Method.SORA, rank_r=2)
        assert cfg.sp_policy.mode == "epsilon"
        assert cfg.sp_policy.value == 0.01


class TestInit:
    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_zero_delta(self, method, rng):
        w = rng.normal(size=(10, 8))
        cfg = _config(method)
        state = adapters.init_adapter(w, cfg, seed=5)
        delta = adapters.delta_weight(state, cfg)
        assert linalg.frobenius_norm(delta) <= 1e-13 * linalg.frobenius_norm(w)

    def test_lora_b_is_zero(self, rng):
        state = adapters.init_adapter(rng.normal(size=(6, 5)), _config(Method.LORA), seed=0)
        assert not state.b.any()

    def test_dora_magnitude_matches_column_norms(self, rng):
        w = rng.normal(size=(7, 4))
        state = adapters.init_adapter(w, _config(Method.DORA), seed=0)
        assert np.allclose(state.mag_or_scale, linalg.column_norms(w), rtol=1e-15)

    def test_sora_starts_at_identity_rotation(self, rng):
        w = rng.normal(size=(6, 6))
        state = adapters.init_adapter(w, _config(Method.SORA), seed=0)
        assert np.all(state.mag_or_scale == 1.0)
        assert not state.cp.any()
        assert not adapters.sora_skew(state.dp, state.cp).any()

    def test_w_pre_is_read_only(self, rng):
        state = adapters.init_adapter(rng.normal(size=(4, 4)), _config(Method.LORA), seed=0)
        with pytest.raises(ValueError):
            state.w_pre[0, 0] = 1.0

    def test_deterministic(self, rng):
        w = rng.normal(size=(6, 5))
        s1 = adapters.init_adapter(w, _config(Method.SORA), seed=9)
        s2 = adapters.init_adapter(w, _config(Method.SORA), seed=9)
        assert np.array_equal(s1.a, s2.a) and np.array_equal(s1.dp, s2.dp)


class TestDora:
    def test_original_at_init_is_w_pre(self, rng):
        w = rng.normal(size=(6, 4))
        cfg = _config(Method.DORA)
        state = adapters.init_adapter(w, cfg, seed=0)
        assert _rel_fro(w, adapters.dora_merged_original(state, cfg)) <= 1e-14

    def test_original_unit_columns_scaled(self):
        cfg = _config(Method.DORA, r=1)
        state = adapters.init_adapter(np.eye(2), cfg, seed=0)
        state.mag_or_scale = np.array([2.0, 3.0])
        out = adapters.dora_merged_original(state, cfg)
        assert np.allclose(out, np.diag([2.0, 3.0]), rtol=1e-15)

    def test_forms_agree(self, rng):
        cfg = _config(Method.DORA, r=4)
        state = adapters.random_state(rng.normal(size=(6, 4)), cfg, seed=1)
        a = adapters.dora_merged_original(state, cfg)
        b = adapters.dora_merged_matrix_form(state, cfg)
        assert _rel_fro(a, b) <= 1e-12

    def test_conditioning_vector_at_init_is_ones(self, rng):
        cfg = _config(Method.DORA)
        state = adapters.init_adapter(rng.normal(size=(5, 5)), cfg, seed=0)
        assert np.allclose(adapters.dora_conditioning_vector(state, cfg), 1.0, rtol=1e-14)

    def test_conditioning_vector_linear_in_magnitude(self, rng):
        cfg = _config(Method.DORA)
        state = adapters.init_adapter(rng.normal(size=(5, 5)), cfg, seed=0)
        state.mag_or_scale = 2.0 * state.mag_or_scale
        assert np.allclose(adapters.dora_conditioning_vector(state, cfg), 2.0, rtol=1e-14)

    def test_conditioning_vector_reconstructs_merge(self, rng):
        cfg = _config(Method.DORA, r=2)
        state = adapters.random_state(rng.normal(size=(8, 6)), cfg, seed=3)
        d = adapters.dora_conditioning_vector(state, cfg)
        v = state.w_pre + cfg.scale_s * (state.b @ state.a)
        rebuilt = linalg.diag_right_mul(v, d)
        assert np.abs(rebuilt - adapters.dora_merged_original(state, cfg)).max() <= 1e-13

    def test_matrix_form_equals_conditioning_formula(self, rng):
        # merged - w_pre must equal W_pre (D - I) + s*B*A*D
        cfg = _config(Method.DORA, r=3)
        state = adapters.random_state(rng.normal(size=(7, 5)), cfg, seed=4)
        d = adapters.dora_conditioning_vector(state, cfg)
        expected = state.w_pre * (d - 1.0) + cfg.scale_s * (state.b @ state.a) * d
        delta = adapters.dora_merged_matrix_form(state, cfg) - state.w_pre
        assert _rel_fro(expected, delta) <= 1e-12

    def test_degenerate_column_error_names_index(self):
        w = np.array([[1.0, 0.0], [0.0, 0.0]])  # column 1 has zero norm
        cfg = _config(Method.DORA, r=1)
        state = adapters.init_adapter(w, cfg, seed=0)
        with pytest.raises(DegenerateColumnError) as exc:
            adapters.dora_merged_original(state, cfg)
        assert exc.value.column == 1

    def test_equivalence_sweep(self):
        report = adapters.verify_dora_equivalence(25, seed=11)
        assert report.ok
        assert report.max_rel_deviation <= 1e-12


class TestPreDiag:
    def test_init_is_w_pre(self, rng):
        w = rng.normal(size=(5, 4))
        cfg = _config(Method.PRE_DIAG)
        state = adapters.init_adapter(w, cfg, seed=0)
        assert np.array_equal(adapters.prediag_merged(state, cfg), w)

    def test_identity_layer_scaled(self):
        cfg = _config(Method.PRE_DIAG, r=1)
        state = adapters.init_adapter(np.eye(3), cfg, seed=0)
        state.mag_or_scale = np.array([2.0, 1.0, 1.0])
        assert np.array_equal(adapters.prediag_merged(state, cfg), np.diag([2.0, 1.0, 1.0]))

    def test_delta_formula(self, rng):
        cfg = _config(Method.PRE_DIAG, r=2)
        state = adapters.random_state(rng.normal(size=(6, 6)), cfg, seed=5)
        d = state.mag_or_scale
        expected = state.w_pre * (d - 1.0) + cfg.scale_s * (state.b @ state.a)
        delta = adapters.delta_weight(state, cfg)
        assert np.abs(delta - expected).max() <= 1e-14


class TestSkewAndRotation:
    def test_zero_cp_gives_zero(self, rng):
        dp = rng.normal(size=(5, 2))
        assert not adapters.sora_skew(dp, np.zeros((5, 2))).any()

    def test_unit_basis_generator(self):
        dp = np.zeros((4, 1))
        cp = np.zeros((4, 1))
        dp[0, 0] = 1.0
        cp[1, 0] = 1.0
        s = adapters.sora_skew(dp, cp)
        expected = np.zeros((4, 4))
        expected[0, 1] = 1.0
        expected[1, 0] = -1.0
        assert np.array_equal(s, expected)

    def test_antisymmetry(self, rng):
        s = adapters.sora_skew(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)))
        assert linalg.frobenius_norm(s + s.T) <= 1e-14

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            adapters.sora_skew(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)))

    def test_rotation_at_zero_strength(self, rng):
        dp = rng.normal(size=(5, 1))
        cp = rng.normal(size=(5, 1))
        assert np.array_equal(adapters.sora_rotation(dp, cp, 0.0), np.eye(5))

    def test_near_orthogonality_identity(self, rng):
        # ||P^T P - I||_2 equals s_p^2 ||S||_2^2 because the linear terms cancel
        dp = rng.normal(size=(12, 2))
        cp = rng.normal(size=(12, 2))
        s_p = 0.02
        p = adapters.sora_rotation(dp, cp, s_p)
        lhs = linalg.spectral_norm(p.T @ p - np.eye(12))
        rhs = s_p**2 * linalg.spectral_norm(adapters.sora_skew(dp, cp)) ** 2
        assert abs(lhs - rhs) <= 1e-12

    def test_rotation_close_to_exponential(self, rng):
        dp = rng.normal(size=(10, 1))
        cp = rng.normal(size=(10, 1))
        s_p = 0.01
        j = s_p * adapters.sora_skew(dp, cp)
        p = adapters.sora_rotation(dp, cp, s_p)
        gap = linalg.spectral_norm(linalg.expm(j) - p)
        assert gap <= linalg.spectral_norm(j) ** 2 / 2.0 + 1e-12


class TestResolveSp:
    def test_formula(self):
        dp = np.zeros((4, 1))
        cp = np.zeros((4, 1))
        dp[0, 0] = 1.0
        cp[1, 0] = 1.0
        cfg = _config(Method.SORA, sp_policy=SpPolicy.epsilon(0.01))
        assert adapters.resolve_sp(cfg, dp, cp) == pytest.approx(0.01 / 2.01, rel=1e-12)

    def test_zero_factor_gives_one(self, rng):
        cfg = _config(Method.SORA, sp_policy=SpPolicy.epsilon(0.01))
        assert adapters.resolve_sp(cfg, rng.normal(size=(4, 1)), np.zeros((4, 1))) == 1.0

    def test_fixed_policy(self, rng):
        cfg = _config(Method.SORA, sp_policy=SpPolicy.fixed(0.125))
        assert adapters.resolve_sp(cfg, rng.normal(size=(4, 1)), rng.normal(size=(4, 1))) == 0.125

    @pytest.mark.parametrize("eps", [0.1, 0.01, 0.001])
    def test_exponential_stays_within_epsilon(self, eps, rng):
        dp = rng.normal(size=(9, 2))
        cp = rng.normal(size=(9, 2))
        cfg = _config(Method.SORA, sp_policy=SpPolicy.epsilon(eps))
        s_p = adapters.resolve_sp(cfg, dp, cp)
        assert 0.0 < s_p < 1.0
        j = s_p * adapters.sora_skew(dp, cp)
        assert linalg.spectral_norm(linalg.expm(j) - np.eye(9)) <= eps + 1e-12


class TestRotationApplication:
    def test_zero_strength_is_identity_map(self, rng):
        w = rng.normal(size=(4, 6))
        dp = rng.normal(size=(6, 1))
        cp = rng.normal(size=(6, 1))
        assert np.array_equal(adapters.sora_apply_rotation_reordered(w, dp, cp, 0.0), w)
        assert np.allclose(adapters.sora_apply_rotation_naive(w, dp, cp, 0.0), w, atol=1e-15)

    def test_reorder_identity_small(self, rng):
        w = rng.normal(size=(6, 5))
        dp = rng.normal(size=(5, 1))
        cp = rng.normal(size=(5, 1))
        a = adapters.sora_apply_rotation_naive(w, dp, cp, 0.03)
        b = adapters.sora_apply_rotation_reordered(w, dp, cp, 0.03)
        assert _rel_fro(a, b) <= 1e-13

    def test_reorder_identity_square_factors(self, rng):
        # r_P = n is the degenerate-advantage regime; the identity still holds
        n = 7
        w = rng.normal(size=(4, n))
        dp = rng.normal(size=(n, n))
        cp = rng.normal(size=(n, n))
        a = adapters.sora_apply_rotation_naive(w, dp, cp, 0.005)
        b = adapters.sora_apply_rotation_reordered(w, dp, cp, 0.005)
        assert _rel_fro(a, b) <= 1e-12

    def test_reorder_identity_random_sweep(self, rng):
        for _ in range(100):
            m = int(rng.integers(2, 20))
            n = int(rng.integers(2, 20))
            rp = int(rng.integers(1, min(4, n) + 1))
            w = rng.normal(size=(m, n))
            dp = rng.normal(size=(n, rp))
            cp = rng.normal(size=(n, rp))
            s_p = float(rng.uniform(0.0, 0.1))
            a = adapters.sora_apply_rotation_naive(w, dp, cp, s_p)
            b = adapters.sora_apply_rotation_reordered(w, dp, cp, s_p)
            assert _rel_fro(a, b) <= 1e-12


class TestSoraMerge:
    def test_init_is_w_pre(self, rng):
        w = rng.normal(size=(6, 6))
        cfg = _config(Method.SORA)
        state = adapters.init_adapter(w, cfg, seed=0)
        assert np.array_equal(adapters.sora_merged(state, cfg), w)

    def test_against_naive_composition(self, rng):
        cfg = _config(Method.SORA, r=2, rp=2)
        state = adapters.random_state(rng.normal(size=(8, 6)), cfg, seed=7)
        s_p = adapters.resolve_sp(cfg, state.dp, state.cp)
        explicit_d = np.diag(state.mag_or_scale)
        explicit_p = adapters.sora_rotation(state.dp, state.cp, s_p)
        oracle = (state.w_pre @ explicit_d + cfg.scale_s * state.b @ state.a) @ explicit_p
        assert _rel_fro(oracle, adapters.sora_merged(state, cfg)) <= 1e-12

    def test_delta_rank_exceeds_lora_ceiling(self, rng):
        cfg = _config(Method.SORA, r=2, rp=1)
        state = adapters.random_state(rng.normal(size=(12, 12)), cfg, seed=8)
        delta = adapters.delta_weight(state, cfg)
        assert adapters.numerical_rank(delta) > cfg.rank_r


class TestOrthoVariants:
    @pytest.mark.parametrize("method", [Method.PRE_ORTHO, Method.POST_ORTHO])
    def test_zero_cp_reduces_to_lora(self, method, rng):
        w = rng.normal(size=(6, 5))
        cfg = _config(method, r=2)
        state = adapters.random_state(w, cfg, seed=9)
        state.cp = np.zeros_like(state.cp)
        lora_merged = w + cfg.scale_s * (state.b @ state.a)
        assert np.allclose(adapters.ortho_variant_merged(state, cfg), lora_merged,
                           rtol=0, atol=1e-14)

    def test_postortho_zero_factors_is_pure_rotation(self, rng):
        w = rng.normal(size=(5, 5))
        cfg = _config(Method.POST_ORTHO, r=2)
        state = adapters.random_state(w, cfg, seed=10)
        state.b = np.zeros_like(state.b)
        s_p = adapters.resolve_sp(cfg, state.dp, state.cp)
        oracle = w @ adapters.sora_rotation(state.dp, state.cp, s_p)
        assert _rel_fro(oracle, adapters.ortho_variant_merged(state, cfg)) <= 1e-12

    @pytest.mark.parametrize("method", [Method.PRE_ORTHO, Method.POST_ORTHO])
    def test_against_explicit_rotation_oracle(self, method, rng):
        cfg = _config(method, r=2, rp=2)
        state = adapters.random_state(rng.normal(size=(7, 6)), cfg, seed=11)
        s_p = adapters.resolve_sp(cfg, state.dp, state.cp)
        p = adapters.sora_rotation(state.dp, state.cp, s_p)
        ba = cfg.scale_s * state.b @ state.a
        if method is Method.PRE_ORTHO:
            oracle = state.w_pre @ p + ba
        else:
            oracle = (state.w_pre + ba) @ p
        assert _rel_fro(oracle, adapters.ortho_variant_merged(state, cfg)) <= 1e-12


class TestMergedDispatch:
    def test_lora_formula(self, rng):
        cfg = _config(Method.LORA, r=2)
        state = adapters.random_state(rng.normal(size=(5, 4)), cfg, seed=12)
        expected = state.w_pre + cfg.scale_s * (state.b @ state.a)
        assert np.allclose(adapters.merged_weight(state, cfg), expected, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_every_method_init_merges_to_w_pre(self, method, rng):
        w = rng.normal(size=(9, 7))
        cfg = _config(method)
        state = adapters.init_adapter(w, cfg, seed=13)
        assert _rel_fro(w, adapters.merged_weight(state, cfg)) <= 1e-14

    def test_dora_dispatch_uses_matrix_form(self, rng):
        cfg = _config(Method.DORA, r=2)
        state = adapters.random_state(rng.normal(size=(6, 5)), cfg, seed=14)
        assert np.array_equal(adapters.merged_weight(state, cfg),
                              adapters.dora_merged_matrix_form(state, cfg))

    def test_method_state_mismatch(self, rng):
        lora_state = adapters.init_adapter(rng.normal(size=(5, 5)), _config(Method.LORA), seed=0)
        with pytest.raises(MethodStateError):
            adapters.merged_weight(lora_state, _config(Method.DORA))

    def test_delta_at_init_is_zero(self, rng):
        cfg = _config(Method.POST_ORTHO)
        state = adapters.init_adapter(rng.normal(size=(6, 6)), cfg, seed=1)
        assert not adapters.delta_weight(state, cfg).any()

    def test_lora_delta_is_scaled_product(self, rng):
        cfg = _config(Method.LORA, r=2)
        state = adapters.random_state(rng.normal(size=(6, 5)), cfg, seed=15)
        expected = cfg.scale_s * (state.b @ state.a)
        scale = np.abs(state.w_pre).max()
        assert np.abs(adapters.delta_weight(state, cfg) - expected).max() <= 1e-14 * scale

    def test_lora_rank_ceiling(self, rng):
        cfg = _config(Method.LORA, r=3)
        state = adapters.random_state(rng.normal(size=(16, 16)), cfg, seed=16)
        assert adapters.numerical_rank(adapters.delta_weight(state, cfg)) <= 3


class TestParamCount:
    def test_lora_arithmetic(self):
        pc = adapters.param_count(AdapterConfig(Method.LORA, rank_r=8), 768, 768)
        assert pc.trainable == 8 * (768 + 768) == 12288
        assert pc.frozen == 768 * 768

    def test_sora_adds_rotation_factors(self):
        base = adapters.param_count(AdapterConfig(Method.PRE_DIAG, rank_r=8), 768, 768)
        sora = adapters.param_count(
            AdapterConfig(Method.SORA, rank_r=8, rotation_rank_rp=1), 768, 768)
        assert sora.trainable - base.trainable == 2 * 768 * 1 == 1536

    def test_method_ordering(self):
        m = n = 768
        counts = {
            method: adapters.param_count(
                AdapterConfig(method, rank_r=8, rotation_rank_rp=1), m, n).trainable
            for method in (Method.LORA, Method.DORA, Method.PRE_DIAG, Method.SORA)
        }
        assert counts[Method.LORA] < counts[Method.DORA]
        assert counts[Method.DORA] == counts[Method.PRE_DIAG]
        assert counts[Method.PRE_DIAG] < counts[Method.SORA]

    def test_ratio(self):
        pc = adapters.param_count(AdapterConfig(Method.LORA, rank_r=8), 100, 100)
        assert pc.ratio == pytest.approx(pc.trainable / (pc.trainable + 10000))


class TestZeroDeltaProperty:
    @pytest.mark.parametrize("seed", range(5))
    def test_many_random_layers(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(3, 40))
        n = int(rng.integers(3, 40))
        r = int(rng.integers(1, min(m, n) + 1))
        rp = int(rng.integers(1, n + 1))
        w = rng.normal(size=(m, n))
        for method in ALL_METHODS:
            cfg = AdapterConfig(method, rank_r=r, rotation_rank_rp=rp)
            state = adapters.init_adapter(w, cfg, seed=seed)
            delta = adapters.delta_weight(state, cfg)
            assert linalg.frobenius_norm(delta) <= 1e-13 * linalg.frobenius_norm(w)
