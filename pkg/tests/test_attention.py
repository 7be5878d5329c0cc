import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hifanet import attention as att
from hifanet import numerics as nx
from hifanet.attention import HiFANetConfig, ObservationTensor
from hifanet.numerics import ParamStore


def P(params, name):
    return params[name].data


def np_softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def oracle_lin(params, name, x):
    return x @ P(params, f"{name}.w") + P(params, f"{name}.b")


def oracle_ffn(params, prefix, x):
    return oracle_lin(params, f"{prefix}.ffn2", np.maximum(oracle_lin(params, f"{prefix}.ffn1", x), 0.0))


def oracle_patch(patch, params, cfg):
    """Pixel-by-pixel transcription: w = softmax(Q_p K / sqrt(d1)), f = FFN(sum w V) + f_p."""
    k = patch.shape[0]
    pix = patch.reshape(k * k, -1)
    f_p = patch[k // 2, k // 2]
    K = np.array([oracle_lin(params, "patch.k", x) for x in pix])
    V = np.array([oracle_lin(params, "patch.v", x) for x in pix])
    q = oracle_lin(params, "patch.q", f_p)
    dv = cfg.d // cfg.heads
    heads = []
    for h in range(cfg.heads):
        ks = slice(h * cfg.d1, (h + 1) * cfg.d1)
        logits = np.array([q[ks] @ K[j, ks] for j in range(k * k)]) / math.sqrt(cfg.d1)
        w = np_softmax(logits)
        heads.append(sum(w[j] * V[j, h * dv : (h + 1) * dv] for j in range(k * k)))
    return oracle_ffn(params, "patch", np.concatenate(heads)) + f_p


def oracle_self_attention(x, params, prefix, cfg, key_width, key_extra=None):
    L = len(x)
    K = np.array([oracle_lin(params, f"{prefix}.k", r) for r in x])
    if key_extra is not None:
        K = K + key_extra
    Q = np.array([oracle_lin(params, f"{prefix}.q", r) for r in x])
    V = np.array([oracle_lin(params, f"{prefix}.v", r) for r in x])
    dv = cfg.d // cfg.heads
    out = np.zeros((L, cfg.d))
    for i in range(L):
        for h in range(cfg.heads):
            ks = slice(h * key_width, (h + 1) * key_width)
            logits = np.array([Q[i, ks] @ K[j, ks] for j in range(L)]) / math.sqrt(key_width)
            w = np_softmax(logits)
            out[i, h * dv : (h + 1) * dv] = sum(w[j] * V[j, h * dv : (h + 1) * dv] for j in range(L))
    return np.array([oracle_ffn(params, prefix, r) for r in out])


def oracle_prior(coords, params):
    M = len(coords)
    rows = []
    for i in range(M):
        acc = 0.0
        for j in range(M):
            h = np.maximum(oracle_lin(params, "prior.fc1", coords[i] - coords[j]), 0.0)
            acc = acc + oracle_lin(params, "prior.fc2", h)
        rows.append(acc / M)
    return np.array(rows)


def oracle_classify(x, params):
    h = np.maximum(oracle_lin(params, "head.fc1", x), 0.0)
    h = np.maximum(oracle_lin(params, "head.fc2", h), 0.0)
    return oracle_lin(params, "head.fc3", h)


def oracle_forward(obs, params, cfg):
    M, N = obs.features.shape[:2]
    feats = obs.features.astype(np.float64)
    inst = np.array([[oracle_patch(feats[i, n], params, cfg) for n in range(N)] for i in range(M)])
    pts = np.array([oracle_self_attention(inst[i], params, "instance", cfg, cfg.d1).mean(axis=0) for i in range(M)])
    mixed = oracle_self_attention(pts, params, "interpoint", cfg, cfg.d2, oracle_prior(obs.coords, params))
    return oracle_classify(mixed, params)


def random_obs(cfg, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    M, N, k, d = cfg.m, cfg.n, cfg.k, cfg.d
    return ObservationTensor(
        features=(rng.normal(size=(M, N, k, k, d)) * scale).astype(np.float32),
        coords=rng.normal(size=(M, 3)) * 3,
        labels=rng.integers(0, cfg.class_count, M).astype(np.uint16),
        frame_ids=rng.integers(0, 50, (M, N)).astype(np.uint32),
        patch_labels=rng.integers(0, cfg.class_count, (M, N, k, k)).astype(np.uint16),
    )


def randomize_biases(params, seed):
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if name.endswith(".b"):
            t.data[...] = rng.normal(scale=0.3, size=t.shape)
    return params


SMALL = HiFANetConfig(m=3, n=2, k=3, d=8, d1=4, heads=2, d2=4, class_count=4, ffn_width=6,
                      prior_hidden=5, head_width=7)


class TestConfig:
    def test_defaults(self):
        cfg = HiFANetConfig()
        assert (cfg.m, cfg.n, cfg.k, cfg.d, cfg.d1, cfg.heads, cfg.d2, cfg.ffn_width) == (10, 5, 5, 256, 64, 4, 64, 256)

    @pytest.mark.parametrize("change", [dict(k=4), dict(m=0), dict(d1=3, heads=3, d=8), dict(heads=3, d=8, d1=2)])
    def test_invalid(self, change):
        with pytest.raises(ValueError):
            HiFANetConfig(**{**dict(d=8, d1=2, d2=2, heads=2), **change})

    def test_json_round_trip(self):
        assert HiFANetConfig.from_json(SMALL.to_json()) == SMALL


class TestPatchAttention:
    def test_matches_stage_oracle(self):
        cfg = SMALL
        params = randomize_biases(att.init_params(cfg, seed=11), 11)
        patch = np.random.default_rng(11).normal(size=(3, 3, 8))
        out = att.patch_attention(patch, params, cfg).data
        np.testing.assert_allclose(out, oracle_patch(patch, params, cfg), rtol=0, atol=1e-10)

    def test_batched_matches_oracle(self):
        cfg = SMALL.with_(k=5)
        params = randomize_biases(att.init_params(cfg, seed=2), 2)
        patches = np.random.default_rng(2).normal(size=(2, 3, 5, 5, 8))
        out = att.patch_attention(patches, params, cfg).data
        for a in range(2):
            for b in range(3):
                np.testing.assert_allclose(out[a, b], oracle_patch(patches[a, b], params, cfg), atol=1e-10)

    def test_shortcut_when_value_and_ffn_are_zero(self):
        params = randomize_biases(att.init_params(SMALL, seed=4), 4)
        for name in params:
            if name.startswith(("patch.v.", "patch.ffn")):
                params[name].data[...] = 0.0
        patch = np.random.default_rng(4).normal(size=(2, 3, 3, 8))
        out = att.patch_attention(patch, params, SMALL).data
        assert np.array_equal(out, patch[:, 1, 1, :])

    def test_uniform_weights_give_patch_mean(self):
        d = SMALL.d
        cfg = SMALL.with_(ffn_width=2 * d)
        params = att.init_params(cfg, seed=0)
        for name in ("patch.k.w", "patch.q.w"):
            params[name].data[...] = 0.0
        params["patch.v.w"].data[...] = np.eye(d)
        eye = np.eye(d)
        params["patch.ffn1.w"].data[...] = np.hstack([eye, -eye])  # relu(x) - relu(-x) = x
        params["patch.ffn2.w"].data[...] = np.vstack([eye, -eye])
        patch = np.random.default_rng(1).normal(size=(3, 3, d))
        out = att.patch_attention(patch, params, cfg).data
        np.testing.assert_allclose(out, patch.reshape(9, d).mean(axis=0) + patch[1, 1], atol=1e-12)

    def test_weights_sum_to_one(self):
        params = att.init_params(SMALL, seed=6)
        patch = np.random.default_rng(6).normal(size=(4, 3, 3, 8)) * 5
        _, w = att.patch_attention(patch, params, SMALL, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_shape_errors(self):
        params = att.init_params(SMALL, seed=0)
        with pytest.raises(nx.ShapeMismatch):
            att.patch_attention(np.zeros((3, 3, 7)), params, SMALL)
        with pytest.raises(nx.ShapeMismatch):
            att.patch_attention(np.zeros((3, 5, 8)), params, SMALL)

    def test_gradient_check(self):
        params = randomize_biases(att.init_params(SMALL, seed=3), 3)
        patch = np.random.default_rng(3).normal(size=(2, 3, 3, 8))
        R = np.random.default_rng(4).normal(size=(2, 8))
        names = [n for n in params if n.startswith("patch.")]
        sub = ParamStore({n: params[n] for n in names})
        err = nx.finite_difference_check(lambda q: nx.sum_all(nx.mul(att.patch_attention(patch, q, SMALL), R)), sub)
        assert err < 1e-4


class TestInstanceAttention:
    def test_single_instance_is_ffn_of_value(self):
        params = randomize_biases(att.init_params(SMALL, seed=1), 1)
        x = np.random.default_rng(1).normal(size=(4, 1, 8))
        out = att.instance_attention(x, params, SMALL).data
        ref = oracle_ffn(params, "instance", oracle_lin(params, "instance.v", x[:, 0]))
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_duplicates_match_single(self):
        params = randomize_biases(att.init_params(SMALL, seed=2), 2)
        x = np.random.default_rng(2).normal(size=(3, 1, 8))
        one = att.instance_attention(x, params, SMALL).data
        many = att.instance_attention(np.repeat(x, 5, axis=1), params, SMALL).data
        np.testing.assert_allclose(many, one, atol=1e-12)

    def test_matches_oracle(self):
        params = randomize_biases(att.init_params(SMALL, seed=5), 5)
        x = np.random.default_rng(5).normal(size=(2, 4, 8))
        out = att.instance_attention(x, params, SMALL).data
        for i in range(2):
            ref = oracle_self_attention(x[i], params, "instance", SMALL, SMALL.d1).mean(axis=0)
            np.testing.assert_allclose(out[i], ref, atol=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        params = att.init_params(SMALL, seed=seed)
        x = rng.normal(size=(3, 5, 8))
        perm = rng.permutation(5)
        a = att.instance_attention(x, params, SMALL).data
        b = att.instance_attention(x[:, perm], params, SMALL).data
        assert np.abs(a - b).max() < 1e-12


class TestStructuralPrior:
    def test_coincident_points(self):
        params = randomize_biases(att.init_params(SMALL, seed=0), 0)
        out = att.structural_prior(np.tile([1.0, 2.0, 3.0], (4, 1)), params, SMALL).data
        assert np.all(out == out[0])

    def test_matches_double_loop(self):
        params = randomize_biases(att.init_params(SMALL, seed=8), 8)
        coords = np.random.default_rng(8).normal(size=(4, 3))
        out = att.structural_prior(coords, params, SMALL).data
        np.testing.assert_allclose(out, oracle_prior(coords, params), rtol=0, atol=1e-12)

    def test_shape(self):
        params = att.init_params(SMALL, seed=0)
        out = att.structural_prior(np.zeros((2, 5, 3)), params, SMALL)
        assert out.shape == (2, 5, SMALL.heads * SMALL.d2)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_translation(self, shift):
        params = randomize_biases(att.init_params(SMALL, seed=9), 9)
        coords = np.random.default_rng(9).normal(size=(5, 3))
        a = att.structural_prior(coords, params, SMALL).data
        b = att.structural_prior(coords + np.array(shift), params, SMALL).data
        # the differences are recomputed in floating point, so equality is up to rounding
        assert np.abs(a - b).max() < 1e-12 * max(1.0, np.abs(shift).max())


class TestInterpointAttention:
    def test_zero_prior_is_plain_attention(self):
        params = att.init_params(SMALL, seed=3)
        for name in ("prior.fc1.w", "prior.fc2.w"):
            params[name].data[...] = 0.0
        x = np.random.default_rng(3).normal(size=(4, 8))
        c = np.random.default_rng(4).normal(size=(4, 3))
        a = att.interpoint_attention(x, c, params, SMALL).data
        b = att.interpoint_attention(x, c, params, SMALL, use_prior=False).data
        assert np.array_equal(a, b)

    def test_single_point(self):
        params = randomize_biases(att.init_params(SMALL, seed=4), 4)
        x = np.random.default_rng(4).normal(size=(1, 8))
        out = att.interpoint_attention(x, np.zeros((1, 3)), params, SMALL).data
        ref = oracle_ffn(params, "interpoint", oracle_lin(params, "interpoint.v", x))
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_matches_oracle(self):
        params = randomize_biases(att.init_params(SMALL, seed=12), 12)
        rng = np.random.default_rng(12)
        x, c = rng.normal(size=(3, 8)), rng.normal(size=(3, 3))
        out = att.interpoint_attention(x, c, params, SMALL).data
        ref = oracle_self_attention(x, params, "interpoint", SMALL, SMALL.d2, oracle_prior(c, params))
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        params = att.init_params(SMALL, seed=5)
        rng = np.random.default_rng(5)
        _, w = att.interpoint_attention(rng.normal(size=(2, 6, 8)) * 4, rng.normal(size=(2, 6, 3)),
                                        params, SMALL, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_coords_must_match(self):
        params = att.init_params(SMALL, seed=0)
        with pytest.raises(nx.ShapeMismatch):
            att.interpoint_attention(np.zeros((3, 8)), np.zeros((4, 3)), params, SMALL)


class TestClassify:
    def test_zero_input_zero_logits(self):
        params = att.init_params(SMALL, seed=0)
        assert np.array_equal(att.classify(np.zeros((3, 8)), params).data, np.zeros((3, 4)))

    def test_crafted_sum_logit(self):
        cfg = SMALL.with_(class_count=2, head_width=1)
        params = att.init_params(cfg, seed=0)
        params["head.fc1.w"].data[...] = 1.0  # h = relu(sum x)
        params["head.fc2.w"].data[...] = 1.0
        params["head.fc3.w"].data[...] = [[1.0, 0.0]]
        x = np.array([[0.5, 1.0, 2.0, 0.0, 0.25, 0.0, 1.0, 0.25]])
        np.testing.assert_array_equal(att.classify(x, params).data, [[5.0, 0.0]])

    def test_matches_loop(self):
        params = randomize_biases(att.init_params(SMALL, seed=7), 7)
        x = np.random.default_rng(7).normal(size=(5, 8))
        np.testing.assert_allclose(att.classify(x, params).data, oracle_classify(x, params), atol=1e-12)


class TestForward:
    def test_degenerate_chain(self):
        cfg = HiFANetConfig(m=1, n=1, k=1, d=8, d1=4, heads=2, d2=4, class_count=3, ffn_width=8)
        params = att.init_params(cfg, seed=0)
        logits = att.hifanet_forward(random_obs(cfg, 0), params, cfg).data
        assert logits.shape == (1, 3) and np.all(np.isfinite(logits))

    def test_matches_stage_oracles(self):
        cfg = SMALL.with_(m=4, n=3)
        params = randomize_biases(att.init_params(cfg, seed=5), 5)
        obs = random_obs(cfg, 5)
        np.testing.assert_allclose(att.hifanet_forward(obs, params, cfg).data, oracle_forward(obs, params, cfg),
                                   rtol=0, atol=1e-10)

    def test_default_config_matches_stage_oracles(self):
        cfg = HiFANetConfig(m=2, n=2)  # default widths, fewer points for speed
        params = att.init_params(cfg, seed=5)
        obs = random_obs(cfg, 5)
        np.testing.assert_allclose(att.hifanet_forward(obs, params, cfg).data, oracle_forward(obs, params, cfg),
                                   rtol=0, atol=1e-9)

    def test_batch_axis(self):
        params = att.init_params(SMALL, seed=1)
        groups = [random_obs(SMALL, s) for s in range(3)]
        batched = att.hifanet_forward(att.stack_observations(groups), params, SMALL).data
        for i, g in enumerate(groups):
            np.testing.assert_allclose(batched[i], att.hifanet_forward(g, params, SMALL).data, atol=1e-12)

    def test_frame_permutation(self):
        params = randomize_biases(att.init_params(SMALL, seed=2), 2)
        obs = random_obs(SMALL, 2)
        perm = [1, 0]
        swapped = ObservationTensor(obs.features[:, perm], obs.coords, obs.labels,
                                    obs.frame_ids[:, perm], obs.patch_labels[:, perm])
        a = att.hifanet_forward(obs, params, SMALL).data
        b = att.hifanet_forward(swapped, params, SMALL).data
        assert np.abs(a - b).max() < 1e-12

    def test_width_mismatch(self):
        params = att.init_params(SMALL, seed=0)
        with pytest.raises(nx.ShapeMismatch):
            att.hifanet_forward(random_obs(SMALL.with_(d=6, d1=3, d2=3), 0), params, SMALL)


class TestParameterCount:
    def test_empty(self):
        assert att.count_parameters(ParamStore()) == 0

    def test_single_layer(self):
        p = ParamStore()
        p["w"], p["b"] = np.zeros((256, 256)), np.zeros(256)
        assert att.count_parameters(p) == 65_792

    def test_default_in_range(self):
        params = att.init_params(HiFANetConfig(class_count=14), seed=0)
        total = att.count_parameters(params)
        breakdown = att.parameter_breakdown(params)
        print("parameter breakdown:", breakdown, "total:", total)
        assert 1_000_000 <= total <= 5_000_000
        assert sum(breakdown.values()) == total

    def test_default_count_by_hand(self):
        d, hk, f, C = 256, 256, 256, 14
        block = 2 * (d * hk + hk) + (d * d + d) + (d * f + f) + (f * d + d)
        prior = (3 * 128 + 128) + (128 * hk + hk)
        head = (d * 512 + 512) + (512 * 512 + 512) + (512 * C + C)
        params = att.init_params(HiFANetConfig(class_count=C), seed=0)
        assert att.count_parameters(params) == 3 * block + prior + head


class TestObservationTensor:
    def test_inconsistent_shapes(self):
        obs = random_obs(SMALL, 0)
        with pytest.raises(nx.ShapeMismatch):
            ObservationTensor(obs.features, obs.coords[:2], obs.labels, obs.frame_ids, obs.patch_labels)

    def test_non_finite_coords(self):
        obs = random_obs(SMALL, 0)
        coords = obs.coords.copy()
        coords[0, 0] = np.nan
        with pytest.raises(ValueError):
            ObservationTensor(obs.features, coords, obs.labels, obs.frame_ids, obs.patch_labels)

    def test_init_is_glorot(self):
        params = att.init_params(SMALL, seed=0)
        w = params["instance.k.w"].data
        a = math.sqrt(6.0 / (8 + 8))
        assert np.abs(w).max() <= a and np.abs(w).max() > 0.5 * a
        assert not params["instance.k.b"].data.any()
