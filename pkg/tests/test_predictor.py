import math

import numpy as np
import pytest

from comerge.errors import DomainError, ShapeError
from comerge.layout import LayoutDescriptor, TokenSequence
from comerge.maskgen import ConfidenceMap, build_mask, group_confidence
from comerge.predictor import (
    PredictorParams,
    RankingPairSet,
    _forward_cache,
    backprop,
    make_pairs,
    mse_loss,
    predictor_forward,
    ranking_loss,
    ranking_loss_grad,
)
from comerge.tensors import make_rng

_PARAM_FIELDS = ("proj_w", "proj_b", "wq", "wk", "wv", "conv_w", "conv_b")


def random_setup(seed, frames=1, grid=(4, 4), channels=4, latent=4, batch=1):
    rng = make_rng(seed)
    h, w = grid
    layout = LayoutDescriptor(frames, 1, h * w, 1)
    tokens = rng.normal(size=(batch, layout.total_tokens, channels)).astype(np.float32)
    seq = TokenSequence(layout=layout, tokens=tokens)
    params = PredictorParams.random(channels, latent, rng=rng)
    return seq, params, rng


def scalar_forward_oracle(seq, params, grid):
    """Layer-by-layer loop re-implementation (single sample, single frame)."""
    layout = seq.layout
    h, w = grid
    x = seq.tokens[0, layout.image_token_ids()].astype(np.float64)
    p = x.shape[0]
    latent = params.latent
    z0 = np.array([[sum(x[i, c] * params.proj_w[c, l] for c in range(x.shape[1]))
                    + params.proj_b[l] for l in range(latent)] for i in range(p)])
    q = z0 @ params.wq
    k = z0 @ params.wk
    v = z0 @ params.wv
    scale = 1.0 / math.sqrt(latent)
    z1 = np.zeros_like(z0)
    for i in range(p):
        logits = [scale * float(q[i] @ k[j]) for j in range(p)]
        m = max(logits)
        weights = [math.exp(val - m) for val in logits]
        z = sum(weights)
        z1[i] = z0[i] + sum((weights[j] / z) * v[j] for j in range(p))
    zg = z1.reshape(h, w, latent)
    out = np.zeros((h, w))
    for y in range(h):
        for xx in range(w):
            acc = float(params.conv_b)
            for dy in range(3):
                for dx in range(3):
                    sy, sx = y + dy - 1, xx + dx - 1
                    if 0 <= sy < h and 0 <= sx < w:
                        acc += float(zg[sy, sx] @ params.conv_w[dy, dx])
            out[y, xx] = acc
    return out.reshape(-1)


def fd_param_grads(seq, params, grid, objective, h=1e-5):
    """Central finite differences of a scalar objective over every block."""
    grads = {}
    for name in _PARAM_FIELDS:
        base = getattr(params, name)
        grad = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = base[idx]
            base[idx] = orig + h
            up = objective(params)
            base[idx] = orig - h
            down = objective(params)
            base[idx] = orig
            grad[idx] = (up - down) / (2 * h)
            it.iternext()
        grads[name] = grad
    return grads


class TestForward:
    def test_zero_weights_constant_output(self):
        seq, params, _ = random_setup(0)
        for name in _PARAM_FIELDS:
            getattr(params, name)[...] = 0.0
        params.conv_b[...] = 1.5
        conf = predictor_forward(seq, params, (4, 4))
        layout = seq.layout
        assert np.allclose(conf.values[:, layout.image_token_ids()], 1.5)
        assert np.all(np.isposinf(conf.values[:, layout.special_token_ids()]))

    def test_one_by_one_grid_is_linear(self):
        seq, params, _ = random_setup(1, grid=(1, 1))
        layout = seq.layout
        x = seq.tokens[0, layout.image_token_ids()[0]].astype(np.float64)
        z0 = x @ params.proj_w + params.proj_b
        z1 = z0 + z0 @ params.wv  # single-token attention weight is 1
        want = float(z1 @ params.conv_w[1, 1] + params.conv_b)
        conf = predictor_forward(seq, params, (1, 1))
        got = float(conf.values[0, layout.image_token_ids()[0]])
        assert got == pytest.approx(want, rel=1e-5)

    def test_matches_scalar_oracle(self):
        seq, params, _ = random_setup(2)
        conf = predictor_forward(seq, params, (4, 4))
        got = conf.values[0, seq.layout.image_token_ids()]
        want = scalar_forward_oracle(seq, params, (4, 4))
        assert np.abs(got - want.astype(np.float32)).max() < 1e-5

    def test_grid_mismatch_rejected(self):
        seq, params, _ = random_setup(3)
        with pytest.raises(ShapeError):
            predictor_forward(seq, params, (3, 4))

    def test_source_is_predictor(self):
        seq, params, _ = random_setup(4)
        assert predictor_forward(seq, params, (4, 4)).source == "predictor"


class TestRankingLoss:
    def test_zero_margin_is_ln2(self):
        pairs = RankingPairSet(pairs=np.array([[0, 1]]))
        assert ranking_loss(np.array([0.3, 0.3]), pairs) == pytest.approx(math.log(2.0))

    def test_saturated_correct_order(self):
        pairs = RankingPairSet(pairs=np.array([[0, 1]]))
        assert ranking_loss(np.array([20.0, 0.0]), pairs) < 1e-8

    def test_matches_direct_summation(self):
        rng = make_rng(5)
        values = rng.normal(size=4)
        pairs = RankingPairSet(pairs=np.array([[0, 1], [2, 3], [3, 0]]))
        want = np.mean([math.log1p(math.exp(values[j] - values[i]))
                        for i, j in pairs.pairs])
        assert ranking_loss(values, pairs) == pytest.approx(want, rel=1e-12)

    def test_huge_margin_stays_finite(self):
        pairs = RankingPairSet(pairs=np.array([[0, 1]]))
        assert math.isfinite(ranking_loss(np.array([-500.0, 500.0]), pairs))

    def test_empty_pairs_rejected(self):
        with pytest.raises(DomainError):
            ranking_loss(np.zeros(3), RankingPairSet(pairs=np.zeros((0, 2))))

    def test_shift_invariance(self):
        rng = make_rng(6)
        values = rng.normal(size=6)
        pairs = make_pairs(rng.normal(size=6), 32, rng)
        a = ranking_loss(values, pairs)
        b = ranking_loss(values + 123.45, pairs)
        assert a == pytest.approx(b, rel=1e-9)

    def test_nonnegative(self):
        rng = make_rng(7)
        for _ in range(20):
            values = rng.normal(size=8)
            pairs = make_pairs(rng.normal(size=8), 40, rng)
            assert ranking_loss(values, pairs) >= 0.0


class TestRankingGrad:
    def test_zero_margin_half_over_pairs(self):
        pairs = RankingPairSet(pairs=np.array([[0, 1], [2, 3]]))
        grad = ranking_loss_grad(np.zeros(4), pairs)
        assert np.allclose(np.abs(grad), 0.25)  # 0.5 / |P|, |P| = 2

    def test_saturated_pair_vanishes(self):
        pairs = RankingPairSet(pairs=np.array([[0, 1]]))
        grad = ranking_loss_grad(np.array([20.0, 0.0]), pairs)
        assert np.abs(grad).max() < 1e-8

    def test_matches_finite_differences(self):
        rng = make_rng(8)
        for _ in range(20):
            values = rng.normal(size=8)
            pairs = make_pairs(rng.normal(size=8), 40, rng)
            grad = ranking_loss_grad(values, pairs)
            h = 1e-3
            for idx in range(8):
                up = values.copy(); up[idx] += h
                down = values.copy(); down[idx] -= h
                fd = (ranking_loss(up, pairs) - ranking_loss(down, pairs)) / (2 * h)
                assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestMseLoss:
    def test_identical_is_zero(self):
        loss, grad = mse_loss(np.ones(5), np.ones(5))
        assert loss == 0.0 and np.all(grad == 0)

    def test_offset_by_one(self):
        loss, _ = mse_loss(np.ones(5) + 1.0, np.ones(5))
        assert loss == pytest.approx(1.0)

    def test_grad_matches_fd(self):
        rng = make_rng(9)
        pred = rng.normal(size=6)
        teacher = rng.normal(size=6)
        _, grad = mse_loss(pred, teacher)
        h = 1e-6
        for idx in range(6):
            up = pred.copy(); up[idx] += h
            down = pred.copy(); down[idx] -= h
            fd = (mse_loss(up, teacher)[0] - mse_loss(down, teacher)[0]) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros(3), np.zeros(4))


class TestPairSet:
    def test_rejects_self_pairs(self):
        with pytest.raises(DomainError):
            RankingPairSet(pairs=np.array([[1, 1]]))

    def test_rejects_duplicates(self):
        with pytest.raises(DomainError):
            RankingPairSet(pairs=np.array([[0, 1], [0, 1]]))

    def test_sampled_pairs_follow_teacher_order(self):
        rng = make_rng(10)
        teacher = rng.normal(size=16)
        pairs = make_pairs(teacher, 100, rng)
        assert np.all(teacher[pairs.pairs[:, 0]] > teacher[pairs.pairs[:, 1]])


class TestBackprop:
    def test_zero_upstream_zero_grads(self):
        seq, params, _ = random_setup(11)
        grads = backprop(seq, params, (4, 4), np.zeros((1, 16)))
        for name in _PARAM_FIELDS:
            assert np.all(getattr(grads, name) == 0)

    def test_conv_bias_grad_is_upstream_sum(self):
        seq, params, rng = random_setup(12)
        upstream = rng.normal(size=(1, 16))
        grads = backprop(seq, params, (4, 4), upstream)
        assert float(grads.conv_b) == pytest.approx(float(upstream.sum()), rel=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_every_block_matches_fd_linear_probe(self, seed):
        seq, params, rng = random_setup(100 + seed, frames=2, grid=(3, 3))
        probe = rng.normal(size=(1, 18))

        def objective(p):
            cache = _forward_cache(seq, p, (3, 3))
            return float((cache["conf"].reshape(1, -1) * probe).sum())

        grads = backprop(seq, params, (3, 3), probe)
        fd = fd_param_grads(seq, params, (3, 3), objective)
        for name in _PARAM_FIELDS:
            got = np.asarray(getattr(grads, name), dtype=np.float64)
            want = fd[name]
            rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)
            assert rel < 1e-3, f"{name}: rel={rel}"

    def test_end_to_end_ranking_objective_fd(self):
        seq, params, rng = random_setup(13)
        teacher = rng.normal(size=16)
        pair_rng = make_rng(99)
        pairs = make_pairs(teacher, 64, pair_rng)

        def objective(p):
            cache = _forward_cache(seq, p, (4, 4))
            return ranking_loss(cache["conf"].reshape(-1), pairs)

        cache = _forward_cache(seq, params, (4, 4))
        upstream = ranking_loss_grad(cache["conf"].reshape(-1), pairs)[None, :]
        grads = backprop(seq, params, (4, 4), upstream, cache=cache)
        fd = fd_param_grads(seq, params, (4, 4), objective)
        for name in _PARAM_FIELDS:
            got = np.asarray(getattr(grads, name), dtype=np.float64)
            rel = np.linalg.norm(got - fd[name]) / max(np.linalg.norm(fd[name]), 1e-12)
            assert rel < 1e-3, f"{name}: rel={rel}"


class TestMaskInvariance:
    def test_mask_invariant_under_monotone_transform(self):
        seq, params, _ = random_setup(14, grid=(4, 4))
        layout = seq.layout
        conf = predictor_forward(seq, params, (4, 4))
        transformed = ConfidenceMap(
            values=np.where(np.isposinf(conf.values), np.inf,
                            3.0 * conf.values + 7.0).astype(np.float32),
            source=conf.source,
        )
        a = build_mask(group_confidence(conf, layout), 0.5, layout)
        b = build_mask(group_confidence(transformed, layout), 0.5, layout)
        assert np.array_equal(a.flags, b.flags)


class TestParamsIo:
    def test_save_load_roundtrip(self, tmp_path):
        _, params, _ = random_setup(15)
        path = tmp_path / "predictor.come"
        params.save(path)
        loaded = PredictorParams.load(path)
        for name in _PARAM_FIELDS:
            a = getattr(params, name).astype(np.float32)
            b = getattr(loaded, name).astype(np.float32)
            assert np.array_equal(a, b)
