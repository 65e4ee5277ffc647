import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmdistill.attention import ActivationTensor, PyramidLevel
from mmdistill.autograd import Graph, fd_gradient
from mmdistill.geometry import IGNORE, NEGATIVE, POSITIVE
from mmdistill.losses import LossConfig, focal_loss, kl_temperature, mta_loss, total_loss
from mmdistill.tensor import Tensor

LEVEL_SHAPES = {"P3": (6, 6), "P4": (3, 3), "P5": (2, 2)}


def np_focal(p, labels, alpha, gamma):
    """Focal loss written from its definition."""
    total = 0.0
    for pi, y in zip(p, labels):
        if y == IGNORE:
            continue
        pt = pi if y == POSITIVE else 1 - pi
        total += -alpha * (1 - pt) ** gamma * np.log(pt)
    return total / max(1, sum(1 for y in labels if y == POSITIVE))


def np_softmax(x, t):
    z = np.exp((x - x.max()) / t)
    return z / z.sum()


def np_kl(s, t, temp):
    p, q = np_softmax(s, temp), np_softmax(t, temp)
    return float(np.sum(p * np.log(p / q)))


def np_attention(a, r):
    q = np.abs(a).mean(axis=0) ** r
    return q / max(np.linalg.norm(q), 1e-12)


def feats(rng, c=3, scale=1.0):
    return {k: ActivationTensor(PyramidLevel[k], Tensor(scale * rng.normal(size=(c, *hw)))) for k, hw in LEVEL_SHAPES.items()}


class TestDefaults:
    def test_published_constants(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.gamma) == (0.25, 2.0)
        assert (cfg.r, cfg.temperature, cfg.beta) == (2.0, 9.0, 0.5)
        assert (cfg.delta, cfg.omega) == (1.0, 0.05)

    def test_validation(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=1.5)
        with pytest.raises(ValueError):
            LossConfig(temperature=0.0)


class TestFocal:
    def test_matches_definition(self, rng):
        p = rng.uniform(0.01, 0.99, size=20)
        labels = rng.choice([POSITIVE, NEGATIVE, IGNORE], size=20)
        assert focal_loss(p, labels) == pytest.approx(np_focal(p, labels, 0.25, 2.0), rel=1e-12)

    def test_hand_value(self):
        # one positive at p=0.5: 0.25 * 0.25 * ln 2
        assert focal_loss([0.5], [POSITIVE]) == pytest.approx(0.0625 * np.log(2))

    def test_gamma_zero_alpha_one_is_cross_entropy(self):
        rng = np.random.default_rng(5)
        cfg = LossConfig(alpha=1.0, gamma=0.0)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            p = rng.uniform(1e-6, 1 - 1e-6, size=n)
            labels = rng.choice([POSITIVE, NEGATIVE, IGNORE], size=n)
            y = labels == POSITIVE
            kept = labels != IGNORE
            ce = -np.sum(np.where(y, np.log(p), np.log1p(-p))[kept]) / max(1, y.sum())
            assert focal_loss(p, labels, cfg) == pytest.approx(ce, rel=1e-12, abs=1e-12)

    def test_gamma_zero_is_weighted_ce(self):
        p = np.array([0.8, 0.3])
        got = focal_loss(p, [POSITIVE, NEGATIVE], LossConfig(gamma=0.0))
        assert got == pytest.approx(-0.25 * (np.log(0.8) + np.log(0.7)))

    def test_ignored_anchors_do_not_count(self):
        assert focal_loss([0.3, 0.9], [POSITIVE, IGNORE]) == focal_loss([0.3], [POSITIVE])

    def test_confident_correct_is_near_zero(self):
        assert focal_loss([1 - 1e-9, 1e-9], [POSITIVE, NEGATIVE]) < 1e-15

    def test_no_positives_normalizer_one(self):
        assert focal_loss([0.2], [NEGATIVE]) == pytest.approx(np_focal([0.2], [NEGATIVE], 0.25, 2.0))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            focal_loss([0.5, 0.5], [POSITIVE])

    def test_gradient_matches_fd(self, rng):
        logits = rng.normal(size=8)
        labels = np.array([POSITIVE, NEGATIVE, NEGATIVE, IGNORE, POSITIVE, NEGATIVE, NEGATIVE, NEGATIVE])
        f = lambda z: focal_loss(1 / (1 + np.exp(-z.data)), labels)  # noqa: E731
        from mmdistill.losses import focal_inputs, focal_node

        g = Graph()
        x = g.input("z", (8,))
        is_pos, keep, norm = focal_inputs(labels)
        g.output("l", focal_node(g, g.sigmoid(x), g.constant(is_pos), g.constant(keep), g.constant(norm), LossConfig()))
        g.forward({"z": logits})
        analytic = g.backward("l")["z"].data
        np.testing.assert_allclose(analytic, fd_gradient(f, logits, 1e-6).data, rtol=1e-6, atol=1e-10)


class TestKL:
    @given(st.integers(0, 10**6))
    def test_nonnegative_and_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s, t = rng.normal(size=9) * 3, rng.normal(size=9) * 3
        v = kl_temperature(s, t, 9.0)
        assert v >= 0
        assert v == pytest.approx(np_kl(s, t, 9.0), rel=1e-9, abs=1e-14)

    def test_hand_value(self):
        e = np.e
        assert kl_temperature([1.0, 0.0], [0.0, 1.0], 1.0) == pytest.approx(e / (e + 1) - 1 / (e + 1), abs=1e-12)

    def test_huge_temperature_vanishes(self, rng):
        assert kl_temperature(rng.normal(size=10) * 5, rng.normal(size=10) * 5, 1e6) < 1e-9

    def test_zero_for_equal(self, rng):
        s = rng.normal(size=12)
        assert abs(kl_temperature(s, s, 9.0)) < 1e-12

    def test_shift_invariance(self, rng):
        s, t = rng.normal(size=6), rng.normal(size=6)
        assert kl_temperature(s + 5.0, t, 2.0) == pytest.approx(kl_temperature(s, t, 2.0), abs=1e-12)

    def test_temperature_flattens(self, rng):
        s, t = rng.normal(size=6) * 4, rng.normal(size=6) * 4
        # KL between tempered softmaxes vanishes like 1/T^2
        assert kl_temperature(s, t, 1e3) < 1e-4 * kl_temperature(s, t, 1.0)
        assert kl_temperature(s, t, 1e4) == pytest.approx(kl_temperature(s, t, 1e3) / 100, rel=0.05)

    def test_errors(self):
        with pytest.raises(ValueError):
            kl_temperature([1.0, 2.0], [1.0], 1.0)
        with pytest.raises(ValueError):
            kl_temperature([1.0, 2.0], [1.0, 3.0], 0.0)


class TestMTA:
    def test_matches_numpy_pipeline(self, rng):
        cfg = LossConfig()
        s, t1, t2 = feats(rng), feats(rng), feats(rng)
        expect = 0.0
        for lv in LEVEL_SHAPES:
            qs = np_attention(s[lv].values.data, cfg.r).ravel()
            qt = np_attention(t1[lv].values.data, cfg.r) * np_attention(t2[lv].values.data, cfg.r)
            qt = (qt / np.linalg.norm(qt)).ravel()
            expect += np_kl(qs, qt, cfg.temperature)
        assert mta_loss(s, [t1, t2], cfg) == pytest.approx(cfg.beta * expect, rel=1e-9)

    def test_teacher_scale_invariance(self, rng):
        s, t1, t2 = feats(rng), feats(rng), feats(rng)
        base = mta_loss(s, [t1, t2])
        t2s = {k: ActivationTensor(v.level, Tensor(v.values.data * 7.3)) for k, v in t2.items()}
        assert abs(mta_loss(s, [t1, t2s]) - base) < 1e-12

    def test_student_scale_invariance(self, rng):
        s, t = feats(rng), feats(rng)
        s2 = {k: ActivationTensor(v.level, Tensor(v.values.data * 0.2)) for k, v in s.items()}
        assert mta_loss(s2, [t]) == pytest.approx(mta_loss(s, [t]), abs=1e-12)

    def test_zero_when_student_matches(self, rng):
        t = feats(rng)
        assert abs(mta_loss(t, [t])) < 1e-12

    @given(st.integers(0, 10**6))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        assert mta_loss(feats(rng), [feats(rng), feats(rng, c=2)]) >= 0

    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0, 4.0])
    def test_single_teacher_equal_to_student(self, rng, r):
        s = feats(rng)
        assert abs(mta_loss(s, [s], LossConfig(r=r))) < 1e-12

    def test_shape_mismatch(self, rng):
        s = feats(rng)
        t = dict(feats(rng))
        t["P5"] = ActivationTensor(PyramidLevel.P5, Tensor(rng.normal(size=(3, 3, 3))))
        with pytest.raises(ValueError):
            mta_loss(s, [t])


class TestTotal:
    def test_paper_weights(self):
        assert total_loss(0.0, 0.0) == 0.0
        assert total_loss(1.0, 2.0) == pytest.approx(1.1)
        assert total_loss(0.7, 123.0, LossConfig(omega=0.0)) == 0.7

    def test_weighted_sum(self):
        assert total_loss(2.0, 3.0, LossConfig(delta=0.5, omega=2.0)) == 7.0

    def test_non_finite(self):
        with pytest.raises(ValueError):
            total_loss(float("nan"), 1.0)
