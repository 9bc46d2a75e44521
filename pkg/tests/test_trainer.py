import math

import numpy as np
import pytest

from melkit.autodiff import Tensor, backward
from melkit.errors import InvalidInput, NanError, NormError, ShapeError
from melkit.model import EncoderConfig, ProjectorConfig, init_model
from melkit.sampler import MixupConfig
from melkit.trainer import (
    AdamState,
    ContrastiveConfig,
    PretrainConfig,
    ScheduleConfig,
    adam_step,
    bce_loss,
    lr_at,
    ntxent_loss,
    pretrain,
)

PAPER_SCHED = ScheduleConfig()  # 2e-4 peak, 5k warmup, 200k total


def ntxent_reference(v: np.ndarray, tau: float) -> float:
    """Naive O((2N)^2) double-loop oracle, float64."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    unit = v / np.linalg.norm(v, axis=1, keepdims=True)
    total = 0.0
    for i in range(n):
        j = i ^ 1
        num = math.exp(float(unit[i] @ unit[j]) / tau)
        den = 0.0
        for k in range(n):
            if k == i:
                continue
            den += math.exp(float(unit[i] @ unit[k]) / tau)
        total += -math.log(num / den)
    return total


class TestBce:
    def test_half_everywhere_is_ln2(self):
        y = np.random.default_rng(0).integers(0, 2, size=(4, 6)).astype(np.float32)
        y_hat = np.full((4, 6), 0.5, dtype=np.float32)
        assert float(bce_loss(y, y_hat).data) == pytest.approx(math.log(2), rel=1e-6)

    def test_perfect_prediction_at_clip_boundary(self):
        y = np.array([[1.0, 0.0]], dtype=np.float32)
        y_hat = np.array([[1.0, 0.0]], dtype=np.float32)
        # clipped ~1e-7 from the target; float32 rounds the boundary to the
        # nearest representable value, so allow a ulp of slack around 1e-7
        assert float(bce_loss(y, y_hat).data) == pytest.approx(1e-7, abs=5e-8)

    def test_hand_case(self):
        y = np.array([[1.0, 0.0]], dtype=np.float32)
        y_hat = np.array([[0.9, 0.2]], dtype=np.float32)
        want = -(math.log(0.9) + math.log(0.8)) / 2
        assert float(bce_loss(y, y_hat).data) == pytest.approx(want, rel=1e-5)
        assert want == pytest.approx(0.16425, abs=1e-5)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            y = rng.integers(0, 2, size=(3, 4)).astype(np.float32)
            y_hat = rng.uniform(0.001, 0.999, size=(3, 4)).astype(np.float32)
            assert float(bce_loss(y, y_hat).data) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(np.zeros((2, 3)), np.full((3, 2), 0.5))

    def test_gradient_flows(self):
        y = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
        y_hat = Tensor(np.array([[0.7, 0.4]], dtype=np.float32), requires_grad=True)
        backward(bce_loss(y, y_hat))
        # d/dp of -(y log p + (1-y) log(1-p)) / 2: [-1/(2*0.7), 1/(2*0.6)]
        np.testing.assert_allclose(y_hat.grad, [[-1 / 1.4, 1 / 1.2]], rtol=1e-5)


class TestNtxent:
    def test_single_pair_is_exactly_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            v = rng.normal(size=(2, 8)).astype(np.float32)
            assert float(ntxent_loss(v, 0.1).data) == 0.0

    def test_all_identical_rows_closed_form(self):
        for n_pairs in (1, 2, 4, 8, 16):
            rows = 2 * n_pairs
            v = np.tile(np.random.default_rng(1).normal(size=8), (rows, 1))
            got = float(ntxent_loss(v, 0.1).data)
            want = rows * math.log(rows - 1) if rows > 1 else 0.0
            assert got == pytest.approx(want, abs=1e-5)

    def test_two_orthogonal_pairs_closed_form(self):
        want = 4 * math.log(1 + 2 * math.exp(-10.0))
        v = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=np.float64)
        got = float(ntxent_loss(v, 0.1).data)
        assert got == pytest.approx(want, rel=1e-6)
        assert got == pytest.approx(ntxent_reference(v, 0.1), rel=1e-6)
        # float32 training precision suffers cancellation on this near-zero
        # loss but stays within the absolute tolerance
        got32 = float(ntxent_loss(v.astype(np.float32), 0.1).data)
        assert got32 == pytest.approx(want, abs=1e-5)

    @pytest.mark.parametrize("n_pairs", [1, 2, 4, 8, 16])
    def test_matches_double_loop_oracle(self, n_pairs):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            v = rng.normal(size=(2 * n_pairs, 6))
            got = float(ntxent_loss(v, 0.1).data)
            want = ntxent_reference(v, 0.1)
            assert got == pytest.approx(want, abs=1e-5)

    def test_row_scaling_invariance_exact_for_pow2(self):
        # scaling a row by a power of two is exact in binary floating point,
        # so the similarity matrix and the loss must be bit-identical
        rng = np.random.default_rng(3)
        v = rng.normal(size=(8, 5)).astype(np.float32)
        scaled = v.copy()
        scaled[3] *= 4.0
        a = float(ntxent_loss(v, 0.1).data)
        b = float(ntxent_loss(scaled, 0.1).data)
        assert a == b

    def test_row_scaling_invariance_approx(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=(6, 5)).astype(np.float32)
        scaled = v.copy()
        scaled[0] *= 3.7
        assert float(ntxent_loss(scaled, 0.1).data) == pytest.approx(
            float(ntxent_loss(v, 0.1).data), rel=1e-5)

    def test_zero_row_raises(self):
        v = np.zeros((4, 3), dtype=np.float32)
        v[0, 0] = 1.0
        with pytest.raises(NormError):
            ntxent_loss(v, 0.1)

    def test_odd_rows_rejected(self):
        with pytest.raises(ShapeError):
            ntxent_loss(np.ones((3, 4), dtype=np.float32), 0.1)

    def test_mean_reduction(self):
        v = np.random.default_rng(5).normal(size=(8, 4)).astype(np.float32)
        total = float(ntxent_loss(v, 0.1, reduction="sum").data)
        mean = float(ntxent_loss(v, 0.1, reduction="mean").data)
        assert mean == pytest.approx(total / 8, rel=1e-6)


class TestSchedule:
    def test_zero_at_step_zero(self):
        assert lr_at(0, PAPER_SCHED) == 0.0

    def test_peak_at_warmup_end(self):
        assert lr_at(5000, PAPER_SCHED) == 2e-4

    def test_cosine_midpoint(self):
        assert lr_at(102_500, PAPER_SCHED) == pytest.approx(1e-4, abs=1e-12)

    def test_zero_at_total(self):
        assert lr_at(200_000, PAPER_SCHED) == 0.0
        assert lr_at(250_000, PAPER_SCHED) == 0.0

    def test_continuous_at_warmup_boundary(self):
        ramp = lr_at(5000, PAPER_SCHED)
        sched = ScheduleConfig()
        progress = 0.0
        cosine = sched.peak_lr * 0.5 * (1 + math.cos(math.pi * progress))
        assert ramp == pytest.approx(cosine, abs=1e-18)

    def test_validation(self):
        with pytest.raises(InvalidInput):
            ScheduleConfig(warmup_steps=10, total_steps=10)

    def test_contrastive_config_validation(self):
        with pytest.raises(InvalidInput):
            ContrastiveConfig(temperature=0.0)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        p = {"w": Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)}
        state = AdamState()
        adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_approaches_signed_lr(self):
        state = AdamState(eps=1e-12)
        p = {"w": Tensor(np.array([0.0, 0.0], dtype=np.float32), requires_grad=True)}
        g = np.array([0.3, -7.0], dtype=np.float32)
        adam_step(p, {"w": g}, state, lr=0.01)
        # bias-corrected first step: -lr * g / (|g| + eps) = -lr * sign(g)
        np.testing.assert_allclose(p["w"].data, [-0.01, 0.01], rtol=1e-5)

    def test_two_steps_match_scalar_oracle(self):
        # hand-rolled Adam on f(w) = 0.5 w^2 starting at w=1, lr=0.1
        w = 1.0
        m = v = 0.0
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
        for t in (1, 2):
            g = w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

        p = {"w": Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)}
        state = AdamState()
        for _ in range(2):
            adam_step(p, {"w": p["w"].data.copy()}, state, lr=0.1)
        assert float(p["w"].data[0]) == pytest.approx(w, abs=1e-7)

    def test_nan_gradient_names_parameter(self):
        p = {"bad": Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)}
        with pytest.raises(NanError, match="bad"):
            adam_step(p, {"bad": np.array([np.nan, 0.0], dtype=np.float32)},
                      AdamState(), lr=0.1)


class TestPretrainLoop:
    @pytest.mark.parametrize("mode", ["contrastive", "supervised"])
    def test_200_desk_steps_descend(self, small_corpus, tmp_path, mode):
        enc = EncoderConfig()
        proj = ProjectorConfig()
        n_labels = len(small_corpus.vocab) if mode == "supervised" else None
        model = init_model(enc, proj, seed=7, n_labels=n_labels)
        cfg = PretrainConfig(
            mode=mode, batch_size=12, pairs=6,
            schedule=ScheduleConfig(peak_lr=1e-3, warmup_steps=20, total_steps=200),
            mixup=MixupConfig(enabled=True),
            loss_reduction="mean",
            checkpoint_interval=100,
        )
        history = pretrain(small_corpus.records, small_corpus.vocab, small_corpus.store,
                           model, cfg, seed=7, out_dir=tmp_path / mode)
        losses = [h[2] for h in history]
        assert len(losses) == 200
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert (tmp_path / mode / "final.mck").exists()
        assert (tmp_path / mode / "step000100.mck").exists()
        lines = (tmp_path / mode / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,lr,loss"
        assert len(lines) == 201

    def test_label_filter_restricts_vocab(self, small_corpus, tmp_path):
        filtered = small_corpus.vocab.subset("timbre:")
        model = init_model(EncoderConfig(), ProjectorConfig(), seed=0,
                           n_labels=len(filtered))
        cfg = PretrainConfig(
            mode="supervised", batch_size=4, label_filter="timbre:",
            schedule=ScheduleConfig(peak_lr=1e-3, warmup_steps=2, total_steps=6),
            mixup=MixupConfig(enabled=False), checkpoint_interval=100)
        history = pretrain(small_corpus.records, small_corpus.vocab, small_corpus.store,
                           model, cfg, seed=1, out_dir=tmp_path)
        assert len(history) == 6
