import numpy as np
import pytest
import torch

import mmkd
from mmkd.errors import ConfigError

from util import mvsc_brute_force, random_view_set, rel_err


def as_t(x):
    return torch.as_tensor(x, dtype=torch.float64)


class TestMvscLoss:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        views, labels = random_view_set(batch_size=2, d=5, seed=seed)
        cfg = mmkd.ContrastiveConfig(lam=0.9, tau=0.1)
        got = float(mmkd.mvsc_loss(as_t(views), as_t(labels), cfg))
        want = mvsc_brute_force(views, labels, lam=0.9, tau=0.1)
        assert rel_err(got, want) < 1e-6

    def test_two_mutually_positive_views_give_zero(self):
        views = torch.randn(2, 4, dtype=torch.float64)
        labels = torch.tensor([1.0, 1.2], dtype=torch.float64)
        cfg = mmkd.ContrastiveConfig(lam=0.9, tau=0.1)
        assert float(mmkd.mvsc_loss(views, labels, cfg)) == 0.0

    def test_all_pairs_positive_matches_oracle(self):
        views, labels = random_view_set(batch_size=3, d=4, seed=11)
        cfg = mmkd.ContrastiveConfig(lam=1e9, tau=0.5)
        got = float(mmkd.mvsc_loss(as_t(views), as_t(labels), cfg))
        want = mvsc_brute_force(views, labels, lam=1e9, tau=0.5)
        assert rel_err(got, want) < 1e-6

    def test_raw_dot_products_match_oracle(self):
        views, labels = random_view_set(batch_size=2, d=4, seed=3)
        cfg = mmkd.ContrastiveConfig(lam=0.9, tau=1.0, normalize=False)
        got = float(mmkd.mvsc_loss(as_t(views), as_t(labels), cfg))
        want = mvsc_brute_force(views, labels, lam=0.9, tau=1.0, normalize=False)
        assert rel_err(got, want) < 1e-6

    @pytest.mark.parametrize("seed", range(4))
    def test_nonnegative(self, seed):
        views, labels = random_view_set(batch_size=3, d=6, seed=100 + seed)
        cfg = mmkd.ContrastiveConfig(lam=0.9, tau=0.1)
        assert float(mmkd.mvsc_loss(as_t(views), as_t(labels), cfg)) >= 0.0

    def test_permutation_invariant(self):
        views, labels = random_view_set(batch_size=3, d=5, seed=9)
        cfg = mmkd.ContrastiveConfig()
        base = float(mmkd.mvsc_loss(as_t(views), as_t(labels), cfg))
        perm = np.random.default_rng(0).permutation(len(labels))
        shuffled = float(mmkd.mvsc_loss(as_t(views[perm]), as_t(labels[perm]), cfg))
        assert rel_err(base, shuffled) < 1e-10

    def test_lambda_zero_distinct_labels_positive_set_is_own_views(self):
        rng = np.random.default_rng(4)
        b = 4
        sample_labels = np.array([-2.0, -0.5, 1.0, 2.5])
        labels = np.tile(sample_labels, 7)
        views = rng.standard_normal((7 * b, 3))
        # Independent positive count: exact label ties are the 6 other views.
        for j in range(7 * b):
            count = sum(
                1 for p in range(7 * b) if p != j and abs(labels[p] - labels[j]) <= 0.0
            )
            assert count == 6
        cfg = mmkd.ContrastiveConfig(lam=0.0, tau=0.1)
        got = float(mmkd.mvsc_loss(as_t(views), as_t(labels), cfg))
        want = mvsc_brute_force(views, labels, lam=0.0, tau=0.1)
        assert rel_err(got, want) < 1e-6

    def test_no_positive_anchors_contribute_zero(self):
        views = torch.randn(2, 4, dtype=torch.float64)
        labels = torch.tensor([-3.0, 3.0], dtype=torch.float64)
        cfg = mmkd.ContrastiveConfig(lam=0.0, tau=0.1)
        assert float(mmkd.mvsc_loss(views, labels, cfg)) == 0.0

    def test_invalid_tau_rejected(self):
        with pytest.raises(ConfigError):
            mmkd.ContrastiveConfig(tau=0.0)
        with pytest.raises(ConfigError):
            mmkd.ContrastiveConfig(tau=-1.0)

    def test_nan_views_rejected(self):
        views = torch.full((3, 4), float("nan"), dtype=torch.float64)
        labels = torch.zeros(3, dtype=torch.float64)
        with pytest.raises(ValueError):
            mmkd.mvsc_loss(views, labels, mmkd.ContrastiveConfig())

    def test_single_view_rejected(self):
        with pytest.raises(ConfigError):
            mmkd.mvsc_loss(
                torch.randn(1, 4, dtype=torch.float64),
                torch.zeros(1, dtype=torch.float64),
                mmkd.ContrastiveConfig(),
            )


class TestUniviewLoss:
    def test_equals_mvsc_on_teacher_views_only(self):
        rng = np.random.default_rng(7)
        h_t = rng.standard_normal((5, 4))
        labels = rng.uniform(-3, 3, 5)
        cfg = mmkd.ContrastiveConfig()
        a = float(mmkd.uniview_sc_loss(as_t(h_t), as_t(labels), cfg))
        b = float(mmkd.mvsc_loss(as_t(h_t), as_t(labels), cfg))
        assert a == b

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        h_t = rng.standard_normal((6, 5))
        labels = rng.uniform(-3, 3, 6)
        cfg = mmkd.ContrastiveConfig(lam=0.9, tau=0.1)
        got = float(mmkd.uniview_sc_loss(as_t(h_t), as_t(labels), cfg))
        want = mvsc_brute_force(h_t, labels, lam=0.9, tau=0.1)
        assert rel_err(got, want) < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(23)
        h_t = rng.standard_normal((4, 3))
        labels = rng.uniform(-3, 3, 4)
        assert float(mmkd.uniview_sc_loss(as_t(h_t), as_t(labels), mmkd.ContrastiveConfig())) >= 0


class TestRegressionLoss:
    def test_perfect_predictions_give_zero(self):
        y = torch.tensor([0.5, -1.0], dtype=torch.float64)
        preds = {h: y.clone() for h in mmkd.ALL_HEADS}
        total, _ = mmkd.regression_loss(preds, y)
        assert float(total) == 0.0

    def test_teacher_off_by_one(self):
        y = torch.tensor([0.5, -1.0], dtype=torch.float64)
        preds = {h: y.clone() for h in mmkd.ALL_HEADS}
        preds["t"] = y + 1.0
        total, by_head = mmkd.regression_loss(preds, y)
        assert float(total) == 1.0
        assert float(by_head["t"]) == 1.0

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(2)
        y = rng.uniform(-3, 3, 8)
        preds = {h: rng.uniform(-3, 3, 8) for h in mmkd.ALL_HEADS}
        total, by_head = mmkd.regression_loss(
            {h: as_t(p) for h, p in preds.items()}, as_t(y)
        )
        want_heads = {h: float(np.mean(np.abs(preds[h] - y))) for h in mmkd.ALL_HEADS}
        for h in mmkd.ALL_HEADS:
            assert rel_err(float(by_head[h]), want_heads[h]) < 1e-12
        assert rel_err(float(total), sum(want_heads.values())) < 1e-12

    def test_missing_head_rejected(self):
        y = torch.zeros(2, dtype=torch.float64)
        preds = {h: y.clone() for h in mmkd.ALL_HEADS if h != "av"}
        with pytest.raises(ConfigError):
            mmkd.regression_loss(preds, y)


class TestMseKdLoss:
    def _random_inputs(self, seed, b=3, d=4):
        gen = torch.Generator().manual_seed(seed)
        reps = {h: torch.randn(b, d, generator=gen, dtype=torch.float64) for h in mmkd.ALL_HEADS}
        mids = {k: torch.randn(b, d, generator=gen, dtype=torch.float64) for k in ("f_l", "f_v", "f_a")}
        return reps, mids

    def test_zero_when_students_equal_targets(self):
        reps, mids = self._random_inputs(0)
        reps["v"] = mids["f_v"].clone()
        reps["a"] = mids["f_a"].clone()
        for pair in mmkd.BIMODAL_HEADS:
            reps[pair] = reps["t"].clone()
        assert float(mmkd.mse_kd_loss("va", reps, mids)) == 0.0
        assert float(mmkd.mse_kd_loss("pairs", reps, mids)) == 0.0
        assert float(mmkd.mse_kd_loss("all", reps, mids)) == 0.0

    def test_all_equals_va_plus_pairs_exactly(self):
        reps, mids = self._random_inputs(5)
        va = mmkd.mse_kd_loss("va", reps, mids)
        pairs = mmkd.mse_kd_loss("pairs", reps, mids)
        combined = mmkd.mse_kd_loss("all", reps, mids)
        assert float(combined) == float(va) + float(pairs)

    def test_matches_elementwise_recomputation(self):
        reps, mids = self._random_inputs(9)
        got = float(mmkd.mse_kd_loss("all", reps, mids))
        def mse(a, b):
            return float(np.mean((a.numpy() - b.numpy()) ** 2))
        want = (
            mse(reps["v"], mids["f_v"])
            + mse(reps["a"], mids["f_a"])
            + sum(mse(reps[p], reps["t"]) for p in mmkd.BIMODAL_HEADS)
        )
        assert rel_err(got, want) < 1e-12

    def test_unknown_variant_rejected(self):
        reps, mids = self._random_inputs(1)
        with pytest.raises(ConfigError):
            mmkd.mse_kd_loss("bogus", reps, mids)

    def test_teacher_targets_detached(self):
        """The KD term must not push gradient into teacher-only parameters."""
        import util

        model = mmkd.build_model(util.tiny_cfg(), seed=3).double()
        model.eval()
        batch, _ = util.tiny_batch(n=3, seed=1)
        out = model.forward_all(batch)
        aux = mmkd.mse_kd_loss("all", out.reps, out.intermediates)
        aux.backward()
        teacher_only = (
            list(model.decoders.parameters())
            + list(model.trinary_encoder.parameters())
            + list(model.teacher_projector.parameters())
            + [model.cls["dec_v"], model.cls["dec_a"]]
            + list(model.heads.parameters())
        )
        for p in teacher_only:
            assert p.grad is None or torch.all(p.grad == 0)
        student_touched = [
            p.grad is not None and float(p.grad.abs().sum()) > 0
            for p in model.student_encoders.parameters()
        ]
        shared_conv_touched = [
            p.grad is not None and float(p.grad.abs().sum()) > 0
            for p in model.proj_conv.parameters()
        ]
        assert any(student_touched)
        assert any(shared_conv_touched)


class TestTotalLoss:
    def _forward(self, seed=0, mode="mvsc"):
        gen = torch.Generator().manual_seed(seed)
        b, d = 3, 4
        labels = torch.empty(b, dtype=torch.float64).uniform_(-3, 3, generator=gen)
        reps = {h: torch.randn(b, d, generator=gen, dtype=torch.float64) for h in mmkd.ALL_HEADS}
        mids = {k: torch.randn(b, d, generator=gen, dtype=torch.float64) for k in ("f_l", "f_v", "f_a")}
        preds = {h: torch.randn(b, generator=gen, dtype=torch.float64) for h in mmkd.ALL_HEADS}
        return mmkd.total_loss(mode, preds, labels, reps, mids, mmkd.ContrastiveConfig())

    def test_mode_none_is_regression_only(self):
        loss, report = self._forward(mode="none")
        assert report.l_total == report.l_regression
        assert report.l_mvsc == 0.0 and report.l_mse == 0.0

    def test_mode_mvsc_adds_contrastive_term(self):
        loss, report = self._forward(mode="mvsc")
        assert report.l_mvsc > 0.0
        assert rel_err(report.l_total, report.l_regression + report.l_mvsc) < 1e-12

    def test_mode_mse_all_with_zero_distance_reps(self):
        gen = torch.Generator().manual_seed(1)
        b, d = 2, 4
        labels = torch.zeros(b, dtype=torch.float64)
        base = torch.randn(b, d, generator=gen, dtype=torch.float64)
        reps = {h: base.clone() for h in mmkd.ALL_HEADS}
        mids = {"f_l": base.clone(), "f_v": base.clone(), "f_a": base.clone()}
        preds = {h: torch.randn(b, generator=gen, dtype=torch.float64) for h in mmkd.ALL_HEADS}
        loss, report = mmkd.total_loss("mse_all", preds, labels, reps, mids)
        assert report.l_total == report.l_regression

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            self._forward(mode="bogus")

    def test_report_serializes_to_json(self):
        import json

        _, report = self._forward(mode="mvsc")
        parsed = json.loads(json.dumps(report.to_dict()))
        assert parsed["mode"] == "mvsc"
        assert set(parsed["regression_by_head"]) == set(mmkd.ALL_HEADS)
