import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelprompt import tensor as T
from voxelprompt.metrics import (
    auc_score,
    boundary_voxels,
    compute_dsc,
    compute_nsd,
    dice_ce_loss,
)

from oracles import finite_diff_grad, nsd_naive, rel_err


class TestDiceCeLoss:
    def test_perfect_binary_prediction_near_zero(self):
        gt = np.zeros((4, 4, 4))
        gt[1:3, 1:3, 1:3] = 1.0
        logits = T.tensor((2 * gt - 1) * 40.0)  # saturates sigmoid
        loss = dice_ce_loss(logits, gt)
        assert float(loss.data) < 1e-5

    def test_uniform_half_prediction_closed_form(self):
        # p = 0.5 everywhere, g = ones on exactly half the voxels
        gt = np.zeros(16)
        gt[:8] = 1.0
        logits = T.tensor(np.zeros(16))
        loss = dice_ce_loss(logits, gt)
        # dice: 1 - 2*(0.5*8)/(0.25*16 + 8) = 1 - 8/12 = 1/3; ce: ln 2 doubled
        expect = 1.0 / 3.0 + 2.0 * np.log(2.0)
        assert float(loss.data) == pytest.approx(expect, abs=1e-9)

    def test_fg_only_variant_closed_form(self):
        gt = np.zeros(16)
        gt[:8] = 1.0
        loss = dice_ce_loss(T.tensor(np.zeros(16)), gt, ce_mode="fg_only")
        expect = 1.0 / 3.0 + 2.0 * (8 * np.log(2.0) / 16)
        assert float(loss.data) == pytest.approx(expect, abs=1e-9)

    def test_loss_nonnegative_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = T.tensor(rng.normal(size=(3, 3, 3)) * 3)
            gt = (rng.uniform(size=(3, 3, 3)) > 0.5).astype(np.float64)
            assert float(dice_ce_loss(logits, gt).data) >= 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=27) * 2
        gt = (rng.uniform(size=27) > 0.5).astype(np.float64)

        def f(arr):
            return float(dice_ce_loss(T.tensor(arr), gt).data)

        xt = T.parameter(x0.copy())
        dice_ce_loss(xt, gt).backward()
        fd = finite_diff_grad(f, x0)
        assert rel_err(xt.grad, fd) < 1e-5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            dice_ce_loss(T.tensor(np.zeros((2, 2, 2))), np.zeros((3, 3, 3)))


class TestDsc:
    def test_identical_nonempty(self):
        m = np.zeros((3, 3, 3), dtype=bool)
        m[1, 1, 1] = True
        assert compute_dsc(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((3, 3, 3), dtype=bool)
        b = np.zeros((3, 3, 3), dtype=bool)
        a[0, 0, 0] = True
        b[2, 2, 2] = True
        assert compute_dsc(a, b) == 0.0

    def test_half_overlapping_cubes(self):
        a = np.zeros((4, 4, 8), dtype=bool)
        b = np.zeros((4, 4, 8), dtype=bool)
        a[:, :, 0:4] = True
        b[:, :, 2:6] = True
        assert compute_dsc(a, b) == pytest.approx(0.5)

    def test_both_empty_is_one(self):
        z = np.zeros((2, 2, 2), dtype=bool)
        assert compute_dsc(z, z) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(5, 5, 5)) > 0.6
        b = rng.uniform(size=(5, 5, 5)) > 0.6
        assert compute_dsc(a, b) == compute_dsc(b, a)


class TestNsd:
    def test_identical_masks(self):
        m = np.zeros((5, 5, 5), dtype=bool)
        m[1:4, 1:4, 1:4] = True
        assert compute_nsd(m, m) == 1.0

    def test_far_apart_shapes_zero(self):
        a = np.zeros((9, 9, 9), dtype=bool)
        b = np.zeros((9, 9, 9), dtype=bool)
        a[0:2, 0:2, 0:2] = True
        b[6:9, 6:9, 6:9] = True
        assert compute_nsd(a, b, tolerance=1.0) == 0.0

    def test_shifted_cube_matches_exhaustive_oracle(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[2:5, 2:5, 2:5] = True
        b[3:6, 2:5, 2:5] = True  # shifted by one voxel
        ours = compute_nsd(a, b, tolerance=1.0)
        ref = nsd_naive(a, b, tol=1.0)
        assert ours == pytest.approx(ref, abs=1e-12)

    def test_random_masks_match_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.uniform(size=(6, 6, 6)) > 0.7
            b = rng.uniform(size=(6, 6, 6)) > 0.7
            assert compute_nsd(a, b) == pytest.approx(nsd_naive(a, b), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(5, 5, 5)) > 0.6
        b = rng.uniform(size=(5, 5, 5)) > 0.6
        assert compute_nsd(a, b) == compute_nsd(b, a)

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3, 3), dtype=bool)
        assert compute_nsd(z, z) == 1.0

    def test_boundary_includes_volume_border(self):
        m = np.ones((2, 2, 2), dtype=bool)
        assert boundary_voxels(m).all()


class TestAuc:
    def test_all_ones_is_four(self):
        assert auc_score([1, 1, 1, 1, 1]) == 4.0

    def test_all_zeros(self):
        assert auc_score([0, 0, 0, 0, 0]) == 0.0

    def test_arithmetic_example(self):
        assert auc_score([0.2, 0.4, 0.6, 0.8, 1.0]) == pytest.approx(2.4)

    def test_wrong_count_rejected(self):
        with pytest.raises(ValueError, match="5"):
            auc_score([1, 1, 1])

    def test_weights_sum_to_four(self):
        assert auc_score([1, 1, 1, 1, 1]) == pytest.approx(4.0)

    @given(
        st.lists(st.floats(0, 1), min_size=5, max_size=5),
        st.integers(0, 4),
        st.floats(0, 1),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_each_coordinate(self, values, idx, bump):
        raised = list(values)
        raised[idx] = min(1.0, raised[idx] + bump)
        assert auc_score(raised) >= auc_score(values) - 1e-12
