import numpy as np
import pytest

from corrpose import autodiff as ad
from corrpose import geometry as geo
from corrpose import losses as ls
from corrpose.autodiff import Tensor, backward
from corrpose.geometry import Pose, SymmetrySpec


RNG = np.random.default_rng(41)
NONE = SymmetrySpec.none()


def c4_closed_model(n_base=12, seed=2):
    base = np.random.default_rng(seed).uniform(-0.1, 0.1, size=(n_base, 3))
    quarter = geo.rotation_about_z(np.pi / 2)
    return np.vstack([base @ np.linalg.matrix_power(quarter, k).T for k in range(4)])


class TestLossP2p:
    def test_zero_at_target(self):
        gt = geo.random_pose(RNG)
        obs = RNG.standard_normal((20, 3))
        decoded = Tensor(geo.inverse_transform(gt, obs))
        assert ls.loss_p2p(decoded, obs, gt, NONE).item() == 0.0

    def test_uniform_offset(self):
        gt = geo.random_pose(RNG)
        obs = RNG.standard_normal((15, 3))
        decoded = Tensor(geo.inverse_transform(gt, obs) + [0.01, 0.0, 0.0])
        assert abs(ls.loss_p2p(decoded, obs, gt, NONE).item() - 0.01) < 1e-15

    def test_matches_loop_oracle(self):
        gt = geo.random_pose(RNG)
        obs = RNG.standard_normal((12, 3))
        decoded = RNG.standard_normal((12, 3))
        expected = np.mean([
            np.linalg.norm(decoded[i] - gt.rotation.T @ (obs[i] - gt.translation))
            for i in range(12)
        ])
        got = ls.loss_p2p(Tensor(decoded), obs, gt, NONE).item()
        assert abs(got - expected) < 1e-12

    def test_size_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ls.loss_p2p(Tensor(np.zeros((4, 3))), np.zeros((5, 3)),
                        Pose.identity(), NONE)


class TestLossC2c:
    def test_zero_at_target(self):
        gt = geo.random_pose(RNG)
        model = RNG.standard_normal((20, 3))
        decoded = Tensor(geo.transform(gt, model))
        assert ls.loss_c2c(decoded, model, gt, NONE).item() == 0.0

    def test_identity_gt(self):
        model = RNG.standard_normal((10, 3))
        assert ls.loss_c2c(Tensor(model.copy()), model, Pose.identity(), NONE).item() == 0.0

    def test_matches_loop_oracle(self):
        gt = geo.random_pose(RNG)
        model = RNG.standard_normal((9, 3))
        decoded = RNG.standard_normal((9, 3))
        expected = np.mean([
            np.linalg.norm(decoded[i] - (gt.rotation @ model[i] + gt.translation))
            for i in range(9)
        ])
        assert abs(ls.loss_c2c(Tensor(decoded), model, gt, NONE).item() - expected) < 1e-12


class TestLossPose:
    def test_zero_when_equal(self):
        gt = geo.random_pose(RNG)
        model = RNG.standard_normal((20, 3))
        out = ls.loss_pose(gt.rotation, gt.translation, gt, model, NONE)
        assert out.item() == 0.0

    def test_pure_translation(self):
        gt = geo.random_pose(RNG)
        pred = geo.compose(Pose(np.eye(3), [0.0, 0.0, 0.02]), gt)
        model = RNG.standard_normal((20, 3))
        out = ls.loss_pose(pred.rotation, pred.translation, gt, model, NONE)
        assert abs(out.item() - 0.02) < 1e-15

    def test_symmetric_prism_invisible_rotation(self):
        model = c4_closed_model()
        sym = SymmetrySpec.cyclic_z(4)
        gt = geo.random_pose(RNG)
        pred = geo.compose(gt, Pose(geo.rotation_about_z(np.pi / 2), np.zeros(3)))
        sym_loss = ls.loss_pose(pred.rotation, pred.translation, gt, model, sym)
        asym_loss = ls.loss_pose(pred.rotation, pred.translation, gt, model, NONE)
        assert sym_loss.item() < 1e-9
        assert asym_loss.item() > 1e-3


class TestSigma:
    def test_zero_at_perfect(self):
        assert ls.sigma(0.0, 1.0) == 0.0

    def test_log_one_vanishes(self):
        assert ls.sigma(1.0, 1.0, w=0.01) == 1.0

    def test_grid_minimum_matches_analytic(self):
        grid = np.linspace(1e-6, 1.0 - 1e-6, 1_000_000)
        for d in (0.1, 1.0, 10.0):
            vals = d * grid - 0.01 * np.log(grid)
            s_star = grid[np.argmin(vals)]
            assert abs(s_star - 0.01 / d) <= 2.0 * (grid[1] - grid[0])

    def test_tensor_variant_matches_scalar(self):
        d, s = 0.37, 0.62
        out = ls.sigma(Tensor([[d]]), Tensor([[s]]), w=0.01)
        assert abs(out.item() - ls.sigma(d, s, w=0.01)) < 1e-15


class TestLossConf:
    def make_inputs(self, n_x=6, n_y=4):
        gt = geo.random_pose(RNG)
        obs = RNG.standard_normal((n_x, 3))
        model = RNG.standard_normal((n_y, 3))
        dec_p2p = Tensor(geo.inverse_transform(gt, obs))
        dec_c2c = Tensor(geo.transform(gt, model))
        rot = Tensor(gt.rotation)
        trans = Tensor(gt.translation.reshape(1, 3))
        return gt, obs, model, dec_p2p, dec_c2c, rot, trans

    def test_zero_at_perfect_with_unit_scores(self):
        gt, obs, model, dp, dc, rot, trans = self.make_inputs()
        s = Tensor(np.ones((10, 1)))
        out = ls.loss_conf(dp, dc, obs, model, rot, trans, s, NONE)
        assert out.item() == 0.0

    def test_half_scores_closed_form(self):
        gt, obs, model, dp, dc, rot, trans = self.make_inputs()
        s = Tensor(np.full((10, 1), 0.5))
        out = ls.loss_conf(dp, dc, obs, model, rot, trans, s, NONE, w=0.01)
        assert abs(out.item() - (-0.01 * np.log(0.5) * 2.0)) < 1e-12

    def test_increasing_a_distance_increases_loss(self):
        gt, obs, model, dp, dc, rot, trans = self.make_inputs()
        s = Tensor(np.full((10, 1), 0.7))
        base = ls.loss_conf(dp, dc, obs, model, rot, trans, s, NONE).item()
        bumped = dp.data.copy()
        bumped[2] += [0.05, 0.0, 0.0]
        worse = ls.loss_conf(Tensor(bumped), dc, obs, model, rot, trans,
                             Tensor(np.full((10, 1), 0.7)), NONE).item()
        assert worse > base

    def test_nonpositive_scores_rejected(self):
        gt, obs, model, dp, dc, rot, trans = self.make_inputs()
        s = np.full((10, 1), 0.5)
        s[0, 0] = 0.0
        with pytest.raises(ValueError):
            ls.loss_conf(dp, dc, obs, model, rot, trans, Tensor(s), NONE)

    def test_positive_whenever_imperfect(self):
        gt, obs, model, dp, dc, rot, trans = self.make_inputs()
        s = Tensor(np.full((10, 1), 0.9))
        out = ls.loss_conf(dp, dc, obs, model, rot, trans, s, NONE)
        assert out.item() > 0.0


class TestTotalLoss:
    def test_all_zero(self):
        parts = ls.LossParts(Tensor([[0.0]]), Tensor([[0.0]]),
                             Tensor([[0.0]]), Tensor([[0.0]]))
        assert ls.total_loss(parts, ls.LossWeights()).item() == 0.0

    def test_unit_parts_default_weights(self):
        one = lambda: Tensor([[1.0]])
        parts = ls.LossParts(one(), one(), one(), one())
        assert ls.total_loss(parts, ls.LossWeights()).item() == 8.0

    def test_zero_conf_weight_matches_three_term_graph(self):
        # gradient with lambda_conf = 0 equals the gradient of a graph
        # built without the confidence term at all
        gt = geo.random_pose(RNG)
        obs = RNG.standard_normal((5, 3))
        model = RNG.standard_normal((4, 3))

        def build(include_conf):
            dec_p = Tensor(RNG2.standard_normal((5, 3)), requires_grad=True)
            params = [dec_p]
            l_p2p = ls.loss_p2p(dec_p, obs, gt, NONE)
            l_c2c = ls.loss_c2c(Tensor(model + 0.1), model, gt, NONE)
            l_pose = ls.loss_pose(Tensor(gt.rotation), Tensor(gt.translation.reshape(1, 3)),
                                  gt, model, NONE)
            if include_conf:
                s = Tensor(np.full((9, 1), 0.5))
                l_conf = ls.loss_conf(dec_p, Tensor(model.copy()), obs, model,
                                      Tensor(gt.rotation), Tensor(gt.translation.reshape(1, 3)),
                                      s, NONE)
                parts = ls.LossParts(l_p2p, l_c2c, l_pose, l_conf)
                weights = ls.LossWeights(lambda_conf=0.0)
            else:
                parts = ls.LossParts(l_p2p, l_c2c, l_pose, Tensor([[0.0]]))
                weights = ls.LossWeights(lambda_conf=0.0)
            backward(ls.total_loss(parts, weights))
            return params[0].grad

        global RNG2
        RNG2 = np.random.default_rng(77)
        with_conf = build(True)
        RNG2 = np.random.default_rng(77)
        without = build(False)
        assert np.array_equal(with_conf, without)


class TestSymmetryInvariance:
    def test_all_losses_invariant_under_fixture_group(self):
        model = c4_closed_model()
        sym = SymmetrySpec.cyclic_z(4)
        gt = geo.random_pose(RNG)
        obs = geo.transform(gt, model)  # closed observation set
        decoded_p2p = Tensor(RNG.standard_normal((model.shape[0], 3)) * 0.1)
        decoded_c2c = Tensor(RNG.standard_normal((model.shape[0], 3)) * 0.1)
        pred = geo.random_pose(RNG)
        rot, trans = Tensor(pred.rotation), Tensor(pred.translation.reshape(1, 3))
        s = Tensor(np.full((2 * model.shape[0], 1), 0.6))

        base = (
            ls.loss_p2p(decoded_p2p, obs, gt, sym).item(),
            ls.loss_c2c(decoded_c2c, model, gt, sym).item(),
            ls.loss_pose(rot, trans, gt, model, sym).item(),
            ls.loss_conf(decoded_p2p, decoded_c2c, obs, model, rot, trans, s, sym).item(),
        )
        for mat in sym.transforms:
            gt_s = geo.compose(gt, Pose(mat, np.zeros(3)))
            alt = (
                ls.loss_p2p(decoded_p2p, obs, gt_s, sym).item(),
                ls.loss_c2c(decoded_c2c, model, gt_s, sym).item(),
                ls.loss_pose(rot, trans, gt_s, model, sym).item(),
                ls.loss_conf(decoded_p2p, decoded_c2c, obs, model, rot, trans, s, sym).item(),
            )
            assert np.abs(np.array(alt) - np.array(base)).max() <= 1e-9


class TestLossGradients:
    def fd_check(self, build, arrays, rtol=1e-4, h=1e-6):
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        backward(build(tensors))

        for k, base in enumerate(arrays):
            num = np.zeros_like(base)
            flat = base.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = build([Tensor(a) for a in arrays]).item()
                flat[i] = orig - h
                lo = build([Tensor(a) for a in arrays]).item()
                flat[i] = orig
                nflat[i] = (hi - lo) / (2.0 * h)
            got = tensors[k].grad
            denom = np.maximum(1.0, np.maximum(np.abs(got), np.abs(num)))
            assert (np.abs(got - num) / denom).max() < rtol

    def test_p2p_gradient_wrt_decoded(self):
        gt = geo.random_pose(RNG)
        obs = RNG.standard_normal((6, 3))
        self.fd_check(lambda ts: ls.loss_p2p(ts[0], obs, gt, NONE),
                      [RNG.standard_normal((6, 3))])

    def test_pose_gradient_wrt_pose_tensors(self):
        gt = geo.random_pose(RNG)
        model = RNG.standard_normal((8, 3))

        def build(ts):
            return ls.loss_pose(ts[0], ts[1], gt, model, NONE)

        self.fd_check(build, [geo.random_rotation(RNG), RNG.standard_normal((1, 3))])

    def test_conf_gradient_wrt_scores_and_decoded(self):
        gt = geo.random_pose(RNG)
        obs = RNG.standard_normal((5, 3))
        model = RNG.standard_normal((4, 3))
        rot, trans = gt.rotation, gt.translation.reshape(1, 3)

        def build(ts):
            return ls.loss_conf(ts[0], Tensor(model + 0.05), obs, model,
                                Tensor(rot), Tensor(trans), ts[1], NONE)

        self.fd_check(build, [RNG.standard_normal((5, 3)),
                              RNG.uniform(0.2, 0.8, size=(9, 1))])
