import numpy as np
import pytest

from ampnet import datagen, networks as nw, training
from ampnet.datagen import MatrixSpec, SignalPrior
from ampnet.numerics import RngStream
from ampnet.training import AdamState, TrainConfig, adam_step


@pytest.fixture(scope="module")
def tiny():
    rng = RngStream(50)
    prior = SignalPrior(gamma=0.15, phi=1.0)
    inst = datagen.make_instance(rng, MatrixSpec("iid-gaussian", 16, 32),
                                 prior, 25.0)
    test = datagen.gen_batch(rng.spawn(9), inst, 64)
    return inst, test


FAST = dict(batch_size=64, val_size=64, rates=(1e-2, 1e-3), patience=3,
            eval_every=5, max_steps_layerwise=120, max_steps_global=150)


class TestQuadraticLoss:
    def test_perfect(self):
        x = np.ones((4, 3))
        assert training.quadratic_loss(x, x) == 0.0

    def test_zero_estimate(self):
        x0 = np.arange(6.0).reshape(3, 2)
        want = np.sum(x0**2) / 2
        assert training.quadratic_loss(np.zeros_like(x0), x0) == want

    def test_random_matches_hand_sum(self):
        rng = RngStream(0)
        a = rng.gen.normal(size=(10, 7))
        b = rng.gen.normal(size=(10, 7))
        hand = sum(np.sum((a[:, d] - b[:, d]) ** 2) for d in range(7)) / 7
        assert abs(training.quadratic_loss(a, b) - hand) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            training.quadratic_loss(np.zeros((2, 2)), np.zeros((3, 2)))


class TestAdam:
    def test_zero_gradient_no_change(self):
        leaf = np.array([1.0, -2.0])
        st = AdamState()
        adam_step(st, {"w": leaf}, {"w": np.zeros(2)}, 1e-2)
        assert np.array_equal(leaf, [1.0, -2.0])

    def test_constant_gradient_step_approaches_rate(self):
        leaf = np.array([0.0])
        st = AdamState()
        g = np.array([3.7])
        prev = leaf.copy()
        for _ in range(200):
            prev = leaf.copy()
            adam_step(st, {"w": leaf}, {"w": g}, 1e-2)
        assert abs(abs(leaf[0] - prev[0]) - 1e-2) <= 1e-4

    def test_scalar_quadratic_convergence(self):
        # minimize (w - 3)^2 at rate 1e-2
        leaf = np.array([10.0])
        st = AdamState()
        for k in range(5000):
            adam_step(st, {"w": leaf}, {"w": 2 * (leaf - 3.0)}, 1e-2)
        assert abs(leaf[0] - 3.0) <= 1e-6

    def test_nonfinite_aborts_and_halves(self):
        leaf = np.array([1.0])
        st = AdamState()
        rate = adam_step(st, {"w": leaf}, {"w": np.array([np.nan])}, 1e-2)
        assert rate == 0.5e-2
        assert leaf[0] == 1.0
        assert st.aborts == 1


class TestStagedTraining:
    def test_single_stage_improves(self, tiny):
        inst, test = tiny
        cfg = TrainConfig(seed=3, **FAST)
        res = training.train_tied("lamp_l1", inst, cfg, T=1)
        init = training.init_network("lamp_l1", inst, 1)
        base = training.evaluate(init, inst, test)[0]
        got = training.evaluate(res.params, inst, test)[0]
        assert got < base  # strict improvement over the alpha=1 init

    def test_deterministic(self, tiny):
        inst, _ = tiny
        cfg = TrainConfig(seed=7, **FAST)
        a = training.train_tied("lamp_l1", inst, cfg, T=2)
        b = training.train_tied("lamp_l1", inst, cfg, T=2)
        assert a.reports == b.reports
        for (ka, va), (kb, vb) in zip(sorted(a.params.leaves().items()),
                                      sorted(b.params.leaves().items())):
            assert ka == kb and np.array_equal(va, vb)

    def test_stage_monotonicity(self, tiny):
        inst, _ = tiny
        cfg = TrainConfig(seed=11, **FAST)
        res = training.train_tied("lamp_l1", inst, cfg, T=3)
        best = np.inf
        for rep in res.reports:
            assert rep.val_nmse_db <= best + 0.1
            best = min(best, rep.val_nmse_db)

    def test_untied_not_worse_than_tied(self, tiny):
        inst, _ = tiny
        cfg = TrainConfig(seed=13, **FAST)
        tied = training.train_tied("lamp_l1", inst, cfg, T=3)
        untied = training.train_untied("lamp_l1", inst, cfg, T=3,
                                       tied_result=tied)
        # the bootstrap replacement guarantees this up to optimizer noise
        assert untied.val_nmse_db <= tied.val_nmse_db + 0.1

    def test_checkpoint_round_trip_evaluation(self, tiny, tmp_path):
        inst, test = tiny
        cfg = TrainConfig(seed=17, **FAST)
        res = training.train_tied("lista", inst, cfg, T=2)
        p = tmp_path / "ck.npz"
        nw.save_checkpoint(p, res.params)
        loaded = nw.load_checkpoint(p)
        assert np.array_equal(training.evaluate(res.params, inst, test),
                              training.evaluate(loaded, inst, test))

    def test_lvamp_trains(self, tiny):
        inst, test = tiny
        cfg = TrainConfig(seed=19, **FAST)
        res = training.train_tied("lvamp", inst, cfg, T=2, family="bg",
                                  w2_init=10 * inst.sigma_w2)
        tab = training.evaluate(res.params, inst, test)
        assert np.all(np.isfinite(tab))


class TestEvaluate:
    def test_perfect_recovery_capped(self, tiny):
        inst, test = tiny
        # identity-like network: LISTA with huge B*0 and lam tiny gives zeros;
        # instead check the cap through a fabricated exact estimate
        from ampnet.algorithms import nmse_db
        assert nmse_db(test.X0, test.X0) == -150.0

    def test_zero_estimate_is_zero_db(self, tiny):
        inst, test = tiny
        from ampnet.algorithms import nmse_db
        assert abs(nmse_db(np.zeros_like(test.X0), test.X0)) <= 1e-12

    def test_matches_naive_recomputation(self, tiny):
        inst, test = tiny
        params = training.init_network("lamp_l1", inst, 3)
        tab = training.evaluate(params, inst, test)
        xs, _ = nw.forward_any(params, test.Y, inst.A)
        for t, x in enumerate(xs):
            per = [10 * np.log10(max(np.sum((x[:, d] - test.X0[:, d]) ** 2)
                                     / np.sum(test.X0[:, d] ** 2), 1e-15))
                   for d in range(test.D)
                   if np.any(test.X0[:, d] != 0.0)]
            assert abs(tab[t] - np.mean(per)) <= 1e-12


class TestStageKeys:
    def test_tied_lamp_l1_beta0_fixed(self, tiny):
        inst, _ = tiny
        p = training.init_network("lamp_l1", inst, 3)
        assert "beta[0]" not in training.stage_keys(p, 0, "global")
        assert "beta[0]" not in training.stage_keys(p, 2, "global")
        assert "alpha[0]" in training.stage_keys(p, 0, "global")
        assert set(training.stage_keys(p, 1, "layerwise")) == {"alpha[1]",
                                                               "beta[1]"}

    def test_untied_layerwise_learns_linear(self, tiny):
        inst, _ = tiny
        p = training.init_network("lamp_l1", inst, 3, tied=False)
        assert "B[2]" in training.stage_keys(p, 2, "layerwise")

    def test_lista_untied_s_from_stage1(self, tiny):
        inst, _ = tiny
        p = training.init_network("lista", inst, 3, tied=False)
        assert training.stage_keys(p, 0, "global") == ["B", "lam[0]"]
        assert "S[1]" in training.stage_keys(p, 1, "global")
