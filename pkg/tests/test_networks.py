import numpy as np
import pytest

from ampnet import algorithms as alg
from ampnet import datagen, networks as nw
from ampnet.datagen import MatrixSpec, SignalPrior
from ampnet.numerics import RngStream
from ampnet.shrinkage import soft_threshold


@pytest.fixture(scope="module")
def small():
    rng = RngStream(7)
    prior = SignalPrior(gamma=0.2, phi=1.0)
    inst = datagen.make_instance(rng, MatrixSpec("iid-gaussian", 10, 20),
                                 prior, 20.0)
    batch = datagen.gen_batch(rng.spawn(1), inst, 6)
    return inst, batch


@pytest.fixture(scope="module")
def medium():
    rng = RngStream(21)
    prior = SignalPrior(gamma=0.1, phi=1.0)
    inst = datagen.make_instance(rng, MatrixSpec("iid-gaussian", 60, 120),
                                 prior, 30.0)
    batch = datagen.gen_batch(rng.spawn(1), inst, 12)
    return inst, batch


def loss_and_grad(params, y, A, X0):
    xs, tape = nw.forward_any(params, y, A)
    gxT = (2.0 / y.shape[1]) * (xs[-1] - X0)
    grads = nw.backward_any(params, tape, y, A, gxT)
    return float(np.sum((xs[-1] - X0) ** 2) / y.shape[1]), grads


def fd_check(params, y, A, X0, tol=1e-5, n_probe=6):
    """Central-difference check of every leaf's gradient."""
    _, grads = loss_and_grad(params, y, A, X0)

    def loss():
        xs, _ = nw.forward_any(params, y, A)
        return float(np.sum((xs[-1] - X0) ** 2) / y.shape[1])

    worst = 0.0
    for key, leaf in params.leaves().items():
        g = np.asarray(grads[key])
        for i in np.linspace(0, leaf.size - 1, min(leaf.size, n_probe)).astype(int):
            ix = np.unravel_index(i, leaf.shape)
            old = leaf[ix]
            h = 1e-6 * max(1.0, abs(old))
            leaf[ix] = old + h
            lp = loss()
            leaf[ix] = old - h
            lm = loss()
            leaf[ix] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[ix]) / (1.0 + abs(fd)))
    assert worst <= tol, f"gradient mismatch {worst:.2e}"


class TestListaForward:
    def test_matches_ista_bitwise(self, medium):
        inst, batch = medium
        beta = 0.9 / float(inst.svdA.s[0] ** 2)
        lam_pen = 0.05
        T = 6
        tr = alg.ista(inst, batch.Y, lam_pen, beta=beta, T=T, x0=batch.X0)
        params = nw.ListaParams(B=beta * inst.A.T, S=[],
                                lam=np.full(T, beta * lam_pen), tied=True,
                                structured=True)
        xs, _ = nw.lista_forward(params, batch.Y, inst.A)
        assert np.array_equal(xs[-1], tr.xhat)

    def test_zero_layers(self, small):
        inst, batch = small
        params = nw.lista_init(inst.A, 0)
        xs, _ = nw.lista_forward(params, batch.Y, inst.A)
        assert xs == []

    def test_huge_threshold_outputs_zero(self, small):
        inst, batch = small
        params = nw.lista_init(inst.A, 3, lam0=1e9)
        xs, _ = nw.lista_forward(params, batch.Y, inst.A)
        assert all(np.all(x == 0.0) for x in xs)

    def test_prefix_consistency(self, small):
        inst, batch = small
        params = nw.lista_init(inst.A, 5, lam0=0.02)
        xs, _ = nw.lista_forward(params, batch.Y, inst.A)
        from ampnet.training import truncate
        xs3, _ = nw.lista_forward(truncate(params, 3), batch.Y, inst.A)
        assert np.array_equal(xs[2], xs3[-1])


class TestLampL1Forward:
    def test_matches_amp_bitwise(self, medium):
        inst, batch = medium
        T = 8
        alpha = 1.1402
        tr = alg.amp_l1(inst, batch.Y, alpha, T=T, x0=batch.X0)
        params = nw.LampL1Params(B=[inst.A.T], alpha=np.full(T, alpha),
                                 beta=np.ones(T), tied=True)
        xs, _ = nw.lamp_l1_forward(params, batch.Y, inst.A)
        assert np.array_equal(xs[-1], tr.xhat)

    def test_zero_measurement_gives_zero(self, small):
        inst, _ = small
        params = nw.lamp_l1_init(inst.A, 4)
        xs, _ = nw.lamp_l1_forward(params, np.zeros((10, 3)), inst.A)
        assert all(np.all(x == 0.0) for x in xs)

    def test_sst_lamp_equals_lamp_l1(self, small):
        inst, batch = small
        rng = RngStream(3)
        T = 4
        p1 = nw.lamp_l1_init(inst.A, T)
        p1.alpha[:] = rng.gen.uniform(0.8, 1.4, T)
        p1.beta[:] = rng.gen.uniform(0.7, 1.3, T)
        xs1, _ = nw.lamp_l1_forward(p1, batch.Y, inst.A)
        p2 = nw.LampParams(B=p1.B, theta=[np.array([p1.beta[t], p1.alpha[t]])
                                          for t in range(T)],
                           family="sst", tied=True)
        xs2, _ = nw.lamp_forward(p2, batch.Y, inst.A)
        for a, b in zip(xs1, xs2):
            assert np.array_equal(a, b)

    def test_onsager_is_support_fraction(self, small):
        inst, batch = small
        params = nw.lamp_l1_init(inst.A, 3)
        xs, tape = nw.lamp_l1_forward(params, batch.Y, inst.A)
        for t in range(1, 3):
            counts = np.count_nonzero(xs[t - 1], axis=0)
            # beta=1: Onsager coefficient recorded for layer t equals ||x_t||_0/M
            assert np.array_equal(tape[t - 1]["b"], counts / inst.M)

    def test_mu_overparameterization(self, small):
        # {mu B, mu alpha_0, beta_0/mu} gives the same first-layer output
        inst, batch = small
        mu = 1.7
        p = nw.lamp_l1_init(inst.A, 1)
        xs, _ = nw.lamp_l1_forward(p, batch.Y, inst.A)
        q = nw.LampL1Params(B=[mu * p.B[0]], alpha=mu * p.alpha,
                            beta=p.beta / mu, tied=True)
        xs2, _ = nw.lamp_l1_forward(q, batch.Y, inst.A)
        assert np.allclose(xs[0], xs2[0], atol=1e-14)


class TestAppendixEquivalence:
    def test_scaled_form_equals_raw_form(self, medium):
        """The raw unfolded iteration with a per-layer measurement scale
        beta_t (x_{t+1} = st(x_t + B_t v_t; lam_t); v via beta_t A and the
        layer's own divergence as bypass gain) equals the beta-scaled learned
        form under the variable map xbar_t = beta_{t-1} x_t,
        Bbar_t = beta_{t-1} B_t, alphabar_t = beta_{t-1} alpha_t,
        betabar_t = beta_t / beta_{t-1} (with beta_{-1} = 1)."""
        inst, batch = medium
        rng = RngStream(5)
        T = 5
        A = inst.A
        M = inst.M
        beta_raw = rng.gen.uniform(0.6, 1.4, T)
        alpha_raw = rng.gen.uniform(0.9, 1.3, T)
        Bs = [rng.gen.normal(size=(inst.N, M)) / 3.0 for _ in range(T)]
        beta_prev = np.concatenate([[1.0], beta_raw[:-1]])
        # raw form
        x = np.zeros((inst.N, batch.D))
        v = batch.Y.copy()
        raw_xs = []
        for t in range(T):
            lam = alpha_raw[t] * np.sqrt(np.sum(v * v, axis=0)) / np.sqrt(M)
            xn = soft_threshold(x + Bs[t] @ v, lam[None, :])
            bypass = (beta_raw[t] / beta_prev[t]) * (
                np.count_nonzero(xn, axis=0) / M)
            v = batch.Y - beta_raw[t] * (A @ xn) + bypass[None, :] * v
            x = xn
            raw_xs.append(x)
        # learned form with mapped parameters
        p = nw.LampL1Params(
            B=[beta_prev[t] * Bs[t] for t in range(T)],
            alpha=beta_prev * alpha_raw,
            beta=beta_raw / beta_prev,
            tied=False)
        xs, _ = nw.lamp_l1_forward(p, batch.Y, inst.A)
        for t in range(T):
            want = beta_raw[t] * raw_xs[t]
            assert np.max(np.abs(xs[t] - want)) <= 1e-12 * max(
                1.0, np.max(np.abs(want)))


class TestLvamp:
    def test_frozen_equals_matched_vamp(self, medium):
        inst, batch = medium
        T = 6
        tr = alg.vamp_matched(inst, batch.Y, T=T, x0=batch.X0)
        params = nw.lvamp_init(inst, T, "bg",
                               theta0=alg.matched_bg_theta(inst.prior))
        xs, _ = nw.lvamp_forward(params, batch.Y)
        assert np.array_equal(xs[-1], tr.xhat)

    def test_gh_form_matches_svd_form(self, medium):
        inst, batch = medium
        T = 4
        th0 = alg.matched_bg_theta(inst.prior)
        p = nw.lvamp_init(inst, T, "bg", theta0=th0)
        xs, tape = nw.lvamp_forward(p, batch.Y)
        # per-layer G_t, H_t from the normal-equation expansion at the
        # realized pseudo-prior variances (columns share s2 only at t=0, so
        # evaluate on a single column)
        y1 = batch.Y[:, :1]
        xs1, tape1 = nw.lvamp_forward(p, y1)
        A = inst.A
        G, H = [], []
        for t in range(T):
            s2 = float(tape1["layers"][t]["s2"][0])
            rho = inst.sigma_w2 / s2
            Cinv = np.linalg.inv(A.T @ A + rho * np.eye(inst.N))
            G.append(rho * Cinv)
            H.append(Cinv @ A.T)
        q = nw.LvampParams(form="gh", family="bg",
                           theta=[th0.copy() for _ in range(T)],
                           G=G, H=H, tied=False, s2_init=p.s2_init)
        xs2, _ = nw.lvamp_forward(q, y1)
        for a, b in zip(xs1, xs2):
            err = np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)))
            assert err <= 1e-9

    def test_full_column_rank_divergence_formula(self):
        # R = N: the divergence reduces to (1/N) sum 1/(s_i^2 s2/w2 + 1)
        rng = RngStream(9)
        prior = SignalPrior(0.2, 1.0)
        from ampnet import numerics
        A = rng.gen.normal(size=(24, 16)) / np.sqrt(24)
        inst = datagen.ProblemInstance(
            A=A, svdA=numerics.svd(A), prior=prior,
            sigma_w2=datagen.noise_variance_for_snr(A, prior, 20.0),
            snr_db=20.0)
        batch = datagen.gen_batch(rng.spawn(1), inst, 3)
        p = nw.lvamp_init(inst, 1, "bg", theta0=alg.matched_bg_theta(prior))
        _, tape = nw.lvamp_forward(p, batch.Y)
        c = tape["layers"][0]
        s = inst.svdA.s
        want = np.mean(1.0 / (np.outer(s * s, 1.0 / c["rho"]) + 1.0), axis=0)
        assert np.allclose(c["nu_t"], want, atol=1e-12)

    def test_unit_singular_values_give_half(self):
        # s_i = 1 for all i, R = N, s2~ = w2  ->  divergence 1/2
        inst = datagen.ProblemInstance(
            A=np.eye(8), svdA=__import__("ampnet").numerics.svd(np.eye(8)),
            prior=SignalPrior(0.2, 1.0), sigma_w2=0.3, snr_db=0.0)
        p = nw.lvamp_init(inst, 1, "bg", s2_init=0.3)
        _, tape = nw.lvamp_forward(p, np.ones((8, 2)))
        assert np.allclose(tape["layers"][0]["nu_t"], 0.5)


class TestGradients:
    def test_lista_variants(self, small):
        inst, batch = small
        for tied in (True, False):
            fd_check(nw.lista_init(inst.A, 3, tied=tied, lam0=0.05),
                     batch.Y, inst.A, batch.X0)
        fd_check(nw.lista_init(inst.A, 3, structured=True, lam0=0.05),
                 batch.Y, inst.A, batch.X0)

    def test_lamp_l1(self, small):
        inst, batch = small
        for tied in (True, False):
            fd_check(nw.lamp_l1_init(inst.A, 3, tied=tied),
                     batch.Y, inst.A, batch.X0)

    @pytest.mark.parametrize("fam", ["exp", "spline", "bg"])
    def test_lamp_smooth_families(self, small, fam):
        inst, batch = small
        fd_check(nw.lamp_init(inst.A, 3, fam, tied=False),
                 batch.Y, inst.A, batch.X0)

    def test_lamp_pair_mode(self):
        rng = RngStream(31)
        prior = SignalPrior(0.3, 1.0)
        spec = MatrixSpec("qpsk-composite", 6, 10)
        A, f = datagen.gen_matrix(rng, spec)
        inst = datagen.ProblemInstance(A=A, svdA=f, prior=prior, sigma_w2=0.01,
                                       snr_db=20.0, complex_pairs=True)
        batch = datagen.gen_batch(rng.spawn(1), inst, 5)
        p = nw.lamp_init(A, 3, "bg", tied=False, pair=True, scale_b=True)
        fd_check(p, batch.Y, A, batch.X0)

    def test_lvamp_forms(self, small):
        inst, batch = small
        for form in ("svd", "gh"):
            for tied in (True, False):
                fd_check(nw.lvamp_init(inst, 3, "bg", form=form, tied=tied),
                         batch.Y, inst.A, batch.X0)

    def test_zero_loss_gradient_gives_zero(self, small):
        inst, batch = small
        p = nw.lamp_l1_init(inst.A, 2)
        xs, tape = nw.lamp_l1_forward(p, batch.Y, inst.A)
        grads = nw.lamp_l1_backward(p, tape, batch.Y, inst.A,
                                    np.zeros_like(xs[-1]))
        for k, g in grads.items():
            assert np.all(np.asarray(g) == 0.0), k

    def test_single_layer_lista_closed_form(self):
        # one unstructured layer: x1 = st(B y; lam); hand-derived dL/dB
        rng = RngStream(33)
        N, M, D = 4, 3, 5
        A = rng.gen.normal(size=(M, N))
        y = rng.gen.normal(size=(M, D))
        X0 = rng.gen.normal(size=(N, D))
        lam = 0.3
        params = nw.ListaParams(B=rng.gen.normal(size=(N, M)), S=[np.zeros((N, N))],
                                lam=np.array([lam]), tied=True, structured=False)
        xs, tape = nw.lista_forward(params, y, A)
        gxT = (2.0 / D) * (xs[-1] - X0)
        grads = nw.lista_backward(params, tape, y, A, gxT)
        z = params.B @ y
        mask = (np.abs(z) > lam).astype(float)
        want = ((2.0 / D) * (soft_threshold(z, lam) - X0) * mask) @ y.T
        assert np.allclose(grads["B"], want, atol=1e-12)


class TestCheckpoint:
    @pytest.mark.parametrize("make", [
        lambda inst: nw.lista_init(inst.A, 3, tied=False, lam0=0.07),
        lambda inst: nw.lamp_l1_init(inst.A, 3, tied=False),
        lambda inst: nw.lamp_init(inst.A, 3, "pwlin", tied=True),
        lambda inst: nw.lvamp_init(inst, 3, "bg", form="svd", tied=True),
        lambda inst: nw.lvamp_init(inst, 2, "bg", form="gh", tied=False),
    ])
    def test_round_trip(self, small, tmp_path, make):
        inst, batch = small
        params = make(inst)
        path = tmp_path / "ck.npz"
        nw.save_checkpoint(path, params)
        loaded = nw.load_checkpoint(path)
        xs1, _ = nw.forward_any(params, batch.Y, inst.A)
        xs2, _ = nw.forward_any(loaded, batch.Y, inst.A)
        for a, b in zip(xs1, xs2):
            assert np.array_equal(a, b)
