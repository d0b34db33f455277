"""Synthetic problem generation: sparse signals, measurement matrices,
noise calibration, and the two 5G scenarios (compressive random access and
massive-MIMO channel estimation), plus dataset serialization.

Complex-valued models are carried in the real-composite embedding
    y~ = [Re y; Im y],  A~ = [[Re A, -Im A], [Im A, Re A]],  x~ = [Re x; Im x]
so the entire real-valued solver/training stack applies unchanged; shrinkage
then acts on (Re, Im) coefficient pairs via their modulus.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .numerics import RngStream, SvdFactors


@dataclass
class SignalPrior:
    """Bernoulli-Gaussian prior: activity rate gamma, active variance phi."""

    gamma: float
    phi: float = 1.0
    kind: str = "bernoulli-gaussian"

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("prior: gamma must lie in (0, 1)")
        if self.phi <= 0.0:
            raise ValueError("prior: phi must be positive")


@dataclass
class MatrixSpec:
    kind: str  # iid-gaussian | geometric-kappa | qpsk-composite
    M: int
    N: int
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in ("iid-gaussian", "geometric-kappa", "qpsk-composite"):
            raise ValueError(f"unknown matrix kind '{self.kind}'")
        if self.M > self.N:
            raise ValueError("matrix spec requires M <= N")
        if self.kappa < 1.0:
            raise ValueError("kappa must be >= 1")


@dataclass
class ProblemInstance:
    A: np.ndarray
    svdA: SvdFactors
    prior: SignalPrior
    sigma_w2: float
    snr_db: float
    complex_pairs: bool = False     # True when A/x are real-composite embeddings
    score_rows: np.ndarray = None   # rows of x that enter NMSE scoring (None: all)

    @property
    def M(self):
        return self.A.shape[0]

    @property
    def N(self):
        return self.A.shape[1]


@dataclass
class SampleBatch:
    Y: np.ndarray   # M x D
    X0: np.ndarray  # N x D

    @property
    def D(self):
        return self.Y.shape[1]


@dataclass
class CellScenario:
    """Multipath cell geometry for the 5G generators."""

    n_cells: int
    users_per_cell: int
    n_rx: int
    pilot_len: int
    activity: float
    paths: int = 5
    rician_k: float = 10.0
    pathloss_exp: float = 4.0
    angle_spread_deg: float = 10.0

    def __post_init__(self):
        if min(self.n_cells, self.users_per_cell, self.n_rx, self.pilot_len,
               self.paths) < 1:
            raise ValueError("scenario counts must be positive")
        if not (0.0 < self.activity <= 1.0):
            raise ValueError("activity must lie in (0, 1]")


def gen_bg_signal(rng, prior, N, D=None):
    """Bernoulli-Gaussian draw: each entry 0 w.p. 1-gamma, else N(0, phi).

    Returns a length-N vector, or an N x D matrix when D is given.
    """
    shape = (N,) if D is None else (N, D)
    mask = rng.gen.random(shape) < prior.gamma
    vals = rng.gen.normal(0.0, math.sqrt(prior.phi), size=shape)
    return np.where(mask, vals, 0.0)


def geometric_singular_values(M, N, kappa):
    """Singular values s_i = s_1 rho^(i-1) with s_1/s_M = kappa, sum s_i^2 = N."""
    if kappa == 1.0:
        return np.full(M, math.sqrt(N / M))
    rho = kappa ** (-1.0 / (M - 1))
    s1 = math.sqrt(N * (1.0 - rho**2) / (1.0 - rho ** (2 * M)))
    return s1 * rho ** np.arange(M)


def gen_matrix(rng, spec):
    """Draw a measurement matrix per spec; returns (A, svd factors).

    iid-gaussian: entries N(0, 1/M).
    geometric-kappa: iid draw whose singular values are replaced by a
        geometric series with condition number kappa and ||A||_F^2 = N.
    qpsk-composite: real-composite embedding of i.i.d. (+-1 +-j)/sqrt(2)
        entries (returned matrix is 2M x 2N).
    """
    M, N = spec.M, spec.N
    if spec.kind == "iid-gaussian":
        A = rng.gen.normal(0.0, 1.0 / math.sqrt(M), size=(M, N))
        return A, numerics.svd(A)
    if spec.kind == "geometric-kappa":
        A0 = rng.gen.normal(0.0, 1.0 / math.sqrt(M), size=(M, N))
        f0 = numerics.svd(A0)
        s = geometric_singular_values(M, N, spec.kappa)
        f = SvdFactors(U=f0.U, s=s, V=f0.V)
        return f.reconstruct(), f
    # qpsk-composite
    re = rng.gen.choice([-1.0, 1.0], size=(M, N)) / math.sqrt(2.0)
    im = rng.gen.choice([-1.0, 1.0], size=(M, N)) / math.sqrt(2.0)
    A = embed_matrix(re + 1j * im)
    return A, numerics.svd(A)


def embed_matrix(Ac):
    """Real-composite embedding [[Re, -Im], [Im, Re]] of a complex matrix."""
    re, im = Ac.real, Ac.imag
    return np.block([[re, -im], [im, re]])


def embed_vec(xc):
    """Stack [Re; Im] along axis 0 (works for vectors and column batches)."""
    return np.concatenate([xc.real, xc.imag], axis=0)


def unembed_vec(xt):
    half = xt.shape[0] // 2
    return xt[:half] + 1j * xt[half:]


def noise_variance_for_snr(A, prior, snr_db):
    """sigma_w^2 giving E||Ax||^2 / E||w||^2 = 10^(snr_db/10) for i.i.d. BG x."""
    M = A.shape[0]
    sig_energy = prior.gamma * prior.phi * float(np.sum(A * A))
    return (sig_energy / M) * 10.0 ** (-snr_db / 10.0)


def make_instance(rng, spec, prior, snr_db):
    """Matrix draw + SVD + noise calibration, with invariant checks."""
    A, f = gen_matrix(rng, spec)
    if spec.kind == "geometric-kappa":
        fro2 = float(np.sum(A * A))
        if abs(fro2 - spec.N) > 1e-6 * spec.N:
            raise AssertionError(f"geometric-kappa: ||A||_F^2 = {fro2}, want {spec.N}")
        kap = f.s[0] / f.s[-1]
        if abs(kap - spec.kappa) > 1e-6 * spec.kappa:
            raise AssertionError(f"geometric-kappa: kappa = {kap}, want {spec.kappa}")
    sigma_w2 = noise_variance_for_snr(A, prior, snr_db)
    return ProblemInstance(A=A, svdA=f, prior=prior, sigma_w2=sigma_w2,
                           snr_db=snr_db)


def gen_batch(rng, inst, D):
    """D fresh (y, x0) pairs with y = A x0 + w, w ~ N(0, sigma_w2 I)."""
    if D < 1:
        raise ValueError("batch size must be >= 1")
    X0 = gen_bg_signal(rng, inst.prior, inst.N, D)
    Y = inst.A @ X0
    if inst.sigma_w2 > 0.0:
        Y = Y + rng.gen.normal(0.0, math.sqrt(inst.sigma_w2), size=Y.shape)
    return SampleBatch(Y=Y, X0=X0)


def wainwright_min_pilots(gamma, N):
    """Minimum pilot length 2 gamma N ln((1-gamma) N) for reliable l1 support
    recovery, rounded up."""
    if not (0.0 <= gamma < 1.0):
        raise ValueError("gamma must lie in [0, 1)")
    raw = 2.0 * gamma * N * math.log((1.0 - gamma) * N) if gamma > 0.0 else 0.0
    return max(0, math.ceil(raw))


# ---------------------------------------------------------------------------
# 5G generators (hexagonal cells, multipath Rician channels)
# ---------------------------------------------------------------------------

_HEX_NORMALS = np.array([[math.cos(a), math.sin(a)]
                         for a in (math.pi / 6, math.pi / 2, 5 * math.pi / 6)])


def _sample_hex(rng, n):
    """Uniform points in a regular hexagon of circumradius 1 (vertex on +x)."""
    pts = np.empty((n, 2))
    got = 0
    lim = math.sqrt(3.0) / 2.0
    while got < n:
        cand = rng.gen.uniform(-1.0, 1.0, size=(2 * (n - got) + 8, 2))
        ok = np.all(np.abs(cand @ _HEX_NORMALS.T) <= lim, axis=1)
        take = cand[ok][: n - got]
        pts[got:got + take.shape[0]] = take
        got += take.shape[0]
    return pts


def _cell_centers(n_cells):
    if n_cells == 1:
        return np.zeros((1, 2))
    if n_cells == 7:
        ang = math.pi / 6 + np.arange(6) * math.pi / 3
        ring = math.sqrt(3.0) * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return np.vstack([np.zeros((1, 2)), ring])
    raise ValueError("cell layouts supported: 1 (single) or 7 (flower)")


def _draw_path_gains(rng, scen, n_users):
    """Per-user multipath gains g_np and phase angles psi_np.

    Users are placed uniformly in their cells; the path gain is a Rician
    fluctuation (k-factor scen.rician_k, per-path power 1/P) divided by
    (1 + d^rho) with d the distance to the primary base station at the origin.
    n_users may be any multiple of the per-draw user count (rows repeat the
    cell pattern), which lets callers draw whole batches at once.
    """
    P = scen.paths
    centers = _cell_centers(scen.n_cells)
    per_draw = scen.n_cells * scen.users_per_cell
    if n_users % per_draw:
        raise ValueError("n_users must be a multiple of the scenario user count")
    cell_of = np.tile(np.repeat(np.arange(scen.n_cells), scen.users_per_cell),
                      n_users // per_draw)
    pos = _sample_hex(rng, n_users) + centers[cell_of]
    d = np.linalg.norm(pos, axis=1)
    k = scen.rician_k
    los = math.sqrt(k / (k + 1.0)) * np.exp(
        1j * rng.gen.uniform(0.0, 2.0 * math.pi, size=(n_users, P)))
    nlos = math.sqrt(1.0 / (k + 1.0)) / math.sqrt(2.0) * (
        rng.gen.normal(size=(n_users, P)) + 1j * rng.gen.normal(size=(n_users, P)))
    h = (los + nlos) / math.sqrt(P)
    g = h / (1.0 + d[:, None] ** scen.pathloss_exp)
    spread = math.radians(scen.angle_spread_deg)
    central = rng.gen.uniform(0.0, 2.0 * math.pi, size=n_users)
    psi = central[:, None] + rng.gen.uniform(-spread / 2, spread / 2, size=(n_users, P))
    return g, psi


def _steering_sum(gains, angles, n_rx):
    """z_q = sum_p g_p exp(j * psi_p * q) for q = 0..n_rx-1 (per user)."""
    q = np.arange(n_rx)
    return np.einsum("up,upq->uq", gains, np.exp(1j * angles[..., None] * q))


def _qpsk(rng, M, N):
    re = rng.gen.choice([-1.0, 1.0], size=(M, N))
    im = rng.gen.choice([-1.0, 1.0], size=(M, N))
    return (re + 1j * im) / math.sqrt(2.0)


def _ra_signal(rng, scenario, D):
    """D columns of random-access activity/channel coefficients (complex)."""
    N = scenario.users_per_cell
    g, _ = _draw_path_gains(rng, scenario, N * D)
    x = g.sum(axis=1).reshape(D, N).T
    active = rng.gen.random((N, D)) < scenario.activity
    return np.where(active, x, 0.0 + 0.0j)


def _complex_noise(rng, sigma_c2, shape):
    return math.sqrt(sigma_c2 / 2.0) * (rng.gen.normal(size=shape)
                                        + 1j * rng.gen.normal(size=shape))


def gen_random_access(rng, scenario, D=1024, snr_db=10.0, return_sampler=False):
    """Compressive random access: QPSK pilots, sporadic single-antenna users.

    x_n = delta_n * sum_p g_np for activity indicators delta_n ~ Bern(gamma);
    a fixed pilot matrix is shared by all D draws.  Returns the real-composite
    problem instance and sample batch (plus, optionally, a fresh-batch sampler
    for training against the same pilots and noise level).
    """
    if scenario.n_cells != 1 or scenario.n_rx != 1:
        raise ValueError("random access expects a single cell and one BS antenna")
    N = scenario.users_per_cell
    M = scenario.pilot_len
    Ac = _qpsk(rng, M, N)
    Xc = _ra_signal(rng, scenario, D)
    sig = Ac @ Xc
    sigma_c2 = float(np.mean(np.sum(np.abs(sig) ** 2, axis=0))) / (
        M * 10.0 ** (snr_db / 10.0))
    Yc = sig + _complex_noise(rng, sigma_c2, (M, D))
    A = embed_matrix(Ac)
    act = np.abs(Xc) > 0
    phi = float(np.mean(np.abs(Xc[act]) ** 2)) if act.any() else 1.0
    prior = SignalPrior(gamma=scenario.activity, phi=phi)
    inst = ProblemInstance(A=A, svdA=numerics.svd(A), prior=prior,
                           sigma_w2=sigma_c2 / 2.0, snr_db=snr_db,
                           complex_pairs=True)
    batch = SampleBatch(Y=embed_vec(Yc), X0=embed_vec(Xc))
    if not return_sampler:
        return inst, batch

    def sampler(srng, d):
        X = _ra_signal(srng, scenario, d)
        Y = Ac @ X + _complex_noise(srng, sigma_c2, (M, d))
        return SampleBatch(Y=embed_vec(Y), X0=embed_vec(X))

    return inst, batch, sampler


def _mimo_draw_X(rng, scenario, draws):
    """Angle-domain channel matrices X for several scenario draws."""
    N = scenario.n_cells * scenario.users_per_cell
    Nr = scenario.n_rx
    g, psi = _draw_path_gains(rng, scenario, N * draws)
    Z = _steering_sum(g, psi, Nr)
    X = np.fft.fft(Z, axis=1) / Nr
    return X.reshape(draws, N, Nr)


def gen_massive_mimo(rng, scenario, draws=16, snr_db=20.0, return_sampler=False):
    """Massive-MIMO channel estimation: per-receive-angle linear models.

    All users transmit (activity 1); measurements are transformed to the
    critically sampled angle grid, giving one model y_l = A x_l + w_l per
    angle l with a shared pilot matrix A.  Returns a list of
    (instance, batch) pairs, one per angle; the instance is shared and its
    score_rows tag the primary-cell users' rows for NMSE scoring.  The
    optional sampler pools angle columns across fresh draws for training.
    """
    if scenario.n_cells < 1 or scenario.n_rx < 2:
        raise ValueError("massive MIMO expects several receive antennas")
    N = scenario.n_cells * scenario.users_per_cell
    M = scenario.pilot_len
    Nr = scenario.n_rx
    Ac = _qpsk(rng, M, N)
    X_all = _mimo_draw_X(rng, scenario, draws)
    sig_energy = float(np.mean(np.sum(np.abs(
        np.einsum("mn,dnl->dml", Ac, X_all)) ** 2, axis=1)))
    sigma_c2 = sig_energy / (M * 10.0 ** (snr_db / 10.0))
    A = embed_matrix(Ac)
    primary = np.arange(scenario.users_per_cell)
    score_rows = np.concatenate([primary, primary + N])
    nominal_gamma = min(0.5, scenario.paths / Nr)
    phi = float(np.mean(np.abs(X_all) ** 2)) / nominal_gamma
    prior = SignalPrior(gamma=nominal_gamma, phi=phi)
    inst = ProblemInstance(A=A, svdA=numerics.svd(A), prior=prior,
                           sigma_w2=sigma_c2 / 2.0, snr_db=snr_db,
                           complex_pairs=True, score_rows=score_rows)
    out = []
    for l in range(Nr):
        Xl = X_all[:, :, l].T  # N x draws
        Yl = Ac @ Xl + _complex_noise(rng, sigma_c2, (M, draws))
        out.append((inst, SampleBatch(Y=embed_vec(Yl), X0=embed_vec(Xl))))
    if not return_sampler:
        return out

    def sampler(srng, d):
        need = -(-d // Nr)  # scenario draws needed to cover d angle columns
        X = _mimo_draw_X(srng, scenario, need)
        Xcols = np.moveaxis(X, 1, 2).reshape(need * Nr, N).T[:, :d]
        Y = Ac @ Xcols + _complex_noise(srng, sigma_c2, (M, d))
        return SampleBatch(Y=embed_vec(Y), X0=embed_vec(Xcols))

    return out, sampler


def merge_batches(batches):
    """Concatenate sample batches column-wise (shared instance assumed)."""
    return SampleBatch(Y=np.concatenate([b.Y for b in batches], axis=1),
                       X0=np.concatenate([b.X0 for b in batches], axis=1))


# ---------------------------------------------------------------------------
# Dataset serialization (bit-exact round trip)
# ---------------------------------------------------------------------------

def save_dataset(path, inst, batch, seed=None):
    meta = {
        "gamma": inst.prior.gamma, "phi": inst.prior.phi,
        "snr_db": inst.snr_db, "sigma_w2": inst.sigma_w2,
        "complex_pairs": inst.complex_pairs,
        "seed": seed, "D": int(batch.D),
    }
    arrays = dict(A=inst.A, U=inst.svdA.U, s=inst.svdA.s, V=inst.svdA.V,
                  Y=batch.Y, X0=batch.X0)
    if inst.score_rows is not None:
        arrays["score_rows"] = np.asarray(inst.score_rows)
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_dataset(path):
    z = np.load(path, allow_pickle=False)
    meta = json.loads(str(z["meta"]))
    inst = ProblemInstance(
        A=z["A"], svdA=SvdFactors(U=z["U"], s=z["s"], V=z["V"]),
        prior=SignalPrior(gamma=meta["gamma"], phi=meta["phi"]),
        sigma_w2=meta["sigma_w2"], snr_db=meta["snr_db"],
        complex_pairs=meta["complex_pairs"],
        score_rows=z["score_rows"] if "score_rows" in z else None)
    return inst, SampleBatch(Y=z["Y"], X0=z["X0"]), meta
