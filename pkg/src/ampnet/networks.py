"""Unfolded T-layer networks: LISTA, LAMP-l1, generic LAMP, and LVAMP.

Forward passes expose every layer's estimate (prefix-consistent taps) and a
tape of intermediates; backward passes return exact reverse-mode gradients of
a loss seeded at the last tap, including the paths through the per-layer
noise estimate sigma_t = ||v_t||/sqrt(M) and through the Onsager coefficient
(the Jacobian-diagonal sum of the shrinkage).

Batches are column-major: y is M x D, estimates are N x D.  Parameters are
held in small dataclasses; leaves() exposes mutable views keyed by name so an
optimizer can update any subset in place.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .shrinkage import THETA_INIT, Shrinker, soft_threshold

_NORM_GUARD = 1e-12   # lower bound on ||v|| when dividing by it
_DVG_CLIP = 1e-6      # divergence clip [clip, 1-clip] in the VAMP decoupling


def _colnorm(v):
    return np.sqrt(np.sum(v * v, axis=0))


# ---------------------------------------------------------------------------
# LISTA
# ---------------------------------------------------------------------------

@dataclass
class ListaParams:
    B: np.ndarray                 # N x M, shared across layers
    S: list                       # [] if structured; else len 1 (tied) or T
    lam: np.ndarray               # (T,) thresholds
    tied: bool = True
    structured: bool = False      # S_t = I - B A, computed in residual form

    @property
    def T(self):
        return self.lam.size

    def S_at(self, t):
        return self.S[0] if self.tied else self.S[t]

    def leaves(self):
        out = {"B": self.B}
        if not self.structured:
            if self.tied:
                out["S"] = self.S[0]
            else:
                for t in range(1, self.T):
                    out[f"S[{t}]"] = self.S[t]
        for t in range(self.T):
            out[f"lam[{t}]"] = self.lam[t:t + 1]
        return out


def lista_init(A, T, tied=True, structured=False, lam0=0.1):
    M, N = A.shape
    B = np.ascontiguousarray(A.T) / (1.01 * np.linalg.norm(A, 2) ** 2)
    S = []
    if not structured:
        S0 = np.eye(N) - B @ A
        S = [S0.copy()] if tied else [S0.copy() for _ in range(T)]
    return ListaParams(B=B, S=S, lam=np.full(T, float(lam0)), tied=tied,
                       structured=structured)


def lista_forward(params, y, A):
    """x_{t+1} = st(S_t x_t + B y; lam_t); structured mode uses
    x_{t+1} = st(x_t + B(y - A x_t); lam_t), the same map with S = I - BA."""
    T = params.T
    xs, tape = [], []
    x = np.zeros((params.B.shape[0], y.shape[1]))
    By = None if params.structured else params.B @ y
    for t in range(T):
        if params.structured:
            z = params.B @ y if t == 0 else x + params.B @ (y - A @ x)
        else:
            z = By if t == 0 else params.S_at(t) @ x + By
        lam = params.lam[t]
        xn = soft_threshold(z, lam)
        tape.append({"x": x, "z": z, "mask": (np.abs(z) > lam).astype(np.float64),
                     "sgn": np.sign(z)})
        x = xn
        xs.append(x)
    return xs, tape


def lista_backward(params, tape, y, A, gxT, min_layer=0):
    T = params.T
    grads = {"B": np.zeros_like(params.B)}
    if not params.structured:
        if params.tied:
            grads["S"] = np.zeros_like(params.S[0])
        else:
            for t in range(1, T):
                grads[f"S[{t}]"] = np.zeros_like(params.S[t])
    gx = gxT
    gBy = None
    for t in reversed(range(T)):
        c = tape[t]
        gz = gx * c["mask"]
        grads[f"lam[{t}]"] = np.array([-np.sum(c["sgn"] * gz)])
        if params.structured:
            if t == 0:
                grads["B"] += gz @ y.T
                gx = None
            else:
                v = y - A @ c["x"]
                grads["B"] += gz @ v.T
                gx = gz - A.T @ (params.B.T @ gz)
        else:
            if gBy is None:
                gBy = np.zeros_like(gz)
            gBy += gz
            if t == 0:
                gx = None
            else:
                key = "S" if params.tied else f"S[{t}]"
                grads[key] += gz @ c["x"].T
                gx = params.S_at(t).T @ gz
        if t == min_layer:
            break
    if not params.structured and gBy is not None:
        grads["B"] += gBy @ y.T
    return grads


# ---------------------------------------------------------------------------
# Generic LAMP (and LAMP-l1 as its scaled-soft-threshold special case)
# ---------------------------------------------------------------------------

@dataclass
class LampParams:
    B: list                       # len 1 (tied) or T, each N x M
    theta: list                   # len T parameter vectors
    family: str
    pair: bool = False
    tied: bool = True

    @property
    def T(self):
        return len(self.theta)

    def B_at(self, t):
        return self.B[0] if self.tied else self.B[t]

    def leaves(self):
        out = {}
        if self.tied:
            out["B"] = self.B[0]
        else:
            for t in range(self.T):
                out[f"B[{t}]"] = self.B[t]
        for t in range(self.T):
            out[f"theta[{t}]"] = self.theta[t]
        return out


def lamp_init(A, T, family, tied=True, pair=False, theta0=None, scale_b=False):
    B = A.T.copy()
    if scale_b:
        B /= np.linalg.norm(A, 2) ** 2
    theta0 = np.asarray(theta0 if theta0 is not None else THETA_INIT[family],
                        dtype=np.float64)
    return LampParams(B=[B] if tied else [B.copy() for _ in range(T)],
                      theta=[theta0.copy() for _ in range(T)],
                      family=family, pair=pair, tied=tied)


def lamp_forward(params, y, A):
    """x_{t+1} = eta(x_t + B_t v_t; sigma_t, theta_t) with
    sigma_t = ||v_t||/sqrt(M) and Onsager-corrected residual
    v_{t+1} = y - A x_{t+1} + (diag-sum/M) v_t."""
    M = A.shape[0]
    sqrtM = math.sqrt(M)
    shr = Shrinker(params.family, params.pair)
    x = np.zeros((params.B_at(0).shape[0], y.shape[1]))
    v = y.copy()
    xs, tape = [], []
    for t in range(params.T):
        n = _colnorm(v)
        sigma = n / sqrtM
        r = x + params.B_at(t) @ v
        val, sc = shr.forward(r, params.theta[t], sigma)
        dsum = shr.diag_sum(sc)
        b = dsum / M
        vn = y - A @ val + b[None, :] * v
        tape.append({"x": x, "v": v, "n": n, "sc": sc, "b": b})
        x, v = val, vn
        xs.append(x)
    return xs, tape


def lamp_backward(params, tape, y, A, gxT, min_layer=0):
    M = A.shape[0]
    sqrtM = math.sqrt(M)
    shr = Shrinker(params.family, params.pair)
    grads = {}
    if params.tied:
        grads["B"] = np.zeros_like(params.B[0])
    gx = gxT
    gv = None
    for t in reversed(range(params.T)):
        c = tape[t]
        if gv is not None:
            gx = gx - A.T @ gv
            gb = np.sum(c["v"] * gv, axis=0)
            gv_prev = c["b"][None, :] * gv
        else:
            gb = None
            gv_prev = np.zeros_like(c["v"])
        gdsum = None if gb is None else gb / M
        g_r, g_theta, g_sigma = shr.vjp(c["sc"], gx, gdsum)
        grads[f"theta[{t}]"] = g_theta
        nn = np.maximum(c["n"], _NORM_GUARD)
        gv_prev += c["v"] * (g_sigma / (sqrtM * nn))[None, :]
        key = "B" if params.tied else f"B[{t}]"
        gB = g_r @ c["v"].T
        grads[key] = grads.get(key, 0.0) + gB
        gv_prev += params.B_at(t).T @ g_r
        gx, gv = g_r, gv_prev
        if t == min_layer:
            break
    return grads


@dataclass
class LampL1Params:
    """LAMP with beta-scaled soft thresholding: per layer
    x_{t+1} = beta_t st(x_t + B_t v_t; alpha_t sigma_t).  Internally this is
    the generic network with sst shrinkage and theta_t = [beta_t, alpha_t]."""

    B: list
    alpha: np.ndarray  # (T,)
    beta: np.ndarray   # (T,)
    tied: bool = True
    pair: bool = False

    @property
    def T(self):
        return self.alpha.size

    def leaves(self):
        out = {}
        if self.tied:
            out["B"] = self.B[0]
        else:
            for t in range(self.T):
                out[f"B[{t}]"] = self.B[t]
        for t in range(self.T):
            out[f"alpha[{t}]"] = self.alpha[t:t + 1]
            out[f"beta[{t}]"] = self.beta[t:t + 1]
        return out

    def as_generic(self):
        return LampParams(B=self.B,
                          theta=[np.array([self.beta[t], self.alpha[t]])
                                 for t in range(self.T)],
                          family="sst", pair=self.pair, tied=self.tied)


def lamp_l1_init(A, T, tied=True, pair=False, scale_b=False):
    B = A.T.copy()
    if scale_b:
        B /= np.linalg.norm(A, 2) ** 2
    return LampL1Params(B=[B] if tied else [B.copy() for _ in range(T)],
                        alpha=np.ones(T), beta=np.ones(T), tied=tied, pair=pair)


def lamp_l1_forward(params, y, A):
    return lamp_forward(params.as_generic(), y, A)


def lamp_l1_backward(params, tape, y, A, gxT, min_layer=0):
    g = lamp_backward(params.as_generic(), tape, y, A, gxT, min_layer)
    for t in range(params.T):
        key = f"theta[{t}]"
        if key in g:
            gth = g.pop(key)
            g[f"beta[{t}]"] = gth[0:1].copy()
            g[f"alpha[{t}]"] = gth[1:2].copy()
    return g


# ---------------------------------------------------------------------------
# LVAMP (shared engine for the VAMP algorithm and its unfolded network)
# ---------------------------------------------------------------------------

@dataclass
class LvampParams:
    form: str                     # 'svd' or 'gh'
    family: str
    theta: list                   # len T shrinkage parameters
    # svd form (lists of len 1 when tied, else T)
    U: list = None
    s: list = None
    V: list = None
    w2: list = None               # each a shape-(1,) array
    # gh form
    G: list = None
    H: list = None
    pair: bool = False
    tied: bool = True
    s2_init: float = 1.0          # initial pseudo-prior variance

    @property
    def T(self):
        return len(self.theta)

    def _i(self, t):
        return 0 if self.tied else t

    def leaves(self):
        out = {}
        names = ("U", "s", "V", "w2") if self.form == "svd" else ("G", "H")
        for name in names:
            vals = getattr(self, name)
            if self.tied:
                out[name] = vals[0]
            else:
                for t in range(self.T):
                    out[f"{name}[{t}]"] = vals[t]
        for t in range(self.T):
            out[f"theta[{t}]"] = self.theta[t]
        return out


def lvamp_init(inst, T, family, form="svd", tied=True, pair=False,
               theta0=None, w2_init=None, s2_init=None):
    """Initialize at the algorithmic prescription: the true SVD (svd form) or
    the regularized normal-equation solve (gh form)."""
    theta0 = np.asarray(theta0 if theta0 is not None else THETA_INIT[family],
                        dtype=np.float64)
    w2 = float(inst.sigma_w2 if w2_init is None else w2_init)
    s2i = float(s2_init if s2_init is not None
                else inst.prior.gamma * inst.prior.phi + 1.0)
    n_lin = 1 if tied else T
    kw = dict(form=form, family=family, pair=pair, tied=tied, s2_init=s2i,
              theta=[theta0.copy() for _ in range(T)])
    if form == "svd":
        f = inst.svdA
        kw.update(U=[f.U.copy() for _ in range(n_lin)],
                  s=[f.s.copy() for _ in range(n_lin)],
                  V=[f.V.copy() for _ in range(n_lin)],
                  w2=[np.array([w2]) for _ in range(n_lin)])
    elif form == "gh":
        A = inst.A
        rho = w2 / s2i
        C = A.T @ A + rho * np.eye(A.shape[1])
        Cinv = np.linalg.inv(C)
        G0, H0 = rho * Cinv, Cinv @ A.T
        kw.update(G=[G0.copy() for _ in range(n_lin)],
                  H=[H0.copy() for _ in range(n_lin)])
    else:
        raise ValueError("form must be 'svd' or 'gh'")
    return LvampParams(**kw)


def _clip_dvg(a):
    clipped = (a < _DVG_CLIP) | (a > 1.0 - _DVG_CLIP)
    return np.clip(a, _DVG_CLIP, 1.0 - _DVG_CLIP), clipped


def lvamp_forward(params, y, keep_inputs=False):
    """Per layer: LMMSE estimate, Onsager decoupling, shrinkage, decoupling.

    The svd-form LMMSE stage solves (A'A + rho I)^-1 (A'y + rho r~) through
    the factors (U, s, V) with rho = w2/s2~; its divergence is
    [sum_i rho/(s_i^2 + rho) + (N - R)]/N, which reduces to the rank-R sum
    when A has full column rank.  The gh form uses G r~ + H y with
    divergence trace(G)/N.
    """
    T = params.T
    shr = Shrinker(params.family, params.pair)
    D = y.shape[1]
    if params.form == "svd":
        N = params.V[0].shape[0]
    else:
        N = params.G[0].shape[0]
    rt = np.zeros((N, D))
    s2 = np.full(D, params.s2_init)
    xs, tape = [], []
    clip_events = 0
    for t in range(T):
        i = params._i(t)
        c = {"rt": rt, "s2": s2}
        if params.form == "svd":
            U, s, V, w2 = params.U[i], params.s[i], params.V[i], float(params.w2[i][0])
            # regularized solve in the row space; components of r~ in the
            # null space of A have no measurement and pass straight through,
            # exactly as in the normal-equation form of the LMMSE estimate
            rho = w2 / s2
            den = (s * s)[:, None] + rho[None, :]
            uty = U.T @ y
            pvr = V.T @ rt
            xi = (s[:, None] * uty + rho[None, :] * pvr) / den
            xt = rt + V @ (xi - pvr)
            nu_t = (np.sum(rho[None, :] / den, axis=0) + (N - s.size)) / N
            c.update(rho=rho, den=den, uty=uty, pvr=pvr, xi=xi)
        else:
            G, H = params.G[i], params.H[i]
            xt = G @ rt + H @ y
            nu_t = np.full(D, np.trace(G) / N)
        nu_t, clA = _clip_dvg(nu_t)
        clip_events += int(clA.sum())
        r = (xt - nu_t[None, :] * rt) / (1.0 - nu_t[None, :])
        sig2 = s2 * nu_t / (1.0 - nu_t)
        sig = np.sqrt(sig2)
        val, sc = shr.forward(r, params.theta[t], sig)
        dsum = shr.diag_sum(sc)
        nu = dsum / N
        nu, clB = _clip_dvg(nu)
        clip_events += int(clB.sum())
        rt_next = (val - nu[None, :] * r) / (1.0 - nu[None, :])
        s2_next = sig2 * nu / (1.0 - nu)
        c.update(xt=xt, nu_t=nu_t, clA=clA, r=r, sig2=sig2, sig=sig, sc=sc,
                 nu=nu, clB=clB, xhat=val)
        if keep_inputs:
            c["shrink_input"] = r
        tape.append(c)
        xs.append(val)
        rt, s2 = rt_next, s2_next
    tape_meta = {"clip_events": clip_events, "layers": tape}
    return xs, tape_meta


def lvamp_backward(params, tape_meta, y, gxT, min_layer=0):
    tape = tape_meta["layers"]
    T = params.T
    shr = Shrinker(params.family, params.pair)
    if params.form == "svd":
        N = params.V[0].shape[0]
    else:
        N = params.G[0].shape[0]
    grads = {}

    def acc(key, val):
        grads[key] = grads.get(key, 0.0) + val

    g_rt = None   # dL/d r~_{t+1}
    g_s2 = None   # dL/d s2~_{t+1}
    gx_direct = gxT
    for t in reversed(range(T)):
        c = tape[t]
        i = params._i(t)
        nu, nu_t = c["nu"], c["nu_t"]
        one_m = 1.0 - nu
        # r~_{t+1} = (xhat - nu r)/(1 - nu); s2_{t+1} = sig2 nu/(1 - nu)
        if g_rt is not None:
            gxhat = gx_direct + g_rt / one_m[None, :]
            gr = -(nu / one_m)[None, :] * g_rt
            gnu = np.sum(g_rt * (c["xhat"] - c["r"]), axis=0) / one_m**2
            gsig2 = g_s2 * nu / one_m
            gnu = gnu + g_s2 * c["sig2"] / one_m**2
        else:
            gxhat = gx_direct
            gr = np.zeros_like(c["r"])
            gnu = np.zeros(y.shape[1])
            gsig2 = np.zeros(y.shape[1])
        gnu[c["clB"]] = 0.0
        gdsum = gnu / N
        g_r2, g_theta, g_sig = shr.vjp(c["sc"], gxhat, gdsum)
        grads[f"theta[{t}]"] = g_theta
        gr = gr + g_r2
        gsig2 = gsig2 + g_sig / (2.0 * c["sig"])
        # sig2 = s2 nu_t/(1 - nu_t);  r = (xt - nu_t rt)/(1 - nu_t)
        one_mt = 1.0 - nu_t
        g_s2_cur = gsig2 * nu_t / one_mt
        gnut = gsig2 * c["s2"] / one_mt**2
        gxt = gr / one_mt[None, :]
        g_rt_cur = -(nu_t / one_mt)[None, :] * gr
        gnut = gnut + np.sum(gr * (c["xt"] - c["rt"]), axis=0) / one_mt**2
        gnut[c["clA"]] = 0.0
        if params.form == "svd":
            s, V, U = params.s[i], params.V[i], params.U[i]
            w2 = float(params.w2[i][0])
            rho, den, xi, uty, pvr = (c[k] for k in ("rho", "den", "xi", "uty", "pvr"))
            # nu_t = [sum_i rho/(s_i^2 + rho) + (N - R)] / N
            grho = gnut * np.sum((s * s)[:, None] / den**2, axis=0) / N
            gs = np.sum(gnut[None, :] * (-2.0 * s[:, None] * rho[None, :] / den**2),
                        axis=1) / N
            # xt = rt + V (xi - pvr)
            g_rt_cur = g_rt_cur + gxt
            acc(f"V[{t}]" if not params.tied else "V", gxt @ (xi - pvr).T)
            gxi = V.T @ gxt
            # xi = (s uty + rho pvr)/den
            grho = grho + np.sum(gxi * (pvr - xi) / den, axis=0)
            gs = gs + np.sum(gxi * (uty - 2.0 * s[:, None] * xi) / den, axis=1)
            guty = gxi * (s[:, None] / den)
            gpvr = gxi * (rho[None, :] / den) - gxi
            # pvr = V' rt ; uty = U'y
            acc(f"V[{t}]" if not params.tied else "V", c["rt"] @ gpvr.T)
            g_rt_cur = g_rt_cur + V @ gpvr
            acc(f"U[{t}]" if not params.tied else "U", y @ guty.T)
            acc(f"s[{t}]" if not params.tied else "s", gs)
            # rho = w2/s2
            acc(f"w2[{t}]" if not params.tied else "w2",
                np.array([np.sum(grho / c["s2"])]))
            g_s2_cur = g_s2_cur - grho * w2 / c["s2"]**2
        else:
            G = params.G[i]
            acc(f"G[{t}]" if not params.tied else "G",
                gxt @ c["rt"].T + (np.sum(gnut) / N) * np.eye(N))
            acc(f"H[{t}]" if not params.tied else "H", gxt @ y.T)
            g_rt_cur = g_rt_cur + G.T @ gxt
        g_rt, g_s2 = g_rt_cur, g_s2_cur
        gx_direct = np.zeros_like(gxT)
        if t == min_layer:
            break
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_ARCH_OF = {ListaParams: "lista", LampL1Params: "lamp_l1",
            LampParams: "lamp", LvampParams: "lvamp"}


def save_checkpoint(path, params):
    arch = _ARCH_OF[type(params)]
    head = {"arch": arch}
    arrays = {}
    if arch == "lista":
        head.update(tied=params.tied, structured=params.structured,
                    T=int(params.T))
        arrays["B"] = params.B
        arrays["lam"] = params.lam
        for k, s in enumerate(params.S):
            arrays[f"S_{k}"] = s
        head["n_S"] = len(params.S)
    elif arch == "lamp_l1":
        head.update(tied=params.tied, pair=params.pair, T=int(params.T))
        arrays["alpha"], arrays["beta"] = params.alpha, params.beta
        for k, b in enumerate(params.B):
            arrays[f"B_{k}"] = b
        head["n_B"] = len(params.B)
    elif arch == "lamp":
        head.update(tied=params.tied, pair=params.pair, family=params.family,
                    T=int(params.T))
        for k, b in enumerate(params.B):
            arrays[f"B_{k}"] = b
        head["n_B"] = len(params.B)
        for t, th in enumerate(params.theta):
            arrays[f"theta_{t}"] = th
    else:
        head.update(tied=params.tied, pair=params.pair, family=params.family,
                    form=params.form, T=int(params.T), s2_init=params.s2_init)
        names = ("U", "s", "V", "w2") if params.form == "svd" else ("G", "H")
        for name in names:
            vals = getattr(params, name)
            head[f"n_{name}"] = len(vals)
            for k, a in enumerate(vals):
                arrays[f"{name}_{k}"] = a
        for t, th in enumerate(params.theta):
            arrays[f"theta_{t}"] = th
    np.savez(path, head=json.dumps(head), **arrays)


def load_checkpoint(path):
    z = np.load(path, allow_pickle=False)
    head = json.loads(str(z["head"]))
    arch = head["arch"]
    if arch == "lista":
        return ListaParams(B=z["B"], S=[z[f"S_{k}"] for k in range(head["n_S"])],
                           lam=z["lam"], tied=head["tied"],
                           structured=head["structured"])
    if arch == "lamp_l1":
        return LampL1Params(B=[z[f"B_{k}"] for k in range(head["n_B"])],
                            alpha=z["alpha"], beta=z["beta"],
                            tied=head["tied"], pair=head["pair"])
    if arch == "lamp":
        T = head["T"]
        return LampParams(B=[z[f"B_{k}"] for k in range(head["n_B"])],
                          theta=[z[f"theta_{t}"] for t in range(T)],
                          family=head["family"], pair=head["pair"],
                          tied=head["tied"])
    T = head["T"]
    kw = dict(form=head["form"], family=head["family"], pair=head["pair"],
              tied=head["tied"], s2_init=head["s2_init"],
              theta=[z[f"theta_{t}"] for t in range(T)])
    names = ("U", "s", "V", "w2") if head["form"] == "svd" else ("G", "H")
    for name in names:
        kw[name] = [z[f"{name}_{k}"] for k in range(head[f"n_{name}"])]
    return LvampParams(**kw)


FORWARD = {"lista": lista_forward, "lamp_l1": lamp_l1_forward, "lamp": lamp_forward}
BACKWARD = {"lista": lista_backward, "lamp_l1": lamp_l1_backward, "lamp": lamp_backward}


def forward_any(params, y, A=None):
    """Dispatch a forward pass for any architecture."""
    if isinstance(params, LvampParams):
        return lvamp_forward(params, y)
    return FORWARD[_ARCH_OF[type(params)]](params, y, A)


def backward_any(params, tape, y, A, gxT, min_layer=0):
    if isinstance(params, LvampParams):
        return lvamp_backward(params, tape, y, gxT, min_layer)
    return BACKWARD[_ARCH_OF[type(params)]](params, tape, y, A, gxT, min_layer)
