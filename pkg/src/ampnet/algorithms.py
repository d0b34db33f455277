"""Non-learned iterative solvers and oracles for y = A x0 + w.

All solvers accept a single measurement vector or a column batch and record a
per-iteration NMSE trace (averaged over columns when ground truth is given).
AMP runs with any shrinkage family; VAMP alternates an SVD-based LMMSE stage
with a shrinkage stage, both Onsager-decoupled.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from . import networks
from .numerics import solve_spd
from .shrinkage import Shrinker, soft_threshold

DIVERGE_DB = 20.0   # trace flags divergence above this NMSE
NMSE_FLOOR_DB = -150.0


def to_db(x):
    return 10.0 * math.log10(max(float(x), 10.0 ** (NMSE_FLOOR_DB / 10.0)))


def nmse_ratios(xhat, x0, rows=None):
    """Per-column ||xhat - x0||^2 / ||x0||^2 (restricted to rows).

    Columns whose ground truth is identically zero have no defined NMSE and
    are dropped.
    """
    if rows is not None:
        xhat, x0 = xhat[rows], x0[rows]
    num = np.sum((xhat - x0) ** 2, axis=0)
    den = np.sum(x0 * x0, axis=0)
    keep = den > 0.0
    return num[keep] / den[keep]


def nmse_db(xhat, x0, rows=None):
    """Average NMSE in dB: the mean over realizations of per-realization
    NMSE in dB (floored at -150 dB per realization)."""
    r = nmse_ratios(xhat, x0, rows)
    if r.size == 0 or not np.all(np.isfinite(r)):
        return float("inf")
    return float(np.mean(10.0 * np.log10(np.maximum(r, 1e-15))))


def nmse_linear(xhat, x0, rows=None):
    """Linear-scale average consistent with nmse_db (geometric mean)."""
    return 10.0 ** (nmse_db(xhat, x0, rows) / 10.0)


@dataclass
class IterTrace:
    nmse_db: np.ndarray          # per iteration, averaged over columns
    scale: np.ndarray            # per-iteration threshold/noise level (column mean)
    diverged: bool
    xhat: np.ndarray
    x0: np.ndarray = None
    shrink_inputs: list = None   # r_t per iteration when retained
    sigma_cols: list = None      # per-column noise estimate when retained
    objective: np.ndarray = None
    clip_events: int = 0

    def first_crossing(self, level_db):
        """1-based first iteration with NMSE <= level_db (None if never)."""
        hit = np.nonzero(self.nmse_db <= level_db)[0]
        return int(hit[0]) + 1 if hit.size else None


def _cols(y):
    y = np.asarray(y, dtype=np.float64)
    return y[:, None] if y.ndim == 1 else y


def default_beta(inst):
    """ISTA/FISTA stepsize 0.99 / ||A||_2^2."""
    return 0.99 / float(inst.svdA.s[0] ** 2)


def _finish(nmse, scale, xhat, x0, inputs, objective=None, clip=0, sigmas=None):
    nmse = np.asarray(nmse)
    diverged = bool(nmse.size and (not np.isfinite(nmse[-1]) or nmse[-1] > DIVERGE_DB))
    return IterTrace(nmse_db=nmse, scale=np.asarray(scale), diverged=diverged,
                     xhat=xhat, x0=x0, shrink_inputs=inputs, sigma_cols=sigmas,
                     objective=objective if objective is None else np.asarray(objective),
                     clip_events=clip)


def ista(inst, y, lam, beta=None, T=1000, x0=None, keep_inputs=False,
         stop_below_db=None, check_monotone=True):
    """Proximal-gradient soft-thresholding iteration for the l1 problem.

    lam is the l1 penalty (scalar or per-column), so the shrinkage threshold
    each iteration is beta * lam and the fixed point solves
    min 0.5 ||y - Ax||^2 + lam ||x||_1.  The objective is checked to be
    non-increasing every iteration (guaranteed for beta <= 1/||A||_2^2).
    """
    A = inst.A
    y = _cols(y)
    beta = default_beta(inst) if beta is None else beta
    B = beta * A.T
    lam_row = np.atleast_1d(np.asarray(lam, dtype=np.float64))[None, :]
    thr = beta * lam_row
    x = np.zeros((A.shape[1], y.shape[1]))
    x0c = _cols(x0) if x0 is not None else None
    nmse, scale, inputs, objs = [], [], [], []
    prev_obj = None
    for t in range(T):
        v = y - A @ x
        obj = 0.5 * np.sum(v * v, axis=0) + np.sum(lam_row * np.abs(x), axis=0)
        if check_monotone and prev_obj is not None:
            if np.any(obj > prev_obj + 1e-9 * (1.0 + np.abs(prev_obj))):
                raise AssertionError("ista: objective increased")
        prev_obj = obj
        objs.append(np.mean(obj))
        z = x + B @ v
        x = soft_threshold(z, thr)
        if keep_inputs:
            inputs.append(z)
        scale.append(np.mean(thr))
        if x0c is not None:
            nmse.append(nmse_db(x, x0c))
            if stop_below_db is not None and nmse[-1] <= stop_below_db:
                break
    return _finish(nmse, scale, x, x0c, inputs if keep_inputs else None, objs)


def fista(inst, y, lam, beta=None, T=1000, x0=None, keep_inputs=False,
          stop_below_db=None):
    """Momentum-accelerated ISTA with coefficient (t-2)/(t+1); lam is the l1
    penalty, as in ista()."""
    A = inst.A
    y = _cols(y)
    beta = default_beta(inst) if beta is None else beta
    B = beta * A.T
    lam_row = np.atleast_1d(np.asarray(lam, dtype=np.float64))[None, :]
    thr = beta * lam_row
    x = np.zeros((A.shape[1], y.shape[1]))
    x_prev = x
    x0c = _cols(x0) if x0 is not None else None
    nmse, scale, inputs = [], [], []
    for t in range(T):
        v = y - A @ x
        z = x + B @ v + ((t - 2.0) / (t + 1.0)) * (x - x_prev)
        x_prev = x
        x = soft_threshold(z, thr)
        if keep_inputs:
            inputs.append(z)
        scale.append(np.mean(thr))
        if x0c is not None:
            nmse.append(nmse_db(x, x0c))
            if stop_below_db is not None and nmse[-1] <= stop_below_db:
                break
    return _finish(nmse, scale, x, x0c, inputs if keep_inputs else None)


def _theta_schedule(theta, T):
    if isinstance(theta, (list, tuple)) and np.asarray(theta[0]).ndim >= 1:
        if len(theta) != T:
            raise ValueError("theta schedule length must equal T")
        return [np.asarray(t, dtype=np.float64) for t in theta]
    return [np.asarray(theta, dtype=np.float64)] * T


def amp_generic(inst, y, family, theta, T=30, x0=None, keep_inputs=False,
                pair=False, stop_on_divergence=True):
    """Onsager-corrected iteration with an arbitrary shrinkage family.

    Per iteration: sigma_t = ||v_t||/sqrt(M), x_{t+1} = eta(x_t + A'v_t),
    v_{t+1} = y - A x_{t+1} + (diag-sum/M) v_t.
    """
    A = inst.A
    AT = A.T
    y = _cols(y)
    M = A.shape[0]
    sqrtM = math.sqrt(M)
    shr = Shrinker(family, pair)
    thetas = _theta_schedule(theta, T)
    x = np.zeros((A.shape[1], y.shape[1]))
    v = y.copy()
    x0c = _cols(x0) if x0 is not None else None
    nmse, scale, inputs, sigmas = [], [], [], []
    for t in range(T):
        n = np.sqrt(np.sum(v * v, axis=0))
        sigma = n / sqrtM
        r = x + AT @ v
        val, sc = shr.forward(r, thetas[t], sigma)
        dsum = shr.diag_sum(sc)
        b = dsum / M
        v = y - A @ val + b[None, :] * v
        x = val
        if keep_inputs:
            inputs.append(r)
            sigmas.append(sigma)
        scale.append(float(np.mean(sigma)))
        if x0c is not None:
            nmse.append(nmse_db(x, x0c))
            if stop_on_divergence and (not np.isfinite(nmse[-1])
                                       or nmse[-1] > DIVERGE_DB):
                break
    return _finish(nmse, scale, x, x0c, inputs if keep_inputs else None,
                   sigmas=sigmas if keep_inputs else None)


def amp_l1(inst, y, alpha, T=30, x0=None, keep_inputs=False, **kw):
    """Soft-threshold AMP with threshold alpha * ||v_t||/sqrt(M)."""
    tr = amp_generic(inst, y, "sst", np.array([1.0, float(alpha)]), T=T, x0=x0,
                     keep_inputs=keep_inputs, **kw)
    tr.scale = tr.scale * float(alpha)  # report lambda_t rather than sigma_t
    return tr


def vamp(inst, y, family, theta, T=20, x0=None, keep_inputs=False, pair=False,
         s2_init=None):
    """VAMP with the SVD-parameterized LMMSE stage at the true (A, sigma_w2).

    This runs the unfolded-network engine with frozen, prescribed parameters,
    so the algorithm and the network are the same computation by construction.
    """
    y = _cols(y)
    thetas = _theta_schedule(theta, T)
    params = networks.lvamp_init(inst, T, family, form="svd", tied=True,
                                 pair=pair, theta0=thetas[0], s2_init=s2_init)
    params.theta = thetas
    xs, tape = networks.lvamp_forward(params, y, keep_inputs=keep_inputs)
    x0c = _cols(x0) if x0 is not None else None
    nmse, scale, inputs, sigmas = [], [], [], []
    for t, layer in enumerate(tape["layers"]):
        scale.append(float(np.mean(layer["sig"])))
        if keep_inputs:
            inputs.append(layer["shrink_input"])
            sigmas.append(layer["sig"])
        if x0c is not None:
            nmse.append(nmse_db(xs[t], x0c))
    return _finish(nmse, scale, xs[-1], x0c, inputs if keep_inputs else None,
                   clip=tape["clip_events"],
                   sigmas=sigmas if keep_inputs else None)


def matched_bg_theta(prior):
    return np.array([prior.phi, math.log((1.0 - prior.gamma) / prior.gamma)])


def vamp_matched(inst, y, T=20, x0=None, **kw):
    """VAMP with the exact Bernoulli-Gaussian posterior-mean denoiser and the
    true noise variance."""
    return vamp(inst, y, "bg", matched_bg_theta(inst.prior), T=T, x0=x0, **kw)


def support_oracle_nmse(inst, batch):
    """Average NMSE of the genie-aided MMSE estimate given the true support.

    Per sample, x_S = (A_S'A_S + (sigma_w2/phi) I)^-1 A_S'y on the support,
    zero elsewhere.  Samples with empty support are skipped.  Returns the
    linear-scale average NMSE (geometric mean, matching the dB averaging
    used everywhere else).
    """
    A = inst.A
    ridge = inst.sigma_w2 / inst.prior.phi
    vals = []
    for d in range(batch.D):
        x0 = batch.X0[:, d]
        S = np.nonzero(x0)[0]
        if S.size == 0:
            continue
        As = A[:, S]
        xs = solve_spd(As.T @ As + ridge * np.eye(S.size), As.T @ batch.Y[:, d])
        xhat = np.zeros_like(x0)
        xhat[S] = xs
        vals.append(np.sum((xhat - x0) ** 2) / np.sum(x0 * x0))
    if not vals:
        raise ValueError("support oracle: all samples had empty support")
    return float(np.exp(np.mean(np.log(np.maximum(vals, 1e-15)))))


def calibrate_lambda(inst, alpha, y, tol=1e-10, max_iter=2000, validate=True,
                     per_column=False):
    """Map the AMP tuning alpha to the l1-penalty lambda via the AMP fixed
    point: lambda = lambda_inf * (1 - b_inf).

    Runs AMP to a fixed point (relative update < tol) and, when validate is
    set, checks the l1 stationarity condition A'(y - A xhat) = lambda sgn(xhat)
    on the support to 1e-6.
    """
    if alpha == 0.0:
        return np.zeros(_cols(y).shape[1]) if per_column else 0.0
    A = inst.A
    AT = A.T
    y = _cols(y)
    M = A.shape[0]
    sqrtM = math.sqrt(M)
    x = np.zeros((A.shape[1], y.shape[1]))
    v = y.copy()
    lam_t = b = None
    for t in range(max_iter):
        n = np.sqrt(np.sum(v * v, axis=0))
        lam_t = alpha * (n / sqrtM)
        r = x + AT @ v
        xn = soft_threshold(r, lam_t[None, :])
        b = np.sum(xn != 0.0, axis=0) / M
        v = y - A @ xn + b[None, :] * v
        if not np.all(np.isfinite(xn)):
            raise RuntimeError("calibrate_lambda: AMP diverged on this instance")
        step = np.max(np.sqrt(np.sum((xn - x) ** 2, axis=0))
                      / np.maximum(np.sqrt(np.sum(x * x, axis=0)), 1e-300))
        x = xn
        if step < tol:
            break
    lam = lam_t * (1.0 - b)
    res = AT @ (y - A @ x) - lam[None, :] * np.sign(x)
    bad = np.max(np.abs(res * (x != 0.0)), axis=0)
    ok = bad <= 1e-6
    if validate and not np.all(ok):
        if not np.any(ok):
            raise RuntimeError("calibrate_lambda: AMP reached no fixed point")
        if y.shape[1] == 1:
            raise RuntimeError(
                f"calibrate_lambda: stationarity residual {bad.max():.2e}")
        # the occasional realization where AMP limit-cycles has no fixed-point
        # lambda; fall back to the batch median for those columns
        lam = np.where(ok, lam, np.median(lam[ok]))
    return lam if per_column else float(np.mean(lam[ok]))


@dataclass
class QqTable:
    normal_q: np.ndarray
    sample_q: np.ndarray
    correlation: float
    degenerate: bool


def qq_export(trace, t):
    """Paired (standard-normal quantile, standardized error quantile) table of
    the shrinkage-input error at iteration t (1-based), Blom positions."""
    if trace.shrink_inputs is None:
        raise ValueError("qq_export: trace did not retain shrinkage inputs")
    if not (1 <= t <= len(trace.shrink_inputs)):
        raise IndexError(f"qq_export: iteration {t} out of range")
    err = (trace.shrink_inputs[t - 1] - trace.x0).ravel()
    sd = err.std()
    if sd == 0.0:
        return QqTable(normal_q=np.array([]), sample_q=np.array([]),
                       correlation=float("nan"), degenerate=True)
    z = np.sort((err - err.mean()) / sd)
    n = z.size
    p = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    q = scipy.special.ndtri(p)
    corr = float(np.corrcoef(z, q)[0, 1])
    return QqTable(normal_q=q, sample_q=z, correlation=corr, degenerate=False)
