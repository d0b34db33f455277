"""Parameterized scalar shrinkage (denoiser) families.

Each family maps a noisy input r to a denoised value eta(r; sigma, theta),
where sigma is a noise-level estimate and theta a small parameter vector:

    st      eta = sgn(r) max(|r| - theta1, 0)                  (plain soft threshold)
    sst     eta = theta1 sgn(r) max(|r| - theta2 sigma, 0)     (scaled soft threshold)
    pwlin   odd piecewise-linear, 5 segments; knots theta1*sigma < theta2*sigma,
            slopes theta3 (inner), theta4 (mid), theta5 (outer)
    exp     eta = theta2 r + theta3 r exp(-r^2 / (2 theta1^2 sigma^2))
    spline  eta = theta2 r + theta3 r B(r / (theta1 sigma)),  B = cubic B-spline
    bg      posterior mean under a Bernoulli-Gaussian prior, theta1 the active
            variance and theta2 the inactive/active log-odds

All families are odd-symmetric.  Derivatives are analytic; at kinks the
left-derivative convention is used (strict inequality on |r| > knot).  The
second-order partials (d2/dr2, d2/dr dtheta, d2/dr dsigma) are supplied so
that networks can differentiate through Jacobian-trace (divergence) terms.

Complex data in the real-composite embedding is handled by modulus-pair
evaluation: component j pairs with component j + len/2 (the [Re; Im] layout),
and the scalar family acts on the pair modulus.
"""

from dataclasses import dataclass

import numpy as np

FAMILIES = ("st", "sst", "pwlin", "exp", "spline", "bg")
THETA_LEN = {"st": 1, "sst": 2, "pwlin": 5, "exp": 3, "spline": 3, "bg": 2}

# Mild-thresholder starting points for training (st gets its lambda elsewhere).
THETA_INIT = {
    "sst": (1.0, 1.0),
    "pwlin": (0.5, 1.5, 0.01, 0.7, 1.0),
    "exp": (1.0, 0.5, -0.5),
    "spline": (1.0, 1.0, -0.9),
    "bg": (1.0, np.log(9.0)),
}

_EXP_CLAMP = 500.0  # exponent clamp before exponentiation (bg family)


def validate_params(family, theta):
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if family not in FAMILIES:
        raise ValueError(f"unknown shrinkage family '{family}'")
    if theta.size != THETA_LEN[family]:
        raise ValueError(f"{family} expects {THETA_LEN[family]} parameters, got {theta.size}")
    if not np.all(np.isfinite(theta)):
        raise ValueError(f"{family}: non-finite parameters")
    if family == "pwlin" and not (0.0 < theta[0] < theta[1]):
        raise ValueError("pwlin: knots must satisfy 0 < theta1 < theta2")
    if family in ("exp", "spline", "bg") and theta[0] <= 0.0:
        raise ValueError(f"{family}: theta1 must be positive")
    return theta


def _check_sigma(family, sigma):
    if family == "st":
        return
    if np.any(np.asarray(sigma) <= 0.0):
        raise ValueError(f"{family}: sigma must be positive")


@dataclass
class ShrinkageEval:
    """Value and partial derivatives of a shrinkage applied componentwise."""

    value: np.ndarray
    d_dr: np.ndarray       # diagonal of the Jacobian w.r.t. r
    d_dtheta: np.ndarray   # shape r.shape + (|theta|,)
    d_dsigma: np.ndarray


def _bspline3(z):
    """Cubic B-spline value/first/second derivative at z (vectorized)."""
    a = np.abs(z)
    sg = np.sign(z)
    inner = a <= 1.0
    mid = (a > 1.0) & (a <= 2.0)
    b = np.where(inner, 2.0 / 3.0 - a**2 + a**3 / 2.0, 0.0)
    b = np.where(mid, (2.0 - a) ** 3 / 6.0, b)
    bp = np.where(inner, sg * (-2.0 * a + 1.5 * a**2), 0.0)
    bp = np.where(mid, sg * (-0.5 * (2.0 - a) ** 2), bp)
    bpp = np.where(inner, -2.0 + 3.0 * a, 0.0)
    bpp = np.where(mid, 2.0 - a, bpp)
    return b, bp, bpp


def _scalar_derivs(family, theta, r, sigma, order2=False):
    """All partials of the scalar family at r.

    Returns a dict with value `val`, first-order `dr`, `dth` (list), `dsig`,
    and when order2 also `drr`, `drth` (list), `drsig`.  `sigma` must be
    broadcastable to r's shape.
    """
    t = theta
    out = {}
    zero = np.zeros_like(r)

    if family == "st":
        lam = t[0]
        s = np.sign(r)
        ind = (np.abs(r) > lam).astype(np.float64)
        out["val"] = s * np.maximum(np.abs(r) - lam, 0.0)
        out["dr"] = ind
        out["dth"] = [-s * ind]
        out["dsig"] = zero
        if order2:
            out["drr"] = zero
            out["drth"] = [zero]
            out["drsig"] = zero

    elif family == "sst":
        thr = t[1] * sigma
        s = np.sign(r)
        ind = (np.abs(r) > thr).astype(np.float64)
        base = s * np.maximum(np.abs(r) - thr, 0.0)
        out["val"] = t[0] * base
        out["dr"] = t[0] * ind
        out["dth"] = [base, -t[0] * (sigma * (s * ind))]
        out["dsig"] = -t[0] * t[1] * s * ind
        if order2:
            out["drr"] = zero
            out["drth"] = [ind, zero]
            out["drsig"] = zero

    elif family == "pwlin":
        t1, t2, t3, t4, t5 = t
        a = np.abs(r)
        s = np.sign(r)
        k1 = t1 * sigma
        k2 = t2 * sigma
        seg0 = a <= k1
        seg2 = a > k2
        seg1 = ~seg0 & ~seg2
        f0, f1, f2 = (seg.astype(np.float64) for seg in (seg0, seg1, seg2))
        out["val"] = (f0 * (t3 * r)
                      + f1 * (s * (t4 * (a - k1) + t3 * k1))
                      + f2 * (s * (t5 * (a - k2) + t4 * (k2 - k1) + t3 * k1)))
        out["dr"] = f0 * t3 + f1 * t4 + f2 * t5
        outer = f1 + f2
        out["dth"] = [
            outer * (s * sigma) * (t3 - t4),
            f2 * (s * sigma) * (t4 - t5),
            f0 * r + outer * (s * k1),
            f1 * (s * (a - k1)) + f2 * (s * (k2 - k1)),
            f2 * (s * (a - k2)),
        ]
        out["dsig"] = (f1 * (s * t1) * (t3 - t4)
                       + f2 * s * (-t5 * t2 + t4 * (t2 - t1) + t3 * t1))
        if order2:
            out["drr"] = zero
            out["drth"] = [zero, zero, f0, f1, f2]
            out["drsig"] = zero

    elif family == "exp":
        t1, t2, t3 = t
        z = np.minimum((r / (t1 * sigma)) ** 2, 1400.0)
        u = np.exp(-z / 2.0)
        out["val"] = t2 * r + t3 * r * u
        out["dr"] = t2 + t3 * u * (1.0 - z)
        out["dth"] = [t3 * r * u * z / t1, r.copy(), r * u]
        out["dsig"] = t3 * r * u * z / sigma
        if order2:
            ts2 = (t1 * sigma) ** 2
            out["drr"] = -t3 * u * r * (3.0 - z) / ts2
            out["drth"] = [t3 * u * z * (3.0 - z) / t1,
                           np.ones_like(r),
                           u * (1.0 - z)]
            out["drsig"] = t3 * u * z * (3.0 - z) / sigma

    elif family == "spline":
        t1, t2, t3 = t
        z = r / (t1 * sigma)
        b, bp, bpp = _bspline3(z)
        out["val"] = t2 * r + t3 * r * b
        out["dr"] = t2 + t3 * (b + z * bp)
        out["dth"] = [-t3 * r * bp * z / t1, r.copy(), r * b]
        out["dsig"] = -t3 * r * bp * z / sigma
        if order2:
            curv = 2.0 * bp + z * bpp
            out["drr"] = t3 * curv / (t1 * sigma)
            out["drth"] = [-t3 * curv * z / t1, np.ones_like(r), b + z * bp]
            out["drsig"] = -t3 * curv * z / sigma

    elif family == "bg":
        t1, t2 = t
        sig2 = sigma * sigma
        c = 1.0 + sig2 / t1
        s2e = sig2 * c
        # log of the prior-odds * Gaussian-ratio term, folded with sqrt(1 + t1/sigma^2)
        logq = 0.5 * np.log1p(t1 / sig2)
        lw = np.clip(t2 - r * r / (2.0 * s2e) + logq, -_EXP_CLAMP, _EXP_CLAMP)
        sl = 1.0 / (1.0 + np.exp(-lw))          # sigmoid
        slp = sl * (1.0 - sl)
        G = (1.0 - sl) / c
        lw_r = -r / s2e
        G_r = -(slp * lw_r) / c
        out["val"] = r * G
        out["dr"] = G + r * G_r

        # parameter partials: p in (t1, t2, sigma)
        s2e_t1 = -(sig2 * sig2) / (t1 * t1)
        s2e_sig = 2.0 * sigma + 4.0 * sigma * sig2 / t1
        c_t1 = -sig2 / (t1 * t1)
        c_sig = 2.0 * sigma / t1
        rr_half = r * r / (2.0 * s2e * s2e)
        lw_t1 = rr_half * s2e_t1 + 1.0 / (2.0 * (sig2 + t1))
        lw_t2 = 1.0
        lw_sig = rr_half * s2e_sig - t1 / (sigma * (sig2 + t1))

        def g_p(c_p, lw_p):
            return -c_p * (1.0 - sl) / (c * c) - slp * lw_p / c

        G_t1 = g_p(c_t1, lw_t1)
        G_t2 = -slp * lw_t2 / c
        G_sig = g_p(c_sig, lw_sig)
        out["dth"] = [r * G_t1, r * G_t2]
        out["dsig"] = r * G_sig
        if order2:
            lw_rr = -1.0 / s2e
            G_rr = -(slp * (1.0 - 2.0 * sl) * lw_r * lw_r + slp * lw_rr) / c
            out["drr"] = 2.0 * G_r + r * G_rr
            lw_rt1 = r * s2e_t1 / (s2e * s2e)
            lw_rsig = r * s2e_sig / (s2e * s2e)

            def g_rp(c_p, lw_p, lw_rp):
                return (c_p * slp * lw_r / (c * c)
                        - (slp * (1.0 - 2.0 * sl) * lw_p * lw_r + slp * lw_rp) / c)

            G_rt1 = g_rp(c_t1, lw_t1, lw_rt1)
            G_rt2 = g_rp(0.0, lw_t2, 0.0)
            G_rsig = g_rp(c_sig, lw_sig, lw_rsig)
            out["drth"] = [G_t1 + r * G_rt1, G_t2 + r * G_rt2]
            out["drsig"] = G_sig + r * G_rsig
    else:
        raise ValueError(f"unknown shrinkage family '{family}'")
    return out


def _as_broadcast_sigma(sigma, r):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 1 and r.ndim == 2 and sigma.size == r.shape[1]:
        return sigma[None, :]
    return sigma


def eval(family, theta, r, sigma):
    """Componentwise shrinkage evaluation with analytic derivatives."""
    theta = validate_params(family, theta)
    _check_sigma(family, sigma)
    r = np.asarray(r, dtype=np.float64)
    sig = _as_broadcast_sigma(sigma, r)
    d = _scalar_derivs(family, theta, r, sig, order2=False)
    dth = np.stack([np.broadcast_to(x, r.shape) for x in d["dth"]], axis=-1)
    dsig = np.broadcast_to(d["dsig"], r.shape).copy()
    return ShrinkageEval(value=d["val"], d_dr=d["dr"], d_dtheta=dth, d_dsigma=dsig)


def divergence(ev):
    """Mean diagonal of the Jacobian, <eta'> = (1/N) sum_j d[eta]_j / dr_j."""
    return float(np.mean(ev.d_dr))


_PAIR_FAMILIES = ("sst", "pwlin", "bg")


def _pair_split(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape[0] % 2:
        raise ValueError("modulus-pair input must have even leading length")
    half = r.shape[0] // 2
    return r[:half], r[half:], half


def eval_modulus_pair(family, theta, r, sigma):
    """Shrinkage on Re/Im pairs via their modulus.

    Component j pairs with component j + len/2 ([Re; Im] layout).  For pair
    u = (a, b) with m = |u|, the output is eta(m; sigma, theta)/m * u, with
    the m -> 0 limit given by the origin slope.  d_dr holds the Jacobian
    diagonal, so divergence() remains the mean diagonal.
    """
    if family not in _PAIR_FAMILIES:
        raise ValueError(f"modulus-pair mode supports {_PAIR_FAMILIES}, not '{family}'")
    theta = validate_params(family, theta)
    _check_sigma(family, sigma)
    a, b, half = _pair_split(r)
    sig = _as_broadcast_sigma(sigma, a)
    m = np.hypot(a, b)
    d = _scalar_derivs(family, theta, m, sig, order2=True)
    pos = m > 0.0
    msafe = np.where(pos, m, 1.0)
    g = np.where(pos, d["val"] / msafe, d["dr"])
    # ratio limits at m=0 follow from eta(m) ~ eta'(0) m: eta_p/m -> d(eta')/dp at 0
    g_th = [np.where(pos, dt / msafe, d2) for dt, d2 in zip(d["dth"], d["drth"])]
    g_sig = np.where(pos, d["dsig"] / msafe, d["drsig"])
    ua = np.where(pos, a / msafe, 0.0)
    ub = np.where(pos, b / msafe, 0.0)
    excess = np.where(pos, d["dr"] - g, 0.0)
    value = np.concatenate([a * g, b * g], axis=0)
    d_dr = np.concatenate([g + excess * ua * ua, g + excess * ub * ub], axis=0)
    dth = np.stack(
        [np.concatenate([a * gt, b * gt], axis=0) for gt in g_th], axis=-1)
    dsig = np.concatenate([a * g_sig, b * g_sig], axis=0)
    return ShrinkageEval(value=value, d_dr=d_dr, d_dtheta=dth, d_dsigma=dsig)


class Shrinker:
    """Batch shrinkage kernel with value/divergence forward and exact VJPs.

    This is the form the unfolded networks consume: forward() caches what the
    backward pass needs, diag_sum() gives the per-column Jacobian-diagonal sum
    (the Onsager/divergence numerator), and vjp() pulls gradients back to
    (r, theta, sigma), including the path through the divergence.
    """

    def __init__(self, family, pair=False):
        if family not in FAMILIES:
            raise ValueError(f"unknown shrinkage family '{family}'")
        if pair and family not in _PAIR_FAMILIES:
            raise ValueError(f"modulus-pair mode supports {_PAIR_FAMILIES}, not '{family}'")
        self.family = family
        self.pair = pair
        self.n_theta = THETA_LEN[family]

    def forward(self, r, theta, sigma):
        theta = np.asarray(theta, dtype=np.float64).ravel()
        r = np.asarray(r, dtype=np.float64)
        cache = {"theta": theta}
        if not self.pair:
            sig = _as_broadcast_sigma(sigma, r)
            d = _scalar_derivs(self.family, theta, r, sig, order2=True)
            cache["d"] = d
            cache["shape"] = r.shape
            return d["val"], cache
        a, b, half = _pair_split(r)
        sig = _as_broadcast_sigma(sigma, a)
        m = np.hypot(a, b)
        d = _scalar_derivs(self.family, theta, m, sig, order2=True)
        pos = m > 0.0
        msafe = np.where(pos, m, 1.0)
        g = np.where(pos, d["val"] / msafe, d["dr"])
        cache.update(d=d, a=a, b=b, m=m, pos=pos, msafe=msafe, g=g, half=half)
        return np.concatenate([a * g, b * g], axis=0), cache

    def diag_sum(self, cache):
        """Sum over components of the Jacobian diagonal, per column."""
        if not self.pair:
            return np.sum(cache["d"]["dr"], axis=0)
        # per pair the two diagonal entries sum to g + eta'(m)
        return np.sum(cache["g"] + cache["d"]["dr"], axis=0)

    def vjp(self, cache, g_val, g_dsum=None):
        """Backpropagate through value (g_val) and diag_sum (g_dsum) outputs.

        Returns (g_r, g_theta, g_sigma) where g_theta has shape (|theta|,)
        and g_sigma is summed over rows (one entry per column).
        """
        d = cache["d"]
        if not self.pair:
            g_r = g_val * d["dr"]
            g_theta = np.array([np.sum(g_val * dt) for dt in d["dth"]])
            g_sigma = np.sum(g_val * d["dsig"], axis=0)
            if g_dsum is not None:
                g_r = g_r + g_dsum * d["drr"]
                g_theta += np.array([np.sum(g_dsum * np.broadcast_to(dt, g_r.shape))
                                     for dt in d["drth"]])
                g_sigma = g_sigma + np.sum(g_dsum * np.broadcast_to(d["drsig"], g_r.shape),
                                           axis=0)
            return g_r, g_theta, g_sigma

        a, b, m, pos, msafe, g = (cache[k] for k in ("a", "b", "m", "pos", "msafe", "g"))
        half = cache["half"]
        wa, wb = g_val[:half], g_val[half:]
        uw = a * wa + b * wb
        g_m = np.where(pos, (d["dr"] - g) / msafe, 0.0)
        ua = np.where(pos, a / msafe, 0.0)
        ub = np.where(pos, b / msafe, 0.0)
        ga = g * wa + g_m * ua * uw
        gb = g * wb + g_m * ub * uw
        g_th_ratio = [np.where(pos, dt / msafe, d2) for dt, d2 in zip(d["dth"], d["drth"])]
        g_sig_ratio = np.where(pos, d["dsig"] / msafe, d["drsig"])
        g_theta = np.array([np.sum(uw * gt) for gt in g_th_ratio])
        g_sigma = np.sum(uw * g_sig_ratio, axis=0)
        if g_dsum is not None:
            coef = g_dsum * (g_m + d["drr"])
            ga = ga + coef * ua
            gb = gb + coef * ub
            g_theta += np.array([np.sum(g_dsum * np.broadcast_to(gt + dt, m.shape))
                                 for gt, dt in zip(g_th_ratio, d["drth"])])
            g_sigma = g_sigma + np.sum(
                g_dsum * np.broadcast_to(g_sig_ratio + d["drsig"], m.shape), axis=0)
        return np.concatenate([ga, gb], axis=0), g_theta, g_sigma


def soft_threshold(r, lam):
    """Plain soft threshold sgn(r) max(|r| - lam, 0)."""
    return np.sign(r) * np.maximum(np.abs(r) - lam, 0.0)
