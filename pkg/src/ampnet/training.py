"""Training for the unfolded networks: quadratic loss, Adam, and the hybrid
layer-wise/global stage schedule (tied networks) with tied-bootstrapped
untied refinement.

Stage t optimizes a (t+1)-layer prefix.  Each stage runs Adam through a
decreasing learning-rate ladder; a rate is abandoned after `patience`
consecutive validation evaluations without improvement, and the best
validation snapshot is restored at every rate change and stage end.  Fresh
training batches are drawn every step; validation/test batches are fixed.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import datagen, networks
from .algorithms import nmse_db
from .numerics import RngStream


def quadratic_loss(xhat, X0):
    """(1/D) sum_d ||xhat_d - x_d||^2 over batch columns."""
    if xhat.shape != X0.shape:
        raise ValueError("quadratic_loss: shape mismatch")
    return float(np.sum((xhat - X0) ** 2) / xhat.shape[1])


@dataclass
class TrainConfig:
    batch_size: int = 1000
    val_size: int = 1000
    rates: tuple = (1e-3, 1e-4, 1e-5)
    patience: int = 50
    eval_every: int = 10
    max_steps_layerwise: int = 4000
    max_steps_global: int = 8000
    seed: int = 0


@dataclass
class StageReport:
    stage: int
    mode: str          # layerwise | global | bootstrap-replace
    steps: int
    val_nmse_db: float


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    aborts: int = 0


def adam_step(state, leaves, grads, rate, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the leaf views.

    Non-finite gradients abort the step and halve the rate (recorded in
    state.aborts).  Returns the rate to use for the next step.
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state.aborts += 1
            return rate * 0.5
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, leaf in leaves.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(leaf))
        v = state.v.setdefault(k, np.zeros_like(leaf))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        leaf[...] -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return rate


# ---------------------------------------------------------------------------
# Architecture plumbing: init, prefix truncation, stage parameter sets
# ---------------------------------------------------------------------------

def init_network(arch, inst, T, tied=True, family="bg", pair=False, form="svd",
                 structured=False, lam0=0.1, scale_b=False, w2_init=None,
                 theta0=None):
    if arch == "lista":
        return networks.lista_init(inst.A, T, tied=tied, structured=structured,
                                   lam0=lam0)
    if arch == "lamp_l1":
        return networks.lamp_l1_init(inst.A, T, tied=tied, pair=pair,
                                     scale_b=scale_b)
    if arch == "lamp":
        return networks.lamp_init(inst.A, T, family, tied=tied, pair=pair,
                                  theta0=theta0, scale_b=scale_b)
    if arch == "lvamp":
        return networks.lvamp_init(inst, T, family, form=form, tied=tied,
                                   pair=pair, theta0=theta0, w2_init=w2_init)
    raise ValueError(f"unknown architecture '{arch}'")


def truncate(params, T2):
    """A params object for the first T2 layers, sharing the same arrays."""
    p = params
    if isinstance(p, networks.ListaParams):
        S = p.S if p.structured else (p.S if p.tied else p.S[:T2])
        return networks.ListaParams(B=p.B, S=S, lam=p.lam[:T2], tied=p.tied,
                                    structured=p.structured)
    if isinstance(p, networks.LampL1Params):
        return networks.LampL1Params(B=p.B if p.tied else p.B[:T2],
                                     alpha=p.alpha[:T2], beta=p.beta[:T2],
                                     tied=p.tied, pair=p.pair)
    if isinstance(p, networks.LampParams):
        return networks.LampParams(B=p.B if p.tied else p.B[:T2],
                                   theta=p.theta[:T2], family=p.family,
                                   pair=p.pair, tied=p.tied)
    if isinstance(p, networks.LvampParams):
        kw = dict(form=p.form, family=p.family, pair=p.pair, tied=p.tied,
                  s2_init=p.s2_init, theta=p.theta[:T2])
        names = ("U", "s", "V", "w2") if p.form == "svd" else ("G", "H")
        for n in names:
            vals = getattr(p, n)
            kw[n] = vals if p.tied else vals[:T2]
        return networks.LvampParams(**kw)
    raise TypeError(f"unknown params type {type(p)}")


def _lin_keys(params, t):
    """Leaf keys of layer t's linear stage (shared keys when tied)."""
    p = params
    if isinstance(p, networks.ListaParams):
        if p.structured:
            return []
        if p.tied:
            return ["S"] if t >= 1 else []
        return [f"S[{t}]"] if t >= 1 else []
    if isinstance(p, (networks.LampL1Params, networks.LampParams)):
        return ["B"] if p.tied else [f"B[{t}]"]
    names = ("U", "s", "V", "w2") if p.form == "svd" else ("G", "H")
    if p.tied:
        return list(names)
    return [f"{n}[{t}]" for n in names]


def _scalar_keys(params, t):
    p = params
    if isinstance(p, networks.ListaParams):
        return [f"lam[{t}]"]
    if isinstance(p, networks.LampL1Params):
        # beta_0 stays fixed: {mu B, mu alpha_0, beta_0/mu} is the same layer
        return [f"alpha[{t}]"] + ([f"beta[{t}]"] if t >= 1 else [])
    return [f"theta[{t}]"]


def stage_keys(params, t, mode):
    """Trainable leaves for stage t in the given mode."""
    if mode == "layerwise":
        # the new layer's scalars; untied nets also learn its linear stage
        keys = _scalar_keys(params, t)
        if not params.tied:
            keys = _lin_keys(params, t) + keys
        return keys
    # stage-0 / global: everything unlocked so far
    keys = []
    seen = set()
    for i in range(t + 1):
        for k in _lin_keys(params, i) + _scalar_keys(params, i):
            if k not in seen:
                seen.add(k)
                keys.append(k)
    if isinstance(params, networks.ListaParams):
        keys.insert(0, "B")   # B is shared in both tied and untied LISTA
    return keys


def stage_init_from_prev(params, t):
    """Initialize layer t's parameters from layer t-1 (in place)."""
    p = params
    if isinstance(p, networks.ListaParams):
        p.lam[t] = p.lam[t - 1]
        if not p.tied and not p.structured:
            p.S[t][...] = p.S[t - 1]
    elif isinstance(p, networks.LampL1Params):
        p.alpha[t] = p.alpha[t - 1]
        p.beta[t] = p.beta[t - 1]
        if not p.tied:
            p.B[t][...] = p.B[t - 1]
    elif isinstance(p, networks.LampParams):
        p.theta[t][...] = p.theta[t - 1]
        if not p.tied:
            p.B[t][...] = p.B[t - 1]
    elif isinstance(p, networks.LvampParams):
        p.theta[t][...] = p.theta[t - 1]
        if not p.tied:
            names = ("U", "s", "V", "w2") if p.form == "svd" else ("G", "H")
            for n in names:
                getattr(p, n)[t][...] = getattr(p, n)[t - 1]


def project(params):
    """Clip parameters back into their valid domains after an Adam step."""
    p = params
    if isinstance(p, networks.ListaParams):
        np.maximum(p.lam, 1e-8, out=p.lam)
    elif isinstance(p, networks.LampL1Params):
        np.maximum(p.alpha, 1e-6, out=p.alpha)
        np.maximum(p.beta, 1e-6, out=p.beta)
    elif isinstance(p, (networks.LampParams, networks.LvampParams)):
        for th in p.theta:
            if p.family == "pwlin":
                th[0] = max(th[0], 1e-6)
                th[1] = max(th[1], th[0] + 1e-6)
            elif p.family in ("exp", "spline", "bg"):
                th[0] = max(th[0], 1e-6)
        if isinstance(p, networks.LvampParams) and p.form == "svd":
            for w in p.w2:
                np.maximum(w, 1e-12, out=w)


# ---------------------------------------------------------------------------
# Stage optimizer
# ---------------------------------------------------------------------------

def evaluate(params, inst, batch):
    """Per-layer NMSE (dB) table on a fixed batch, one entry per tap."""
    xs, _ = networks.forward_any(params, batch.Y, inst.A)
    return np.array([nmse_db(x, batch.X0, inst.score_rows) for x in xs])


def _val_nmse(params, depth, inst, batch):
    xs, _ = networks.forward_any(truncate(params, depth), batch.Y, inst.A)
    return nmse_db(xs[-1], batch.X0, inst.score_rows)


def _optimize_stage(params, depth, keys, inst, sampler, val_batch, config,
                    data_rng, max_steps, min_layer):
    leaves = params.leaves()
    train_leaves = {k: leaves[k] for k in keys}
    best_val = _val_nmse(params, depth, inst, val_batch)
    best_snap = {k: a.copy() for k, a in train_leaves.items()}
    steps = 0
    for rate in config.rates:
        adam = AdamState()
        cur_rate = rate
        fails = 0
        while fails < config.patience and steps < max_steps:
            for _ in range(config.eval_every):
                if steps >= max_steps:
                    break
                batch = sampler(data_rng, config.batch_size)
                ptr = truncate(params, depth)
                xs, tape = networks.forward_any(ptr, batch.Y, inst.A)
                gx = (2.0 / batch.D) * (xs[-1] - batch.X0)
                grads = networks.backward_any(ptr, tape, batch.Y, inst.A, gx,
                                              min_layer=min_layer)
                cur_rate = adam_step(adam, train_leaves,
                                     {k: grads[k] for k in keys}, cur_rate)
                project(params)
                steps += 1
            val = _val_nmse(params, depth, inst, val_batch)
            if val < best_val:
                best_val = val
                best_snap = {k: a.copy() for k, a in train_leaves.items()}
                fails = 0
            else:
                fails += 1
        for k, a in best_snap.items():
            train_leaves[k][...] = a
    return steps, best_val


@dataclass
class TrainResult:
    params: object
    reports: list
    snapshots: list      # deep copy of params at the end of each stage
    val_nmse_db: float


def default_sampler(inst):
    return lambda rng, D: datagen.gen_batch(rng, inst, D)


def train_tied(arch, inst, config, T, sampler=None, **arch_kw):
    """Stage-wise tied training: learn layer 0 jointly with the shared linear
    stage, then per stage learn the new layer's scalars with the prefix
    frozen and re-learn everything unlocked."""
    return _train_staged(arch, inst, config, T, tied=True, sampler=sampler,
                         **arch_kw)


def train_untied(arch, inst, config, T, tied_result=None, sampler=None,
                 **arch_kw):
    """Untied training bootstrapped against the tied stage snapshots: at each
    stage the untied prefix is replaced by the tied one whenever the tied
    snapshot validates better."""
    if tied_result is None:
        tied_result = train_tied(arch, inst, config, T, sampler=sampler,
                                 **arch_kw)
    return _train_staged(arch, inst, config, T, tied=False, sampler=sampler,
                         tied_result=tied_result, **arch_kw)


def _copy_tied_into_untied(params, tied_params, t):
    """Replace the untied prefix (layers <= t) with the tied snapshot."""
    p = params
    q = tied_params
    if isinstance(p, networks.ListaParams):
        p.B[...] = q.B
        p.lam[:t + 1] = q.lam[:t + 1]
        if not p.structured:
            for i in range(1, t + 1):
                p.S[i][...] = q.S[0]
    elif isinstance(p, networks.LampL1Params):
        p.alpha[:t + 1] = q.alpha[:t + 1]
        p.beta[:t + 1] = q.beta[:t + 1]
        for i in range(t + 1):
            p.B[i][...] = q.B[0]
    elif isinstance(p, networks.LampParams):
        for i in range(t + 1):
            p.B[i][...] = q.B[0]
            p.theta[i][...] = q.theta[i]
    elif isinstance(p, networks.LvampParams):
        names = ("U", "s", "V", "w2") if p.form == "svd" else ("G", "H")
        for i in range(t + 1):
            p.theta[i][...] = q.theta[i]
            for n in names:
                getattr(p, n)[i][...] = getattr(q, n)[0]


def _train_staged(arch, inst, config, T, tied, sampler=None, tied_result=None,
                  **arch_kw):
    rng = RngStream(config.seed)
    if sampler is None:
        sampler = default_sampler(inst)
    data_rng = rng.spawn(1 if tied else 3)
    val_batch = sampler(rng.spawn(2), config.val_size)
    params = init_network(arch, inst, T, tied=tied, **arch_kw)
    reports, snapshots = [], []
    steps, val = _optimize_stage(params, 1, stage_keys(params, 0, "global"),
                                 inst, sampler, val_batch, config, data_rng,
                                 config.max_steps_global, 0)
    reports.append(StageReport(0, "global", steps, val))
    snapshots.append(copy.deepcopy(params))
    for t in range(1, T):
        stage_init_from_prev(params, t)
        steps, val = _optimize_stage(
            params, t + 1, stage_keys(params, t, "layerwise"), inst, sampler,
            val_batch, config, data_rng, config.max_steps_layerwise, t)
        reports.append(StageReport(t, "layerwise", steps, val))
        if not tied and tied_result is not None:
            tied_val = _val_nmse(tied_result.snapshots[t], t + 1, inst, val_batch)
            if tied_val < val:
                _copy_tied_into_untied(params, tied_result.snapshots[t], t)
                reports.append(StageReport(t, "bootstrap-replace", 0, tied_val))
        steps, val = _optimize_stage(
            params, t + 1, stage_keys(params, t, "global"), inst, sampler,
            val_batch, config, data_rng, config.max_steps_global, 0)
        reports.append(StageReport(t, "global", steps, val))
        snapshots.append(copy.deepcopy(params))
    return TrainResult(params=params, reports=reports, snapshots=snapshots,
                       val_nmse_db=reports[-1].val_nmse_db)
