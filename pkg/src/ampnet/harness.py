"""Experiment harness: built-in experiment configurations, end-to-end runs
(generate -> solve/train -> evaluate), result tables, and comparison.

Each experiment writes into its output directory:
  <exp_id>.csv        the result table (method, layer, nmse_db, samples)
  manifest.json       config, seeds, wall clock, content hash, artifact list
  runlog.jsonl        stage reports for every trained network
  qq_<method>.csv     quantile tables (QQ experiments only)
  ckpt_<method>.npz   checkpoints for trained networks
"""

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import algorithms as alg
from . import datagen, networks, training
from .numerics import RngStream

ALPHA_MINIMAX_01 = 1.1402   # minimax soft-threshold tuning at activity 0.1
ISTA_BETA_FRAC = 0.65       # stepsize fraction of 1/||A||_2^2 for ISTA/FISTA


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)  # (method, layer, nmse_db, samples)

    def add(self, method, layer, nmse_db, samples):
        self.rows.append((str(method), int(layer), float(nmse_db), int(samples)))

    def methods(self):
        return sorted({r[0] for r in self.rows})

    def curve(self, method):
        return {r[1]: r[2] for r in self.rows if r[0] == method}

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "layer", "nmse_db", "samples"])
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path):
        t = cls()
        with open(path, newline="") as f:
            rd = csv.reader(f)
            next(rd)
            for method, layer, db, ns in rd:
                t.add(method, int(layer), float(db), int(ns))
        return t


def compare(table_a, table_b, tolerance_db):
    """Per-(method, layer) comparison; flags |delta| > tolerance.

    Returns (all_pass, detail rows (method, layer, a, b, delta, ok)).
    """
    common = set(table_a.methods()) & set(table_b.methods())
    if not common:
        raise ValueError("compare: tables share no methods")
    out = []
    for m in sorted(common):
        ca, cb = table_a.curve(m), table_b.curve(m)
        layers = sorted(set(ca) & set(cb))
        if not layers:
            raise ValueError(f"compare: no overlapping layers for '{m}'")
        for l in layers:
            d = ca[l] - cb[l]
            out.append((m, l, ca[l], cb[l], d, abs(d) <= tolerance_db))
    return all(r[-1] for r in out), out


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    exp_id: str
    kind: str                      # algorithms | qq | train | train5g
    seed: int = 1
    matrix: dict = None            # {kind, M, N, kappa}
    gamma: float = 0.1
    phi: float = 1.0
    snr_db: float = 40.0
    alpha: float = ALPHA_MINIMAX_01
    n_test: int = 1000
    methods: list = field(default_factory=list)
    train: dict = field(default_factory=dict)   # TrainConfig overrides
    scenario: dict = None          # CellScenario fields (train5g)
    lambda_from: str = "amp"       # amp | vamp: source of the l1 penalty

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)


def _net(method, **kw):
    d = {"method": method}
    d.update(kw)
    return d


_IID = {"kind": "iid-gaussian", "M": 250, "N": 500}
_K15 = {"kind": "geometric-kappa", "M": 250, "N": 500, "kappa": 15.0}
_K100 = {"kind": "geometric-kappa", "M": 250, "N": 500, "kappa": 100.0}

BUILTIN_CONFIGS = {
    "fig1a": ExperimentConfig(
        exp_id="fig1a", kind="algorithms", matrix=_IID, n_test=1000,
        methods=[_net("ista", T=7000), _net("fista", T=700),
                 _net("amp_l1", T=60), _net("vamp_l1", T=60)]),
    "fig1b": ExperimentConfig(
        exp_id="fig1b", kind="algorithms", matrix=_K15, n_test=1000,
        lambda_from="vamp",
        methods=[_net("ista", T=40000), _net("fista", T=4000),
                 _net("amp_l1", T=60), _net("vamp_l1", T=300)]),
    "qq": ExperimentConfig(
        exp_id="qq", kind="qq", matrix=_IID, n_test=1,
        methods=[_net("ista", T=4000), _net("amp_l1", T=40),
                 _net("lamp_l1", tied=False, T=4)]),
    "fig7": ExperimentConfig(
        exp_id="fig7", kind="train", matrix=_IID,
        methods=[_net("lista", tied=True, T=18),
                 _net("lamp_l1", tied=True, T=15),
                 _net("amp_l1", T=20)]),
    "fig8": ExperimentConfig(
        exp_id="fig8", kind="train", matrix=_K15,
        methods=[_net("lista", tied=True, T=15),
                 _net("lamp_l1", tied=True, T=15)]),
    "fig9": ExperimentConfig(
        exp_id="fig9", kind="train", matrix=_IID,
        methods=[_net("lamp_l1", tied=True, T=10),
                 _net("lamp", family="bg", tied=True, T=10),
                 _net("lamp", family="pwlin", tied=True, T=10),
                 _net("lamp", family="bg", tied=False, T=10),
                 _net("support_oracle"), _net("lista", tied=True, T=10)]),
    "fig10": ExperimentConfig(
        exp_id="fig10", kind="train", matrix=_K100,
        methods=[_net("lamp", family="bg", tied=True, T=15),
                 _net("lvamp", family="bg", form="svd", tied=True, T=15),
                 _net("vamp_matched", T=15), _net("support_oracle")]),
    "fig11": ExperimentConfig(
        exp_id="fig11", kind="train", matrix=_IID,
        methods=[_net("lvamp", family="bg", form="svd", tied=True, T=15),
                 _net("vamp_matched", T=15), _net("support_oracle")]),
    "fig12": ExperimentConfig(
        exp_id="fig12", kind="train", matrix=_K15,
        methods=[_net("lvamp", family="bg", form="svd", tied=True, T=15),
                 _net("vamp_matched", T=15), _net("support_oracle")]),
    "fig13": ExperimentConfig(
        exp_id="fig13", kind="train5g", n_test=1024, snr_db=10.0,
        scenario={"n_cells": 1, "users_per_cell": 512, "n_rx": 1,
                  "pilot_len": 64, "activity": 0.01},
        methods=[_net("lista", tied=True, T=6), _net("lista", tied=False, T=6),
                 _net("lamp", family="pwlin", tied=True, T=6),
                 _net("lamp", family="pwlin", tied=False, T=6),
                 _net("lvamp", family="pwlin", form="gh", tied=False, T=6)]),
    "fig14": ExperimentConfig(
        exp_id="fig14", kind="train5g", n_test=1024, snr_db=20.0,
        scenario={"n_cells": 7, "users_per_cell": 64, "n_rx": 64,
                  "pilot_len": 64, "activity": 1.0},
        methods=[_net("lista", tied=True, T=6), _net("lista", tied=False, T=6),
                 _net("lamp", family="pwlin", tied=True, T=6),
                 _net("lamp", family="pwlin", tied=False, T=6),
                 _net("lvamp", family="pwlin", form="gh", tied=False, T=6)]),
}


def builtin_config(exp_id):
    if exp_id not in BUILTIN_CONFIGS:
        raise KeyError(f"unknown experiment '{exp_id}'; "
                       f"available: {sorted(BUILTIN_CONFIGS)}")
    return dataclasses.replace(BUILTIN_CONFIGS[exp_id])


def _method_label(m):
    name = m["method"]
    parts = [name]
    if "family" in m:
        parts.append(m["family"])
    if "tied" in m:
        parts.append("tied" if m["tied"] else "untied")
    return "-".join(parts)


def make_instance_from_config(cfg, rng):
    spec = datagen.MatrixSpec(**cfg.matrix)
    prior = datagen.SignalPrior(gamma=cfg.gamma, phi=cfg.phi)
    return datagen.make_instance(rng, spec, prior, cfg.snr_db)


def _train_config(cfg):
    return training.TrainConfig(**cfg.train) if cfg.train else training.TrainConfig(
        seed=cfg.seed)


def _penalty(cfg, inst, Y):
    """Per-realization l1 penalty matched to the alpha tuning."""
    if cfg.lambda_from == "amp":
        return alg.calibrate_lambda(inst, cfg.alpha, Y, per_column=True)
    # ill-conditioned instances: AMP diverges, extract the penalty from the
    # VAMP fixed point via the l1 stationarity condition
    tr = alg.vamp(inst, Y, "sst", np.array([1.0, cfg.alpha]), T=400)
    res = inst.A.T @ (Y - inst.A @ tr.xhat)
    lam = np.array([np.median(np.abs(res[tr.xhat[:, d] != 0, d]))
                    for d in range(Y.shape[1])])
    return lam


def _run_algorithm(m, cfg, inst, batch, lam):
    name = m["method"]
    T = m.get("T", 60)
    beta = ISTA_BETA_FRAC / float(inst.svdA.s[0] ** 2)
    if name == "ista":
        return alg.ista(inst, batch.Y, lam, beta=beta, T=T, x0=batch.X0,
                        stop_below_db=m.get("stop_below_db"))
    if name == "fista":
        return alg.fista(inst, batch.Y, lam, beta=beta, T=T, x0=batch.X0,
                         stop_below_db=m.get("stop_below_db"))
    if name == "amp_l1":
        return alg.amp_l1(inst, batch.Y, cfg.alpha, T=T, x0=batch.X0)
    if name == "vamp_l1":
        return alg.vamp(inst, batch.Y, "sst", np.array([1.0, cfg.alpha]), T=T,
                        x0=batch.X0)
    if name == "vamp_matched":
        return alg.vamp_matched(inst, batch.Y, T=T, x0=batch.X0)
    raise ValueError(f"unknown algorithm '{name}'")


_ALGO_NAMES = ("ista", "fista", "amp_l1", "vamp_l1", "vamp_matched")


def train_method(m, cfg, inst, sampler=None, tied_cache=None):
    """Train one network method; returns its TrainResult."""
    tc = _train_config(cfg)
    kw = {}
    for k in ("family", "form", "structured"):
        if k in m:
            kw[k] = m[k]
    if inst.complex_pairs and m["method"] in ("lamp", "lvamp"):
        kw["pair"] = True
    if inst.complex_pairs and m["method"] in ("lamp", "lamp_l1"):
        kw["scale_b"] = True
    if m["method"] == "lvamp":
        # noise-variance init from the data scale, per the training recipe
        kw["w2_init"] = None if sampler is None else float(
            np.mean(sampler(RngStream(cfg.seed).spawn(17), 64).Y ** 2))
    if m.get("tied", True):
        return training.train_tied(m["method"], inst, tc, m["T"],
                                   sampler=sampler, **kw)
    key = (m["method"], m.get("family"), m["T"])
    tied_result = None if tied_cache is None else tied_cache.get(key)
    res = training.train_untied(m["method"], inst, tc, m["T"],
                                tied_result=tied_result, sampler=sampler, **kw)
    return res


def run_experiment(cfg, outdir):
    """Execute a configured experiment, writing tables and artifacts."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    t_start = time.time()
    table = ResultTable()
    artifacts = [f"{cfg.exp_id}.csv"]
    rng = RngStream(cfg.seed)
    runlog = open(outdir / "runlog.jsonl", "w")

    if cfg.kind in ("algorithms", "qq", "train"):
        inst = make_instance_from_config(cfg, rng)
        _validate_instance(cfg, inst)
        test = datagen.gen_batch(rng.spawn(101), inst, cfg.n_test)
        sampler = None
    else:
        scen = datagen.CellScenario(**cfg.scenario)
        if scen.n_rx == 1:
            inst, test, sampler = datagen.gen_random_access(
                rng, scen, D=cfg.n_test, snr_db=cfg.snr_db, return_sampler=True)
        else:
            per_angle, sampler = datagen.gen_massive_mimo(
                rng, scen, draws=max(1, cfg.n_test // scen.n_rx),
                snr_db=cfg.snr_db, return_sampler=True)
            inst = per_angle[0][0]
            test = datagen.merge_batches([b for _, b in per_angle])

    lam = None
    tied_cache = {}
    max_T = max((m.get("T", 0) for m in cfg.methods), default=1)
    for m in cfg.methods:
        label = _method_label(m)
        if m["method"] == "support_oracle":
            db = alg.to_db(alg.support_oracle_nmse(inst, test))
            for layer in range(1, max_T + 1):
                table.add("support-oracle", layer, db, test.D)
            continue
        if m["method"] in _ALGO_NAMES:
            if m["method"] in ("ista", "fista") and lam is None:
                lam = _penalty(cfg, inst, test.Y)
            tr = _run_algorithm(m, cfg, inst, test, lam)
            for t, db in enumerate(tr.nmse_db, start=1):
                table.add(label, t, db, test.D)
            if cfg.kind == "qq":
                _export_qq(outdir, label, m, cfg, inst, test, artifacts)
            continue
        # network method
        res = train_method(m, cfg, inst, sampler=sampler, tied_cache=tied_cache)
        if m.get("tied", True):
            tied_cache[(m["method"], m.get("family"), m["T"])] = res
        for rep in res.reports:
            runlog.write(json.dumps({"method": label, **dataclasses.asdict(rep)})
                         + "\n")
        tab = training.evaluate(res.params, inst, test)
        for t, db in enumerate(tab, start=1):
            table.add(label, t, db, test.D)
        ck = f"ckpt_{label}.npz"
        networks.save_checkpoint(outdir / ck, res.params)
        artifacts.append(ck)
        if cfg.kind == "qq":
            _export_qq(outdir, label, m, cfg, inst, test, artifacts,
                       params=res.params)
    runlog.close()

    table.to_csv(outdir / f"{cfg.exp_id}.csv")
    manifest = {
        "exp_id": cfg.exp_id, "config": json.loads(cfg.to_json()),
        "seed": cfg.seed, "wall_clock_s": round(time.time() - t_start, 3),
        "config_sha256": hashlib.sha256(cfg.to_json().encode()).hexdigest(),
        "artifacts": artifacts + ["manifest.json", "runlog.jsonl"],
    }
    with open(outdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return table


def _validate_instance(cfg, inst):
    """Built-in instances must satisfy their constraints before any method runs."""
    if cfg.matrix.get("kind") == "geometric-kappa":
        kap = inst.svdA.s[0] / inst.svdA.s[-1]
        assert abs(kap - cfg.matrix["kappa"]) <= 1e-6 * cfg.matrix["kappa"]
        fro2 = float(np.sum(inst.A ** 2))
        assert abs(fro2 - inst.N) <= 1e-6 * inst.N
    exp_sig = cfg.gamma * cfg.phi * float(np.sum(inst.A ** 2))
    snr = exp_sig / (inst.M * inst.sigma_w2)
    assert abs(10 * np.log10(snr) - cfg.snr_db) < 1e-9


def first_with_nmse_below(trace_or_curve, level_db):
    if isinstance(trace_or_curve, dict):
        for t in sorted(trace_or_curve):
            if trace_or_curve[t] <= level_db:
                return t
        return None
    return trace_or_curve.first_crossing(level_db)


def _export_qq(outdir, label, m, cfg, inst, test, artifacts, params=None):
    """QQ table of the shrinkage-input error at the first t below -15 dB."""
    if params is None:
        T = m.get("T", 60)
        beta = ISTA_BETA_FRAC / float(inst.svdA.s[0] ** 2)
        if m["method"] == "ista":
            lam = alg.calibrate_lambda(inst, cfg.alpha, test.Y, per_column=True)
            tr = alg.ista(inst, test.Y, lam, beta=beta, T=T, x0=test.X0,
                          keep_inputs=True, stop_below_db=-15.0)
        else:
            tr = alg.amp_l1(inst, test.Y, cfg.alpha, T=T, x0=test.X0,
                            keep_inputs=True)
    else:
        xs, tape = networks.lamp_l1_forward(params, test.Y, inst.A)
        rs = [tape[t]["x"] + params.B[0 if params.tied else t] @ tape[t]["v"]
              for t in range(params.T)]
        tr = alg.IterTrace(
            nmse_db=np.array([alg.nmse_db(x, test.X0) for x in xs]),
            scale=np.zeros(len(xs)), diverged=False, xhat=xs[-1], x0=test.X0,
            shrink_inputs=rs)
    t = tr.first_crossing(-15.0)
    if t is None:
        t = len(tr.shrink_inputs)
    q = alg.qq_export(tr, t)
    path = f"qq_{label}.csv"
    with open(Path(outdir) / path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"# method={label} t={t} corr={q.correlation:.6f}"])
        w.writerow(["normal_quantile", "sample_quantile"])
        w.writerows(zip(q.normal_q, q.sample_q))
    artifacts.append(path)
