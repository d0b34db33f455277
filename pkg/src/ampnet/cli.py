"""Command-line interface: generate datasets, train networks, evaluate
checkpoints, reproduce built-in experiments, and compare result tables."""

import argparse
import json
import sys

import numpy as np

from . import datagen, harness, networks, training
from .numerics import RngStream


def _add_generate(sub):
    p = sub.add_parser("generate", help="draw a problem instance + batch to .npz")
    p.add_argument("--kind", default="iid-gaussian",
                   choices=["iid-gaussian", "geometric-kappa", "qpsk-composite"])
    p.add_argument("--M", type=int, default=250)
    p.add_argument("--N", type=int, default=500)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--snr-db", type=float, default=40.0)
    p.add_argument("--batch", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)


def _add_train(sub):
    p = sub.add_parser("train", help="train an unfolded network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", required=True,
                   choices=["lista", "lamp_l1", "lamp", "lvamp"])
    p.add_argument("--family", default="bg")
    p.add_argument("--form", default="svd", choices=["svd", "gh"])
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--untied", action="store_true")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--max-steps-layerwise", type=int, default=4000)
    p.add_argument("--max-steps-global", type=int, default=8000)
    p.add_argument("--out", required=True)
    p.add_argument("--runlog", default=None)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="per-layer NMSE of a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)


def _add_reproduce(sub):
    p = sub.add_parser("reproduce", help="run a built-in experiment end to end")
    p.add_argument("exp_id", choices=sorted(harness.BUILTIN_CONFIGS))
    p.add_argument("--outdir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--train-override", default=None,
                   help="JSON dict of TrainConfig fields")


def _add_compare(sub):
    p = sub.add_parser("compare", help="compare two result tables")
    p.add_argument("table_a")
    p.add_argument("table_b")
    p.add_argument("--tol-db", type=float, default=1.0)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="ampnet",
                                 description="sparse recovery solvers and "
                                             "unfolded networks")
    sub = ap.add_subparsers(dest="verb", required=True)
    for add in (_add_generate, _add_train, _add_evaluate, _add_reproduce,
                _add_compare):
        add(sub)
    args = ap.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args):
    if args.verb == "generate":
        rng = RngStream(args.seed)
        spec = datagen.MatrixSpec(kind=args.kind, M=args.M, N=args.N,
                                  kappa=args.kappa)
        prior = datagen.SignalPrior(gamma=args.gamma, phi=args.phi)
        inst = datagen.make_instance(rng, spec, prior, args.snr_db)
        batch = datagen.gen_batch(rng.spawn(1), inst, args.batch)
        datagen.save_dataset(args.out, inst, batch, seed=args.seed)
        print(f"wrote {args.out}: A {inst.A.shape}, batch D={batch.D}")
        return 0

    if args.verb == "train":
        inst, batch, _ = datagen.load_dataset(args.dataset)
        cfg = training.TrainConfig(
            batch_size=args.batch_size, seed=args.seed, patience=args.patience,
            eval_every=args.eval_every,
            max_steps_layerwise=args.max_steps_layerwise,
            max_steps_global=args.max_steps_global)
        kw = {}
        if args.arch == "lamp":
            kw["family"] = args.family
        if args.arch == "lvamp":
            kw["family"] = args.family
            kw["form"] = args.form
        if inst.complex_pairs and args.arch in ("lamp", "lvamp"):
            kw["pair"] = True
        train = training.train_untied if args.untied else training.train_tied
        res = train(args.arch, inst, cfg, args.layers, **kw)
        networks.save_checkpoint(args.out, res.params)
        if args.runlog:
            with open(args.runlog, "a") as f:
                for rep in res.reports:
                    f.write(json.dumps({"arch": args.arch, "stage": rep.stage,
                                        "mode": rep.mode, "steps": rep.steps,
                                        "val_nmse_db": rep.val_nmse_db}) + "\n")
        print(f"trained {args.arch} T={args.layers}; "
              f"final val NMSE {res.val_nmse_db:.2f} dB -> {args.out}")
        return 0

    if args.verb == "evaluate":
        inst, batch, _ = datagen.load_dataset(args.dataset)
        params = networks.load_checkpoint(args.checkpoint)
        tab = training.evaluate(params, inst, batch)
        for t, db in enumerate(tab, start=1):
            print(f"layer {t:3d}  {db:8.2f} dB")
        if args.out:
            table = harness.ResultTable()
            for t, db in enumerate(tab, start=1):
                table.add(args.checkpoint, t, db, batch.D)
            table.to_csv(args.out)
        return 0

    if args.verb == "reproduce":
        cfg = harness.builtin_config(args.exp_id)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.n_test is not None:
            cfg.n_test = args.n_test
        if args.train_override:
            cfg.train = json.loads(args.train_override)
        table = harness.run_experiment(cfg, args.outdir)
        print(f"{args.exp_id}: wrote {len(table.rows)} rows to {args.outdir}")
        return 0

    # compare
    ok, rows = harness.compare(harness.ResultTable.from_csv(args.table_a),
                               harness.ResultTable.from_csv(args.table_b),
                               args.tol_db)
    for m, l, a, b, d, good in rows:
        if not good:
            print(f"FAIL {m} layer {l}: {a:.2f} vs {b:.2f} (delta {d:+.2f} dB)")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
