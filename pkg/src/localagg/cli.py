"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .bank import load_bank, save_bank
from .config import TrainConfig, format_config, load_config
from .data import generate, load_dataset, save_dataset, train_val_split
from .encoder import load_encoder, save_encoder
from .errors import LocalAggError
from .evaluation import density_profile, embed, knn_classify_many, linear_probe
from .neighbors import save_ensemble

log = logging.getLogger("localagg")

SYNOPSIS = """usage: localagg <command> [options]

commands:
  gen-data    write a synthetic clustered dataset
  train       train an encoder and memory bank
  eval-knn    weighted kNN accuracy of a trained model on the validation split
  probe       linear readout accuracy on frozen embeddings
  density     local/background density profile of a memory bank
  ablate      train a grid of neighbor-procedure variants
  gradcheck   finite-difference verification of every analytic gradient
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    return int(os.environ.get("LAGGRE_WORKERS", "1") or 1)


def _pair_list(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in text.split(","):
        h, m = item.lower().split("x")
        pairs.append((int(h), int(m)))
    return pairs


def _split_list(text: str) -> list[str]:
    return [s.strip().upper() for s in text.split(",") if s.strip()]


def _load_train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="localagg", description="Local aggregation embedding learning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--workers", type=int, default=None, help="cap on module fan-out (env LAGGRE_WORKERS)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-data")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--input-dim", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--min-angle", type=float, default=20.0, help="minimum angle between class centers, degrees")
    p.add_argument("--out", required=True)
    common(p, 0)

    p = sub.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--bank", required=True, help="output memory bank file")
    p.add_argument("--encoder", required=True, help="output encoder checkpoint")
    p.add_argument("--out", required=True, help="output telemetry CSV")
    p.add_argument("--clusters", help="output clustering ensemble file")
    p.add_argument("--config-out", help="write the resolved configuration here")
    common(p)

    p = sub.add_parser("eval-knn")
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--config", help="training config; supplies tau, K, seed and split")
    p.add_argument("--K", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", help="per-sample predictions CSV")
    common(p)

    p = sub.add_parser("probe")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--out", help="one-row accuracy CSV")
    common(p)

    p = sub.add_parser("density")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="per-point density CSV")
    p.add_argument("--hist", help="histogram CSV")
    p.add_argument("--local", type=int)
    p.add_argument("--band", help="low,high neighbor ranks")
    common(p)

    p = sub.add_parser("ablate")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--background", type=_split_list, help="e.g. ALL,CLUSTER,KNN")
    p.add_argument("--close", type=_split_list, help="e.g. SELF,KNN_CLOSE,ENSEMBLE")
    p.add_argument("--hm", type=_pair_list, help="(H, m) pairs, e.g. 1x20,3x20")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("gradcheck")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", help="report CSV")
    common(p, 0)
    return parser


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    ds = generate(args.classes, args.per_class, args.latent_dim, args.input_dim, args.noise_sigma,
                  args.seed, args.min_angle)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} rows of width {ds.input_dim} to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train, write_telemetry

    ds = load_dataset(args.data)
    cfg = _load_train_config(args)
    result = train(ds, cfg, _workers(args))
    save_bank(result.bank, args.bank)
    save_encoder(result.params, args.encoder)
    write_telemetry(result.telemetry, args.out)
    if args.clusters and result.ensemble is not None:
        save_ensemble(result.ensemble, args.clusters)
    if args.config_out:
        with open(args.config_out, "w", encoding="utf-8") as fh:
            fh.write(format_config(result.config))
    print(f"initial knn_acc={result.initial.knn_acc:.4f} final knn_acc={result.final_knn:.4f}")
    return 0


def _val_split(ds, cfg):
    _, val_idx = train_val_split(ds.n, cfg.seed, cfg.val_fraction)
    if ds.labels is None:
        raise LocalAggError("dataset has no labels to evaluate against")
    return val_idx


def cmd_eval_knn(args) -> int:
    ds = load_dataset(args.data)
    cfg = _load_train_config(args)
    bank = load_bank(args.bank)
    params = load_encoder(args.encoder)
    val_idx = _val_split(ds, cfg)
    k = args.K if args.K is not None else cfg.resolved_knn_k(bank.n)
    tau = args.tau if args.tau is not None else cfg.tau
    feats = embed(params, ds.inputs[val_idx])
    pred, conf = knn_classify_many(feats, bank, k, tau)
    acc = float(np.mean(pred == ds.labels[val_idx]))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", "predicted", "confidence"])
            for i, y, p, c in zip(val_idx, ds.labels[val_idx], pred, conf):
                writer.writerow([int(i), int(y), int(p), repr(float(c))])
    print(f"knn_acc={acc!r} K={k} tau={tau}")
    return 0


def cmd_probe(args) -> int:
    ds = load_dataset(args.data)
    cfg = _load_train_config(args)
    params = load_encoder(args.encoder)
    train_idx, val_idx = train_val_split(ds.n, cfg.seed, cfg.val_fraction)
    if ds.labels is None:
        raise LocalAggError("dataset has no labels for a linear probe")
    acc = linear_probe(embed(params, ds.inputs[train_idx]), ds.labels[train_idx],
                       embed(params, ds.inputs[val_idx]), ds.labels[val_idx],
                       epochs=args.epochs, lr=args.lr, seed=cfg.seed)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["probe_accuracy", "epochs", "lr"])
            writer.writerow([repr(acc), args.epochs, args.lr])
    print(f"probe_acc={acc:.4f}")
    return 0


def cmd_density(args) -> int:
    bank = load_bank(args.bank)
    band = None
    if args.band:
        lo, hi = (int(x) for x in args.band.split(","))
        band = (lo, hi)
    profile = density_profile(bank, args.local, band)
    profile.write_csv(args.out)
    if args.hist:
        profile.write_histogram_csv(args.hist)
    print(f"local_density={profile.mean_local:.4f} background_density={profile.mean_background:.4f} "
          f"(local top-{profile.local_rank}, band {profile.band[0]}-{profile.band[1]})")
    return 0


def cmd_ablate(args) -> int:
    from .trainer import expand_grid, run_ablation_grid, write_ablation_table

    ds = load_dataset(args.data)
    cfg = _load_train_config(args)
    grid = expand_grid(args.background, args.close, args.hm)
    rows = run_ablation_grid(ds, cfg, grid, _workers(args))
    write_ablation_table(rows, args.out)
    for r in rows:
        print(f"{r.variant}: knn_acc={r.knn_acc:.4f} {r.status}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.trials, args.seed)
    ok = True
    lines = []
    for name, (report, threshold) in results.items():
        passed = report.passed(threshold)
        ok &= passed
        lines.append((name, report.trials, report.max_rel_error, threshold, passed))
        print(f"{name}: max_rel_error={report.max_rel_error:.3e} threshold={threshold:g} "
              f"{'PASS' if passed else 'FAIL'}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["check", "trials", "max_rel_error", "threshold", "passed"])
            for line in lines:
                writer.writerow([line[0], line[1], repr(line[2]), line[3], int(line[4])])
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-knn": cmd_eval_knn,
    "probe": cmd_probe,
    "density": cmd_density,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def dispatch(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        sys.stderr.write(SYNOPSIS)
        return 1
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n\n{SYNOPSIS}")
        return 1
    if args.command is None:
        sys.stderr.write(SYNOPSIS)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (LocalAggError, OSError) as exc:
        sys.stderr.write(f"localagg {args.command}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
