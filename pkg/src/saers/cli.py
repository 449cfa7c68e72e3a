"""Command-line interface: preprocess | train | evaluate | explain | gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
(gradient check above tolerance).  All errors go to stderr with an
``error:`` prefix.  ``SAERS_DATA_DIR`` provides the default data root; flags
override config-file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from saers import evaluation, training
from saers.errors import SaersError
from saers.explanation import explain, write_explanation
from saers.model import VARIANTS, normalize_variant
from saers.optimizer import TrainHyper, finite_diff_check, random_check_fixture
from saers.tensor_store import (
    load_feature_manifest,
    load_interactions,
    load_split,
    save_split,
    split_leave_one_out,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="saers", description="Explainable visual recommender engine")
    sub = parser.add_subparsers(dest="command")

    def add_data_flags(p):
        p.add_argument("--data-dir", default=os.environ.get("SAERS_DATA_DIR"),
                       help="data root with features/, interactions.tsv, split.json "
                            "(default: $SAERS_DATA_DIR)")
        p.add_argument("--features", help="feature manifest directory")
        p.add_argument("--interactions", help="interactions TSV path")
        p.add_argument("--split", help="split JSON path")
        p.add_argument("--min-interactions", type=int, default=5,
                       help="drop users with fewer distinct interactions")

    p = sub.add_parser("preprocess", description="Filter interactions and write a "
                       "leave-one-out split.")
    p.add_argument("--interactions", required=True)
    p.add_argument("--min-interactions", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", description="Train a model and write a checkpoint.")
    add_data_flags(p)
    p.add_argument("--config", help="JSON config file with train settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--variant", choices=[v.lower() for v in VARIANTS] + list(VARIANTS))
    p.add_argument("--dtype", choices=["f32", "f64"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("evaluate", description="Evaluate a checkpoint or baseline.")
    add_data_flags(p)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--baseline", choices=evaluation.BASELINES)
    p.add_argument("--scenario", choices=["all", "cold"], default="all")
    p.add_argument("--metric", choices=["auc", "ndcg"], default="auc")
    p.add_argument("--n", default="10", help="NDCG cut-offs, comma separated")
    p.add_argument("--rounds", type=int, default=10000, help="NDCG sampling rounds")
    p.add_argument("--negatives", type=int, default=500, help="negatives per NDCG round")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--d", type=int, default=16, help="latent dim for learned baselines")
    p.add_argument("--epochs", type=int, default=40, help="epochs for learned baselines")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("explain", description="Emit explanation JSON for a (user, item) "
                       "pair or the user's top-K recommendations.")
    add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item")
    p.add_argument("--top-k", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", description="Compare analytic gradients against "
                       "central finite differences on a random fixture.")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--attributes", type=int, default=3)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--m-g", type=int, default=6)
    p.add_argument("--hidden", type=int)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--variant", default="all",
                   choices=["all"] + [v.lower() for v in VARIANTS] + list(VARIANTS))
    return parser


def _resolve_data(args) -> tuple[Path, Path, Path | None]:
    root = Path(args.data_dir) if args.data_dir else None
    features = Path(args.features) if args.features else (root / "features" if root else None)
    interactions = Path(args.interactions) if args.interactions else \
        (root / "interactions.tsv" if root else None)
    split = Path(args.split) if args.split else \
        (root / "split.json" if root and (root / "split.json").is_file() else None)
    if features is None or interactions is None:
        raise UsageError("need --data-dir (or SAERS_DATA_DIR) or explicit "
                         "--features/--interactions")
    return features, interactions, split


def _load_dataset(args, need_features=True, fallback_seed=None):
    features_dir, interactions_path, split_path = _resolve_data(args)
    ds = load_interactions(interactions_path, min_user_interactions=args.min_interactions)
    if split_path is not None:
        split = load_split(split_path, ds)
    else:
        seed = getattr(args, "seed", None)
        if seed is None:
            seed = fallback_seed
        if seed is None:
            raise UsageError("no split file found; provide --split or --seed to derive one")
        split = split_leave_one_out(ds, seed)
    catalog = load_feature_manifest(features_dir) if need_features else None
    return split, catalog


def _cmd_preprocess(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_interactions(args.interactions, min_user_interactions=args.min_interactions)
    split = split_leave_one_out(ds, args.seed)
    save_split(split, out / "split.json")
    print(f"users={len(ds.users)} items={len(ds.items)} "
          f"interactions={ds.n_interactions} cold_items={len(split.cold_items)}")
    print(f"wrote {out / 'split.json'}")
    return 0


def _train_config_from_args(args) -> training.TrainConfig:
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    hyper = dict(cfg.get("hyper", {}))
    for flag, key in (("lr", "lr"), ("lam", "lam"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            hyper[key] = value
    for flag, key in (("seed", "seed"), ("d", "d"), ("hidden", "hidden"),
                      ("variant", "variant"), ("dtype", "dtype"),
                      ("epochs", "epochs"), ("eval_every", "eval_every"),
                      ("patience", "early_stop_patience")):
        value = getattr(args, flag)
        if value is not None:
            cfg[key] = value
    cfg["hyper"] = hyper
    if cfg.get("seed") is None:
        raise UsageError("training requires a seed (--seed or config file)")
    if "variant" in cfg:
        cfg["variant"] = normalize_variant(cfg["variant"])
    try:
        return training.TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise UsageError(f"bad config key: {exc}") from exc


def _cmd_train(args) -> int:
    from saers import reporting

    config = _train_config_from_args(args)
    split, catalog = _load_dataset(args, fallback_seed=config.seed)
    params, stats = training.train(config, split, catalog, n_threads=args.threads)
    out = Path(args.out)
    training.save_checkpoint(params, config, stats, out)
    reporting.write_train_stats_tsv(stats, out / "train_stats.tsv")
    if not args.no_figures:
        reporting.plot_training_curves(stats, out / "training_curve.png")
    print(f"variant={config.variant} epochs_run={stats.epochs_run} "
          f"best_epoch={stats.best_epoch} best_val_auc={stats.best_val_auc:.6f}")
    print(f"wrote checkpoint to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    from saers import reporting

    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("provide exactly one of --checkpoint or --baseline")
    split, catalog = _load_dataset(args)
    if args.checkpoint:
        params, _, _ = training.load_checkpoint(args.checkpoint)
        scorer = evaluation.SaersScorer(params, catalog)
    else:
        config = training.TrainConfig(
            d=args.d, seed=args.seed, epochs=args.epochs,
            hyper=TrainHyper(lr=args.lr, lam=args.lam))
        scorer = evaluation.make_baseline(args.baseline, split, catalog, config)

    report = evaluation.EvalReport(scorer=scorer.name,
                                   n_cold_items=len(split.cold_items))
    if args.metric == "auc":
        value = evaluation.auc(scorer, split, scenario=args.scenario,
                               n_threads=args.threads)
        if args.scenario == "all":
            report.auc_all = value
        else:
            report.auc_cold = value
        report.n_users = evaluation.auc_evaluated_users(split, args.scenario)
    else:
        if args.scenario == "cold":
            raise UsageError("NDCG is defined for the all-items scenario only")
        try:
            cutoffs = sorted({int(v) for v in args.n.split(",")})
        except ValueError:
            raise UsageError(f"bad --n value {args.n!r}") from None
        report.ndcg = evaluation.ndcg_curve(
            scorer, split, cutoffs, n_rounds=args.rounds, n_neg=args.negatives,
            rng=args.seed, n_threads=args.threads)
        report.n_users = len(split.train.users)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1,
                                                sort_keys=True))
    reporting.write_metrics_tsv(report, out / "metrics.tsv")
    if not args.no_figures:
        reporting.plot_eval_report(report, out / "metrics.png")
    for line in (out / "metrics.tsv").read_text().splitlines()[1:]:
        print(line.replace("\t", " = "))
    return 0


def _cmd_explain(args) -> int:
    from saers import reporting

    if (args.item is None) == (args.top_k is None):
        raise UsageError("provide exactly one of --item or --top-k")
    params, _, _ = training.load_checkpoint(args.checkpoint)
    features_dir, interactions_path, split_path = _resolve_data(args)
    catalog = load_feature_manifest(features_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.item is not None:
        item_ids = [args.item]
    else:
        scorer = evaluation.SaersScorer(params, catalog)
        candidates = catalog.item_ids()
        if interactions_path is not None and Path(interactions_path).is_file():
            ds = load_interactions(interactions_path,
                                   min_user_interactions=args.min_interactions)
            seen = ds.users.get(args.user, frozenset())
            candidates = [i for i in candidates if i not in seen]
        scores = scorer.score_items(args.user, candidates)
        order = np.argsort(-scores, kind="stable")[:args.top_k]
        item_ids = [candidates[k] for k in order]

    for item_id in item_ids:
        expl = explain(params, args.user, item_id, catalog)
        stem = out / f"explain_{args.user}_{item_id}"
        write_explanation(expl, stem.with_suffix(".json"))
        if not args.no_figures:
            reporting.plot_explanation(expl, stem.with_suffix(".png"))
        print(f"{item_id}: score={expl.score:.6f} top_attribute={expl.top_attribute} "
              f"weight={expl.attributes[0].weight:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    variants = list(VARIANTS) if args.variant == "all" else [normalize_variant(args.variant)]
    worst = 0.0
    for variant in variants:
        params, catalog, triple = random_check_fixture(
            seed=args.seed, d=args.d, n_attributes=args.attributes, m=args.m,
            m_g=args.m_g, hidden=args.hidden, variant=variant)
        err = finite_diff_check(params, triple, catalog, eps=args.eps, lam=args.lam)
        worst = max(worst, err)
        print(f"variant={variant} max_rel_err={err:.3e}")
    print(f"max_rel_err={worst:.3e} tol={args.tol:.1e}")
    if worst > args.tol:
        print(f"error: gradient check failed ({worst:.3e} > {args.tol:.1e})",
              file=sys.stderr)
        return 3
    return 0


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "explain": _cmd_explain,
    "gradcheck": _cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    """Parse argv and execute one subcommand, mapping errors to exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("error: a subcommand is required "
                  "(preprocess|train|evaluate|explain|gradcheck)", file=sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SaersError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
