"""Command-line driver: ``tdrc {sim,fit,cv,predict,stats}``.

Exit codes: 0 on success, 2 for usage or input errors, 3 when a fit
diverges. Options may also come from a ``key=value`` file given with
``--config``; command-line flags take precedence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluation import rank_for_disease, run_cv, substream
from .similarity import SimParams, build_similarity_matrices
from .solvers import DivergenceError, Hyperparams, cp_als_fit, predict_scores, tdrc_fit

logger = logging.getLogger("tdrc")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


def _load_dataset(args):
    ds = io.load_triplets(args.triplets)
    if args.min_associations > 1:
        before = ds.shape
        ds = io.filter_min_associations(ds, args.min_associations)
        logger.info("filtered %s -> %s at min %d associations", before, ds.shape, args.min_associations)
    return ds


def _similarities(args, ds):
    """Similarity matrices aligned to the dataset vocabularies."""
    if args.sim_m and args.sim_n:
        try:
            S_m = io.load_similarity(args.sim_m).reorder(ds.mirna_vocab)
            S_n = io.load_similarity(args.sim_n).reorder(ds.disease_vocab)
        except KeyError as exc:
            raise UsageError(f"similarity matrix does not cover the dataset: {exc}") from None
        return S_m, S_n
    if args.dag:
        return build_similarity_matrices(ds, io.load_dag(args.dag), SimParams(args.delta))
    raise UsageError("provide --sim-m and --sim-n, or --dag")


def _hyperparams(args, seed=None) -> Hyperparams:
    try:
        return Hyperparams(
            r=args.rank, alpha=args.alpha, beta=args.beta, lam=args.lam, mu=args.mu,
            rho_init=args.rho_init, rho_cap=args.rho_cap, tol=args.tol, max_iter=args.max_iter,
            cg_tol=args.cg_tol, cg_max_iter=args.cg_max_iter,
            seed=args.seed if seed is None else seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header, rows):
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


class Fitter:
    """Picklable ``(x_train, seed) -> scores`` callable used by cross-validation."""

    def __init__(self, method: str, hp: Hyperparams, S_m=None, S_n=None):
        self.method = method
        self.hp = hp
        self.S_m = S_m
        self.S_n = S_n

    def fit(self, x, seed: int):
        if self.method == "cp":
            fs, history = cp_als_fit(x, self.hp.r, self.hp.tol, self.hp.max_iter, seed)
            return fs, None, None, [{"iteration": i + 1, "residual": h} for i, h in enumerate(history)]
        hp = Hyperparams.from_dict({**self.hp.to_dict(), "seed": seed})
        return tuple(tdrc_fit(x, self.S_m, self.S_n, hp))

    def __call__(self, x, seed: int):
        fs = self.fit(x, seed)[0]
        return predict_scores(fs)


# --------------------------------------------------------------------------
# subcommands


def cmd_stats(args) -> int:
    _require(args.triplets)
    ds = _load_dataset(args)
    stats = io.dataset_stats(ds)
    for key, value in stats.items():
        print(f"{key}\t{value:.6%}" if key == "density" else f"{key}\t{value}")
    if args.out:
        _write_rows(_out_dir(args) / "stats.tsv", list(stats), [list(stats.values())])
    return EXIT_OK


def cmd_sim(args) -> int:
    _require(args.triplets, args.dag)
    ds = _load_dataset(args)
    dag = io.load_dag(args.dag)
    S_m, S_n = build_similarity_matrices(ds, dag, SimParams(args.delta))
    out = _out_dir(args)
    io.save_similarity(S_m, out / "mirna_similarity.tsv")
    io.save_similarity(S_n, out / "disease_similarity.tsv")
    stats = io.dataset_stats(ds)
    missing = sum(1 for d in ds.disease_vocab if d not in dag)
    summary = {**stats, "dag_nodes": len(dag), "diseases_missing_from_dag": missing}
    _write_rows(out / "stats.tsv", list(summary), [list(summary.values())])
    print(f"wrote {out / 'mirna_similarity.tsv'} ({len(S_m)}x{len(S_m)}) and "
          f"{out / 'disease_similarity.tsv'} ({len(S_n)}x{len(S_n)})")
    return EXIT_OK


def cmd_fit(args) -> int:
    _require(args.triplets, args.sim_m, args.sim_n, args.dag)
    hp = _hyperparams(args)
    ds = _load_dataset(args)
    x = ds.to_tensor()
    out = _out_dir(args)
    if args.method == "cp":
        if args.sim_m or args.sim_n or args.dag:
            logger.warning("--method cp ignores similarity inputs")
        fs, M1, M2, history = Fitter("cp", hp).fit(x, substream_seed(args.seed))
        _write_rows(out / "history.tsv", ["iteration", "residual"],
                    [(h["iteration"], h["residual"]) for h in history])
    else:
        S_m, S_n = _similarities(args, ds)
        fs, M1, M2, history = Fitter("tdrc", hp, S_m.values, S_n.values).fit(x, substream_seed(args.seed))
        keys = ["iteration", "objective", "residual", "primal_C", "primal_P", "rho1", "rho2"]
        _write_rows(out / "history.tsv", keys, [[h[k] for k in keys] for h in history])
    meta = {**hp.to_dict(), "method": args.method}
    io.save_model(fs, M1, M2, meta, out / "model.tdrc")
    final = history[-1]["residual"] if history else float("nan")
    print(f"{args.method}: {len(history)} iterations, final residual {final:.6g}; model -> {out / 'model.tdrc'}")
    return EXIT_OK


def substream_seed(seed: int) -> int:
    """Factor-initialisation seed for a single fit."""
    return int(substream(seed, "init").integers(2**63 - 1))


def cmd_cv(args) -> int:
    _require(args.triplets, args.sim_m, args.sim_n, args.dag)
    if args.folds < 2:
        raise UsageError(f"--folds must be at least 2, got {args.folds}")
    hp = _hyperparams(args)
    ds = _load_dataset(args)
    if args.method == "cp":
        fitter = Fitter("cp", hp)
    else:
        S_m, S_n = _similarities(args, ds)
        fitter = Fitter("tdrc", hp, S_m.values, S_n.values)
    try:
        report = run_cv(ds, fitter, args.protocol, args.folds, args.seed, args.jobs, args.pooled)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    names = list(report.metric_names)
    rows = [[str(f)] + [row[n] for n in names] for f, row in enumerate(report.per_fold)]
    rows.append(["mean"] + [report.mean[n] for n in names])
    if report.pooled is not None:
        rows.append(["pooled"] + [report.pooled[n] for n in names])
    out = _out_dir(args)
    _write_rows(out / f"cv_{args.protocol}.tsv", ["fold"] + names, rows)

    width = max(10, *(len(n) for n in names))
    print(f"{args.folds}-fold CV ({args.protocol}, {args.method})")
    print("fold".ljust(8) + "".join(n.rjust(width + 2) for n in names))
    for row in rows:
        print(str(row[0]).ljust(8) + "".join(f"{v:.4f}".rjust(width + 2) for v in row[1:]))
    return EXIT_OK


def cmd_predict(args) -> int:
    _require(args.model, args.triplets)
    if not args.all and args.disease is None:
        raise UsageError("give --disease ID or --all")
    ds = _load_dataset(args)
    fs, _, _, _ = io.load_model(args.model)
    if fs.dims != ds.shape:
        raise UsageError(f"model dims {fs.dims} do not match dataset dims {ds.shape}")
    if args.all:
        diseases = list(range(len(ds.disease_vocab)))
    else:
        try:
            diseases = [ds.index_of("disease", args.disease)]
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
    scores = predict_scores(fs)
    rankings = []
    for j in diseases:
        ranked = rank_for_disease(scores, j, ds.triplets, args.top_n)
        rankings.append((ds.disease_vocab[j],
                         [(ds.mirna_vocab[i], ds.type_vocab[k], s) for i, k, s in ranked]))
    path = _out_dir(args) / "predictions.tsv"
    io.export_predictions(rankings, path)
    print(f"wrote {sum(len(e) for _, e in rankings)} predictions for {len(rankings)} disease(s) to {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default: %(default)s)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: %(default)s)")
    common.add_argument("--out", default="results", help="output directory (default: %(default)s)")
    common.add_argument("--verbose", "-v", action="count", default=0, help="more logging (repeatable)")
    common.add_argument("--config", help="key=value file of option defaults; flags win")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--triplets", required=True, help="miRNA/disease/type TSV")
    data.add_argument("--min-associations", type=int, default=0,
                      help="drop miRNAs and diseases with fewer associations (default: off)")

    sims = argparse.ArgumentParser(add_help=False)
    sims.add_argument("--sim-m", help="miRNA similarity TSV")
    sims.add_argument("--sim-n", help="disease similarity TSV")
    sims.add_argument("--dag", help="disease tree-number TSV (computes similarities on the fly)")
    sims.add_argument("--delta", type=float, default=0.5, help="semantic contribution factor")

    d = Hyperparams()
    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--method", choices=("tdrc", "cp"), default="tdrc")
    hyper.add_argument("--rank", "-r", type=int, default=d.r)
    hyper.add_argument("--alpha", type=float, default=d.alpha)
    hyper.add_argument("--beta", type=float, default=d.beta)
    hyper.add_argument("--lam", type=float, default=d.lam, help="ridge weight on the projections")
    hyper.add_argument("--mu", type=float, default=d.mu)
    hyper.add_argument("--rho-init", type=float, default=d.rho_init)
    hyper.add_argument("--rho-cap", type=float, default=d.rho_cap)
    hyper.add_argument("--tol", type=float, default=d.tol)
    hyper.add_argument("--max-iter", type=int, default=d.max_iter)
    hyper.add_argument("--cg-tol", type=float, default=d.cg_tol)
    hyper.add_argument("--cg-max-iter", type=int, default=d.cg_max_iter)

    parser = argparse.ArgumentParser(
        prog="tdrc", description="Multi-type miRNA-disease association prediction by tensor decomposition.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", parents=[common, data], help="dataset statistics")
    p.set_defaults(func=cmd_stats, out=None)

    p = sub.add_parser("sim", parents=[common, data], help="build similarity matrices")
    p.add_argument("--dag", required=True, help="disease tree-number TSV")
    p.add_argument("--delta", type=float, default=0.5, help="semantic contribution factor")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("fit", parents=[common, data, sims, hyper], help="fit a model")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", parents=[common, data, sims, hyper], help="cross-validation")
    p.add_argument("--protocol", choices=("type", "triplet"), default="type")
    p.add_argument("--folds", "-k", type=int, default=10)
    p.add_argument("--pooled", action="store_true", help="also report metrics on pooled fold predictions")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", parents=[common, data], help="rank unknown (miRNA, type) pairs per disease")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--disease", help="disease identifier")
    group.add_argument("--all", action="store_true", help="rank every disease")
    p.add_argument("--top-n", type=int, default=20)
    p.set_defaults(func=cmd_predict)
    return parser


def read_config(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _apply_config(parser, argv, cfg):
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((tok for tok in argv if tok in sub_action.choices), None)
    if command is None:
        return
    subparser = sub_action.choices[command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in cfg.items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "func"):
            raise UsageError(f"unknown config key {key!r} for '{command}'")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError:
                raise UsageError(f"config key {key!r}: invalid value {raw!r}") from None
        else:
            defaults[key] = raw
        action.required = False
    subparser.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _require(known.config)
            _apply_config(parser, argv, read_config(known.config))
    except UsageError as exc:
        print(f"tdrc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK

    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"tdrc: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, io.FormatError, FileNotFoundError) as exc:
        print(f"tdrc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"tdrc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
