"""
Command-line entry point.

    python lawm_cli.py gen-data --env point-mass --kind medium --n 2000
    python lawm_cli.py split --corpus runs/.../point-mass/medium --fraction 0.05 --seed 7
    python lawm_cli.py stats runs/.../point-mass/medium runs/.../point-mass/expert
    python lawm_cli.py train --config cfg.json --set model.prior_mode=clap
    python lawm_cli.py report

Every invocation writes into a fresh run directory `<timestamp>-<config-hash>`
under $LAWM_RUN_ROOT (default ./runs). Exit codes: 0 success, 1 invalid input,
2 internal error.
"""
import argparse
import csv
import logging
import os
import sys
import time
from typing import List, Optional, Sequence

from config import RESULTS_FILE, load_config
from dataset import (STATS_COLUMNS, compute_stats, emit_histogram, labeled_subset, load_corpus,
                     save_corpus, split_action_labels)
from envs import POLICY_KINDS, generate_dataset, ENVS
from errors import LawmError
from idm import load_idm, pseudo_label_corpus, save_idm, train_idm
from trainer import aggregate_results, append_result, evaluate_checkpoint, read_results, run_experiment

logger = logging.getLogger("lawm_cli")

RUN_ROOT_ENV = "LAWM_RUN_ROOT"
LOG_FILE = "lawm.log"


class CliParser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def setup_logging(run_dir: str, level: int = logging.INFO) -> None:
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(run_dir, LOG_FILE)),
            logging.StreamHandler()
        ],
        force=True,
    )


def run_root() -> str:
    return os.environ.get(RUN_ROOT_ENV, "runs")


def make_run_dir(config_hash: str, root: Optional[str] = None) -> str:
    base = os.path.join(root or run_root(), f"{time.strftime('%Y%m%d-%H%M%S')}-{config_hash}")
    path, n = base, 1
    while os.path.exists(path):
        path = f"{base}-{n}"
        n += 1
    os.makedirs(path)
    return path


def build_parser() -> CliParser:
    parser = CliParser(prog="lawm", description="Latent action world models: data, training and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a config key, e.g. model.latent_action_size=12 (repeatable)")
        return p

    p = command("gen-data", "Roll scripted policies and write a trajectory corpus")
    p.add_argument("--env", choices=sorted(ENVS), help="Environment (default: env.name)")
    p.add_argument("--kind", choices=POLICY_KINDS, help="Dataset kind (default: env.kind)")
    p.add_argument("--n", type=int, help="Number of trajectories (default: env.n_trajectories)")
    p.add_argument("--seed", type=int, help="Collection seed (default: data.seed)")
    p.add_argument("--workers", type=int, help="Parallel rollout workers (default: env.workers)")
    p.add_argument("--out", help="Dataset root; the corpus goes to <out>/<env>/<kind> (default: run dir)")

    p = command("split", "Keep actions on a seeded fraction of trajectories and strip the rest")
    p.add_argument("--corpus", required=True, help="Fully labeled corpus directory")
    p.add_argument("--fraction", type=float, help="Labeled fraction (default: data.labeled_fraction)")
    p.add_argument("--seed", type=int, help="Split seed (default: data.seed)")
    p.add_argument("--out", help="Output corpus directory (default: <run dir>/split)")

    p = command("stats", "Return statistics of one or more corpora")
    p.add_argument("corpora", nargs="+", help="Corpus directories")
    p.add_argument("--csv", dest="csv_path", help="Also write the rows to this CSV file")

    p = command("hist", "Histogram of per-trajectory returns as CSV")
    p.add_argument("--corpus", required=True, help="Corpus directory")
    p.add_argument("--bins", type=int, default=20, help="Number of bins (default: 20)")
    p.add_argument("--out", help="Output CSV (default: <run dir>/hist.csv)")

    p = command("train-idm", "Train the inverse dynamics model on the labeled trajectories")
    p.add_argument("--corpus", required=True, help="Corpus directory (only labeled trajectories are used)")
    p.add_argument("--seed", type=int, help="Training seed (default: data.seed)")
    p.add_argument("--out", help="Model file (default: <run dir>/idm.pt)")

    p = command("label", "Pseudo-label action-free trajectories with a trained IDM")
    p.add_argument("--corpus", required=True, help="Partially labeled corpus directory")
    p.add_argument("--idm", required=True, help="Model file written by train-idm")
    p.add_argument("--out", help="Output corpus directory (default: <run dir>/labeled)")

    p = command("train", "Train world model and agent, evaluate, append a results row")
    p.add_argument("--corpus", help="Corpus directory (default: data.corpus)")
    p.add_argument("--resume", metavar="RUN_DIR", help="Continue an interrupted run in RUN_DIR")
    p.add_argument("--results", help="results.csv to append to (default: $LAWM_RUN_ROOT/results.csv)")

    p = command("eval", "Evaluate a trainer checkpoint in the real environment")
    p.add_argument("--checkpoint", required=True, help="Checkpoint file (ckpt_*.pt or best.pt)")
    p.add_argument("--episodes", type=int, help="Episodes (default: run.eval_episodes of the checkpoint)")
    p.add_argument("--seed", type=int, help="First evaluation seed (default: derived from the run seed)")
    p.add_argument("--results", help="results.csv to append to (default: $LAWM_RUN_ROOT/results.csv)")

    p = command("report", "Aggregate results.csv rows over seeds into a comparison table")
    p.add_argument("--results", nargs="+", help="results.csv files (default: $LAWM_RUN_ROOT/results.csv)")
    p.add_argument("--out", help="Output CSV (default: <run dir>/report.csv)")
    return parser


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args, cfg, run_dir) -> None:
    env = cfg.env
    directory = generate_dataset(
        args.env or env.name, args.kind or env.kind, args.n or env.n_trajectories,
        cfg.data.seed if args.seed is None else args.seed, args.out or run_dir,
        collection_seeds=env.collection_seeds, workers=args.workers or env.workers, progress=cfg.run.progress,
    )
    print(directory)


def cmd_split(args, cfg, run_dir) -> None:
    corpus = load_corpus(args.corpus)
    fraction = cfg.data.labeled_fraction if args.fraction is None else args.fraction
    seed = cfg.data.seed if args.seed is None else args.seed
    split = split_action_labels(corpus, fraction, seed)
    save_corpus(split, args.out or os.path.join(run_dir, "split"))
    print(f"labeled: {split.labeled_count} unlabeled: {len(split) - split.labeled_count}")


def cmd_stats(args, cfg, run_dir) -> None:
    header = ["env", "dataset"] + list(STATS_COLUMNS)
    rows = []
    for path in args.corpora:
        corpus = load_corpus(path)
        env = corpus.meta.get("env", {}).get("name", "?")
        kind = corpus.meta.get("policy_kind", os.path.basename(os.path.normpath(path)))
        rows.append([env, kind] + [f"{v:.2f}" for v in compute_stats(corpus).row()])
    print("\t".join(header))
    for row in rows:
        print("\t".join(row))
    if args.csv_path:
        with open(args.csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)


def cmd_hist(args, cfg, run_dir) -> None:
    out = args.out or os.path.join(run_dir, "hist.csv")
    emit_histogram(load_corpus(args.corpus), args.bins, out)
    print(out)


def cmd_train_idm(args, cfg, run_dir) -> None:
    corpus = labeled_subset(load_corpus(args.corpus))
    seed = cfg.data.seed if args.seed is None else args.seed
    result = train_idm(corpus, cfg.idm, seed=seed, progress=cfg.run.progress)
    out = save_idm(args.out or os.path.join(run_dir, "idm.pt"), result.model, result.final_mse)
    print(f"{out} mse={result.final_mse:.6f}")


def cmd_label(args, cfg, run_dir) -> None:
    labeled = pseudo_label_corpus(load_idm(args.idm), load_corpus(args.corpus))
    print(save_corpus(labeled, args.out or os.path.join(run_dir, "labeled")))


def cmd_train(args, cfg, run_dir) -> None:
    if args.corpus:
        cfg.data.corpus = args.corpus
    results = args.results or os.path.join(run_root(), RESULTS_FILE)
    row = run_experiment(cfg, run_dir, results_path=results, resume=bool(args.resume))
    print(f"{row['env']}\t{row['dataset']}\t{row['method']}\t{row['mean']:.1f} ± {row['std']:.1f}")


def cmd_eval(args, cfg, run_dir) -> None:
    out = evaluate_checkpoint(args.checkpoint, episodes=args.episodes, seed=args.seed)
    ckpt_cfg = out["config"]
    append_result(args.results or os.path.join(run_root(), RESULTS_FILE), {
        "env": out["env"], "dataset": out["dataset"], "method": out["method"],
        "labeled_fraction": ckpt_cfg.data.labeled_fraction, "seed": ckpt_cfg.data.seed,
        "mean": out["mean"], "std": out["std"], "wall_time": 0.0,
    })
    print(f"{out['env']} step {out['step']}: {out['mean']:.1f} ± {out['std']:.1f}")


def cmd_report(args, cfg, run_dir) -> None:
    table = aggregate_results(read_results(args.results or [os.path.join(run_root(), RESULTS_FILE)]))
    out = args.out or os.path.join(run_dir, "report.csv")
    with open(out, "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(table)
    for row in table:
        print("\t".join(row))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "stats": cmd_stats,
    "hist": cmd_hist,
    "train-idm": cmd_train_idm,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def dispatch(argv: Sequence[str]) -> int:
    """
    Parse `argv`, load the config and run one command.

    Returns the process exit code: 0 on success, 1 on a usage, config or data
    error, and 2 on anything unexpected. Each invocation logs into its own run
    directory, except `train --resume`, which continues in the directory it resumes.
    """
    # Check arguments
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return int(e.code or 0)

    # Load and validate config
    try:
        cfg, cfg_hash = load_config(args.config, args.overrides)
    except LawmError as e:
        print(f"lawm: {e}", file=sys.stderr)
        return 1

    # Pick the run directory
    resume_dir = getattr(args, "resume", None)
    if resume_dir:
        if not os.path.isdir(resume_dir):
            print(f"lawm: run directory {resume_dir} does not exist", file=sys.stderr)
            return 1
        run_dir = resume_dir
    else:
        run_dir = make_run_dir(cfg_hash)
    setup_logging(run_dir)
    logger.info(f"{args.command}: run directory {run_dir}")
    try:
        COMMANDS[args.command](args, cfg, run_dir)
    except LawmError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception:
        logger.exception(f"{args.command} crashed")
        return 2
    return 0


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
