"""Command line: run, resume, report and permute experiments."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .baselines import make_learner
from .config import ConfigError, build_stream, load_config
from .models import load_checkpoint
from .plotting import emit_curves, project_features
from .runner import ResumeConflict, _latest_checkpoint, load_results, permutation_suite, resume_all, run_experiment
from .seeding import derive_seed, torch_generator
from .trainer import LIQALearner, batch_inputs


def _restore(cfg, seed: int, path: Path):
    learner = make_learner(cfg.method, cfg.method_config(), seed, cfg.ablation)
    learner.load_state_dict(load_checkpoint(path)["learner"])
    return learner


def feature_projection(out: Path, label: str, seed: int, per_distortion: int = 40) -> Path | None:
    """Real features from the final-task extractor against pseudo features from the
    generator as it stood before the final task. Needs both checkpoints on disk."""
    cfg = load_config(out / label / "config.yaml")
    if cfg.method != "liqa" or cfg.ablation == "no_pr":
        return None
    ckpts = out / label / str(seed) / "checkpoints"
    latest = _latest_checkpoint(out / label / str(seed))
    if latest is None or latest[0] < 1 or not (ckpts / f"task_{latest[0] - 1}.pt").exists():
        return None
    T = latest[0]
    final: LIQALearner = _restore(cfg, seed, latest[1])
    previous: LIQALearner = _restore(cfg, seed, ckpts / f"task_{T - 1}.pt")
    stream = build_stream(cfg.stream, seed)
    gen = torch_generator(derive_seed(seed, T, 7))
    real, pseudo, lr, lp = [], [], [], []
    extractor = final.regressor.extractor.eval()
    G = previous.bundle.generator.eval()
    with torch.no_grad():
        for t in range(T):
            test = stream.tasks[t].test
            for j in stream.tasks[t].distortion_ids:
                part = test.for_distortion(j)
                k = min(per_distortion, len(part))
                real.append(extractor(batch_inputs(part, np.arange(k))).numpy())
                lr += [j] * k
                z = torch.randn(k, G.noise_dim, generator=gen)
                s = torch.rand(k, generator=gen)
                pseudo.append(G(z, s, j).numpy())
                lp += [j] * k
    stem = out / "figures" / f"features_{label}_seed{seed}"
    project_features(np.concatenate(real), np.concatenate(pseudo), lr, lp, stem, seed=0)
    return stem


def _print_table(rows, header) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def cmd_run(args) -> int:
    cfg = load_config(args.config, method=args.method, seeds=args.seed or None, out=args.out)
    result = run_experiment(cfg)
    c_bar, f_bar = result.averaged() if result.n_tasks > 1 else (float("nan"), float("nan"))
    _print_table([[result.label, repr(c_bar), repr(f_bar)]], ["method", "C_bar", "F_bar"])
    return 0


def cmd_resume(args) -> int:
    for result in resume_all(args.out):
        c_bar, f_bar = result.averaged()
        _print_table([[result.label, repr(c_bar), repr(f_bar)]], ["method", "C_bar", "F_bar"])
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    results = load_results(out)
    if not results:
        print(f"no results under {out}", file=sys.stderr)
        return 1
    rows = []
    for r in results:
        for t, c, f in r.per_task():
            rows.append([r.label, t, repr(c), "" if f is None else repr(f)])
    _print_table(rows, ["method", "task_index", "C", "F"])
    print()
    summary = []
    for r in results:
        c_bar, f_bar = r.averaged() if r.n_tasks > 1 else (float("nan"), float("nan"))
        summary.append([r.label, len(r.seeds), repr(c_bar), repr(f_bar)])
    _print_table(summary, ["method", "n_seeds", "C_bar", "F_bar"])
    if args.figures:
        written = emit_curves(results, out / "figures")
        for r in results:
            stem = feature_projection(out, r.label, r.seeds[0])
            if stem is not None:
                written[f"features_{r.label}"] = [stem.with_suffix(".png")]
        for paths in written.values():
            for p in paths:
                print(f"wrote {p}", file=sys.stderr)
    return 0


def cmd_permute(args) -> int:
    cfg = load_config(args.config, out=args.out)
    table = permutation_suite(cfg, args.orders)
    rows = [[r["order"], r["permutation_seed"], repr(r["C_bar"]), repr(r["F_bar"])] for r in table["rows"]]
    rows.append(["spread", "", repr(table["C_spread"]), ""])
    _print_table(rows, ["order", "permutation_seed", "C_bar", "F_bar"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="continual-iqa", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one method over a task stream")
    r.add_argument("--config", required=True)
    r.add_argument("--method")
    r.add_argument("--seed", type=int, nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("resume", help="finish interrupted experiments from their checkpoints")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_resume)

    r = sub.add_parser("report", help="print per-task C/F tables, optionally render figures")
    r.add_argument("--out", required=True)
    r.add_argument("--figures", action="store_true")
    r.set_defaults(func=cmd_report)

    r = sub.add_parser("permute", help="rerun a configuration under shuffled novel-task orders")
    r.add_argument("--config", required=True)
    r.add_argument("--orders", type=int, default=5)
    r.add_argument("--out")
    r.set_defaults(func=cmd_permute)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ResumeConflict, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
