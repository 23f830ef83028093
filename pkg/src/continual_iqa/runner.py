"""Experiment execution, persistence and resume.

Output tree for one experiment::

    out/<label>/config.yaml                    resolved configuration
    out/<label>/summary.csv                    seed-averaged C and F per task
    out/<label>/<seed>/ledger.csv              SRCC per (task, distortion)
    out/<label>/<seed>/progress.jsonl          per-epoch stage records
    out/<label>/<seed>/checkpoints/task_k.pt   learner state after task k

``label`` is the method name, suffixed with the ablation when one is set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import make_learner
from .config import ExperimentConfig, build_stream, load_config
from .metrics import EvalLedger, averaged_indices, correlation_index, forgetting_index
from .models import load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .tasks import AuditedStream

log = logging.getLogger(__name__)

CONFIG_NAME = "config.yaml"


class ResumeConflict(RuntimeError):
    """The output directory holds results of a different configuration."""


def run_label(cfg: ExperimentConfig) -> str:
    return cfg.method if cfg.ablation is None else f"{cfg.method}-{cfg.ablation}"


@dataclass
class ResultBundle:
    label: str
    ledgers: dict[int, EvalLedger] = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return sorted(self.ledgers)

    @property
    def n_tasks(self) -> int:
        counts = {len(led.tasks) for led in self.ledgers.values()}
        if len(counts) != 1:
            raise ValueError(f"{self.label}: seeds cover different numbers of tasks {sorted(counts)}")
        return counts.pop()

    def per_task(self) -> list[tuple[int, float, float | None]]:
        """Seed-averaged (task, C, F); F is None for the base task."""
        rows = []
        for t in range(self.n_tasks):
            c = float(np.mean([correlation_index(led, t) for led in self.ledgers.values()]))
            f = float(np.mean([forgetting_index(led, t) for led in self.ledgers.values()])) if t > 0 else None
            rows.append((t, c, f))
        return rows

    def averaged(self) -> tuple[float, float]:
        """Seed-averaged task-averaged indices (C-bar, F-bar)."""
        pairs = [averaged_indices(led) for led in self.ledgers.values()]
        return float(np.mean([p[0] for p in pairs])), float(np.mean([p[1] for p in pairs]))

    def per_seed_averaged(self) -> dict[int, tuple[float, float]]:
        return {s: averaged_indices(led) for s, led in sorted(self.ledgers.items())}

    def final_table(self) -> dict[int, float]:
        """Seed-averaged SRCC on every distortion after the last task."""
        last = self.n_tasks - 1
        ids = sorted(next(iter(self.ledgers.values())).srcc[last])
        return {j: float(np.mean([led.srcc[last][j] for led in self.ledgers.values()])) for j in ids}

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_index", "C", "F"])
        for t, c, f in self.per_task():
            w.writerow([t, repr(c), "" if f is None else repr(f)])
        return buf.getvalue()


def _seed_dir(out: Path, label: str, seed: int) -> Path:
    return out / label / str(seed)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _claim_output(cfg: ExperimentConfig, out: Path) -> None:
    path = out / run_label(cfg) / CONFIG_NAME
    text = cfg.to_yaml()
    if path.exists() and path.read_text(encoding="utf-8") != text:
        raise ResumeConflict(f"{path.parent} already holds results of a different configuration")
    _write(path, text)


def _latest_checkpoint(seed_dir: Path) -> tuple[int, Path] | None:
    found = []
    for p in (seed_dir / "checkpoints").glob("task_*.pt"):
        try:
            found.append((int(p.stem.split("_", 1)[1]), p))
        except ValueError:
            continue
    return max(found) if found else None


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, resume: bool = False,
             keep_checkpoints: str = "all") -> EvalLedger:
    """Train one seed over the whole stream, checkpointing after every task."""
    label = run_label(cfg)
    seed_dir = _seed_dir(out, label, seed)
    stream = build_stream(cfg.stream, seed)
    learner = make_learner(cfg.method, cfg.method_config(), seed, cfg.ablation)
    data = AuditedStream(stream)
    ledger = EvalLedger()
    start = 0
    if resume and (latest := _latest_checkpoint(seed_dir)) is not None:
        k, path = latest
        payload = load_checkpoint(path)
        if payload["config"] != cfg.to_yaml() or payload["seed"] != seed:
            raise ResumeConflict(f"{path} was written by a different configuration or seed")
        learner.load_state_dict(payload["learner"])
        ledger = EvalLedger.from_csv(payload["ledger"])
        start = k + 1
        log.info("resuming %s seed %d after task %d", label, seed, k)
    elif seed_dir.exists():
        for stale in (seed_dir / "checkpoints").glob("task_*.pt"):
            stale.unlink()
        (seed_dir / "progress.jsonl").unlink(missing_ok=True)
    seed_dir.mkdir(parents=True, exist_ok=True)
    for t in range(start, len(stream)):
        n_records = len(learner.records)
        learner.fit_task(data, t)
        ledger.add_row(t, learner.evaluate(data, t), stream.tasks[t].distortion_ids)
        with (seed_dir / "progress.jsonl").open("a", encoding="utf-8") as fh:
            for rec in learner.records[n_records:]:
                fh.write(json.dumps({"seed": seed, "task": t, **rec}, sort_keys=True) + "\n")
        _write(seed_dir / "ledger.csv", ledger.to_csv())
        ckpt = seed_dir / "checkpoints" / f"task_{t}.pt"
        save_checkpoint(ckpt, {"config": cfg.to_yaml(), "seed": seed, "task": t,
                               "learner": learner.state_dict(), "ledger": ledger.to_csv()})
        if keep_checkpoints == "last" and t > 0:
            (seed_dir / "checkpoints" / f"task_{t - 1}.pt").unlink(missing_ok=True)
        log.info("%s seed %d task %d: C=%.4f", label, seed, t, correlation_index(ledger, t))
    return ledger


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, resume: bool = False,
                   keep_checkpoints: str = "all") -> ResultBundle:
    """Run the configured method once per seed and persist ledgers, summary and config."""
    if keep_checkpoints not in ("all", "last"):
        raise ValueError("keep_checkpoints must be 'all' or 'last'")
    out = Path(out if out is not None else cfg.out)
    _claim_output(cfg, out)
    result = ResultBundle(run_label(cfg))
    for seed in cfg.seeds:
        result.ledgers[seed] = run_seed(cfg, seed, out, resume=resume, keep_checkpoints=keep_checkpoints)
    _write(out / result.label / "summary.csv", result.summary_csv())
    return result


def resume_all(out: str | Path) -> list[ResultBundle]:
    """Finish every experiment found under ``out`` from its latest checkpoints."""
    out = Path(out)
    configs = sorted(out.glob(f"*/{CONFIG_NAME}"))
    if not configs:
        raise FileNotFoundError(f"no experiments under {out}")
    return [run_experiment(load_config(p), out, resume=True) for p in configs]


def load_results(out: str | Path) -> list[ResultBundle]:
    """Read every experiment's per-seed ledgers back from disk."""
    out = Path(out)
    results = []
    for cfg_path in sorted(out.glob(f"*/{CONFIG_NAME}")):
        bundle = ResultBundle(cfg_path.parent.name)
        for ledger_path in sorted(cfg_path.parent.glob("*/ledger.csv"), key=lambda p: int(p.parent.name)):
            bundle.ledgers[int(ledger_path.parent.name)] = EvalLedger.from_csv(ledger_path.read_text(encoding="utf-8"))
        if bundle.ledgers:
            results.append(bundle)
    return results


def permutation_suite(cfg: ExperimentConfig, n_orders: int = 5, out: str | Path | None = None,
                      keep_checkpoints: str = "last") -> dict:
    """Rerun ``cfg`` under ``n_orders`` seeded orderings of the novel distortions."""
    if n_orders < 1:
        raise ValueError("n_orders must be positive")
    out = Path(out if out is not None else cfg.out) / "permutations"
    base = cfg.stream.permutation_seed or 0
    rows = []
    for k in range(n_orders):
        perm_seed = derive_seed(base, k)
        order_cfg = cfg.model_copy(update={"stream": cfg.stream.model_copy(update={"permutation_seed": perm_seed})})
        result = run_experiment(order_cfg, out / f"order{k + 1}", keep_checkpoints=keep_checkpoints)
        c_bar, f_bar = result.averaged()
        rows.append({"order": k + 1, "permutation_seed": perm_seed, "C_bar": c_bar, "F_bar": f_bar})
    c_values = [r["C_bar"] for r in rows]
    table = {"rows": rows, "C_spread": max(c_values) - min(c_values)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["order", "permutation_seed", "C_bar", "F_bar"])
    for r in rows:
        w.writerow([r["order"], r["permutation_seed"], repr(r["C_bar"]), repr(r["F_bar"])])
    w.writerow(["spread", "", repr(table["C_spread"]), ""])
    _write(out / "permutations.csv", buf.getvalue())
    return table
