"""Command-line front end.

    vsmeta --mode online --method ftml,ftml-vs --seeds 0,1,2 --out runs/
    vsmeta --mode verify --s 1,2,5,10 --n-mc 20000
    vsmeta summarize runs/ledger_*.txt

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical
failure, 4 filesystem failure.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import verification as ver
from .config import ConfigError, ExperimentConfig, load_config
from .learners import save_checkpoint
from .models import empirical_risk
from .online import (
    METHODS,
    LedgerFormatError,
    RegretLedger,
    TaskBuffer,
    make_learner,
    run_online,
    stream_hash,
    toe_update,
    vs_meta_update,
)
from .tasks import IncrementalDataset, sample_batch, sample_stream

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
CURVE_COLUMNS = "method,seed,task_index,step,shots,loss,cumulative_regret"


class MixedLedgersError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def write_atomic(path, text: str) -> None:
    """Write ``text`` to a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- summaries ------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def summarize_ledgers(ledgers: Sequence[RegretLedger]) -> str:
    """Comparison table: per-method mean, sample std and median of final regret."""
    if not ledgers:
        raise ValueError("summarize needs at least one ledger")
    hashes = {lg.meta.get("config_hash") for lg in ledgers}
    if len(hashes) > 1:
        raise MixedLedgersError("config_hash", f"ledgers come from different configurations {sorted(map(str, hashes))}")
    streams: dict[str, str] = {}
    seen: set[tuple[str, str]] = set()
    for lg in ledgers:
        seed, method = lg.meta.get("seed", "?"), lg.meta.get("method", "?")
        if (method, seed) in seen:
            raise MixedLedgersError("seed", f"duplicate ledger for method {method} seed {seed}")
        seen.add((method, seed))
        prev = streams.setdefault(seed, lg.meta.get("stream_hash"))
        if prev != lg.meta.get("stream_hash"):
            raise MixedLedgersError("stream_hash", f"seed {seed} ledgers were run on different task streams")

    by_method: dict[str, list[RegretLedger]] = {}
    for lg in ledgers:
        by_method.setdefault(lg.meta.get("method", "?"), []).append(lg)
    lines = [f"config_hash = {next(iter(hashes))}", "", "method,n_seeds,mean,std,median,per_seed"]
    for method in sorted(by_method):
        group = sorted(by_method[method], key=lambda lg: int(lg.meta.get("seed", 0)))
        finals = [lg.cumulative for lg in group]
        std = statistics.stdev(finals) if len(finals) > 1 else 0.0
        per_seed = ";".join(f"{lg.meta.get('seed')}:{_fmt(lg.cumulative)}" for lg in group)
        lines.append(
            f"{method},{len(finals)},{_fmt(statistics.fmean(finals))},{_fmt(std)},"
            f"{_fmt(statistics.median(finals))},{per_seed}"
        )
    lines += ["", "shots_to_threshold (median over seeds per task)", "method,series"]
    for method in sorted(by_method):
        series = [lg.shots_to_threshold for lg in by_method[method]]
        n = min(len(s) for s in series)
        med = [statistics.median(s[i] for s in series) for i in range(n)]
        lines.append(f"{method}," + " ".join(_fmt(m) if m != int(m) else str(int(m)) for m in med))
    return "\n".join(lines) + "\n"


def curves_csv(ledgers: Sequence[RegretLedger]) -> str:
    rows = [CURVE_COLUMNS]
    for lg in ledgers:
        method, seed = lg.meta.get("method"), lg.meta.get("seed")
        for e in lg.evaluations:
            rows.append(f"{method},{seed},{e.task_index},{e.step},{e.shots},{_fmt(e.loss)},{_fmt(e.cumulative)}")
    return "\n".join(rows) + "\n"


# --- modes ----------------------------------------------------------------


def _online_cell(cfg: ExperimentConfig, method: str, seed: int) -> tuple[str, float]:
    start = time.perf_counter()
    stream = sample_stream(cfg.task_distribution(), cfg["task"]["n_tasks"], cfg.stream_seed(seed))
    meta = {
        "config_hash": cfg.experiment_hash(),
        "method": method,
        "seed": str(seed),
        "stream_hash": stream_hash(stream),
        "n_tasks": str(len(stream)),
    }
    result = run_online(cfg.online_config(method), stream, seed, cfg.model_spec(), meta)
    text = result.ledger.export()
    write_atomic(cfg.out / f"ledger_{method}_seed{seed}.txt", text)
    save_checkpoint(cfg.out / f"checkpoint_{method}_seed{seed}.npz", result.learner)
    return text, time.perf_counter() - start


def _offline_cell(cfg: ExperimentConfig, method: str, seed: int) -> tuple[str, float]:
    """Meta-train on a fixed pool of tasks, then score fresh tasks at every shot count."""
    start = time.perf_counter()
    off = cfg["offline"]
    online_cfg = cfg.online_config(method)
    spec = cfg.model_spec()
    tasks = sample_stream(cfg.task_distribution(), cfg["task"]["n_tasks"], cfg.stream_seed(seed))
    learner = make_learner(online_cfg, spec, np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1])
    buffer = TaskBuffer()
    for task in tasks:
        ds = IncrementalDataset(task, 1)
        ds.receive(off["points_per_task"])
        buffer.begin(ds)
        buffer.freeze_current()
    for _ in range(off["iterations"]):
        if online_cfg.policy_kind is None:
            toe_update(learner, buffer, rng, online_cfg.toe_batch)
        else:
            vs_meta_update(learner, buffer, rng)
    eval_tasks = sample_stream(cfg.task_distribution(), off["n_eval_tasks"], cfg.stream_seed(seed) + 1)
    m = online_cfg.meta.max_shots
    losses = np.zeros(m + 1)
    for task in eval_tasks:
        train = sample_batch(task, m, "train")
        test = sample_batch(task, cfg["task"]["n_test"], "test")
        for s in range(m + 1):
            adapted = learner.params if online_cfg.policy_kind is None else learner.adapt(train.take(range(s)), s)
            with ad.no_grad():
                losses[s] += empirical_risk(adapted, test, spec).item() / len(eval_tasks)
    lines = [
        f"config_hash = {cfg.experiment_hash()}",
        f"method = {method}",
        f"seed = {seed}",
        "shots,mean_test_loss",
    ]
    lines += [f"{s},{_fmt(v)}" for s, v in enumerate(losses)]
    text = "\n".join(lines) + "\n"
    write_atomic(cfg.out / f"offline_{method}_seed{seed}.txt", text)
    save_checkpoint(cfg.out / f"checkpoint_{method}_seed{seed}.npz", learner)
    return text, time.perf_counter() - start


def _verify_cell(cfg: ExperimentConfig, seed: int) -> tuple[str, float]:
    start = time.perf_counter()
    v = cfg["verify"]
    family = ver.LinearGaussianFamily(v["dim"], v["task_std"], v["noise_std"])
    est = ver.run_scaling_check(
        v["shots"], v["n_mc"], seed, family, None, v["n_tasks"], v["n_per_task"], v["grid_points"]
    )
    text = est.report()
    if any(est.at_edge):
        edges = [s for s, e in zip(est.shots, est.at_edge) if e]
        text += f"# warning: oracle minimizer at the grid edge for s = {edges}\n"
    write_atomic(cfg.out / f"verify_seed{seed}.txt", text)
    return text, time.perf_counter() - start


def _run_cell(args):
    cfg, mode, method, seed = args
    if mode == "online":
        return _online_cell(cfg, method, seed)
    if mode == "offline-meta":
        return _offline_cell(cfg, method, seed)
    return _verify_cell(cfg, seed)


def run(cfg: ExperimentConfig, methods: Sequence[str]) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "verify":
        methods = ["-"]
    cells = [(cfg, cfg.mode, m, s) for m in methods for s in cfg.seeds]
    workers = cfg["experiment"]["workers"]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    if cfg.mode == "verify":
        for (_, _, _, seed), (text, _) in zip(cells, results):
            sys.stdout.write(f"# seed {seed}\n{text}")
        return 0
    if cfg.mode == "online":
        ledgers = [RegretLedger.parse(text) for text, _ in results]
        summary = summarize_ledgers(ledgers)
        if not cfg.deterministic:
            summary += "\nwall_seconds\n" + "".join(
                f"{m},{s},{t:.3f}\n" for (_, _, m, s), (_, t) in zip(cells, results)
            )
        write_atomic(cfg.out / "summary.txt", summary)
        write_atomic(cfg.out / "curves.csv", curves_csv(ledgers))
        sys.stdout.write(summary)
    return 0


# --- argument parsing -----------------------------------------------------


def _run_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vsmeta", description="Variable-shot online meta-learning experiments.")
    p.add_argument("--mode", choices=("offline-meta", "online", "verify"))
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one key")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--method", help="method or comma-separated methods")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--deterministic", action="store_true", help="omit timings so outputs are byte-identical")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--s", dest="shots", help="verify: comma-separated shot counts")
    p.add_argument("--n-mc", dest="n_mc", help="verify: Monte-Carlo draws per shot count")
    return p


def _summarize_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vsmeta summarize", description="Compare ledgers from an online run.")
    p.add_argument("ledgers", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="write the table here instead of stdout")
    return p


def _build_config(ns) -> tuple[ExperimentConfig, list[str]]:
    extra: dict[str, dict[str, str]] = {"experiment": {}, "verify": {}}
    if ns.mode:
        extra["experiment"]["mode"] = ns.mode
    if ns.seeds:
        extra["experiment"]["seeds"] = ns.seeds
    if ns.out:
        extra["experiment"]["out"] = str(ns.out)
    if ns.deterministic:
        extra["experiment"]["deterministic"] = "true"
    if ns.workers:
        extra["experiment"]["workers"] = str(ns.workers)
    if ns.shots:
        extra["verify"]["shots"] = ns.shots
    if ns.n_mc:
        extra["verify"]["n_mc"] = ns.n_mc
    methods = [m.strip() for m in ns.method.split(",")] if ns.method else []
    if methods:
        extra["experiment"]["method"] = methods[0]
    cfg = load_config(ns.config, ns.set, extra)
    for m in methods:
        if m not in METHODS:
            raise ConfigError("experiment.method", f"unknown method {m!r}")
    return cfg, methods or [cfg.method]


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and argv[0] == "summarize":
            ns = _summarize_parser().parse_args(argv[1:])
            ledgers = [RegretLedger.parse(p.read_text()) for p in ns.ledgers]
            table = summarize_ledgers(ledgers)
            if ns.out:
                write_atomic(ns.out, table)
            else:
                sys.stdout.write(table)
            return 0
        ns = _run_parser().parse_args(argv)
        cfg, methods = _build_config(ns)
        return run(cfg, methods)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LedgerFormatError, MixedLedgersError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
