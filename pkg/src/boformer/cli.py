"""Command-line entry point: ``boformer {train,eval,hv,profile}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import ConfigError
from .config import load_config, override
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .pareto import hypervolume_exact, hypervolume_mc, pareto_front
from .runner import (BOFormerPolicy, EHVIPolicy, EpisodeRecord, Policy, RandomPolicy, Report, SUCBPolicy,
                     evaluate_suite, performance_profile)
from .trainer import LOG_FIELDS, train, transfer_retrain_embedding

log = logging.getLogger("boformer")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def make_policy(spec: str) -> Policy:
    kind, _, arg = spec.partition(":")
    if kind == "boformer":
        if not arg:
            raise ConfigError("boformer policy needs a checkpoint: boformer:<path>")
        params, _ = load_checkpoint(arg)
        return BOFormerPolicy(params)
    table = {"ehvi": EHVIPolicy, "sucb": SUCBPolicy, "random": RandomPolicy}
    if kind not in table or arg:
        raise ConfigError(f"unknown policy {spec!r}")
    return table[kind]()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    override(cfg, "trainer", episodes=args.episodes, seed=args.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    rows = []

    def progress(row):
        rows.append(row)
        log.info("episode %d loss %.4g hv %.4f", row["episode"], row["loss"], row["episode_hv"])

    t = cfg.trainer
    if args.transfer_from:
        source, _ = load_checkpoint(args.transfer_from)
        transfer_retrain_embedding(source, cfg.task.K, t.episodes, t, cfg.task, out=out, progress=progress)
    else:
        init = None
        if args.resume:
            init, _ = load_checkpoint(out, expect=cfg.model_for_task())
        res = train(t, cfg.model_for_task(), cfg.task, init=init, out=out, progress=progress)
        if t.episodes == 0:
            save_checkpoint(out, res.params)
    _write_csv(log_path, LOG_FIELDS, [[r[k] for k in LOG_FIELDS] for r in rows])
    print(f"checkpoint: {out}\nlog: {log_path}")
    return 0


def _report_files(report: Report, out_dir: Path, plots: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "curves.csv", ("policy", "task_seed", "step", "hv", "regret"),
               ([r.policy, r.task_seed, t + 1, r.hv[t], r.regret[t]] for r in report.records for t in range(r.T)))
    _write_csv(out_dir / "summary.csv", ("policy", "mean_final_hv", "stderr"), report.summary())
    profiles = report.profiles()
    _write_csv(out_dir / "profile.csv", ("policy", "tau", "fraction"),
               ([p.policy, tau, f] for p in profiles.values() for tau, f in zip(p.taus, p.fractions)))
    if plots:
        from .plotting import plot_curves, plot_profiles

        curves = {}
        for name in report.policies():
            hv = np.array([r.hv for r in report.records if r.policy == name])
            se = hv.std(axis=0, ddof=1) / np.sqrt(len(hv)) if len(hv) > 1 else np.zeros(hv.shape[1])
            curves[name] = (hv.mean(axis=0), se)
        plot_curves(curves, out_dir / "curves.png")
        plot_profiles({k: (p.taus, p.fractions) for k, p in profiles.items()}, out_dir / "profile.png")


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    override(cfg, "eval", policies=tuple(args.policy) if args.policy else None,
             suites=tuple(args.suite) if args.suite else None, episodes=args.episodes,
             horizon=args.horizon, seed=args.seed, out_dir=args.out_dir)
    if args.no_plots:
        cfg.eval.plots = False
    e = cfg.eval
    policies = [make_policy(s) for s in e.policies]
    names = [p.name for p in policies]
    for i, p in enumerate(policies):
        if names.count(p.name) > 1:
            p.name = f"{p.name}{i}"
    report = evaluate_suite(policies, e.suites, e.episodes, e.horizon, e.seed, cfg.task)
    _report_files(report, Path(e.out_dir), e.plots)
    for name, mean, se in report.summary():
        print(f"{name}\t{mean:.4f} +- {se:.4f}")
    return 0


def _read_points(path: str) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise
    return np.asarray(rows, dtype=float)


def cmd_hv(args) -> int:
    pts = _read_points(args.points)
    ref = np.array([float(v) for v in args.ref.split(",")])
    if pts.ndim != 2 or pts.shape[1] != ref.shape[0]:
        raise ConfigError("points and reference point disagree on the number of objectives")
    if args.mc:
        ideal = pts.max(axis=0)
        est = hypervolume_mc(pts, ref, ideal, args.mc, np.random.default_rng(args.seed))
        print(f"{est.value!r}\t{est.stderr!r}")
    else:
        print(repr(hypervolume_exact(pareto_front(pts), ref)))
    return 0


def cmd_profile(args) -> int:
    hv: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
    with open(args.curves, newline="") as fh:
        for row in csv.DictReader(fh):
            hv.setdefault((row["policy"], row["task_seed"]), []).append(
                (int(row["step"]), float(row["hv"]), float(row["regret"])))
    records = []
    for (policy, seed), steps in hv.items():
        steps.sort()
        h = np.array([s[1] for s in steps])
        star = steps[-1][1] + steps[-1][2]
        records.append(EpisodeRecord(policy, seed, np.zeros(0, int), np.zeros((0, 0)), h, star, np.zeros(len(h))))
    taus = np.linspace(0.0, 1.0, args.taus)
    profiles = performance_profile(records, taus)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "profile.csv", ("policy", "tau", "fraction"),
               ([p.policy, t, f] for p in profiles.values() for t, f in zip(p.taus, p.fractions)))
    if not args.no_plots:
        from .plotting import plot_profiles

        plot_profiles({k: (p.taus, p.fractions) for k, p in profiles.items()}, out / "profile.png")
    print(out / "profile.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boformer", description="Sequence-model Q-learning for multi-objective BO")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a Q-network (off-policy, prioritized trajectory replay)")
    p.add_argument("--config")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--resume", action="store_true", help="start from the checkpoint at --out")
    p.add_argument("--transfer-from", help="retrain only the frame embedding of this checkpoint for task.K")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="paired-seed evaluation; writes CSVs and figures")
    p.add_argument("--config")
    p.add_argument("--policy", action="append", help="boformer:<ckpt>, ehvi, sucb, random (repeatable)")
    p.add_argument("--suite", action="append", help="task suite name (repeatable)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hv", help="hypervolume of a CSV point set")
    p.add_argument("points")
    p.add_argument("--ref", required=True, help="comma-separated reference point")
    p.add_argument("--mc", type=int, default=0, help="Monte-Carlo samples instead of the exact sweep")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_hv)

    p = sub.add_parser("profile", help="performance profiles from a curves.csv")
    p.add_argument("curves")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--taus", type=int, default=101, help="number of thresholds in [0, 1]")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_profile)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
