"""Command-line entry point: gen, train, eval, ablate, datascale.

Every command is a pure function of (config, flags, seeds); reruns produce
byte-identical outputs. Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import evaluation as ev
from . import policy as pol
from . import scenario as sc
from .config import ConfigError, config_hash, load_chain, load_config
from .scenario import derive_seed


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--out-dir", help="directory for all outputs")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--jobs", type=int, help="worker processes for generation")
    p.add_argument("--dataset", help="dataset file name (relative to --out-dir)")


def build_parser():
    parser = _Parser(prog="safereach", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a counterfactual dataset")
    _add_common(p)
    p.add_argument("--count", type=int, help="number of episodes")
    p.add_argument("--epsilon", type=float, help="interference clearance threshold (m)")

    p = sub.add_parser("train", help="train a policy on a dataset")
    _add_common(p)
    p.add_argument("--lambda", dest="lam", type=float, help="feasibility loss weight")
    p.add_argument("--delta", type=float, help="safety margin (m)")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint", default="checkpoint.json",
                   help="checkpoint file name (relative to --out-dir)")

    p = sub.add_parser("eval", help="evaluate a checkpoint under perturbations")
    _add_common(p)
    p.add_argument("--checkpoint", default="checkpoint.json")
    p.add_argument("--level", help="small or large")
    p.add_argument("--report-prefix", default="eval",
                   help="prefix for report files (relative to --out-dir)")

    p = sub.add_parser("ablate", help="supervision-strength grid (delta x lambda)")
    _add_common(p)
    p.add_argument("--deltas", help="comma list of deltas")
    p.add_argument("--lambdas", help="comma list of lambdas")
    p.add_argument("--steps", type=int, help="training steps per cell")

    p = sub.add_parser("datascale", help="data-efficiency grid (sizes x objectives)")
    _add_common(p)
    p.add_argument("--sizes", help="comma list of training subset sizes")
    p.add_argument("--steps", type=int, help="training steps per cell")
    return parser


def _apply_overrides(cfg, args):
    direct = ("out_dir", "seed", "jobs", "dataset", "count", "epsilon", "lam",
              "delta", "steps", "batch_size", "lr", "level")
    for name in direct:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "deltas", None):
        cfg.ablate_deltas = tuple(float(v) for v in args.deltas.split(","))
    if getattr(args, "lambdas", None):
        cfg.ablate_lambdas = tuple(float(v) for v in args.lambdas.split(","))
    if getattr(args, "sizes", None):
        cfg.sizes = tuple(int(v) for v in args.sizes.split(","))
    return cfg


def _out(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _load_episodes(cfg, chain):
    path = _out(cfg, cfg.dataset)
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path} (run `safereach gen` first)")
    return sc.load_dataset(path, chain), path


# ---------------------------------------------------------------------------
# gen


def cmd_gen(cfg):
    chain = load_chain(cfg)
    episodes = sc.generate_dataset(
        chain, cfg.count, cfg.epsilon, derive_seed(cfg.seed, "gen"),
        jobs=cfg.jobs, n_steps=cfg.episode_steps, delta=cfg.delta,
        ik_tol=cfg.ik_tol, planner_margin=cfg.planner_margin,
        rrt_step=cfg.rrt_step, goal_bias=cfg.goal_bias, max_nodes=cfg.max_nodes,
        edge_resolution=cfg.edge_resolution, shortcut_attempts=cfg.shortcut_attempts)
    dataset_path = _out(cfg, cfg.dataset)
    sc.write_dataset(dataset_path, episodes, chain)
    stats = sc.dataset_stats(episodes, chain)
    stats_path = _out(cfg, cfg.dataset.rsplit(".", 1)[0] + "_stats.json")
    with open(stats_path, "w") as fh:
        json.dump({"config_hash": config_hash(cfg),
                   "dataset_hash": pol.file_hash(dataset_path), **stats}, fh, indent=2)
    print(f"dataset: {dataset_path} ({len(episodes)} episodes, "
          f"hash {pol.file_hash(dataset_path)})")
    print("training-set statistics (distances in meters):")
    print(f"  episodes            {stats['episodes']}")
    print(f"  steps per episode   {stats['steps_per_episode']}")
    print(f"  d_min  mean +- std  {stats['d_min_mean']:.4f} +- {stats['d_min_std']:.4f}")
    print(f"  d_tgt  mean +- std  {stats['d_tgt_mean']:.4f} +- {stats['d_tgt_std']:.4f}")
    print(f"  Pr(d_min < 0.02)    {stats['p_dmin_lt_0.02']:.4f}")
    print(f"  Pr(d_min < 0.05)    {stats['p_dmin_lt_0.05']:.4f}")
    print(f"  Pr(d_tgt < 0.10)    {stats['p_dtgt_lt_0.10']:.4f}")
    print(f"  Pr(d_tgt < 0.15)    {stats['p_dtgt_lt_0.15']:.4f}")
    return {"dataset": dataset_path, "stats": stats_path}


# ---------------------------------------------------------------------------
# train


def train_model(cfg, chain, episodes, lam, delta, seed, log_path=None):
    """Seeded training run; returns (net, schedule, history)."""
    schedule = pol.schedule_init(cfg.k, cfg.beta_start, cfg.beta_end)
    net = pol.PolicyNetwork(cfg.t_a, chain.dof, pol.cond_dim(chain),
                            hidden=cfg.hidden, embed_dim=cfg.embed_dim,
                            seed=derive_seed(seed, "init"))
    state = pol.TrainState.new(derive_seed(seed, "steps"), lr=cfg.lr)
    history = []
    for step in range(1, cfg.steps + 1):
        idx = state.rng.integers(0, len(episodes), size=cfg.batch_size)
        batch = [episodes[int(i)] for i in idx]
        losses = pol.train_step(net, batch, schedule, chain, lam, delta, state)
        history.append((step, losses["mse"], losses["geo"], losses["total"]))
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mse", "geo", "total"])
            for row in history:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    return net, schedule, history


def _method_name(lam):
    return "mse" if lam == 0.0 else "mse+feas"


def cmd_train(cfg, checkpoint_name="checkpoint.json"):
    chain = load_chain(cfg)
    episodes, dataset_path = _load_episodes(cfg, chain)
    log_path = _out(cfg, "train_log.csv")
    net, schedule, history = train_model(
        cfg, chain, episodes, cfg.lam, cfg.delta, cfg.seed, log_path=log_path)
    ckpt_path = _out(cfg, checkpoint_name)
    pol.save_checkpoint(ckpt_path, net, schedule, chain, {
        "method": _method_name(cfg.lam),
        "lambda": cfg.lam,
        "delta": cfg.delta,
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "seed": cfg.seed,
        "data_size": len(episodes),
        "dataset_hash": pol.file_hash(dataset_path),
        "config_hash": config_hash(cfg),
    })
    final = history[-1]
    print(f"trained {cfg.steps} steps (lambda={cfg.lam}, delta={cfg.delta}); "
          f"final mse={final[1]:.6f} geo={final[2]:.6f}")
    print(f"checkpoint: {ckpt_path} (hash {pol.file_hash(ckpt_path)})")
    print(f"loss log:   {log_path}")
    return {"checkpoint": ckpt_path, "log": log_path}


# ---------------------------------------------------------------------------
# eval


def _evaluate(cfg, chain, net, schedule, episodes, level, seed, pairs=None):
    pairs = pairs or cfg.ssr_pairs
    records = ev.run_protocol(
        net, episodes, level, chain, schedule, seed,
        chunks_per_episode=cfg.chunks_per_episode, epsilon=cfg.epsilon,
        delta=cfg.delta)
    report = ev.compute_metrics(records, pairs)
    degenerate = False
    for pair in pairs:
        hw, deg = ev.clustered_bootstrap_ci(records, pair, cfg.bootstrap_b,
                                            seed=derive_seed(seed, "boot", *pair_key(pair)))
        report.ci_half_width[pair] = hw
        degenerate |= deg
    report.degenerate = degenerate
    return records, report


def pair_key(pair):
    return (int(round(pair[0] * 1000)), int(round(pair[1] * 1000)))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_markdown(path, header, rows, title):
    with open(path, "w") as fh:
        fh.write(f"# {title}\n\n")
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "|".join("---" for _ in header) + "|\n")
        for row in rows:
            fh.write("| " + " | ".join(str(v) for v in row) + " |\n")


def _fmt(value):
    return repr(float(value))


def cmd_eval(cfg, checkpoint_name, report_prefix="eval"):
    chain = load_chain(cfg)
    episodes, dataset_path = _load_episodes(cfg, chain)
    ckpt_path = _out(cfg, checkpoint_name)
    if not os.path.exists(ckpt_path):
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    net, schedule, train_cfg = pol.load_checkpoint(ckpt_path, chain)
    level = cfg.level
    records, report = _evaluate(cfg, chain, net, schedule, episodes, level,
                                derive_seed(cfg.seed, "eval", level))
    records_path = _out(cfg, f"{report_prefix}_records.jsonl")
    ev.records_to_jsonl(records_path, records)
    hashes = (config_hash(cfg), pol.file_hash(dataset_path), pol.file_hash(ckpt_path))
    header = ["method", "data_size", "level", "metric", "value", "ci_half_width_pp",
              "n_records", "config_hash", "dataset_hash", "checkpoint_hash"]
    rows = []
    for metric, value, ci in report.metric_rows():
        rows.append([train_cfg.get("method", "?"), train_cfg.get("data_size", "?"),
                     level, metric, _fmt(value), "" if ci is None else _fmt(ci),
                     report.n_records, *hashes])
    csv_path = _out(cfg, f"{report_prefix}_report.csv")
    md_path = _out(cfg, f"{report_prefix}_report.md")
    _write_csv(csv_path, header, rows)
    _write_markdown(md_path, header, rows, f"Evaluation report ({level} perturbations)")
    print(f"evaluated {len(records)} records at level={level}")
    for metric, value, ci in report.metric_rows():
        suffix = "" if ci is None else f"  (+-{ci:.2f} pp)"
        print(f"  {metric:16s} {value:.4f}{suffix}")
    print(f"report: {csv_path}")
    return {"records": records_path, "csv": csv_path, "md": md_path}


# ---------------------------------------------------------------------------
# ablate / datascale grids


_GRID_HEADER = ["setting", "delta", "lambda", "ssr(0.02,0.1)", "ci(0.02,0.1)_pp",
                "ssr(0.05,0.15)", "ci(0.05,0.15)_pp", "p(d_min<0.02)", "p(d_min<0.05)",
                "p(d_tgt<0.10)", "p(d_tgt<0.15)", "n_records", "config_hash",
                "dataset_hash", "checkpoint_hash"]


def _grid_row(setting, delta, lam, report, hashes):
    ssr = {pair_key(p): v for p, v in report.ssr.items()}
    ci = {pair_key(p): v for p, v in report.ci_half_width.items()}
    return [setting, "" if delta is None else _fmt(delta), _fmt(lam),
            _fmt(ssr[(20, 100)]), _fmt(ci[(20, 100)]),
            _fmt(ssr[(50, 150)]), _fmt(ci[(50, 150)]),
            _fmt(report.p_dmin[0.02]), _fmt(report.p_dmin[0.05]),
            _fmt(report.p_dtgt[0.10]), _fmt(report.p_dtgt[0.15]),
            report.n_records, *hashes]


def _train_or_load_cell(cfg, chain, episodes, lam, delta, seed, ckpt_path,
                        dataset_path):
    if os.path.exists(ckpt_path):
        net, schedule, _ = pol.load_checkpoint(ckpt_path, chain)
        return net, schedule
    net, schedule, _ = train_model(cfg, chain, episodes, lam, delta, seed)
    pol.save_checkpoint(ckpt_path, net, schedule, chain, {
        "method": _method_name(lam), "lambda": lam, "delta": delta,
        "steps": cfg.steps, "batch_size": cfg.batch_size, "lr": cfg.lr,
        "seed": seed, "data_size": len(episodes),
        "dataset_hash": pol.file_hash(dataset_path),
        "config_hash": config_hash(cfg),
    })
    return net, schedule


def cmd_ablate(cfg):
    chain = load_chain(cfg)
    episodes, dataset_path = _load_episodes(cfg, chain)
    cells = [("baseline", None, 0.0)]
    for delta in cfg.ablate_deltas:
        for lam in cfg.ablate_lambdas:
            cells.append((f"delta={delta:g},lambda={lam:g}", delta, lam))
    rows = []
    for setting, delta, lam in cells:
        eff_delta = cfg.delta if delta is None else delta
        tag = f"d{'base' if delta is None else f'{delta:g}'}_l{lam:g}"
        ckpt_path = _out(cfg, f"ablate_ckpt_{tag}.json")
        net, schedule = _train_or_load_cell(
            cfg, chain, episodes, lam, eff_delta, derive_seed(cfg.seed, "ablate", tag),
            ckpt_path, dataset_path)
        _, report = _evaluate(cfg, chain, net, schedule, episodes, "large",
                              derive_seed(cfg.seed, "ablate-eval", tag),
                              pairs=ev.DEFAULT_SSR_PAIRS)
        hashes = (config_hash(cfg), pol.file_hash(dataset_path), pol.file_hash(ckpt_path))
        rows.append(_grid_row(setting, delta, lam, report, hashes))
        print(f"ablate cell {setting}: ssr(0.02,0.10)={rows[-1][3]}")
    csv_path = _out(cfg, "ablate_report.csv")
    md_path = _out(cfg, "ablate_report.md")
    _write_csv(csv_path, _GRID_HEADER, rows)
    _write_markdown(md_path, _GRID_HEADER, rows, "Supervision strength ablation (large perturbations)")
    print(f"ablation grid ({len(rows)} rows): {csv_path}")
    return {"csv": csv_path, "md": md_path}


def cmd_datascale(cfg):
    chain = load_chain(cfg)
    episodes, dataset_path = _load_episodes(cfg, chain)
    header = ["size", "method"] + _GRID_HEADER[3:]
    rows = []
    for size in cfg.sizes:
        if size > len(episodes):
            raise UsageError(f"subset size {size} exceeds dataset of {len(episodes)}")
        subset = episodes[:size]  # deterministic prefix by episode index
        for lam in (0.0, cfg.lam):
            tag = f"n{size}_l{lam:g}"
            ckpt_path = _out(cfg, f"datascale_ckpt_{tag}.json")
            net, schedule = _train_or_load_cell(
                cfg, chain, subset, lam, cfg.delta,
                derive_seed(cfg.seed, "datascale", tag), ckpt_path, dataset_path)
            _, report = _evaluate(cfg, chain, net, schedule, subset, "large",
                                  derive_seed(cfg.seed, "datascale-eval", tag),
                                  pairs=ev.DEFAULT_SSR_PAIRS)
            hashes = (config_hash(cfg), pol.file_hash(dataset_path),
                      pol.file_hash(ckpt_path))
            row = _grid_row("", cfg.delta if lam else None, lam, report, hashes)
            rows.append([size, _method_name(lam)] + row[3:])
            print(f"datascale {size} episodes, {_method_name(lam)}: "
                  f"ssr(0.02,0.10)={rows[-1][2]}")
    csv_path = _out(cfg, "datascale_report.csv")
    md_path = _out(cfg, "datascale_report.md")
    _write_csv(csv_path, header, rows)
    _write_markdown(md_path, header, rows, "Training data size effect (large perturbations)")
    print(f"data-scaling grid ({len(rows)} rows): {csv_path}")
    return {"csv": csv_path, "md": md_path}


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        cfg.validate()
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.checkpoint)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.report_prefix)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "datascale":
            cmd_datascale(cfg)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
