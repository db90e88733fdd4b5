"""Experiment orchestration: JSON configs, seeded deterministic runs,
parallel sweeps, and CSV/JSON artifact emission.

Subcommands: gradcheck, train, layer-sweep, theory, equiv, cka, attn-dist.
Every command is deterministic given (config, base seed) up to wall-time
fields; per-job seeds derive from the base seed and job coordinates, so
parallel and serial schedules produce identical results.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import analysis, gradcheck, prompting, tasks, theory
from .prompting import PromptSpec, TrainConfig
from .seeding import mix64, rng_for


class ConfigError(ValueError):
    """Malformed experiment config; the message names the field path."""


def parse_config(cls, doc: dict, prefix: str = ""):
    """Build a config dataclass from a JSON object; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config {prefix or '<root>'} must be a JSON object")
    known = {f.name for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config under '{prefix or '<root>'}': {exc}")


def load_config(cls, path: str | None, overrides: dict):
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    cfg = parse_config(cls, doc)
    for key, val in overrides.items():
        if val is not None and hasattr(cfg, key):
            setattr(cfg, key, val)
    return cfg


# ---------------------------------------------------------------------------
# CSV helpers: '.' decimal, 17 significant digits, lossless round trip


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float) or isinstance(v, np.floating):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: str, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in fieldnames])


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# command configs


@dataclass
class GradcheckConfig:
    base_seed: int = 0
    trials: int = 100
    composite_trials: int = 100
    corrupt: bool = False  # negative-control fixture for the harness itself


@dataclass
class TrainCmdConfig:
    arch: str = "cnn"
    method: str = "AP"
    site: str | None = "site_4"
    shape_mode: str = "full"
    train_head: bool = True
    optimizer: str = "adam"
    learning_rate: float = 0.01
    epochs: int = 5
    batch_size: int = 32
    weight_decay: float = 0.0
    base_seed: int = 0
    n_train: int = 256
    n_test: int = 512
    dataset_path: str | None = None
    test_dataset_path: str | None = None
    geometry: list | None = None
    resize_inner: list | None = None


@dataclass
class LayerSweepConfig:
    arch: str = "cnn"
    seeds: int = 5
    lr_grid: list = field(default_factory=lambda: [0.01, 0.03])
    epochs: int = 12
    batch_size: int = 32
    optimizer: str = "adam"
    n_train: int = 256
    n_test: int = 512
    base_seed: int = 0
    methods: list = field(default_factory=lambda: ["AP", "VP_additive", "NormTune"])
    shape_mode: str = "full"


@dataclass
class TheoryConfig:
    P_list: list = field(default_factory=lambda: [8, 16, 32])
    h_list: list = field(default_factory=lambda: [1, 2])
    seeds: int = 5
    base_seed: int = 0
    d: int = 4
    zeta: float = -0.5
    d_A: int = 1
    m: int = 16
    eta_shallow: float = 0.5
    eta_deep: float = 1.0
    batch_size: int = 16
    max_steps: int = 20000
    target_acc: float = 0.99
    n_test: int = 2000
    lemma_P_list: list = field(default_factory=lambda: [8, 16, 32])
    lemma_dA_list: list = field(default_factory=lambda: [1, 2, 3])
    distance: str = "absolute"
    run_lemma: bool = True
    run_sweep: bool = True


@dataclass
class EquivConfig:
    draws: int = 50
    base_seed: int = 0
    tol: float = 1e-9


@dataclass
class CkaConfig:
    base_seed: int = 0
    n_samples: int = 200


@dataclass
class AttnDistConfig:
    base_seed: int = 0
    P_list: list = field(default_factory=lambda: [8, 16, 32])
    dA_list: list = field(default_factory=lambda: [1, 2, 3])
    distance: str = "absolute"


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(cfg: GradcheckConfig, out_dir: str) -> int:
    reports = gradcheck.run_suite(seed=cfg.base_seed, trials=cfg.trials,
                                  composite_trials=cfg.composite_trials,
                                  corrupt=cfg.corrupt)
    all_ok = True
    lines = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        all_ok &= r.passed
        lines.append(f"{status} {r.name}: worst_rel_err={r.worst_rel_err:.3e} "
                     f"(tol {r.tol:.0e})")
    report = "\n".join(lines)
    print(report)
    with open(os.path.join(out_dir, "gradcheck_report.txt"), "w") as fh:
        fh.write(report + "\n")
    return 0 if all_ok else 1


def _experiment_for(arch: str, seed: int, n_train: int, n_test: int):
    if arch == "cnn":
        return tasks.cnn_experiment(seed, n_train=n_train, n_test=n_test)
    if arch == "vit":
        return tasks.vit_experiment(seed, n_train=n_train, n_test=n_test)
    raise ConfigError(f"unknown arch '{arch}' (expected cnn or vit)")


def cmd_train(cfg: TrainCmdConfig, out_dir: str) -> int:
    model, train_ds, test_ds = _experiment_for(cfg.arch, cfg.base_seed,
                                               cfg.n_train, cfg.n_test)
    if cfg.dataset_path:
        if not cfg.geometry:
            raise ConfigError("dataset_path requires 'geometry'")
        if not os.path.exists(cfg.dataset_path):
            raise FileNotFoundError(f"dataset file not found: {cfg.dataset_path}")
        train_ds = tasks.load_dataset_csv(cfg.dataset_path, cfg.geometry)
        test_path = cfg.test_dataset_path or cfg.dataset_path
        if not os.path.exists(test_path):
            raise FileNotFoundError(f"dataset file not found: {test_path}")
        test_ds = tasks.load_dataset_csv(test_path, cfg.geometry)

    spec = PromptSpec(method=cfg.method,
                      site=cfg.site if cfg.method == "AP" else None,
                      shape_mode=cfg.shape_mode, train_head=cfg.train_head,
                      resize_inner=tuple(cfg.resize_inner) if cfg.resize_inner else None)
    adaptation = prompting.build_adaptation(model, spec, train_ds.x.shape[1:])
    tcfg = TrainConfig(optimizer=cfg.optimizer, learning_rate=cfg.learning_rate,
                       epochs=cfg.epochs, batch_size=cfg.batch_size,
                       seed=mix64(cfg.base_seed, "train"),
                       weight_decay=cfg.weight_decay)
    rec = prompting.train(adaptation, train_ds.xy(), test_ds.xy(), tcfg, loss="ce")
    rec.extra["arch"] = cfg.arch
    with open(os.path.join(out_dir, "run_record.json"), "w") as fh:
        fh.write(rec.to_json() + "\n")
    write_csv(os.path.join(out_dir, "loss_curve.csv"),
              [{"step": i, "loss": v} for i, v in enumerate(rec.losses)],
              ["step", "loss"])
    print(f"final_train_acc={rec.final_train_acc} final_test_acc={rec.final_test_acc} "
          f"params={rec.param_count} diverged={rec.diverged}")
    return 0


def _layer_sweep_seed(args: tuple) -> tuple[list[dict], list[dict]]:
    """One seed of a layer sweep; top level so process pools can pickle it."""
    (arch, seed, lr_grid, epochs, batch_size, optimizer, n_train, n_test,
     methods, shape_mode) = args
    model, train_ds, test_ds = _experiment_for(arch, seed, n_train, n_test)
    cfg = TrainConfig(optimizer=optimizer, learning_rate=lr_grid[0], epochs=epochs,
                      batch_size=batch_size, seed=mix64(seed, "sweep"))
    runs, summary = analysis.layer_sweep(model, train_ds.xy(), test_ds.xy(), cfg,
                                         lr_grid=tuple(lr_grid),
                                         methods=tuple(methods),
                                         shape_mode=shape_mode)
    for row in summary:
        row["seed"] = seed
    return runs, summary


def run_layer_sweep(cfg: LayerSweepConfig, jobs: int = 1):
    grid = [(cfg.arch, mix64(cfg.base_seed, cfg.arch, s), list(cfg.lr_grid),
             cfg.epochs, cfg.batch_size, cfg.optimizer, cfg.n_train, cfg.n_test,
             list(cfg.methods), cfg.shape_mode) for s in range(cfg.seeds)]
    if jobs > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_layer_sweep_seed, grid))
    else:
        results = [_layer_sweep_seed(a) for a in grid]
    run_rows, summary_rows = [], []
    for runs, summary in results:
        run_rows.extend(runs)
        summary_rows.extend(summary)
    run_rows.sort(key=lambda r: (r["seed"], r["method"], r["site"], r["lr"]))
    summary_rows.sort(key=lambda r: (r["seed"], r["method"], r["site"]))
    return run_rows, summary_rows


def cmd_layer_sweep(cfg: LayerSweepConfig, out_dir: str, jobs: int) -> int:
    run_rows, summary_rows = run_layer_sweep(cfg, jobs=jobs)
    write_csv(os.path.join(out_dir, f"layer_sweep_{cfg.arch}_runs.csv"), run_rows,
              ["seed", "method", "site", "lr", "epochs", "n_train", "param_count",
               "final_train_acc", "final_test_acc", "diverged"])
    write_csv(os.path.join(out_dir, f"layer_sweep_{cfg.arch}_summary.csv"),
              summary_rows,
              ["seed", "method", "site", "best_lr", "best_test_acc",
               "is_argmax_site", "all_diverged"])
    for seed in sorted({r["seed"] for r in summary_rows}):
        best = [r for r in summary_rows
                if r["seed"] == seed and r["method"] == "AP" and r["is_argmax_site"]]
        if best:
            print(f"seed={seed} best_site={best[0]['site']} "
                  f"acc={best[0]['best_test_acc']}")
    return 0


def cmd_theory(cfg: TheoryConfig, out_dir: str, jobs: int) -> int:
    exit_code = 0
    if cfg.run_lemma:
        worst1 = worst2 = 0.0
        pairs = []
        for P in cfg.lemma_P_list:
            for d_A in cfg.lemma_dA_list:
                spec = theory.SyntheticTaskSpec(P=P, d=cfg.d, zeta=cfg.zeta,
                                                d_A=d_A, seed=cfg.base_seed)
                model = theory.build_constructed_vit(spec, m=cfg.m)
                got = theory.verify_lemma1(model, spec, distance=cfg.distance)
                want = theory.lemma1_expected(spec)
                worst1 = max(worst1, abs(got[0] - want[0]))
                worst2 = max(worst2, abs(got[1] - want[1]))
                pairs.append((P, d_A, got, want))
        line1 = (f"layer1 attention distance: computed "
                 f"{[f'{p}/{d}:{g[0]:.12g}' for p, d, g, _ in pairs]} expected "
                 f"(1+d_A)/P, max |diff| = {worst1:.3e}")
        line2 = (f"layer2 attention distance: computed "
                 f"{[f'{p}/{d}:{g[1]:.12g}' for p, d, g, _ in pairs]} expected "
                 f"1/P, max |diff| = {worst2:.3e}")
        print(line1)
        print(line2)
        with open(os.path.join(out_dir, "lemma1_report.txt"), "w") as fh:
            fh.write(line1 + "\n" + line2 + "\n")
        if worst1 > 1e-12 or worst2 > 1e-12:
            exit_code = 1

    if cfg.run_sweep:
        rows, summary = theory.sample_complexity_sweep(
            cfg.P_list, cfg.h_list, cfg.seeds, base_seed=cfg.base_seed, d=cfg.d,
            zeta=cfg.zeta, d_A=cfg.d_A, m=cfg.m,
            eta={1: cfg.eta_shallow, 2: cfg.eta_deep},
            batch_size=cfg.batch_size, max_steps=cfg.max_steps,
            target_acc=cfg.target_acc, n_test=cfg.n_test, jobs=jobs)
        write_csv(os.path.join(out_dir, "theory_cells.csv"), rows,
                  ["P", "h", "seed", "N_star", "censored", "steps_used",
                   "delta_norm", "test_acc_at_Nstar"])
        write_csv(os.path.join(out_dir, "theory_summary.csv"), summary,
                  ["P", "h", "median_N_star", "nstar_over_P", "nstar_over_P2logP"])
        med = {(r["P"], r["h"]): r["median_N_star"] for r in summary}
        ratios = []
        ordering_ok = True
        for P in cfg.P_list:
            if (P, 1) in med and (P, 2) in med:
                if med[(P, 1)] > med[(P, 2)]:
                    ordering_ok = False
                ratios.append(med[(P, 2)] / med[(P, 1)])
        if any(b < a for a, b in zip(ratios, ratios[1:])):
            ordering_ok = False
        n_censored = sum(r["censored"] for r in rows)
        print(f"sample-complexity medians: {med}; ratios={ratios}; "
              f"censored_cells={n_censored}")
        if not ordering_ok:
            exit_code = 1
    return exit_code


def cmd_equiv(cfg: EquivConfig, out_dir: str) -> int:
    rng = rng_for(cfg.base_seed, "equiv")
    worst_tok = 0.0
    for _ in range(cfg.draws):
        B = int(rng.integers(2, 6))
        D = int(rng.integers(2, 7)) * 2
        P = int(rng.integers(2, 9))
        z = analysis.make_equal_stat_token_batch(B, D, P, rng,
                                                 mu=float(rng.normal()),
                                                 spread=float(rng.uniform(0.5, 2.0)))
        delta = rng.normal(size=D)
        _, _, disc = analysis.normtune_from_ap_tokens(z, delta)
        worst_tok = max(worst_tok, disc)

    worst_conv = 0.0
    for i in range(cfg.draws):
        B = int(rng.integers(2, 6))
        C = int(rng.integers(1, 4))
        O = int(rng.integers(1, 5))
        H = int(rng.integers(4, 9))
        kernel, padding = ((1, "zero") if i % 2 == 0 else (3, "circular"))
        z = rng.normal(size=(B, C, H, H))
        w = rng.normal(size=(O, C, kernel, kernel))
        delta = rng.normal(size=C)
        _, _, disc = analysis.normtune_from_ap_conv(z, w, delta, padding=padding)
        worst_conv = max(worst_conv, disc)

    lines = [f"token/layer-norm case: max discrepancy {worst_tok:.3e} over "
             f"{cfg.draws} draws (tol {cfg.tol:.0e})",
             f"conv/batch-norm case:  max discrepancy {worst_conv:.3e} over "
             f"{cfg.draws} draws (tol {cfg.tol:.0e})"]
    report = "\n".join(lines)
    print(report)
    with open(os.path.join(out_dir, "equiv_report.txt"), "w") as fh:
        fh.write(report + "\n")
    return 0 if worst_tok < cfg.tol and worst_conv < cfg.tol else 1


def cmd_cka(cfg: CkaConfig, out_dir: str) -> int:
    cnn = tasks.cnn_experiment(cfg.base_seed)[0]
    ivit = tasks.image_vit_experiment(cfg.base_seed)
    data = tasks.make_global_parity_task(cfg.n_samples,
                                         rng_for(cfg.base_seed, "cka-data"))
    sites_a, sites_b, mat = analysis.cka_matrix(cnn, ivit, data.x)
    rows = [{"cnn_site": sa, "vit_site": sb, "cka": mat[i, j]}
            for i, sa in enumerate(sites_a) for j, sb in enumerate(sites_b)]
    write_csv(os.path.join(out_dir, "cka_matrix.csv"), rows,
              ["cnn_site", "vit_site", "cka"])
    print(f"cka matrix {mat.shape}, min={mat.min():.4f}, max={mat.max():.4f}")
    return 0


def cmd_attn_dist(cfg: AttnDistConfig, out_dir: str) -> int:
    rows = []
    for P in cfg.P_list:
        for d_A in cfg.dA_list:
            spec = theory.SyntheticTaskSpec(P=P, d=4, d_A=d_A, seed=cfg.base_seed)
            model = theory.build_constructed_vit(spec)
            got = theory.verify_lemma1(model, spec, distance=cfg.distance)
            want = theory.lemma1_expected(spec)
            rows.append({"P": P, "d_A": d_A, "layer1": got[0], "layer2": got[1],
                         "expected1": want[0], "expected2": want[1]})
    write_csv(os.path.join(out_dir, "attn_dist.csv"), rows,
              ["P", "d_A", "layer1", "layer2", "expected1", "expected2"])
    for r in rows:
        print(f"P={r['P']} d_A={r['d_A']} layer1={r['layer1']} layer2={r['layer2']}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="promptlab",
                                     description="prompting laboratory experiments")
    parser.add_argument("command",
                        choices=["gradcheck", "train", "layer-sweep", "theory",
                                 "equiv", "cka", "attn-dist"])
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="base seed override")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    args = parser.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    overrides = {"base_seed": args.seed}
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(load_config(GradcheckConfig, args.config, overrides),
                                 args.out)
        if args.command == "train":
            return cmd_train(load_config(TrainCmdConfig, args.config, overrides),
                             args.out)
        if args.command == "layer-sweep":
            return cmd_layer_sweep(load_config(LayerSweepConfig, args.config, overrides),
                                   args.out, args.jobs)
        if args.command == "theory":
            return cmd_theory(load_config(TheoryConfig, args.config, overrides),
                              args.out, args.jobs)
        if args.command == "equiv":
            return cmd_equiv(load_config(EquivConfig, args.config, overrides), args.out)
        if args.command == "cka":
            return cmd_cka(load_config(CkaConfig, args.config, overrides), args.out)
        if args.command == "attn-dist":
            return cmd_attn_dist(load_config(AttnDistConfig, args.config, overrides),
                                 args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
