"""Command-line entry point: data generation, training, probes, sweeps, reports.

Everything is reproducible from a flat JSON config plus one root seed; all
randomness flows from that seed through named substreams (teacher/data/init/
ball/xi/...).  CLI flags override config-file keys, which override built-in
defaults, and every output directory embeds the resolved config it was
produced with.

Exit codes: 0 success, 1 check failure, 2 data infeasibility, 3 I/O or shape
error, 4 usage error.
"""

from __future__ import annotations

import os

# Cap BLAS threads before numpy loads anywhere; LAB_THREADS also caps any
# future worker pools.  Must happen at import time of this entry module.
if os.environ.get("LAB_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["LAB_THREADS"])

import argparse
import json
import sys

import numpy as np

from . import data, lossgrad, model, probes, trainer
from .numkit import RngState

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INFEASIBLE = 2
EXIT_IO = 3
EXIT_USAGE = 4

DEFAULTS = {
    "d": 10, "L": 16, "m": 256, "m_last": None, "n": 200,
    "gamma": 0.1, "M": 64,
    "theta": None, "theta_per_L": 0.1,
    "eta": None, "eta_scale": 10.0,
    "K": 2000, "tau": None, "stop_surrogate": None, "record_every": 1,
    "seed": 0, "arch": "residual",
    "probes": "all",
    "data": None, "checkpoint": None,
    "out": "out",
    "heldout_n": 2000,
    "ball_tau": 0.1, "probe_inputs": 50, "probe_draws": 8,
    "tau_grid": [0.01, 0.03, 0.1, 0.3],
    "beta_grid": [0.001, 0.01, 0.1],
    "sparsity": 16, "trials": 20,
    "xi_draws": 16, "ascent_steps": 50,
    "markov_band": 0.03,
    "sweep_L": [4, 16, 64], "sweep_arch": ["residual", "plain"],
    "sweep_m": 128, "sweep_eta_scale": 2.0, "steps_budget": 2000,
    "surrogate_target": 0.3,
}

PROBE_NAMES = [
    "activation_norms", "input_lipschitz", "weight_lipschitz_flips",
    "semismoothness", "gradient_bounds", "separability", "threshold_indices",
    "sparse_output", "loss_at_init", "rademacher", "surrogate_markov",
    "depth_sweep",
]


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 4
        raise UsageError(message)


def load_config(path=None, overrides=None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise FileNotFoundError(f"config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    if cfg["m_last"] is None:
        cfg["m_last"] = cfg["m"]
    return cfg


def resolved_theta(cfg, L=None) -> float:
    if cfg["theta"] is not None:
        return float(cfg["theta"])
    return float(cfg["theta_per_L"]) / (L if L is not None else cfg["L"])


def resolved_eta(cfg, m=None) -> float:
    if cfg["eta"] is not None:
        return float(cfg["eta"])
    return float(cfg["eta_scale"]) / (m if m is not None else cfg["m"])


def _echo(cfg) -> dict:
    return {k: cfg[k] for k in sorted(cfg)}


def _dataset_path(cfg) -> str:
    return cfg["data"] or os.path.join(cfg["out"], "dataset.bin")


def _init_params(cfg, rng: RngState) -> model.NetworkParams:
    return model.init_gaussian(rng.substream("init"), cfg["d"], cfg["L"],
                               cfg["m"], cfg["m_last"], resolved_theta(cfg),
                               cfg["arch"])


def _load_or_init_params(cfg, rng, dataset=None):
    if cfg["checkpoint"]:
        params = model.load_checkpoint(cfg["checkpoint"])
        if dataset is not None and params.d != dataset.d:
            raise model.ShapeError(
                f"checkpoint input dim {params.d} != dataset dim {dataset.d}")
        return params
    return _init_params(cfg, rng)


def cmd_gen_data(cfg) -> int:
    root = RngState(cfg["seed"])
    teacher = data.make_teacher(root.substream("teacher"), cfg["d"], cfg["M"],
                                cfg["gamma"])
    ds = data.sample_dataset(teacher, root.substream("data"), cfg["n"])
    os.makedirs(cfg["out"], exist_ok=True)
    path = _dataset_path(cfg)
    data.save_dataset(ds, path)
    report = {
        "config": _echo(cfg),
        "dataset_file": os.path.basename(path),
        "acceptance_rate": ds.acceptance_rate,
        "realized_margin": ds.realized_margin,
        "positive_fraction": float(np.mean(ds.ys > 0)),
    }
    with open(os.path.join(cfg["out"], "gen_report.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {path} (n={ds.n}, acceptance {ds.acceptance_rate:.2%}, "
          f"margin {ds.realized_margin:.4f})")
    return EXIT_OK


def cmd_train(cfg) -> int:
    path = _dataset_path(cfg)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file {path} not found; "
                                f"run gen-data first or pass --data")
    ds = data.load_dataset(path)
    root = RngState(cfg["seed"])
    params = _load_or_init_params(cfg, root, ds)
    tcfg = trainer.TrainConfig(
        eta=resolved_eta(cfg), steps=cfg["K"], tau_budget=cfg["tau"],
        stop_surrogate=cfg["stop_surrogate"], record_every=cfg["record_every"],
        seed=(cfg["seed"], 0))
    result = trainer.train(params, ds, tcfg)
    os.makedirs(cfg["out"], exist_ok=True)
    trainer.write_trajectory_csv(result.records,
                                 os.path.join(cfg["out"], "trajectory.csv"))
    trainer.write_summary_json(result, _echo(cfg),
                               os.path.join(cfg["out"], "summary.json"))
    model.save_checkpoint(result.params,
                          os.path.join(cfg["out"], "checkpoint.bin"),
                          seed=(cfg["seed"], 0))
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"trained {result.steps_run} steps: loss {last.loss:.4f}, "
              f"surrogate {last.surrogate:.4f}, train_err {last.train_err:.3f}")
    return EXIT_OK


def _sphere_inputs(rng: RngState, count: int, d: int) -> np.ndarray:
    raw = rng.standard_normal((count, d))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _run_one_probe(name, cfg, root, ds, params) -> probes.ProbeReport:
    d = params.d
    n_inputs = cfg["probe_inputs"]
    if name == "activation_norms":
        xs = _sphere_inputs(root.substream("probe-inputs"), n_inputs, d)
        return probes.probe_activation_norms(params, xs)
    if name == "input_lipschitz":
        rng = root.substream("probe-inputs")
        return probes.probe_input_lipschitz(
            params, (_sphere_inputs(rng, n_inputs, d),
                     _sphere_inputs(rng, n_inputs, d)))
    if name == "weight_lipschitz_flips":
        xs = _sphere_inputs(root.substream("probe-inputs"), min(n_inputs, 10), d)
        return probes.probe_weight_lipschitz_and_flips(
            params, root.substream("ball"), xs, tuple(cfg["tau_grid"]),
            cfg["probe_draws"])
    if name == "semismoothness":
        xs = _sphere_inputs(root.substream("probe-inputs"), min(n_inputs, 20), d)
        return probes.probe_semismoothness(
            params, root.substream("ball"), xs, cfg["ball_tau"],
            cfg["probe_draws"] * 4, dataset=ds)
    if name == "gradient_bounds":
        tcfg = trainer.TrainConfig(eta=resolved_eta(cfg, params.m),
                                   steps=cfg["K"], stop_surrogate=0.25)
        result = trainer.train(params, ds, tcfg)
        report = probes.probe_gradient_bounds(params, ds, result.records)
        report.measured["column_sets"] = probes.last_layer_column_sets(
            params, result.params, ds)
        return report
    if name == "separability":
        return probes.probe_separability(ds.teacher, params, ds,
                                         root.substream("control"))
    if name == "threshold_indices":
        xs = _sphere_inputs(root.substream("probe-inputs"), n_inputs, d)
        return probes.probe_threshold_indices(params, xs, tuple(cfg["beta_grid"]))
    if name == "sparse_output":
        return probes.probe_sparse_output(params, root.substream("ball"),
                                          cfg["ball_tau"], cfg["sparsity"],
                                          cfg["trials"])
    if name == "loss_at_init":
        return probes.probe_loss_at_init(params, ds)
    if name == "rademacher":
        return probes.rademacher_estimate(params, cfg["ball_tau"], ds,
                                          root.substream("xi"),
                                          cfg["xi_draws"], cfg["ascent_steps"])
    if name == "surrogate_markov":
        heldout = data.sample_dataset(ds.teacher, root.substream("heldout"),
                                      cfg["heldout_n"])
        return probes.probe_surrogate_markov(params, heldout, cfg["markov_band"])
    if name == "depth_sweep":
        return probes.depth_sweep(
            root.substream("sweep"), tuple(cfg["sweep_L"]),
            tuple(cfg["sweep_arch"]), d=cfg["d"], m=cfg["sweep_m"],
            m_last=cfg["sweep_m"], n=cfg["n"], gamma=cfg["gamma"], M=cfg["M"],
            theta_per_L=cfg["theta_per_L"], eta_scale=cfg["sweep_eta_scale"],
            steps_budget=cfg["steps_budget"],
            surrogate_target=cfg["surrogate_target"])
    raise UsageError(f"unknown probe {name!r}; valid: {', '.join(PROBE_NAMES)}")


def cmd_probe(cfg) -> int:
    names = PROBE_NAMES if cfg["probes"] == "all" else [
        s.strip() for s in str(cfg["probes"]).split(",") if s.strip()]
    unknown = [nm for nm in names if nm not in PROBE_NAMES]
    if unknown:
        raise UsageError(f"unknown probes {unknown}; valid: {', '.join(PROBE_NAMES)}")
    path = _dataset_path(cfg)
    root = RngState(cfg["seed"])
    if os.path.exists(path):
        ds = data.load_dataset(path)
    else:
        teacher = data.make_teacher(root.substream("teacher"), cfg["d"],
                                    cfg["M"], cfg["gamma"])
        ds = data.sample_dataset(teacher, root.substream("data"), cfg["n"])
    params = _load_or_init_params(cfg, root, ds)
    os.makedirs(cfg["out"], exist_ok=True)
    index = {"reports": [], "verdicts": {}}
    for name in names:
        report = _run_one_probe(name, cfg, root, ds, params)
        paths = report.write(cfg["out"])
        index["reports"].append(os.path.basename(paths["report"]))
        index["verdicts"][report.name] = report.verdict
        print(f"probe {report.name}: {report.verdict}")
    index["config"] = _echo(cfg)
    with open(os.path.join(cfg["out"], "index.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        json.dump(index, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    root = RngState(cfg["seed"])
    sweep_rng = root.substream("sweep")
    teacher = data.make_teacher(sweep_rng.substream("teacher"), cfg["d"],
                                cfg["M"], cfg["gamma"])
    ds = data.sample_dataset(teacher, sweep_rng.substream("data"), cfg["n"])
    probe_inputs = ds.xs[:3]
    os.makedirs(cfg["out"], exist_ok=True)
    rows = []
    for arch in cfg["sweep_arch"]:
        for L in cfg["sweep_L"]:
            cell_dir = os.path.join(cfg["out"], f"cell_{arch}_L{L}")
            cell_file = os.path.join(cell_dir, "cell.json")
            if os.path.exists(cell_file):  # completed cells are never redone
                with open(cell_file, "r", encoding="utf-8") as fh:
                    row = json.load(fh)
            else:
                row = probes.sweep_cell(
                    sweep_rng, arch, L, ds, cfg["d"], cfg["sweep_m"],
                    cfg["sweep_m"], cfg["theta_per_L"], cfg["sweep_eta_scale"],
                    cfg["steps_budget"], cfg["surrogate_target"],
                    probe_inputs=probe_inputs)
                os.makedirs(cell_dir, exist_ok=True)
                with open(cell_file, "w", encoding="utf-8", newline="\n") as fh:
                    json.dump(row, fh, sort_keys=True, indent=2)
                    fh.write("\n")
            rows.append(row)
            print(f"cell {arch} L={L}: steps={row['steps_to_threshold']}")
    agg = os.path.join(cfg["out"], "sweep.csv")
    with open(agg, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(probes.SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in probes.SWEEP_COLUMNS) + "\n")
    print(f"wrote {agg} ({len(rows)} cells)")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    """Analytic-vs-finite-difference gate on small random networks."""
    rng = RngState(cfg["seed"]).substream("gradcheck")
    nets = 20
    h = 1e-4
    worst = 0.0
    checked = 0
    skipped = 0
    for t in range(nets):
        params = model.init_gaussian(rng.substream(f"net/{t}"), 4, 6, 16, 16,
                                     0.1 / 6, "residual")
        x = rng.substream(f"x/{t}").standard_normal(4)
        x /= np.linalg.norm(x)
        trace = model.forward(params, x)
        entry_rng = rng.substream(f"entries/{t}")
        for l in range(1, params.depth + 2):
            g = lossgrad.output_gradient(params, trace, l)
            rows_n, cols_n = g.shape
            for _ in range(3):
                i = int(entry_rng.integers(0, rows_n))
                j = int(entry_rng.integers(0, cols_n))
                if lossgrad.perturbation_flips(params, x, l, i, j, h):
                    skipped += 1
                    continue
                fd = lossgrad.finite_diff_oracle(params, x, l, i, j, h)
                scale = max(abs(fd), abs(g[i, j]), 1e-12)
                worst = max(worst, abs(fd - g[i, j]) / scale)
                checked += 1
    ok = worst <= 1e-5 and checked > 0
    print(f"gradcheck: {checked} flip-free entries, {skipped} skipped, "
          f"worst relative error {worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_report(cfg) -> int:
    out = cfg["out"]
    if not os.path.isdir(out):
        raise FileNotFoundError(f"output directory {out} not found")
    names = sorted(fn for fn in os.listdir(out) if fn.endswith(".report.json"))
    if not names:
        raise FileNotFoundError(f"no .report.json files under {out}")
    lines = ["# Probe summary", "", "| probe | verdict | fitted constant | measured |",
             "|---|---|---|---|"]
    for fn in names:
        with open(os.path.join(out, fn), "r", encoding="utf-8") as fh:
            rep = json.load(fh)
        measured = "; ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                             for k, v in sorted(rep["measured"].items())
                             if not isinstance(v, dict))
        fit = rep["constant_fit"]
        fit_str = f"{fit:.4g}" if isinstance(fit, float) else str(fit)
        lines.append(f"| {rep['name']} | {rep['verdict']} | {fit_str} | {measured} |")
    path = os.path.join(out, "report.md")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="reslab",
                     description="Residual-network training and bound-probing lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--arch", choices=["residual", "plain"], default=None)
        p.add_argument("--data", default=None, help="dataset file path")
        p.add_argument("--checkpoint", default=None, help="network checkpoint path")
        p.add_argument("--probes", default=None,
                       help="comma-separated probe names or 'all'")
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--K", type=int, default=None)
        p.add_argument("--gamma", type=float, default=None)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--L", type=int, default=None)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items()
                     if k not in ("command", "config")}
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.InfeasibleMarginError, data.DegenerateTeacherError) as exc:
        print(f"data generation infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, data.DataFormatError, data.DataInvariantError,
            model.CheckpointFormatError, model.ConfigError,
            model.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except trainer.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
