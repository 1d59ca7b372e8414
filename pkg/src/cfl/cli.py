"""Command-line entry point: ``cfl <subcommand> ...``.

Exit codes: 0 success, 1 invalid configuration or usage, 2 numerical failure.
Every run writes ``run_manifest.json`` into its ``--out`` directory; passing
that manifest back as ``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._common import SCHEMA_VERSION, ConfigError, NumericalError, read_json, write_csv, write_json

log = logging.getLogger("cfl")

MANIFEST = "run_manifest.json"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- helpers ------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = read_json(p)
    except ValueError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    if "subcommand" in cfg and "config" in cfg:  # a run manifest
        cfg = cfg["config"]
    return dict(cfg)


def _digest(path: Path) -> dict:
    path = Path(path)
    files = sorted(f for f in path.rglob("*") if f.is_file()) if path.is_dir() else [path]
    out = {}
    for f in files:
        if f.name == MANIFEST:
            continue
        out[str(f)] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


class _Run:
    """Collects resolved config, inputs and outputs; writes the manifest."""

    def __init__(self, subcommand: str, out: Path):
        self.subcommand = subcommand
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config: dict = {}
        self.seed = None
        self.inputs: dict = {}
        self.outputs: list[str] = []
        self.t0 = time.time()
        self.started = datetime.now(timezone.utc).isoformat()

    def add_input(self, path):
        if path is not None and Path(path).exists():
            self.inputs.update(_digest(Path(path)))

    def csv(self, name, header, rows):
        write_csv(self.out / name, header, rows)
        self.outputs.append(name)

    def json(self, name, obj):
        write_json(self.out / name, {"schema_version": SCHEMA_VERSION, **obj})
        self.outputs.append(name)

    def finish(self, status: str = "ok"):
        write_json(self.out / MANIFEST, {
            "schema_version": SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "tool_version": __version__,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "status": status,
            "wall_clock": {"started": self.started, "seconds": round(time.time() - self.t0, 3)},
        })


def _load_state(checkpoint):
    from .discovery import DiscoveryState
    from .model import load_checkpoint

    ext, head, ck = load_checkpoint(checkpoint)
    return DiscoveryState(ext, head), ck


def _load_domains(data, ck=None):
    """Panels from a simulation directory; returns (panels, scm manifest or None)."""
    from .scm import read_simulation

    p = Path(data)
    if not p.exists():
        raise ConfigError(f"data path not found: {p}")
    if not (p / "scm_manifest.json").exists():
        raise ConfigError(f"{p} is not a simulation directory (no scm_manifest.json)")
    panels, manifest = read_simulation(p)
    if ck is not None and ck.get("scaler"):
        from .data import MinMaxScaler
        from .panel import DomainPanel

        sc = MinMaxScaler.from_dict(ck["scaler"])
        panels = [DomainPanel(q.domain_id, sc.transform(q.inputs), q.labels, q.role, q.meta) for q in panels]
    return panels, manifest


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(args, run: _Run):
    from .data import RawPanel, write_panel_csv
    from .scm import ScmConfig, sample_drift_ladder, sample_factor_scm, simulate_market, write_simulation

    cfg = _load_config(args.config)
    market = cfg.pop("market", None)
    ladder = cfg.pop("ladder", None)
    scm = ScmConfig.from_dict(cfg)
    run.config = {**scm.to_dict(), **({"market": market} if market else {}), **({"ladder": ladder} if ladder else {})}
    run.seed = scm.seed
    run.add_input(args.config)
    if market:
        df = simulate_market(scm, **market)
        write_panel_csv(RawPanel(df), run.out / "panel.csv")
        run.outputs.append("panel.csv")
        return
    if ladder:
        panels, truth = sample_drift_ladder(scm, **ladder)
    else:
        panels, truth = sample_factor_scm(scm)
    manifest = write_simulation(run.out, scm, panels, truth)
    run.outputs += [d["file"] for d in manifest["domains"]] + ["scm_manifest.json"]


def _panel_domains(path, pcfg: dict):
    from .data import build_domain_panels, compute_labels, load_panel_csv, minmax_scale, partition_days, select_universe

    raw = compute_labels(load_panel_csv(path))
    if pcfg.get("top_n"):
        raw = select_universe(raw, int(pcfg["top_n"]))
    part = partition_days(raw.days, pcfg.get("days_per_domain", 5), pcfg.get("train_days", 300),
                          pcfg.get("val_days", 50))
    panels = build_domain_panels(raw, part)
    return minmax_scale(panels)


_DATA_FLAGS = ("days_per_domain", "train_days", "val_days", "top_n")


def _data_flags(args) -> dict:
    """Panel-partition flags given on the command line; they override the config file."""
    return {k: getattr(args, k) for k in _DATA_FLAGS if getattr(args, k, None) is not None}


def _add_data_flags(p):
    p.add_argument("--days-per-domain", type=int, dest="days_per_domain")
    p.add_argument("--train-days", type=int, dest="train_days")
    p.add_argument("--val-days", type=int, dest="val_days")
    p.add_argument("--top-n", type=int, dest="top_n", help="keep the N largest stocks by market cap each day")


def cmd_train(args, run: _Run):
    from .discovery import DiscoveryConfig, DivergenceError, train
    from .model import save_checkpoint

    cfg = _load_config(args.config)
    pcfg = cfg.pop("panel", None)
    flags = _data_flags(args)
    if flags:
        pcfg = {**(pcfg or {}), **flags}
    dcfg = DiscoveryConfig.from_dict(cfg)
    run.config = {**dcfg.to_dict(), **({"panel": pcfg} if pcfg is not None else {})}
    run.seed = dcfg.seed
    run.add_input(args.config)
    run.add_input(args.data)
    scaler = None
    if Path(args.data).is_file():
        panels, sc = _panel_domains(args.data, pcfg or {})
        scaler = sc.to_dict()
    else:
        panels, _ = _load_domains(args.data)
    try:
        state = train(panels, dcfg)
    except DivergenceError as exc:
        if exc.state is not None:
            save_checkpoint(run.out / "checkpoint_last_finite.json", exc.state.extractor, exc.state.head, scaler)
            run.outputs.append("checkpoint_last_finite.json")
        raise
    save_checkpoint(run.out / "checkpoint.json", state.extractor, state.head, scaler, extra={
        "epoch": state.epoch, "best_val_mse": state.best_val_mse,
        "coefficient_cache": {str(k): v for k, v in sorted(state.coef_cache.items())},
    })
    run.outputs.append("checkpoint.json")
    cols = ["epoch", "loss", "res", "inv", "alig", "val_mse", "xi_prime"]
    run.csv("losses.csv", cols, ([h[c] for c in cols] for h in state.history))
    run.csv("xi_prime.csv", ["step", "xi_prime"], ((i, float(x)) for i, x in enumerate(state.xi_trajectory)))


def cmd_eval_bound(args, run: _Run):
    from .evaluate import (check_prop1, effective_deltas, estimate_lambda_star, prop1_rhs,
                           relative_deviation_state, theorem1_report)
    from .scm import measure_generalizability

    cfg = {"batches": 10, "batch_size": 200, "seed": 0, "lambda_model": "linear", "holdout": 0.25,
           "loss_kinds": ["absolute", "squared"], **_load_config(args.config)}
    run.config, run.seed = cfg, cfg["seed"]
    run.add_input(args.config)
    run.add_input(args.checkpoint)
    run.add_input(args.data)
    state, ck = _load_state(args.checkpoint)
    panels, sim = _load_domains(args.data, ck)
    src = [p for p in panels if p.role == "source"]
    val = [p for p in panels if p.role == "validation"]
    oos = [p for p in panels if p.role == "oos"]
    if not src or not oos:
        raise ConfigError("eval-bound needs source and oos domains")
    oos = oos[-1]
    reports, lams = [], {}
    for kind in cfg["loss_kinds"]:
        lam = estimate_lambda_star(src, oos, model=cfg["lambda_model"], loss_kind=kind, holdout=cfg["holdout"],
                                   seed=cfg["seed"])
        rep = theorem1_report(state.predict, src, oos, lam.value, kind, cfg["batches"], cfg["batch_size"], cfg["seed"])
        lams[kind] = {"value": lam.value, "oos_error": lam.oos_error, "source_error_mean": lam.source_error_mean,
                      "protocol": lam.protocol}
        reports.append(rep)
    out = {
        "architecture": state.extractor.spec(), "K_tilde": state.extractor.K_tilde,
        "reports": [r.to_dict() for r in reports], "lambda_star": lams,
    }
    if val:
        out["relative_deviation"] = relative_deviation_state(state, val).value
    if sim is not None:
        F = sim["F_tilde"]
        resid = sim["mean_abs_residual"]
        ids = [str(p.domain_id) for p in src]
        g = measure_generalizability([F[i] for i in ids], [[resid[i]] for i in ids], F[str(oos.domain_id)],
                                     [resid[str(oos.domain_id)]])
        d_f, d_e = effective_deltas(g)
        term = next(r.wasserstein_term for r in reports)
        ok, slack = check_prop1(term, d_e, d_f, state.extractor.K_tilde)
        out["prop1"] = {"delta_f": d_f, "delta_eps": d_e, "rhs": prop1_rhs(d_e, d_f, state.extractor.K_tilde),
                        "wasserstein_term": term, "holds_with_allowance": ok, "slack": slack}
    run.json("bound.json", out)
    run.csv("bound.csv", ["loss_kind", "source_error_mean", "wasserstein_term", "lambda_star_estimate", "rhs_total",
                          "oos_error", "holds"],
            ([r.loss_kind, r.source_error_mean, r.wasserstein_term, r.lambda_star_estimate, r.rhs_total, r.oos_error,
              int(r.holds)] for r in reports))


def cmd_eval_wasserstein(args, run: _Run):
    from .ot import wasserstein_term

    cfg = {"batches": 25, "batch_size": 200, "seed": 0, **_load_config(args.config)}
    for key in ("batches", "batch_size", "seed"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    run.config, run.seed = cfg, cfg["seed"]
    run.add_input(args.config)
    run.add_input(args.checkpoint)
    run.add_input(args.data)
    state, ck = _load_state(args.checkpoint)
    panels, _ = _load_domains(args.data, ck)
    cloud = {p.domain_id: np.column_stack([state.predict(p.inputs), p.labels]) for p in panels}
    src = {p.domain_id: cloud[p.domain_id] for p in panels if p.role == "source"}
    val = {p.domain_id: cloud[p.domain_id] for p in panels if p.role == "validation"}
    res = wasserstein_term(src, val, cfg["batches"], cfg["batch_size"], cfg["seed"])
    run.csv("wasserstein_pairs.csv", ["source_domain", "val_domain", "batch_idx", "w1"], res.table)
    val_mae = float(np.mean([np.mean(np.abs(c[:, 0] - c[:, 1])) for c in val.values()]))
    run.json("wasserstein_summary.json", {
        "term": res.term, "per_source": res.per_source, "batches": res.batches, "batch_size": res.batch_size,
        "resampled_domains": res.resampled, "validation_mae": val_mae, "K_tilde": state.extractor.K_tilde,
    })


def cmd_backtest(args, run: _Run):
    from .backtest import BacktestConfig, baseline_trainer, discovery_trainer, rolling_backtest
    from .data import compute_labels, load_panel_csv, select_universe
    from .discovery import DiscoveryConfig

    cfg = _load_config(args.config)
    flags = _data_flags(args)
    if "top_n" in flags:
        cfg["top_n"] = flags.pop("top_n")
    bt = {**cfg.get("backtest", {}), **flags}
    if "train_days" in flags or "val_days" in flags:
        d = BacktestConfig()
        bt["window_days"] = bt.get("train_days", d.train_days) + bt.get("val_days", d.val_days)
    bcfg = BacktestConfig.from_dict(bt)
    dcfg = DiscoveryConfig.from_dict(cfg.get("discovery", {}))
    trainer_name = cfg.get("trainer", "discovery")
    if trainer_name not in ("discovery", "baseline"):
        raise ConfigError(f"unknown trainer {trainer_name!r}")
    extra = set(cfg) - {"backtest", "discovery", "trainer", "start_date", "n_days", "top_n"}
    if extra:
        raise ConfigError(f"unknown backtest config keys: {sorted(extra)}")
    run.config = {"backtest": bcfg.to_dict(), "discovery": dcfg.to_dict(), "trainer": trainer_name,
                  "start_date": cfg.get("start_date"), "n_days": cfg.get("n_days"), "top_n": cfg.get("top_n")}
    run.seed = dcfg.seed
    run.add_input(args.config)
    run.add_input(args.data)
    raw = compute_labels(load_panel_csv(args.data))
    if cfg.get("top_n"):
        raw = select_universe(raw, int(cfg["top_n"]))
    days = raw.days
    start = cfg.get("start_date")
    if start is None:
        need = bcfg.window_days + bcfg.label_purge_days
        if len(days) <= need:
            raise ConfigError(f"panel has {len(days)} labeled days; more than {need} are needed")
        start = str(days[need])[:10]
        run.config["start_date"] = start
    trainer = discovery_trainer(dcfg) if trainer_name == "discovery" else baseline_trainer(dcfg)
    rep = rolling_backtest(raw, start, cfg=bcfg, trainer=trainer, n_days=cfg.get("n_days"))
    run.csv("equity.csv", ["date", "return", "equity"], rep.curve_rows())
    summary = rep.summary()
    summary.update(trainer=trainer_name, architecture=dcfg.architecture,
                   K_tilde=dcfg.K_tilde if trainer_name == "discovery" else 1)
    run.json("backtest_report.json", summary)
    if rep.failed:
        raise NumericalError(rep.failed)


def cmd_nonstat(args, run: _Run):
    from .evaluate import NonstatProbeConfig, run_nonstat_probe

    cfg = NonstatProbeConfig.from_dict(_load_config(args.config))
    run.config, run.seed = cfg.to_dict(), cfg.seed
    run.add_input(args.config)
    res = run_nonstat_probe(cfg)
    run.csv("jt_samples.csv", ["T", "draw", "J_T"],
            ((T, i, float(v)) for T in cfg.candidate_T for i, v in enumerate(res.samples[T])))
    run.csv("tail_probabilities.csv", ["T", "tau", "prob", "suffix_min"], res.table.rows())
    run.csv("argmin_T.csv", ["tau", "argmin_T"], ((float(t), T) for t, T in zip(res.table.taus, res.table.argmin_T)))
    smallest = sum(T == cfg.candidate_T[0] for T in res.table.argmin_T)
    run.json("nonstat_summary.json", {
        "argmin_at_smallest_T": smallest, "n_tau": len(res.table.taus),
        "mean_J_T": {T: float(np.mean(v)) for T, v in res.samples.items()},
    })


def _mean_std(vals):
    v = np.array([x for x in vals if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def cmd_report(args, run: _Run):
    dirs = [Path(d) for d in args.runs]
    run.config = {"runs": [str(d) for d in dirs]}
    manifests = []
    for d in dirs:
        if not d.is_dir():
            raise ConfigError(f"run directory not found: {d}")
        found = sorted(d.rglob(MANIFEST))
        if not found:
            raise ConfigError(f"no {MANIFEST} under {d}")
        for m in found:
            if m.parent.resolve() == run.out.resolve():
                continue
            manifests.append((m.parent, read_json(m)))
    if not manifests:
        raise ConfigError("no runs to report on")
    versions = {m.get("schema_version") for _, m in manifests}
    if len(versions) != 1:
        raise ConfigError(f"runs mix incompatible schema versions: {sorted(map(str, versions))}")

    perf, scatter, rd, tails = {}, [], [], []
    for path, m in manifests:
        sub = m["subcommand"]
        if sub == "backtest":
            rep = read_json(path / "backtest_report.json")
            key = (rep["trainer"], rep["architecture"], rep["K_tilde"])
            perf.setdefault((*key, "all"), []).append((rep.get("sharpe"), rep.get("cagr")))
            for p in rep["periods"]:
                perf.setdefault((*key, p["update_date"]), []).append((p.get("sharpe"), p["total_return"]))
        elif sub == "eval-bound":
            b = read_json(path / "bound.json")
            for r in b["reports"]:
                scatter.append((str(path), b["K_tilde"], r["loss_kind"], r["wasserstein_term"], r["oos_error"]))
            if "relative_deviation" in b:
                rd.append((str(path), b["K_tilde"], b["relative_deviation"]))
        elif sub == "nonstat":
            from ._common import read_csv

            _, rows = read_csv(path / "tail_probabilities.csv")
            tails += [(str(path), int(T), float(tau), float(p)) for T, tau, p, _ in rows]
        run.add_input(path)

    rows = []
    for (trainer, arch, k, period), vals in sorted(perf.items(), key=lambda kv: tuple(map(str, kv[0]))):
        sm, ss = _mean_std(v[0] for v in vals)
        cm, cs = _mean_std(v[1] for v in vals)
        rows.append([trainer, arch, k, period, len(vals), sm if sm is not None else "", ss if ss is not None else "",
                     cm if cm is not None else "", cs if cs is not None else ""])
    if rows:
        run.csv("performance_table.csv", ["trainer", "architecture", "K_tilde", "period", "n_runs", "sharpe_mean",
                                          "sharpe_std", "cagr_or_return_mean", "cagr_or_return_std"], rows)
    if scatter:
        run.csv("wasserstein_vs_oos_error.csv", ["run", "K_tilde", "loss_kind", "wasserstein_term", "oos_error"],
                scatter)
    if rd:
        run.csv("relative_deviation_by_ktilde.csv", ["run", "K_tilde", "relative_deviation"], rd)
    if tails:
        run.csv("tail_probability_bars.csv", ["run", "T", "tau", "prob"], tails)
    run.json("report.json", {"runs": [{"dir": str(p), "subcommand": m["subcommand"]} for p, m in manifests],
                             "tables": list(run.outputs)})


# -- dispatch ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cfl", description="Causal feature learning toolkit")
    ap.add_argument("--version", action="version", version=f"cfl {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a synthetic SCM (or market panel) and write it to --out")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the causal-discovery model")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="simulation directory or panel CSV")
    p.add_argument("--out", required=True)
    _add_data_flags(p)

    p = sub.add_parser("eval-bound", help="bound terms, lambda* estimate and relative deviation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-wasserstein", help="batch-averaged W1 between source and validation domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("backtest", help="rolling rank-portfolio backtest on a panel CSV")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_data_flags(p)

    p = sub.add_parser("nonstat", help="tail probabilities of the ideal joint error across horizons")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="aggregate run directories into tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval-bound": cmd_eval_bound,
    "eval-wasserstein": cmd_eval_wasserstein,
    "backtest": cmd_backtest,
    "nonstat": cmd_nonstat,
    "report": cmd_report,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        run = _Run(args.command, Path(args.out))
        COMMANDS[args.command](args, run)
    except (ConfigError, OSError) as exc:
        print(f"cfl {args.command}: error: {exc}", file=sys.stderr)
        if run is not None:
            run.finish("config_error")
        return 1
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"cfl {args.command}: numerical failure: {exc}", file=sys.stderr)
        if run is not None:
            run.finish("numerical_error")
        return 2
    run.finish()
    return 0


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)
