"""``absorbmc`` command line: figure-data sweeps written as CSV and JSON.

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence,
4 domain or validity error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import ENV_VAR, max_workers
from .closed_form import p_any
from .concentration import DivergentRegimeError, conc_instant, conc_steady, steady_state_validity
from .config import ConfigError, ExperimentConfig, load_config
from .lattice_walk import (
    AbsorberSpec,
    Convention,
    build_chain,
    monte_carlo,
    occupancy_at,
    reachable_steps,
)
from .model_fit import (
    FREE_DIFFUSION,
    FitParams,
    ParamTable,
    build_param_table,
    dump_tables,
    load_tables,
    model_eval,
    normalized_rmse,
)
from .receptor_queue import QueueSolution, ReceptorSpec, sweep_queue

log = logging.getLogger("absorbmc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_DOMAIN = 4

COMMANDS = ("walk", "fit", "concentration", "queue")


@dataclass
class Result:
    files: dict[str, str] = field(default_factory=dict)
    figures: dict = field(default_factory=dict)
    status: int = EXIT_OK
    notes: list[str] = field(default_factory=list)

    def worsen(self, code: int):
        # non-convergence outranks a domain problem in the final exit code
        if code == EXIT_NONCONVERGENCE or self.status == EXIT_OK:
            self.status = code


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        # shortest repr that round-trips exactly
        return repr(float(v))
    return str(v)


def to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _coords(prefix: str, d: int) -> list[str]:
    return [prefix] if d == 1 else [f"{prefix}{i + 1}" for i in range(d)]


def _label(site) -> str:
    return "(" + ",".join(str(c) for c in site) + ")" if len(site) > 1 else str(site[0])


def _case_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])


def cmd_walk(cfg: ExperimentConfig) -> Result:
    wc = cfg.walk
    d = wc.dimension
    conv = cfg.convention
    obs = cfg["observation"]
    walkers = cfg["monte_carlo"]["walkers"]
    cases = [(x, m, q) for x in cfg.observation_sites() for m in cfg.absorber_sites(x) for q in cfg["absorber"]["q"]]

    def one(item):
        i, (x, m, q) = item
        n_list = reachable_steps(x, obs["n_max"], obs["n_min"])
        chain = build_chain(wc, AbsorberSpec(m, q), obs["radius"], conv, n_max=obs["n_max"], observe=x)
        series = occupancy_at(chain, x, n_list)
        mc = None
        if walkers:
            mc = monte_carlo(wc, AbsorberSpec(m, q), x, n_list, walkers, _case_seed(cfg.seed, i), conv)
        return series, mc

    with ThreadPoolExecutor(max_workers()) as pool:
        out = list(pool.map(one, enumerate(cases)))

    header = _coords("m", d) + ["q", "convention", "n", "t"] + _coords("x", d) + ["probability", "leakage"]
    if d == 1:
        header.append("closed_form")
    if walkers:
        header += ["mc_probability", "mc_stderr"]
    rows = []
    series_plot = []
    for (x, m, q), (s, mc) in zip(cases, out):
        for k, n in enumerate(s.n):
            row = list(m) + [q, conv.value, int(n), float(wc.time(int(n)))] + list(x) + [s.probability[k], s.leakage]
            if d == 1:
                cf = None
                if x[0] != 0 or n == 0:
                    cf = p_any(x[0], int(n), wc.p, q, m[0], charge_arrival=conv is Convention.APPLY_ON_ENTRY)
                row.append(cf)
            if walkers:
                row += [mc.probability[k], mc.stderr[k]]
            rows.append(row)
        series_plot.append((f"x={_label(x)} m={_label(m)} q={q:g}", s.n, s.probability))
    res = Result(files={"walk.csv": to_csv(header, rows)})
    res.figures["walk.png"] = ("walk", series_plot)
    return res


def _tables(cfg: ExperimentConfig, cases, res: Result, with_data: bool = False):
    """Parameter tables for ``cases`` ((x, m) pairs), loaded or fitted."""
    wc = cfg.walk
    path = cfg["param_table"]
    if path:
        try:
            loaded = load_tables(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("param_table", f"cannot read {path}: {exc.strerror}") from exc
        except ValueError as exc:
            raise ConfigError("param_table", str(exc)) from exc
        by_case = {(t.site, t.absorber): t for t in loaded}
        missing = [c for c in cases if c not in by_case]
        if missing:
            raise ConfigError("param_table", f"no table for (x, m) = {missing[0]}")
        tables = [by_case[c] for c in cases]
        for t in tables:
            if t.dimension != wc.dimension:
                raise ConfigError("param_table", f"table dimension {t.dimension} != walk.dimension {wc.dimension}")
        return (tables, [None] * len(tables)) if with_data else tables
    fit_cfg = cfg["fit"]
    tables, datasets = [], []
    for x, m in cases:
        window = reachable_steps(x, fit_cfg["n_max"], 1) if fit_cfg["n_max"] else None
        table, data = build_param_table(
            wc,
            x,
            m,
            fit_cfg["q_grid"],
            window,
            convention=cfg.convention,
            restarts=fit_cfg["restarts"],
            seed=cfg.seed,
            return_data=True,
        )
        if not all(p.converged for p in table.params):
            res.worsen(EXIT_NONCONVERGENCE)
            res.notes.append(f"fit did not converge for some q at x={x}, m={m}")
        tables.append(table)
        datasets.append(data)
    return (tables, datasets) if with_data else tables


def cmd_fit(cfg: ExperimentConfig) -> Result:
    d = cfg.walk.dimension
    res = Result()
    tables, datasets = _tables(cfg, cfg.fit_cases(), res, with_data=True)
    head = _coords("x", d) + _coords("m", d)
    fit_rows, curve_rows = [], []
    curves = []
    for table, data in zip(tables, datasets):
        for k, (q, p) in enumerate(zip(table.q, table.params)):
            nrmse = normalized_rmse(p, data[k]) if data and data[k] is not None else None
            fit_rows.append(
                list(table.site) + list(table.absorber)
                + [q, p.alpha, p.beta, p.gamma, p.beta_prime, p.sse, nrmse, p.iterations, p.converged]
            )
            if data and data[k] is not None:
                ds = data[k]
                model = model_eval(p, ds.r, ds.t.astype(float), ds.cfg.D, d)
                for n, t, y, f in zip(ds.n, ds.t, ds.target, model):
                    curve_rows.append(list(table.site) + list(table.absorber) + [q, int(n), float(t), y, f])
                curves.append((f"x={_label(table.site)} m={_label(table.absorber)} q={q:g}", ds.n, ds.target, model))
    res.files["params.json"] = dump_tables(tables)
    res.files["fit.csv"] = to_csv(
        head + ["q", "alpha", "beta", "gamma", "beta_prime", "sse", "nrmse", "iterations", "converged"], fit_rows
    )
    if curve_rows:
        res.files["curves.csv"] = to_csv(head + ["q", "n", "t", "target", "fitted"], curve_rows)
    res.figures["params.png"] = ("params", tables)
    if curves:
        res.figures["curves.png"] = ("curves", curves)
    return res


def _params_at(cfg: ExperimentConfig, table: ParamTable, k: int) -> tuple[FitParams, str]:
    p = table.params[k]
    if table.q[k] == 0.0 and cfg["emission"]["exact_free_endpoint"]:
        f = FREE_DIFFUSION
        return FitParams(f.alpha, f.beta, f.gamma, table.distance), "free-diffusion"
    return p, "fit"


def cmd_concentration(cfg: ExperimentConfig) -> Result:
    wc = cfg.walk
    d, D = wc.dimension, wc.D
    em = cfg["emission"]
    res = Result()
    tables = _tables(cfg, cfg.fit_cases(), res)
    head = _coords("x", d) + _coords("m", d) + ["r", "q", "source", "alpha", "beta", "gamma"]
    rows = []
    plot = []
    if em["mode"] == "continuous-constant":
        for table in tables:
            r = wc.distance(table.site)
            qs, cs = [], []
            for k, q in enumerate(table.q):
                p, source = _params_at(cfg, table, k)
                v = steady_state_validity(p, d)
                try:
                    c, status = conc_steady(p, em["Q"], r, D, d), "ok"
                    qs.append(q)
                    cs.append(c)
                except DivergentRegimeError:
                    c, status = None, "divergent"
                rows.append(
                    list(table.site) + list(table.absorber)
                    + [r, q, source, p.alpha, p.beta, p.gamma, v.shape, status, em["Q"], c]
                )
            plot.append((table, qs, cs))
        res.files["concentration.csv"] = to_csv(head + ["shape", "status", "Q", "concentration"], rows)
    else:
        obs = cfg["observation"]
        for table in tables:
            r = wc.distance(table.site)
            n_list = reachable_steps(table.site, obs["n_max"], max(obs["n_min"], 1))
            for k, q in enumerate(table.q):
                p, source = _params_at(cfg, table, k)
                conc = conc_instant(p, em["N"], r, wc.time(n_list).astype(float), D, d)
                for n, c in zip(n_list, np.atleast_1d(conc)):
                    rows.append(
                        list(table.site) + list(table.absorber)
                        + [r, q, source, p.alpha, p.beta, p.gamma, int(n), float(wc.time(int(n))), em["N"], c]
                    )
        res.files["concentration.csv"] = to_csv(head + ["n", "t", "N", "concentration"], rows)
    res.files["params.json"] = dump_tables(tables)
    if plot:
        res.figures["concentration.png"] = ("concentration", plot)
    return res


def cmd_queue(cfg: ExperimentConfig) -> Result:
    wc = cfg.walk
    d, D = wc.dimension, wc.D
    rc = cfg["receptor"]
    res = Result()
    sites = cfg.receptor_sites()
    tables = _tables(cfg, [(s, s) for s in sites], res)
    by_site = {t.site: t for t in tables}
    specs = [ReceptorSpec(T, s, rc["kappa"]) for s in sites for T in rc["T_trafficking"]]
    Q_grid = cfg.Q_grid()
    sols = sweep_queue(Q_grid, specs, by_site, D, d, tol=rc["tol"], max_iter=rc["max_iter"], omega=rc["damping"])
    header = _coords("m", d) + ["T_trafficking", "mu", "kappa", "Q", "status", "q", "lambda_in", "lambda_a", "p_b"]
    header += ["iterations", "residual", "method", "message"]
    rows = []
    jobs = [(s, Q) for s in specs for Q in Q_grid]
    for (spec, Q), sol in zip(jobs, sols):
        base = list(spec.site) + [spec.T_trafficking, spec.mu, spec.kappa, Q]
        if isinstance(sol, QueueSolution):
            status = "ok" if sol.converged else "not-converged"
            if not sol.converged:
                res.worsen(EXIT_NONCONVERGENCE)
            rows.append(
                base + [status, sol.q, sol.lambda_in, sol.lambda_a, sol.p_b, sol.iterations, sol.residual, sol.method, None]
            )
        else:
            res.worsen(EXIT_DOMAIN)
            rows.append(base + ["domain-error", None, None, None, None, None, None, None, str(sol)])
    res.files["queue.csv"] = to_csv(header, rows)
    res.files["params.json"] = dump_tables(tables)
    res.figures["queue.png"] = ("queue", (jobs, sols))
    if res.status == EXIT_DOMAIN:
        res.notes.append("some (T_trafficking, Q) pairs have no fixed point inside the parameter table")
    return res


RUNNERS = {"walk": cmd_walk, "fit": cmd_fit, "concentration": cmd_concentration, "queue": cmd_queue}


def metadata(command: str, cfg: ExperimentConfig, res: Result) -> str:
    wc = cfg.walk
    doc = {
        "command": command,
        "preset": cfg.preset,
        "seed": cfg.seed,
        "version": __version__,
        "units": {
            "system": "lattice",
            "delta": wc.delta,
            "tau": wc.tau,
            "D": wc.D,
            "note": "lengths in units of delta, times in units of tau, D = delta^2 / (2 d tau); "
            "rates are per tau. Physical axes (ns, molecule/ns) are not reproduced.",
        },
        "exit_status": res.status,
        "notes": res.notes,
        "files": sorted(res.files),
        "config": json.loads(cfg.to_json()),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="absorbmc",
        description="Random walk with a probabilistic absorber: occupancy, channel fits, "
        "concentration and receptor queue sweeps.",
        epilog=f"{ENV_VAR} caps worker threads (0 or unset = all cores).",
    )
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config (default: bundled figure presets)")
    ap.add_argument("--preset", help="name of a preset in the config's presets section")
    ap.add_argument("--seed", type=_u64, help="override the config seed")
    ap.add_argument("--out", help="output directory (default: config output.dir)")
    ap.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSV files")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _write(out: Path, res: Result, plot: bool, command: str, cfg: ExperimentConfig):
    out.mkdir(parents=True, exist_ok=True)
    for name, text in res.files.items():
        (out / name).write_text(text)
    if plot:
        from .plotting import draw

        for name, payload in res.figures.items():
            draw(out / name, payload, cfg)
    (out / "metadata.json").write_text(metadata(command, cfg, res))


def run(command: str, cfg: ExperimentConfig, out: Path, plot: bool = False) -> Result:
    """Run ``command`` and write its files (and figures) into ``out``."""
    res = RUNNERS[command](cfg)
    _write(out, res, plot, command, cfg)
    return res


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        max_workers()
        cfg = load_config(args.config, args.preset)
        wanted = cfg.raw.get("command")
        if wanted is not None and wanted != args.command:
            raise ConfigError("command", f"config is for {wanted!r}, not {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"absorbmc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = ExperimentConfig({**cfg.raw, "seed": args.seed}, cfg.preset)
    out = Path(args.out or cfg["output"]["dir"])
    try:
        res = run(args.command, cfg, out, args.plot or cfg["output"]["plot"])
    except ConfigError as exc:
        print(f"absorbmc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"absorbmc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except ValueError as exc:
        # library domain and validity errors (truncation, divergence, table range)
        print(f"absorbmc: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    for note in res.notes:
        print(f"absorbmc: {note}", file=sys.stderr)
    return res.status


if __name__ == "__main__":
    sys.exit(main())
