"""
Ridge two-way fixed effects on sparse worker-firm networks
---------------------------------------------------------------------------

Command-line front end: simulate block-model networks, estimate OLS and
ridge fixed effects, decompose outcome variance, cross-validate the
penalties and check concentration bounds. Anything beyond paths, seed
and verbosity is read from a JSON config.
"""

import argparse
import glob
import json
import logging
import os
import signal
import sys

from rich.console import Console
from rich.progress import Progress
from rich.table import Table

from ridge_twfe import __version__
from ridge_twfe import pipeline
from ridge_twfe.config import header_line, load_config, normalize_run_config
from ridge_twfe.csv_report import CSVReport, read_panel_csv
from ridge_twfe.errors import ConfigError, RidgeTwfeError
from ridge_twfe.estimator import restrict_panel
from ridge_twfe.graph import largest_component
from ridge_twfe.main_logger import LOGGER_NAME, configure_logging

log = logging.getLogger(LOGGER_NAME)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INAPPLICABLE = 4

DECOMPOSITION_COLUMNS = ["estimator", "share_worker", "share_firm", "share_2cov", "share_residual", "fe_corr", "oos_mse", "lw_norm", "lf_norm"]
CV_COLUMNS = ["lambda_w", "lambda_f", "oos_mse"]
BOUND_COLUMNS = ["theorem", "name", "side", "replication", "deviation", "bound"]
REPORT_FILE = "report.txt"


def signal_handler(sig, frame):
    print("\nGoodbye\n")
    sys.exit(0)


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        prog="ridge-twfe",
        description="Ridge and OLS two-way fixed effects on sparse bipartite worker-firm networks.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-c",
        "--config",
        default=None,
        help="JSON run config. Missing keys take their defaults (desk-scale preset).",
    )
    common.add_argument(
        "-o",
        "--output-dir",
        default=".",
        help="Directory for output files (default: current directory).",
    )
    common.add_argument(
        "-s",
        "--seed",
        type=int,
        default=None,
        help="Master seed; overrides the seed in the config.",
    )
    common.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        default=False,
        help="Log solver and sampling details (default: False).",
    )
    common.add_argument(
        "-l",
        "--log-to-file",
        action="store_true",
        default=False,
        help="Write console log to <output-dir>/logs as well (default: False).",
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="Draw a block-model network and outcomes; write graph, assignment, panel and summary.")
    estimate = sub.add_parser("estimate", parents=[common], help="Fit OLS, debiased OLS or ridge effects on a panel.")
    estimate.add_argument(
        "-i",
        "--input",
        default=None,
        help="Panel CSV with worker_id,firm_id,y columns. Without it a panel is simulated from the config.",
    )
    sub.add_parser("decompose", parents=[common], help="Variance decomposition table for true, OLS, debiased OLS and ridge.")
    sub.add_parser("cv", parents=[common], help="Cross-validate (lambda_w, lambda_f) on a grid.")
    sub.add_parser("bounds", parents=[common], help="Monte Carlo check of the concentration bounds.")
    sub.add_parser("report", parents=[common], help="Render the JSON summaries in the output directory.")

    return parser.parse_args(argv)


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_simulate(cfg, output_dir):
    sim = pipeline.simulate_from_config(cfg)
    with CSVReport(cfg, output_dir) as report:
        report.write_graph("graph.csv", sim.panel.graph, sim.panel.worker_ids, sim.panel.firm_ids, mapping_filename="graph_mapping.csv")
        report.write_graph("graph_full.csv", sim.graph)
        report.write_assignment("assignment.csv", sim.assignment)
        report.write_panel("panel.csv", sim.panel)
        report.write_json("summary.json", {"network": sim.summary})
    return EXIT_OK


def _estimation_panel(cfg):
    if "input" not in cfg:
        return pipeline.simulate_from_config(cfg).panel
    panel = read_panel_csv(cfg["input"])
    if cfg["largest_component"]:
        selection = largest_component(panel.graph)
        panel = restrict_panel(panel, selection.mapping)
        log.info("largest component: n=%d p=%d N=%d", panel.graph.n_workers, panel.graph.n_firms, panel.n_obs)
    return panel


def cmd_estimate(cfg, output_dir):
    panel = _estimation_panel(cfg)
    estimator = cfg["estimator"]
    penalties = pipeline.panel_penalties(cfg["penalties"], panel) if estimator == "ridge" else None
    fit = pipeline.fit_panel(panel, estimator, penalties, pin_firm=cfg["pin_firm"], method=cfg["method"])
    diagnostics = pipeline.diagnostics(panel, fit, estimator, cfg["dense_cap"], cfg["seed"])
    with CSVReport(cfg, output_dir) as report:
        report.write_fit(f"fit_{estimator}.csv", fit)
        report.write_json("diagnostics.json", {"diagnostics": diagnostics})
    log.info("%s fit: n=%d p=%d N=%d", estimator, panel.graph.n_workers, panel.graph.n_firms, panel.n_obs)
    return EXIT_OK


def _cv_payload(cv):
    if cv is None:
        return None
    return {"best": cv.best.as_dict(), "best_mse": cv.best_mse, "normalized": list(cv.normalized), "grid_size": len(cv.grid)}


def cmd_decompose(cfg, output_dir):
    sim, table = pipeline.run_decomposition(cfg)
    figures = pipeline.figure_tables(sim, table.fits)
    with CSVReport(cfg, output_dir) as report:
        report.write_rows("decomposition.csv", DECOMPOSITION_COLUMNS, table.rows)
        for name, frame in figures.items():
            report.write_frame(f"{name}.csv", frame)
        if table.cv is not None:
            report.write_rows("cv.csv", CV_COLUMNS, table.cv.rows())
        report.write_json(
            "decomposition.json",
            {"network": sim.summary, "rows": table.rows, "penalties": table.penalties.as_dict(), "cv": _cv_payload(table.cv)},
        )
    return EXIT_OK


def cmd_cv(cfg, output_dir):
    sim, cv = pipeline.run_cv(cfg)
    with CSVReport(cfg, output_dir) as report:
        report.write_rows("cv.csv", CV_COLUMNS, cv.rows())
        report.write_json("cv.json", {"network": sim.summary, "cv": _cv_payload(cv)})
    return EXIT_OK


def cmd_bounds(cfg, output_dir):
    total = cfg["bounds"]["replications"]
    with Progress(transient=True) as progress:
        task = progress.add_task("bound checks", total=total)
        result = pipeline.run_bound_checks(cfg, progress=lambda: progress.advance(task))
    with CSVReport(cfg, output_dir) as report:
        report.write_rows("bounds.csv", BOUND_COLUMNS, result.rows())
        report.write_json("bounds.json", {"bounds": result.summary()})
    if not result.applicable:
        log.warning("bound conditions do not hold for this configuration; see bounds.json")
        return EXIT_INAPPLICABLE
    return EXIT_OK


# ---- #
# Report
# ---- #
def _scalar_table(title, mapping):
    table = Table(title=title)
    table.add_column("key")
    table.add_column("value", justify="right")
    for key in sorted(mapping):
        table.add_row(str(key), _fmt(mapping[key]))
    return table


def _rows_table(title, rows):
    table = Table(title=title)
    columns = list(rows[0]) if rows else []
    for col in columns:
        table.add_column(col, justify="left" if col in ("estimator", "name", "side") else "right")
    for row in rows:
        table.add_row(*[_fmt(row.get(col)) for col in columns])
    return table


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True)
    return str(value)


def render_summary(name, document):
    """rich tables for one JSON summary; unknown layouts fall back to key/value rows."""
    tables = []
    if "network" in document:
        tables.append(_scalar_table(f"{name}: network", document["network"]))
    if "rows" in document:
        tables.append(_rows_table(f"{name}: variance decomposition", document["rows"]))
    if document.get("cv"):
        tables.append(_scalar_table(f"{name}: cross-validation", document["cv"]))
    if "bounds" in document:
        tables.append(_scalar_table(f"{name}: bound inputs", document["bounds"]["inputs"]))
        tables.append(_rows_table(f"{name}: bound checks", document["bounds"]["entries"]))
    if "diagnostics" in document:
        diag = document["diagnostics"]
        tables.append(_scalar_table(f"{name}: diagnostics", {k: v for k, v in diag.items() if k not in ("decomposition", "debiased")}))
        tables.append(_rows_table(f"{name}: variance decomposition", [diag["decomposition"]]))
        if "debiased" in diag:
            tables.append(_rows_table(f"{name}: debiased", [diag["debiased"]["decomposition"]]))
    return tables


def cmd_report(cfg, output_dir):
    paths = sorted(glob.glob(os.path.join(output_dir, "*.json")))
    if not paths:
        raise ConfigError(f"no JSON summaries in {output_dir}")
    console = Console(record=True, width=120)
    for path in paths:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
        console.rule(os.path.basename(path))
        for table in render_summary(os.path.splitext(os.path.basename(path))[0], document):
            console.print(table)
    with open(os.path.join(output_dir, REPORT_FILE), mode="w", encoding="utf-8") as f:
        f.write(header_line(cfg) + "\n")
        f.write(console.export_text())
    return EXIT_OK


COMMAND_HANDLERS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "decompose": cmd_decompose,
    "cv": cmd_cv,
    "bounds": cmd_bounds,
    "report": cmd_report,
}


def run_command(command, raw, seed, output_dir):
    cfg = normalize_run_config(command, raw, seed=seed)
    log.debug("resolved config: %s", json.dumps(cfg, sort_keys=True))
    return COMMAND_HANDLERS[command](cfg, output_dir)


def main(argv=None):
    # Initialize Ctrl+C handler
    signal.signal(signal.SIGINT, signal_handler)

    args = parse_args(argv)
    configure_logging(log_to_file=args.log_to_file, output_dir=args.output_dir, verbose=args.verbose)

    try:
        raw = load_config(args.config)
        if getattr(args, "input", None):
            raw["input"] = args.input
        return run_command(args.command, raw, args.seed, args.output_dir)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except RidgeTwfeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except KeyboardInterrupt:
        signal_handler(signal.SIGINT, None)


if __name__ == "__main__":
    sys.exit(main())
