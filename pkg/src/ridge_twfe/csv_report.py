import csv
import json
import logging
import os
from typing import NamedTuple

import numpy as np
import pandas as pd

from ridge_twfe import __version__
from ridge_twfe.config import json_default, header_line
from ridge_twfe.errors import ConfigError, GraphError
from ridge_twfe.estimator import panel_from_observations
from ridge_twfe.graph import graph_from_arrays
from ridge_twfe.sbm import NodeAssignment

log = logging.getLogger(__name__)

EDGE_COLUMNS = ["worker_id", "firm_id", "multiplicity"]
MAPPING_COLUMNS = ["node_kind", "node_id", "index"]
ASSIGNMENT_COLUMNS = ["node_kind", "node_id", "type", "theta"]
PANEL_COLUMNS = ["worker_id", "firm_id", "y"]


class CSVReport:
    """Writes the outputs of one run into ``output_dir``.

    Every CSV starts with the run's header comment; every JSON embeds the
    resolved config and the package version. Files are opened, written
    and closed one at a time.
    """

    def __init__(self, cfg, output_dir="."):
        self.cfg = cfg
        self.output_dir = output_dir
        self.header = header_line(cfg)
        self.written = []
        os.makedirs(self.output_dir, exist_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def path(self, filename):
        return os.path.join(self.output_dir, filename)

    def _open(self, filename):
        fullpath = self.path(filename)
        self.written.append(fullpath)
        f = open(fullpath, mode="w", newline="", encoding="utf-8")
        f.write(self.header + "\n")
        return f

    def write_rows(self, filename, columns, rows):
        with self._open(filename) as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                if isinstance(row, dict):
                    row = [_cell(row.get(col)) for col in columns]
                writer.writerow(row)
        return self.path(filename)

    def write_frame(self, filename, frame):
        with self._open(filename) as f:
            frame.to_csv(f, index=False, lineterminator="\n")
        return self.path(filename)

    def write_json(self, filename, payload):
        document = {"config": self.cfg, "version": __version__, **payload}
        fullpath = self.path(filename)
        self.written.append(fullpath)
        with open(fullpath, mode="w", encoding="utf-8") as f:
            json.dump(document, f, sort_keys=True, indent=2, default=json_default)
            f.write("\n")
        return fullpath

    # ---- #
    # Domain files
    # ---- #
    def write_graph(self, filename, graph, worker_ids=None, firm_ids=None, mapping_filename=None):
        worker_ids = np.arange(graph.n_workers) if worker_ids is None else np.asarray(worker_ids)
        firm_ids = np.arange(graph.n_firms) if firm_ids is None else np.asarray(firm_ids)
        rows = zip(worker_ids[graph.workers].tolist(), firm_ids[graph.firms].tolist(), graph.mult.tolist())
        self.write_rows(filename, EDGE_COLUMNS, rows)
        if mapping_filename:
            self.write_frame(mapping_filename, mapping_frame(worker_ids, firm_ids))
        return self.path(filename)

    def write_assignment(self, filename, assignment):
        self.write_frame(filename, assignment_frame(assignment))
        return self.path(filename)

    def write_panel(self, filename, panel):
        self.write_frame(filename, panel.to_frame())
        return self.path(filename)

    def write_fit(self, filename, fit):
        self.write_frame(filename, fit.to_frame())
        return self.path(filename)

    def close(self):
        for fullpath in self.written:
            log.debug("wrote %s", fullpath)
        self.written = []


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float) and np.isnan(value):
        return ""
    return value


# --------------------------------------------------------------------------- #
# Readers and frame builders
# --------------------------------------------------------------------------- #
def _read_csv(path, required):
    try:
        frame = pd.read_csv(path, comment="#")
    except FileNotFoundError as exc:
        raise ConfigError(f"input file {path} does not exist") from exc
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    missing = [col for col in required if col not in frame.columns]
    if missing:
        raise ConfigError(f"{path} lacks columns {missing}")
    return frame


class EdgeTable(NamedTuple):
    graph: object
    worker_ids: np.ndarray
    firm_ids: np.ndarray


def read_edge_csv(path):
    """Edges with arbitrary node ids; ids are interned in sorted order."""
    frame = _read_csv(path, EDGE_COLUMNS[:2])
    mult = frame["multiplicity"].to_numpy() if "multiplicity" in frame.columns else np.ones(len(frame), np.int64)
    if np.any(pd.isna(mult)) or np.any(np.asarray(mult) != np.round(np.asarray(mult, dtype=float))):
        raise GraphError(f"{path}: multiplicities must be integers")
    w_codes, w_ids = pd.factorize(frame["worker_id"], sort=True)
    f_codes, f_ids = pd.factorize(frame["firm_id"], sort=True)
    if np.any(w_codes < 0) or np.any(f_codes < 0):
        raise GraphError(f"{path}: missing node ids")
    g = graph_from_arrays(w_codes, f_codes, np.asarray(mult, dtype=np.int64), w_ids.size, f_ids.size)
    return EdgeTable(g, np.asarray(w_ids), np.asarray(f_ids))


def write_edge_csv(path, graph, worker_ids=None, firm_ids=None, header=None):
    """Standalone edge writer; the mapping file goes next to it as ``<stem>_mapping.csv``."""
    worker_ids = np.arange(graph.n_workers) if worker_ids is None else np.asarray(worker_ids)
    firm_ids = np.arange(graph.n_firms) if firm_ids is None else np.asarray(firm_ids)
    frame = pd.DataFrame({"worker_id": worker_ids[graph.workers], "firm_id": firm_ids[graph.firms], "multiplicity": graph.mult})
    stem, _ = os.path.splitext(path)
    mapping_path = f"{stem}_mapping.csv"
    for target, data in ((path, frame), (mapping_path, mapping_frame(worker_ids, firm_ids))):
        with open(target, mode="w", newline="", encoding="utf-8") as f:
            if header:
                f.write(header + "\n")
            data.to_csv(f, index=False, lineterminator="\n")
    return path, mapping_path


def mapping_frame(worker_ids, firm_ids):
    return pd.concat(
        [
            pd.DataFrame({"node_kind": "worker", "node_id": worker_ids, "index": np.arange(len(worker_ids))}),
            pd.DataFrame({"node_kind": "firm", "node_id": firm_ids, "index": np.arange(len(firm_ids))}),
        ],
        ignore_index=True,
    )


def assignment_frame(assignment):
    """Types are written 1-based; workers carry an empty theta."""
    return pd.concat(
        [
            pd.DataFrame({"node_kind": "worker", "node_id": np.arange(assignment.n), "type": assignment.worker_types + 1, "theta": np.nan}),
            pd.DataFrame({"node_kind": "firm", "node_id": np.arange(assignment.p), "type": assignment.firm_types + 1, "theta": assignment.theta}),
        ],
        ignore_index=True,
    )


def read_assignment_csv(path, K=None):
    frame = _read_csv(path, ASSIGNMENT_COLUMNS)
    workers = frame[frame["node_kind"] == "worker"].sort_values("node_id")
    firms = frame[frame["node_kind"] == "firm"].sort_values("node_id")
    worker_types = workers["type"].to_numpy(dtype=np.int64) - 1
    firm_types = firms["type"].to_numpy(dtype=np.int64) - 1
    if (worker_types.size and worker_types.min() < 0) or (firm_types.size and firm_types.min() < 0):
        raise ConfigError(f"{path}: types must be 1-based")
    if K is None:
        K = int(max(worker_types.max(initial=-1), firm_types.max(initial=-1))) + 1
    return NodeAssignment(worker_types, firm_types, firms["theta"].to_numpy(dtype=float), int(K))


def read_panel_csv(path):
    """Observation rows (worker_id, firm_id, y) as a canonical panel."""
    frame = _read_csv(path, PANEL_COLUMNS)
    if frame["y"].isna().any():
        raise ConfigError(f"{path}: outcome column has missing values")
    return panel_from_observations(frame["worker_id"].to_numpy(), frame["firm_id"].to_numpy(), frame["y"].to_numpy())
