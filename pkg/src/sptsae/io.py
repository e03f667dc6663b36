"""Reading and writing panel CSVs, proximity inputs and result files."""

from __future__ import annotations

import csv
import json

import numpy as np

from .model import PanelData, ParamVector
from .spatial import (ProximityMatrix, SpatialError, build_adjacency_proximity,
                      build_distance_proximity)


class DataFormatError(ValueError):
    """Malformed input file; the message names the file and row."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def read_panel_csv(path) -> PanelData:
    """Load a balanced panel from `domain,time,y,size,x1,...,xp` rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:4] != ["domain", "time", "y", "size"]:
            raise DataFormatError(
                f"{path}: header must start with domain,time,y,size, got {header[:4]}")
        x_names = header[4:]
        if not x_names:
            raise DataFormatError(f"{path}: at least one covariate column required")
        cells = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                dom, t = row[0].strip(), int(row[1])
                y, nu = float(row[2]), float(row[3])
                xs = [float(c) for c in row[4:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
            if (dom, t) in cells:
                raise DataFormatError(
                    f"{path}: row {lineno}: duplicate cell (domain={dom}, time={t})")
            cells[(dom, t)] = (y, nu, xs)
    domains = sorted({k[0] for k in cells}, key=lambda d: (len(d), d))
    times = sorted({k[1] for k in cells})
    missing = [(d, t) for d in domains for t in times if (d, t) not in cells]
    if missing:
        d0, t0 = missing[0]
        raise DataFormatError(
            f"{path}: unbalanced panel, missing cell (domain={d0}, time={t0}) "
            f"and {len(missing) - 1} more")
    dD, tT, p = len(domains), len(times), len(x_names)
    y = np.empty((dD, tT))
    nu = np.empty((dD, tT))
    x = np.empty((dD, tT, p))
    for i, d in enumerate(domains):
        for j, t in enumerate(times):
            y[i, j], nu[i, j], x[i, j] = cells[(d, t)]
    try:
        return PanelData(y=y, nu=nu, x=x, domains=tuple(domains), times=tuple(times))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_panel_csv(path, data: PanelData) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        p = data.n_covariates
        writer.writerow(["domain", "time", "y", "size"] + [f"x{k + 1}" for k in range(p)])
        for i, d in enumerate(data.domains):
            for j, t in enumerate(data.times):
                writer.writerow([d, t, _fmt(data.y[i, j]), _fmt(data.nu[i, j])]
                                + [_fmt(v) for v in data.x[i, j]])


def read_adjacency(path) -> ProximityMatrix:
    """Edge list, one `id1,id2` pair per line; labels are the ids seen."""
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2 or not all(parts):
                raise DataFormatError(f"{path}: line {lineno}: expected `id1,id2`")
            edges.append((parts[0], parts[1]))
    if not edges:
        raise DataFormatError(f"{path}: no edges found")
    labels = sorted({lab for e in edges for lab in e}, key=lambda d: (len(d), d))
    try:
        return build_adjacency_proximity(edges, labels)
    except SpatialError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def read_distance_csv(path) -> ProximityMatrix:
    """Distance matrix CSV with a header row and leading column of domain ids."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise DataFormatError(f"{path}: distance matrix needs a header and rows")
    labels = [c.strip() for c in rows[0][1:]]
    d = len(labels)
    dist = np.empty((d, d))
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != d + 1:
            raise DataFormatError(f"{path}: row {lineno}: expected {d + 1} fields")
        if row[0].strip() != labels[i]:
            raise DataFormatError(
                f"{path}: row {lineno}: row label {row[0].strip()!r} does not match "
                f"header order ({labels[i]!r})")
        try:
            dist[i] = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
    if len(rows) - 1 != d:
        raise DataFormatError(f"{path}: expected {d} data rows, got {len(rows) - 1}")
    try:
        return build_distance_proximity(dist, labels)
    except SpatialError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def read_proximity(path) -> ProximityMatrix:
    """Dispatch on extension: .csv is a distance matrix, anything else an edge list."""
    if str(path).lower().endswith(".csv"):
        return read_distance_csv(path)
    return read_adjacency(path)


def write_proximity_csv(path, w: ProximityMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + [str(lab) for lab in w.labels])
        for i, lab in enumerate(w.labels):
            writer.writerow([str(lab)] + [_fmt(v) for v in w.w[i]])


def fit_result_to_dict(fit) -> dict:
    th = fit.theta_hat
    return {
        "model": fit.spec.variant,
        "option": fit.option,
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "residual_norm": float(fit.residual_norm),
        "theta_hat": {"beta": [float(b) for b in th.beta], "phi1": float(th.phi1),
                      "phi2": float(th.phi2), "rho": float(th.rho)},
        "seed_theta": {"beta": [float(b) for b in fit.seed_used.beta],
                       "phi1": float(fit.seed_used.phi1),
                       "phi2": float(fit.seed_used.phi2),
                       "rho": float(fit.seed_used.rho)},
        "trace": [{"theta": [float(v) for v in th_i.as_array()],
                   "residual_norm": float(r)} for th_i, r in fit.trace],
    }


def write_fit_json(path, fit) -> None:
    with open(path, "w") as fh:
        json.dump(fit_result_to_dict(fit), fh, indent=2)
        fh.write("\n")


def theta_from_fit_json(path) -> tuple[ParamVector, str]:
    with open(path) as fh:
        doc = json.load(fh)
    th = doc["theta_hat"]
    theta = ParamVector(beta=np.asarray(th["beta"], dtype=float),
                        phi1=float(th["phi1"]), phi2=float(th["phi2"]),
                        rho=float(th["rho"]))
    return theta, doc.get("model", "ST1")


def write_predictions_csv(path, data: PanelData, pred, extra: dict | None = None) -> None:
    """Cellwise predictions; `extra` adds columns like mse/rrmse (D, T) arrays."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "time", "p_hat", "mu_hat"] + list(extra))
        for i, d in enumerate(data.domains):
            for j, t in enumerate(data.times):
                row = [d, t, _fmt(pred.p_hat[i, j]), _fmt(pred.mu_hat[i, j])]
                row += [_fmt(arr[i, j]) for arr in extra.values()]
                writer.writerow(row)
