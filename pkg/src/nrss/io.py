"""Plain-text readers and writers for datasets, fits and reports.

Every float is written with 17 significant digits so values round-trip
exactly.  Node, subject, SNP and set identifiers in files are 1-based.
"""

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .em import FitResult, LatentGraph
from .model import Dataset, ModelParams, PriorNetwork, edges_to_matrix, upper_indices

EDGE_HEADER = ["subject_id", "v", "v'", "value"]


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""

    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = str(path), line


def fmt(x):
    return format(float(x), ".17g")


def _reader(path, header):
    fh = open(path, newline="")
    rows = csv.reader(fh)
    try:
        first = next(rows)
    except StopIteration:
        fh.close()
        raise FormatError(path, 1, "empty file")
    if header is not None and [h.strip() for h in first] != header:
        fh.close()
        raise FormatError(path, 1, f"expected header {','.join(header)}")
    return fh, rows, first


def _int(path, line, s, what):
    try:
        return int(s)
    except ValueError:
        raise FormatError(path, line, f"{what} {s!r} is not an integer") from None


def _float(path, line, s, what):
    try:
        return float(s)
    except ValueError:
        raise FormatError(path, line, f"{what} {s!r} is not a number") from None


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- connectomes -------------------------------------------------------------

def write_connectomes(path, A):
    """Long CSV of the strict upper triangle of every subject's matrix."""
    A = np.asarray(A)
    N, V = A.shape[0], A.shape[1]
    iu, ju = upper_indices(V)
    rows = ([i + 1, a + 1, b + 1, fmt(A[i, a, b])]
            for i in range(N) for a, b in zip(iu, ju))
    _write_rows(path, EDGE_HEADER, rows)


def read_connectomes(path, V=None):
    """Read the long connectome CSV into an (N, V, V) array with NaN diagonal.

    Every subject must list every upper-triangle edge exactly once.
    """
    fh, rows, _ = _reader(path, EDGE_HEADER)
    vals = {}
    with fh:
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(path, line, f"expected 4 fields, got {len(row)}")
            i = _int(path, line, row[0], "subject_id")
            a = _int(path, line, row[1], "v")
            b = _int(path, line, row[2], "v'")
            x = _float(path, line, row[3], "value")
            if a == b:
                raise FormatError(path, line, "diagonal entry (v = v') is not allowed")
            if a > b:
                raise FormatError(path, line, "lower-triangle entry (v > v') is not allowed")
            if i < 1 or a < 1:
                raise FormatError(path, line, "identifiers are 1-based")
            if V is not None and b > V:
                raise FormatError(path, line, f"node {b} exceeds V={V}")
            if (i, a, b) in vals:
                raise FormatError(path, line, f"duplicate entry for subject {i}, edge ({a},{b})")
            vals[(i, a, b)] = (x, line)
    if not vals:
        raise FormatError(path, 2, "no data rows")
    N = max(k[0] for k in vals)
    V = V or max(k[2] for k in vals)
    A = np.full((N, V, V), np.nan)
    iu, ju = upper_indices(V)
    expect = N * iu.size
    if len(vals) != expect:
        have = {(i, a, b) for i, a, b in vals}
        for i in range(1, N + 1):
            for a, b in zip(iu + 1, ju + 1):
                if (i, a, b) not in have:
                    raise FormatError(path, len(vals) + 2,
                                      f"missing entry for subject {i}, edge ({a},{b})")
    for (i, a, b), (x, _) in vals.items():
        A[i - 1, a - 1, b - 1] = A[i - 1, b - 1, a - 1] = x
    return A


# -- genotypes and set map ---------------------------------------------------

def write_genotypes(path, X):
    X = np.asarray(X)
    _write_rows(path, [f"snp_{j + 1}" for j in range(X.shape[1])],
                ([fmt(x) for x in row] for row in X))


def read_genotypes(path):
    fh, rows, header = _reader(path, None)
    P = len(header)
    if [h.strip() for h in header] != [f"snp_{j + 1}" for j in range(P)]:
        raise FormatError(path, 1, "expected header snp_1..snp_P")
    out = []
    with fh:
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != P:
                raise FormatError(path, line, f"expected {P} fields, got {len(row)}")
            out.append([_float(path, line, s, "dosage") for s in row])
    if not out:
        raise FormatError(path, 2, "no data rows")
    return np.array(out)


def write_set_map(path, set_of):
    _write_rows(path, ["snp_id", "set_id"], ([p + 1, q + 1] for p, q in enumerate(set_of)))


def read_set_map(path, P=None):
    """Return zero-based set labels, relabelled to 0..Q-1 in sorted id order."""
    fh, rows, _ = _reader(path, ["snp_id", "set_id"])
    seen = {}
    with fh:
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(path, line, f"expected 2 fields, got {len(row)}")
            p = _int(path, line, row[0], "snp_id")
            q = _int(path, line, row[1], "set_id")
            if p < 1 or (P is not None and p > P):
                raise FormatError(path, line, f"snp_id {p} out of range")
            if p in seen:
                raise FormatError(path, line, f"partition violation: SNP {p} listed in two sets")
            seen[p] = q
    n = P or (max(seen) if seen else 0)
    missing = [p for p in range(1, n + 1) if p not in seen]
    if missing or not seen:
        raise FormatError(path, 2, f"partition violation: SNP {missing[0] if missing else 1} has no set")
    ids = np.array([seen[p] for p in range(1, n + 1)])
    return np.unique(ids, return_inverse=True)[1]


# -- prior network -----------------------------------------------------------

def write_prior_network(path, net):
    iu, ju = upper_indices(net.V)
    on = net.psi_tilde[iu, ju] != 0
    _write_rows(path, ["v", "v'"], ([a + 1, b + 1] for a, b in zip(iu[on], ju[on])))


def read_prior_network(path, V):
    fh, rows, _ = _reader(path, ["v", "v'"])
    edges = set()
    with fh:
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(path, line, f"expected 2 fields, got {len(row)}")
            a = _int(path, line, row[0], "v")
            b = _int(path, line, row[1], "v'")
            if a == b:
                raise FormatError(path, line, "self-loop in prior network")
            if not (1 <= a <= V and 1 <= b <= V):
                raise FormatError(path, line, f"node out of range 1..{V}")
            e = (min(a, b) - 1, max(a, b) - 1)
            if e in edges:
                raise FormatError(path, line, f"duplicate edge ({a},{b})")
            edges.add(e)
    return PriorNetwork.from_edges(V, sorted(edges))


# -- dataset bundle ----------------------------------------------------------

def save_dataset(directory, data, prior_net=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_connectomes(d / "connectomes.csv", data.A)
    write_genotypes(d / "genotypes.csv", data.X)
    write_set_map(d / "sets.csv", data.set_of)
    if len(data.unpenalized):
        _write_rows(d / "unpenalized.csv", ["snp_id"], ([p + 1] for p in data.unpenalized))
    if prior_net is not None:
        write_prior_network(d / "prior_network.csv", prior_net)
    return d


def load_dataset(connectomes, genotypes, sets, unpenalized=None):
    """Validated Dataset from the three CSV files (plus optional covariate list)."""
    X = read_genotypes(genotypes)
    A = read_connectomes(connectomes)
    if A.shape[0] != X.shape[0]:
        raise FormatError(connectomes, 1, f"{A.shape[0]} subjects but genotypes have {X.shape[0]}")
    set_of = read_set_map(sets, X.shape[1])
    unp = ()
    if unpenalized is not None and os.path.exists(unpenalized):
        fh, rows, _ = _reader(unpenalized, ["snp_id"])
        with fh:
            unp = tuple(_int(unpenalized, k, r[0], "snp_id") - 1
                        for k, r in enumerate(rows, start=2) if r)
    return Dataset(A, X, set_of, unp)


def load_dataset_dir(directory):
    d = Path(directory)
    data = load_dataset(d / "connectomes.csv", d / "genotypes.csv", d / "sets.csv",
                        d / "unpenalized.csv")
    net = None
    if (d / "prior_network.csv").exists():
        net = read_prior_network(d / "prior_network.csv", data.V)
    return data, net


# -- truth -------------------------------------------------------------------

def write_truth(path, truth):
    iu, ju = upper_indices(truth.V)
    rows = []
    for p in truth.risk:
        for e in np.flatnonzero(truth.B_edges[p]):
            rows.append([p + 1, iu[e] + 1, ju[e] + 1, fmt(truth.B_edges[p, e])])
    _write_rows(path, ["p", "v", "v'", "beta"], rows)
    _write_rows(Path(path).with_name("risk.csv"), ["snp_id"], ([p + 1] for p in truth.risk))


def read_truth(path, P, V):
    from .simulate import GroundTruth

    fh, rows, _ = _reader(path, ["p", "v", "v'", "beta"])
    iu, ju = upper_indices(V)
    eid = {(a, b): k for k, (a, b) in enumerate(zip(iu, ju))}
    B = np.zeros((P, iu.size))
    with fh:
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            p = _int(path, line, row[0], "p") - 1
            a = _int(path, line, row[1], "v") - 1
            b = _int(path, line, row[2], "v'") - 1
            if not 0 <= p < P or (a, b) not in eid:
                raise FormatError(path, line, "index out of range")
            B[p, eid[(a, b)]] = _float(path, line, row[3], "beta")
    risk_path = Path(path).with_name("risk.csv")
    if risk_path.exists():
        fh, rows, _ = _reader(risk_path, ["snp_id"])
        with fh:
            risk = np.array(sorted(int(r[0]) - 1 for r in rows if r), dtype=int)
    else:
        risk = np.flatnonzero(np.any(B != 0, axis=1))
    return GroundTruth(B, risk, np.zeros((V, V)))


# -- fit results -------------------------------------------------------------

def _matrix_rows(M, labels=None):
    for k, row in enumerate(M):
        yield ([labels[k]] if labels is not None else []) + [fmt(x) for x in row]


def save_fit(directory, result, hyper=None, opts=None, extra=None):
    """JSON summary plus ``U.csv``, ``H.csv`` and ``B0.csv``; returns written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = result.params
    V, P = p.H.shape
    iu, ju = upper_indices(V)
    doc = {
        "n_iter": result.n_iter,
        "converged": bool(result.converged),
        "objective": fmt(result.objective),
        "trace": [fmt(x) for x in result.trace],
        "sigma2": fmt(p.sigma2),
        "f": [fmt(x) for x in p.f],
        "g": [fmt(x) for x in p.g],
        "alpha": [fmt(x) for x in p.alpha],
        "omega": [[int(a) + 1, int(b) + 1, fmt(result.omega.omega[a, b])]
                  for a, b in zip(iu, ju) if result.omega.omega[a, b] != 0],
        "set_of": [int(q) + 1 for q in result.set_of],
    }
    if hyper is not None:
        doc["hyper"] = hyper.to_dict()
    if opts is not None:
        doc["options"] = opts.to_dict()
    if extra:
        doc.update(extra)
    snp_header = ["v"] + [f"snp_{j + 1}" for j in range(P)]
    nodes = list(range(1, V + 1))
    paths = [d / "fit.json", d / "U.csv", d / "H.csv", d / "B0.csv"]
    with open(paths[0], "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_rows(paths[1], snp_header, _matrix_rows(result.U, nodes))
    _write_rows(paths[2], snp_header, _matrix_rows(p.H, nodes))
    B0 = np.array(p.B0, dtype=float)
    np.fill_diagonal(B0, 0.0)
    _write_rows(paths[3], ["v"] + [f"node_{j}" for j in nodes], _matrix_rows(B0, nodes))
    return paths


def _read_matrix(path):
    fh, rows, header = _reader(path, None)
    with fh:
        M = [[_float(path, k, s, "value") for s in r[1:]] for k, r in enumerate(rows, start=2) if r]
    return np.array(M)


def load_fit(directory):
    d = Path(directory)
    with open(d / "fit.json") as fh:
        doc = json.load(fh)
    H = _read_matrix(d / "H.csv")
    B0 = _read_matrix(d / "B0.csv")
    V = H.shape[0]
    f = np.array([float(x) for x in doc["f"]])
    params = ModelParams(f, np.array([float(x) for x in doc["g"]]), H, B0,
                         np.array([float(x) for x in doc["alpha"]]), float(doc["sigma2"]))
    omega = np.zeros((V, V))
    for a, b, w in doc["omega"]:
        omega[a - 1, b - 1] = float(w)
    set_of = np.array(doc["set_of"], dtype=int) - 1
    return FitResult(params, LatentGraph(omega), [float(x) for x in doc["trace"]],
                     doc["n_iter"], doc["converged"], 0.0, set_of), doc


# -- reports and plot data ---------------------------------------------------

def write_stability(directory, report):
    """SNP-level frequencies plus the long entry-level table (nonzero rows only)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    P, E = report.pi_B.shape
    V = int(round((1 + np.sqrt(1 + 8 * E)) / 2))
    iu, ju = upper_indices(V)
    snp = d / "selection_snp.csv"
    ent = d / "selection_entries.csv"
    _write_rows(snp, ["snp_id", "selection_probability"],
                ([p + 1, fmt(x)] for p, x in enumerate(report.pi_snp)))
    pp, ee = np.nonzero(report.pi_B)
    _write_rows(ent, ["v", "v'", "p", "frequency"],
                ([iu[e] + 1, ju[e] + 1, p + 1, fmt(report.pi_B[p, e])] for p, e in zip(pp, ee)))
    return [snp, ent]


def write_manhattan(path, pi_snp):
    _write_rows(path, ["snp_id", "position_index", "selection_probability"],
                ([f"snp_{p + 1}", p + 1, fmt(x)] for p, x in enumerate(pi_snp)))


def write_density(path, grid, density, label):
    _write_rows(path, ["beta", "density", "prior_label"],
                ([fmt(b), fmt(x), label] for b, x in zip(np.ravel(grid), np.ravel(density))))


def write_trace(path, trace):
    _write_rows(path, ["iteration", "neg_log_posterior"],
                ([k, fmt(x)] for k, x in enumerate(trace)))


def write_table(path, header, rows):
    _write_rows(path, header, ([fmt(x) if isinstance(x, (float, np.floating)) else x for x in r]
                               for r in rows))


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, config, seeds, runs, wall_times, version):
    """Manifest listing every other file in ``directory`` with its hash."""
    d = Path(directory)
    files = {}
    for p in sorted(d.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(d))] = sha256(p)
    doc = {"tool": "nrss", "version": version, "config": config, "seeds": seeds,
           "runs": runs, "wall_times": wall_times, "files": files}
    with open(d / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")
    return d / "manifest.json"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
