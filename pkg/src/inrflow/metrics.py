"""Set-level generative metrics: MMD, COV and 1-NNA over Chamfer and EMD distances.

Conventions:
    chamfer_sq(A, B) = mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2
    emd_exact(A, B)  = min over perfect matchings of the mean matched |a-b|
Ties in nearest-neighbour searches resolve to the lowest index.

The ``reference_*`` functions are slow loop/enumeration versions kept as
independent oracles for the vectorized code.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, DataError

DISTANCE_KINDS = ("chamfer_sq", "emd_exact")
REPORT_COLUMNS = ("mmd_cd", "mmd_emd", "cov_cd", "cov_emd", "nna_cd", "nna_emd")
REPORT_HEADERS = ("MMD-CD", "MMD-EMD", "COV-CD", "COV-EMD", "1-NNA-CD", "1-NNA-EMD")


def _check_set(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or len(a) == 0:
        raise ContractError(f"{name} must be a non-empty (n, d) point array")
    return a


def _sq_dists(a, b):
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)


def chamfer_sq(a, b) -> float:
    a, b = _check_set(a, "A"), _check_set(b, "B")
    if a.shape[1] != b.shape[1]:
        raise ContractError("point dimensions differ")
    d2 = _sq_dists(a, b)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def emd_exact(a, b) -> float:
    a, b = _check_set(a, "A"), _check_set(b, "B")
    if a.shape != b.shape:
        raise ContractError(f"EMD needs equal-size sets of equal dimension, got {a.shape} and {b.shape}")
    cost = np.sqrt(_sq_dists(a, b))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


_DISTANCES = {"chamfer_sq": chamfer_sq, "emd_exact": emd_exact, "cd": chamfer_sq, "emd": emd_exact}


def _distance_fn(dist):
    if callable(dist):
        return dist
    try:
        return _DISTANCES[dist]
    except KeyError:
        raise ContractError(f"unknown distance {dist!r}; expected one of {DISTANCE_KINDS}") from None


def _check_collection(sets, name):
    if len(sets) == 0:
        raise ContractError(f"{name} collection is empty")
    return [np.asarray(s, dtype=np.float64) for s in sets]


def distance_matrix(xs: Sequence, ys: Sequence, dist="chamfer_sq", symmetric=False) -> np.ndarray:
    """Matrix of set distances D[i, j] = dist(xs[i], ys[j])."""
    fn = _distance_fn(dist)
    out = np.zeros((len(xs), len(ys)))
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            if symmetric and j < i:
                out[i, j] = out[j, i]
            else:
                out[i, j] = fn(x, y)
    return out


def mmd_from_matrix(d_gr: np.ndarray) -> float:
    return float(d_gr.min(axis=0).mean())


def cov_from_matrix(d_gr: np.ndarray) -> float:
    nearest_ref = np.argmin(d_gr, axis=1)
    return len(np.unique(nearest_ref)) / d_gr.shape[1]


def nna_from_matrices(d_gg, d_rr, d_gr) -> float:
    n_g, n_r = d_gr.shape
    full = np.block([[d_gg, d_gr], [d_gr.T, d_rr]]).astype(np.float64)
    np.fill_diagonal(full, np.inf)
    labels = np.r_[np.zeros(n_g, dtype=int), np.ones(n_r, dtype=int)]
    nearest = np.argmin(full, axis=1)
    return float(np.mean(labels[nearest] == labels))


def mmd(gen, ref, dist="chamfer_sq") -> float:
    """Mean over reference sets of the distance to the closest generated set."""
    gen, ref = _check_collection(gen, "gen"), _check_collection(ref, "ref")
    return mmd_from_matrix(distance_matrix(gen, ref, dist))


def cov(gen, ref, dist="chamfer_sq") -> float:
    """Fraction of reference sets that are the nearest reference of some generated set."""
    gen, ref = _check_collection(gen, "gen"), _check_collection(ref, "ref")
    return cov_from_matrix(distance_matrix(gen, ref, dist))


def one_nna(gen, ref, dist="chamfer_sq") -> float:
    """Leave-one-out 1-NN two-sample accuracy over gen + ref (0.5 is ideal)."""
    gen, ref = _check_collection(gen, "gen"), _check_collection(ref, "ref")
    if len(gen) != len(ref) or len(gen) < 2:
        raise ContractError(f"1-NNA requires |gen| == |ref| >= 2, got {len(gen)} and {len(ref)}")
    return nna_from_matrices(
        distance_matrix(gen, gen, dist, symmetric=True),
        distance_matrix(ref, ref, dist, symmetric=True),
        distance_matrix(gen, ref, dist),
    )


@dataclass
class MetricReport:
    mmd_cd: float
    mmd_emd: float
    cov_cd: float
    cov_emd: float
    nna_cd: float
    nna_emd: float
    n_gen: int
    n_ref: int

    def row(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(REPORT_COLUMNS) + ["n_gen", "n_ref"])
            w.writerow([f"{x:.10g}" for x in self.row()] + [self.n_gen, self.n_ref])

    def format_table(self) -> str:
        cells = [f"{self.mmd_cd:.6f}", f"{self.mmd_emd:.6f}"]
        cells += [f"{100 * x:.2f}" for x in (self.cov_cd, self.cov_emd, self.nna_cd, self.nna_emd)]
        widths = [max(len(h), len(c)) for h, c in zip(REPORT_HEADERS, cells)]
        head = " | ".join(h.rjust(w) for h, w in zip(REPORT_HEADERS, widths))
        body = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{head}\n{'-' * len(head)}\n{body}\n(COV and 1-NNA in %; n_gen={self.n_gen}, n_ref={self.n_ref})"


def evaluate_sets(gen, ref) -> MetricReport:
    """Full report over both distances. 1-NNA needs equal collection sizes."""
    gen, ref = _check_collection(gen, "gen"), _check_collection(ref, "ref")
    dims = {s.shape[1] for s in gen} | {s.shape[1] for s in ref}
    if len(dims) != 1:
        raise DataError(f"mixed point dimensionality in evaluation: {sorted(dims)}")
    if len(gen) != len(ref):
        raise ContractError(
            f"1-NNA requires equally many generated and reference sets, got {len(gen)} and {len(ref)}"
        )
    if len(gen) < 2:
        raise ContractError("1-NNA requires at least 2 sets per collection")
    values = {}
    for tag, kind in (("cd", "chamfer_sq"), ("emd", "emd_exact")):
        d_gr = distance_matrix(gen, ref, kind)
        d_gg = distance_matrix(gen, gen, kind, symmetric=True)
        d_rr = distance_matrix(ref, ref, kind, symmetric=True)
        values[f"mmd_{tag}"] = mmd_from_matrix(d_gr)
        values[f"cov_{tag}"] = cov_from_matrix(d_gr)
        values[f"nna_{tag}"] = nna_from_matrices(d_gg, d_rr, d_gr)
    return MetricReport(**values, n_gen=len(gen), n_ref=len(ref))


def sample_sets(samples) -> list[np.ndarray]:
    """Point sets used for evaluation: values for point clouds, (coord, value) rows for images."""
    out = []
    for s in samples:
        if s.coords.shape == s.values.shape and np.array_equal(s.coords, s.values):
            out.append(np.asarray(s.values, dtype=np.float64))
        else:
            out.append(np.concatenate([s.coords, s.values], axis=1).astype(np.float64))
    return out


# -- reference oracles -------------------------------------------------------------------


def reference_chamfer_sq(a, b) -> float:
    fwd = sum(min(sum((x - y) ** 2 for x, y in zip(p, q)) for q in b) for p in a) / len(a)
    bwd = sum(min(sum((x - y) ** 2 for x, y in zip(p, q)) for p in a) for q in b) / len(b)
    return float(fwd + bwd)


def reference_emd(a, b) -> float:
    """Minimum mean matched distance by enumerating all n! matchings."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n = len(a)
    cost = [[float(np.sqrt(np.sum((a[i] - b[j]) ** 2))) for j in range(n)] for i in range(n)]
    best = min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return best / n


def reference_mmd(gen, ref, dist) -> float:
    total = 0.0
    for r in ref:
        total += min(dist(g, r) for g in gen)
    return total / len(ref)


def reference_cov(gen, ref, dist) -> float:
    covered = set()
    for g in gen:
        best, best_j = None, None
        for j, r in enumerate(ref):
            d = dist(g, r)
            if best is None or d < best:
                best, best_j = d, j
        covered.add(best_j)
    return len(covered) / len(ref)


def reference_one_nna(gen, ref, dist) -> float:
    items = [(s, 0) for s in gen] + [(s, 1) for s in ref]
    correct = 0
    for i, (x, label) in enumerate(items):
        best, best_label = None, None
        for j, (y, other) in enumerate(items):
            if i == j:
                continue
            d = dist(x, y)
            if best is None or d < best:
                best, best_label = d, other
        correct += best_label == label
    return correct / len(items)
