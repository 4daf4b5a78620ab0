"""Data splitting, hyperparameter search, stability selection and metrics."""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .em import FitOptions, fit
from .model import Hyperparams, edge_coefficients, fitted_edges

logger = logging.getLogger(__name__)


# -- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int = 0

    @property
    def sizes(self):
        return len(self.train), len(self.validation), len(self.test)


def split(N, sizes, seed=0):
    """Uniform random partition of ``range(N)`` into train/validation/test."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 0:
        raise ValueError("sizes must be three nonnegative integers")
    if sum(sizes) != N:
        raise ValueError(f"sizes sum to {sum(sizes)}, expected {N}")
    perm = np.random.default_rng(seed).permutation(N)
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitPlan(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]), seed)


def thirds(N):
    """Near-equal split sizes, remainder going to the training set."""
    k = N // 3
    return (N - 2 * k, k, k)


# -- grid search -------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Combo:
    """One hyperparameter combination searched over."""

    lambda_h: float
    lambda_f: float
    psi: float = 0.0
    nu: float = 1.0

    def hyper(self, base=None):
        base = base or Hyperparams()
        return replace(base, lambda_h=self.lambda_h, lambda_f=self.lambda_f,
                       psi=self.psi, nu=self.nu)

    @property
    def group(self):
        return (self.psi, self.nu)


def make_grid(lambda_h, lambda_f, psi=(0.0,), nu=(1.0,), paired=False):
    """Combos from value lists.

    With ``paired=True`` the ``lambda_h`` and ``lambda_f`` lists are zipped
    into a single path instead of crossed.
    """
    if paired:
        if len(lambda_h) != len(lambda_f):
            raise ValueError("paired grids need equally long lambda lists")
        pairs = list(zip(lambda_h, lambda_f))
    else:
        pairs = [(a, b) for a in lambda_h for b in lambda_f]
    return [Combo(float(a), float(b), float(p), float(n))
            for p in psi for n in nu for a, b in pairs]


def warm_paths(grid):
    """Group combos by ``(psi, nu)``; each group sorted by ``(lambda_h, lambda_f)``."""
    groups = {}
    for c in grid:
        groups.setdefault(c.group, []).append(c)
    return [tuple(sorted(set(g), key=lambda c: (c.lambda_h, c.lambda_f)))
            for _, g in sorted(groups.items())]


def path_to(grid, combo, warm_start=True):
    """The sequence of combos fitted to reach ``combo``."""
    if not warm_start:
        return (combo,)
    for path in warm_paths(grid):
        if combo in path:
            return path[:path.index(combo) + 1]
    raise ValueError(f"{combo} is not in the grid")


@dataclass
class PathRun:
    combo: Combo
    result: object = None  # FitResult
    error: str = None


def fit_path(data, prior_net, path, base=None, opts=None):
    """Fit each combo in turn, starting every fit from the previous estimate.

    A failed stage is recorded and the next stage restarts from the default
    initialization.
    """
    opts = opts or FitOptions()
    out = []
    init = None
    for combo in path:
        try:
            res = fit(data, prior_net, combo.hyper(base), opts, init=init)
            out.append(PathRun(combo, res))
            init = res.params
        except (FloatingPointError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            logger.warning("fit failed for %s: %s", combo, exc)
            out.append(PathRun(combo, None, f"{type(exc).__name__}: {exc}"))
            init = None
    return out


def mspe(result, data):
    """Mean squared prediction error over subjects and upper-triangle edges."""
    pred = fitted_edges(result.params, data.X, data.set_of)
    return float(np.mean((pred - data.A_edges) ** 2))


@dataclass
class GridEntry:
    combo: Combo
    val_mspe: float
    result: object = None
    status: str = "ok"
    error: str = None


def _run_paths(jobs, workers):
    """Run ``fit_path`` on each ``(args, kwargs)`` job, optionally in a pool."""
    workers = resolve_workers(workers)
    if workers <= 1 or len(jobs) <= 1:
        return [fit_path(*a, **k) for a, k in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futs = [pool.submit(fit_path, *a, **k) for a, k in jobs]
        return [f.result() for f in futs]


def resolve_workers(workers=None):
    """Explicit value first, then the ``NRSS_WORKERS`` environment variable, then 1."""
    if workers is None:
        workers = os.environ.get("NRSS_WORKERS", 1)
    workers = int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def grid_search(data, prior_net, grid, plan, base=None, opts=None, warm_start=True,
                workers=1, keep_results=True):
    """Fit every combo on the training set and rank by validation MSPE.

    With ``warm_start`` combos sharing ``(psi, nu)`` form one path ordered
    by increasing ``(lambda_h, lambda_f)``; each fit starts from the previous
    one.  Ties in MSPE go to the larger ``(lambda_h, lambda_f)``.  Failed
    fits are kept at the end of the ranking with ``status="failed"``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    train = data.subset(plan.train)
    val = data.subset(plan.validation)
    paths = warm_paths(grid) if warm_start else [(c,) for c in dict.fromkeys(grid)]
    runs = _run_paths([((train, prior_net, p), {"base": base, "opts": opts}) for p in paths],
                      workers)
    entries = []
    for path_runs in runs:
        for r in path_runs:
            if r.result is None:
                entries.append(GridEntry(r.combo, np.inf, None, "failed", r.error))
                continue
            score = mspe(r.result, val) if val.N else np.nan
            entries.append(GridEntry(r.combo, score, r.result if keep_results else None))
    entries.sort(key=lambda e: (e.status != "ok", np.nan_to_num(e.val_mspe, nan=np.inf),
                                -e.combo.lambda_h, -e.combo.lambda_f))
    return entries


# -- stability selection -----------------------------------------------------

@dataclass
class StabilityReport:
    pi_B: np.ndarray  # (P, E) selection frequency per coefficient entry
    pi_snp: np.ndarray  # (P,) frequency that the slice has any nonzero entry
    q_bar: float  # mean number of SNPs selected per run
    n_runs: int
    failed: list = field(default_factory=list)
    pi_thr: float = None
    selected: np.ndarray = None

    @property
    def P(self):
        return self.pi_snp.size


def _selection(result):
    B = edge_coefficients(result.U)
    return B != 0


def _maximal_paths(paths):
    """Drop paths that are prefixes of other requested paths."""
    keep = []
    for p in sorted(set(paths), key=len, reverse=True):
        if not any(q[:len(p)] == p for q in keep):
            keep.append(p)
    return keep


def stability(data, prior_net, paths, n_splits, seed=0, train_size=None, base=None,
              opts=None, workers=1):
    """Selection frequencies over random training subsets.

    Parameters
    ----------
    paths : list of tuple of Combo
        One entry per combo used; the last element is the combo itself and
        the earlier ones are warm-start stages (see :func:`path_to`).
    n_splits : int
        Random training subsets per combo.
    train_size : int, optional
        Subjects per subset (default ``N // 3`` rounded up as in :func:`thirds`).

    Every ``(combo, split)`` pair is one run; an entry counts as selected
    when its estimate is exactly nonzero.
    """
    paths = [tuple(p) for p in paths]
    if not paths or n_splits < 1 or len(paths) * n_splits < 2:
        raise ValueError("need at least two runs")
    N = data.N
    train_size = thirds(N)[0] if train_size is None else int(train_size)
    if not 3 <= train_size <= N:
        raise ValueError("train_size must lie in [3, N]")
    seqs = np.random.SeedSequence(seed).spawn(n_splits)
    subsets = [np.sort(np.random.default_rng(s).choice(N, train_size, replace=False))
               for s in seqs]
    maximal = _maximal_paths(paths)
    jobs, keys = [], []
    for k, idx in enumerate(subsets):
        sub = data.subset(idx)
        for mp in maximal:
            jobs.append(((sub, prior_net, mp), {"base": base, "opts": opts}))
            keys.append((k, mp))
    results = _run_paths(jobs, workers)
    by_key = dict(zip(keys, results))
    P, E = data.P, data.V * (data.V - 1) // 2
    count_B = np.zeros((P, E))
    count_snp = np.zeros(P)
    n_sel = []
    failed = []
    for k in range(n_splits):
        for p in paths:
            mp = next(m for m in maximal if m[:len(p)] == p)
            run = by_key[(k, mp)][len(p) - 1]
            if run.result is None:
                failed.append((p[-1], k, run.error))
                continue
            sel = _selection(run.result)
            snp = sel.any(axis=1)
            count_B += sel
            count_snp += snp
            n_sel.append(int(snp.sum()))
    n_ok = len(n_sel)
    if n_ok == 0:
        raise RuntimeError("every stability run failed")
    return StabilityReport(count_B / n_ok, count_snp / n_ok, float(np.mean(n_sel)),
                           n_ok, failed)


def ev_bound(q_bar, P, pi_thr):
    """Upper bound on the expected number of false selections."""
    return q_bar ** 2 / ((2 * pi_thr - 1) * P)


def threshold_mb(report, target_ev=None, target_fdr=None):
    """Smallest threshold in (0.5, 1] meeting the error-control target.

    With ``target_ev`` the bound itself must not exceed the target.  With
    ``target_fdr`` the bound divided by the size of the selected set must
    not exceed it.  Infeasible targets give a threshold of 1.  The report
    is updated in place and ``(pi_thr, selected)`` returned.
    """
    if report is None or report.n_runs == 0:
        raise ValueError("empty report")
    if (target_ev is None) == (target_fdr is None):
        raise ValueError("give exactly one of target_ev and target_fdr")
    q, P = report.q_bar, report.P
    freq = report.pi_snp
    if q <= 0:
        thr = float(np.nextafter(0.5, 1.0))
    elif target_ev is not None:
        if target_ev <= 0:
            raise ValueError("target_ev must be positive")
        thr = 0.5 * (1.0 + q * q / (P * target_ev))
        thr = 1.0 if thr > 1 else max(thr, float(np.nextafter(0.5, 1.0)))
    else:
        if not 0 < target_fdr < 1:
            raise ValueError("target_fdr must lie in (0, 1)")
        thr = 1.0
        levels = np.unique(freq[freq > 0.5])
        lower = 0.5
        for m in levels:
            # on (lower, m] the selected set is {freq >= m}
            n = int(np.sum(freq >= m))
            need = 0.5 * (1.0 + q * q / (P * target_fdr * n))
            cand = max(need, float(np.nextafter(lower, 1.0)))
            if cand <= m:
                thr = cand
                break
            lower = m
    report.pi_thr = thr
    report.selected = np.flatnonzero(freq >= thr)
    return thr, report.selected


# -- metrics -----------------------------------------------------------------

def auc(scores, labels):
    """Rank-sum AUC with averaged ties; NaN if only one class is present."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    r = stats.rankdata(scores)
    return float((r[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


@dataclass
class MetricsBundle:
    mseB: float
    mspeA: float
    aucB: float
    aucSnp: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def sensitivity(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def specificity(self):
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else float("nan")

    @property
    def fdr(self):
        n = self.tp + self.fp
        return self.fp / n if n else 0.0

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("mseB", "mspeA", "aucB", "aucSnp", "tp", "fp", "fn", "tn")}
        d.update(sensitivity=self.sensitivity, specificity=self.specificity, fdr=self.fdr)
        return d


def metrics(estimate, truth, test_data=None, selected=None):
    """Recovery and prediction metrics against a known truth.

    ``estimate`` is a FitResult (scores are ``|beta|``) or a thresholded
    StabilityReport (scores are selection frequencies; MSE and MSPE are
    NaN).  ``selected`` overrides the SNP set used for the confusion counts.
    """
    true_B = np.asarray(truth.B_edges)
    true_snp = np.zeros(true_B.shape[0], dtype=bool)
    true_snp[truth.risk] = True
    if isinstance(estimate, StabilityReport):
        score_B, score_snp = estimate.pi_B, estimate.pi_snp
        mse = mspe_a = float("nan")
        if selected is None:
            if estimate.selected is None:
                raise ValueError("threshold the report before computing metrics")
            selected = estimate.selected
    else:
        B = edge_coefficients(estimate.U)
        if B.shape != true_B.shape:
            raise ValueError("estimate and truth disagree on dimensions")
        score_B = np.abs(B)
        score_snp = score_B.max(axis=1)
        mse = float(np.mean((B - true_B) ** 2))
        mspe_a = mspe(estimate, test_data) if test_data is not None and test_data.N else float("nan")
        if selected is None:
            selected = np.flatnonzero(score_snp > 0)
    sel = np.zeros(true_snp.size, dtype=bool)
    sel[np.asarray(selected, dtype=int)] = True
    tp = int(np.sum(sel & true_snp))
    fp = int(np.sum(sel & ~true_snp))
    fn = int(np.sum(~sel & true_snp))
    tn = int(np.sum(~sel & ~true_snp))
    return MetricsBundle(mse, mspe_a, auc(score_B, true_B != 0), auc(score_snp, true_snp),
                         tp, fp, fn, tn)
