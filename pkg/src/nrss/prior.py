"""Prior sampling, log-density, analytic log-magnitude correlations and
Monte Carlo marginal densities of single coefficients."""

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .model import Hyperparams, ModelParams, log_prior_fgh, precision_from_omega

TRIGAMMA_ONE = float(special.polygamma(1, 1))  # pi^2 / 6


@dataclass(frozen=True)
class PriorMoments:
    """Variances of log f, log g and log|h|.

    For Exponential and Laplace factors these equal trigamma(1) whatever
    the rate, so the defaults are the only values reachable by the model.
    """

    sigmaF2: float = TRIGAMMA_ONE
    sigmaG2: float = TRIGAMMA_ONE
    sigmaH2: float = TRIGAMMA_ONE

    def __post_init__(self):
        if min(self.sigmaF2, self.sigmaG2, self.sigmaH2) <= 0:
            raise ValueError("moments must be strictly positive")


class CorrelationCase(enum.Enum):
    """Relative position of two entries beta_{v1 v2 p} and beta_{w1 w2 p'}."""

    SAME_EDGE_SAME_P = "same-edge/same-p"
    SAME_EDGE_SAME_SET = "same-edge/same-set"
    SAME_EDGE_DIFF_SET = "same-edge/different-set"
    SHARED_NODE_SAME_P = "shared-node/same-p"
    SHARED_NODE_SAME_SET = "shared-node/same-set"
    SHARED_NODE_DIFF_SET = "shared-node/different-set"
    DISJOINT_SAME_SET = "disjoint-nodes/same-set"
    DISJOINT_DIFF_SET = "disjoint-nodes/different-set"


def classify(edge1, p1, edge2, p2, set_of):
    """CorrelationCase for entries ``(edge1, p1)`` and ``(edge2, p2)``.

    Edges are node pairs with distinct endpoints; ``set_of`` maps predictors
    to sets.
    """
    a, b = set(edge1), set(edge2)
    if len(a) != 2 or len(b) != 2:
        raise ValueError("edges need two distinct nodes")
    shared = len(a & b)
    same_p = p1 == p2
    same_set = set_of[p1] == set_of[p2]
    C = CorrelationCase
    if shared == 2:
        if same_p:
            return C.SAME_EDGE_SAME_P
        return C.SAME_EDGE_SAME_SET if same_set else C.SAME_EDGE_DIFF_SET
    if shared == 1:
        if same_p:
            return C.SHARED_NODE_SAME_P
        return C.SHARED_NODE_SAME_SET if same_set else C.SHARED_NODE_DIFF_SET
    return C.DISJOINT_SAME_SET if same_set else C.DISJOINT_DIFF_SET


def analytic_corr(case, m=None):
    """Correlation of the two log-magnitudes for a given case.

    ``log|beta_{vv'p}| = log f_q + log g_v + log g_v' + log|h_vp| + log|h_v'p|``,
    so the covariance is the sum of the variances of the shared factors over
    ``sigmaF2 + 2 sigmaG2 + 2 sigmaH2``.
    """
    m = m or PriorMoments()
    case = CorrelationCase(case)
    f, g, h = m.sigmaF2, m.sigmaG2, m.sigmaH2
    C = CorrelationCase
    shared = {
        C.SAME_EDGE_SAME_P: f + 2 * g + 2 * h,
        C.SAME_EDGE_SAME_SET: f + 2 * g,
        C.SAME_EDGE_DIFF_SET: 2 * g,
        C.SHARED_NODE_SAME_P: f + g + h,
        C.SHARED_NODE_SAME_SET: f + g,
        C.SHARED_NODE_DIFF_SET: g,
        C.DISJOINT_SAME_SET: f,
        C.DISJOINT_DIFF_SET: 0.0,
    }[case]
    denom = f + 2 * g + 2 * h
    if case is C.SAME_EDGE_SAME_P:
        return 1.0
    return shared / denom


@dataclass
class PriorDraws:
    f: np.ndarray  # (n, Q)
    g: np.ndarray  # (n, V)
    H: np.ndarray  # (n, V, P)
    alpha: np.ndarray  # (n, V)
    set_of: np.ndarray

    @property
    def U(self):
        return (np.sqrt(self.f[:, self.set_of])[:, None, :] * self.g[:, :, None] * self.H)

    def beta(self, v, w, p):
        """Draws of the single coefficient ``u_vp u_wp``."""
        f0 = self.f[:, self.set_of[p]]
        return f0 * self.g[:, v] * self.g[:, w] * self.H[:, v, p] * self.H[:, w, p]


def sample_prior(hyper, dims, set_of=None, n_draws=1, seed=0, omega=None):
    """Independent draws of ``(f, g, H)`` from the prior.

    Without ``omega`` the node rates are fixed at ``exp(psi)``.  With an
    upper-triangular weight matrix ``omega`` the log rates are first drawn
    from ``N(psi 1, nu Omega^{-1})``.
    """
    V, P, Q = (int(d) for d in dims)
    if V < 1 or P < 1 or Q < 1 or n_draws < 1:
        raise ValueError("dims and n_draws must be positive")
    set_of = np.zeros(P, dtype=int) if set_of is None else np.asarray(set_of, dtype=int)
    if set_of.shape != (P,) or set_of.min() < 0 or set_of.max() >= Q:
        raise ValueError("set_of must map P predictors into range(Q)")
    rng = np.random.default_rng(seed)
    n = int(n_draws)
    if omega is None or hyper.nu == 0:
        alpha = np.full((n, V), float(hyper.psi))
    else:
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (V, V):
            raise ValueError("omega must be V x V")
        cov = hyper.nu * np.linalg.inv(precision_from_omega(omega))
        alpha = rng.multivariate_normal(np.full(V, float(hyper.psi)), cov, size=n)
    f = rng.exponential(1.0 / hyper.lambda_f, size=(n, Q))
    g = rng.standard_exponential(size=(n, V)) / np.exp(alpha)
    H = rng.laplace(0.0, 1.0 / hyper.lambda_h, size=(n, V, P))
    return PriorDraws(f, g, H, alpha, set_of)


# entry pairs realizing every case with V=4, P=3 and sets {0,1},{2}
_CASE_LAYOUT = {
    CorrelationCase.SAME_EDGE_SAME_P: ((0, 1), 0, (0, 1), 0),
    CorrelationCase.SAME_EDGE_SAME_SET: ((0, 1), 0, (0, 1), 1),
    CorrelationCase.SAME_EDGE_DIFF_SET: ((0, 1), 0, (0, 1), 2),
    CorrelationCase.SHARED_NODE_SAME_P: ((0, 1), 0, (0, 2), 0),
    CorrelationCase.SHARED_NODE_SAME_SET: ((0, 1), 0, (0, 2), 1),
    CorrelationCase.SHARED_NODE_DIFF_SET: ((0, 1), 0, (0, 2), 2),
    CorrelationCase.DISJOINT_SAME_SET: ((0, 1), 0, (2, 3), 1),
    CorrelationCase.DISJOINT_DIFF_SET: ((0, 1), 0, (2, 3), 2),
}


def correlation_table(hyper=None, n_draws=10**6, seed=0):
    """Monte Carlo vs analytic log-magnitude correlations for every case.

    Returns a list of ``(case, monte_carlo, analytic)`` tuples.
    """
    hyper = hyper or Hyperparams()
    set_of = np.array([0, 0, 1])
    draws = sample_prior(hyper, (4, 3, 2), set_of, n_draws, seed)
    out = []
    for case, (e1, p1, e2, p2) in _CASE_LAYOUT.items():
        assert classify(e1, p1, e2, p2, set_of) is case
        a = np.log(np.abs(draws.beta(*e1, p1)))
        b = np.log(np.abs(draws.beta(*e2, p2)))
        out.append((case, float(np.corrcoef(a, b)[0, 1]), analytic_corr(case)))
    return out


def coefficient_draws(hyper, n_samples, seed=0, kind="beta", omega=None):
    """Draws of one ``beta`` entry (``u_vp u_v'p``) or one loading ``u_vp``."""
    if kind not in ("beta", "u"):
        raise ValueError("kind must be 'beta' or 'u'")
    V = 2 if omega is None else np.asarray(omega).shape[0]
    d = sample_prior(hyper, (V, 1, 1), None, n_samples, seed, omega=omega)
    if kind == "u":
        return np.sqrt(d.f[:, 0]) * d.g[:, 0] * d.H[:, 0, 0]
    return d.beta(0, 1, 0)


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=float)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(np.std(x, ddof=1), iqr / 1.34)
    return 0.9 * spread * x.size ** (-0.2)


@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    stderr: np.ndarray
    samples: np.ndarray  # reflected sample, symmetric about 0
    bandwidth: float

    def mass(self, lo, hi):
        """Kernel-estimate probability of ``[lo, hi]``."""
        h = self.bandwidth
        return float(np.mean(stats.norm.cdf((hi - self.samples) / h)
                             - stats.norm.cdf((lo - self.samples) / h)))

    def tail_mass(self, c):
        """Kernel-estimate probability of ``|beta| > c``."""
        return 1.0 - self.mass(-c, c)


def marginal_coeff_density(hyper, grid, n_samples=10**5, seed=0, kind="beta",
                           omega=None, chunk=256):
    """Gaussian kernel density of a single coefficient under the prior.

    The draws are reflected (each value and its negative are both kept),
    so the estimate is exactly symmetric when ``grid`` is.  The bandwidth
    is Silverman's rule of thumb on the reflected sample.  ``stderr`` is the
    pointwise Monte Carlo standard error of the kernel average.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid must be finite")
    if n_samples < 10**5:
        raise ValueError("need at least 1e5 samples")
    x = coefficient_draws(hyper, n_samples, seed, kind, omega)
    x = np.concatenate([x, -x])
    h = silverman_bandwidth(x)
    dens = np.empty(grid.size)
    se = np.empty(grid.size)
    flat = grid.ravel()
    for s in range(0, flat.size, chunk):
        k = stats.norm.pdf((flat[s:s + chunk, None] - x[None, :]) / h) / h
        dens[s:s + chunk] = k.mean(axis=1)
        se[s:s + chunk] = k.std(axis=1, ddof=1) / np.sqrt(x.size)
    return DensityEstimate(grid, dens.reshape(grid.shape), se.reshape(grid.shape), x, h)


def prior_log_density(params, hyper, lambda_h=None):
    """Log prior of ``(f, g, H, sigma2)`` given the node rates, up to a constant."""
    if not isinstance(params, ModelParams):
        raise TypeError("params must be ModelParams")
    return log_prior_fgh(params, hyper, lambda_h)
