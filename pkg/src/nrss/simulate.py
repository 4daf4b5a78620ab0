"""Synthetic genotypes, SNP-set detection, signal tensors and connectomes."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .model import Dataset, PriorNetwork, edges_to_matrix, matrix_to_edges, upper_indices


@dataclass(frozen=True)
class GenotypeConfig:
    """Block-correlated genotype generator settings.

    Each SNP is the sum of two haplotype indicators.  Within a block the
    latent Gaussian behind every haplotype has exchangeable correlation
    ``rho``; blocks are independent.
    """

    N: int
    block_sizes: tuple
    rho: float = 0.7
    maf_lo: float = 0.1
    maf_hi: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if self.N < 1 or any(b < 1 for b in self.block_sizes):
            raise ValueError("N and block sizes must be positive")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if not 0 < self.maf_lo <= self.maf_hi <= 0.5:
            raise ValueError("need 0 < maf_lo <= maf_hi <= 0.5")

    @property
    def P(self):
        return sum(self.block_sizes)


def gen_genotypes(cfg):
    """Draw an (N, P) dosage matrix with values in {0, 1, 2}."""
    rng = np.random.default_rng(cfg.seed)
    out = np.empty((cfg.N, cfg.P))
    maf = rng.uniform(cfg.maf_lo, cfg.maf_hi, size=cfg.P)
    cut = stats.norm.ppf(maf)
    a, b = np.sqrt(cfg.rho), np.sqrt(1.0 - cfg.rho)
    start = 0
    for size in cfg.block_sizes:
        sl = slice(start, start + size)
        dose = np.zeros((cfg.N, size))
        for _ in range(2):
            shared = rng.standard_normal((cfg.N, 1))
            z = a * shared + b * rng.standard_normal((cfg.N, size))
            dose += z < cut[sl]
        out[:, sl] = dose
        start += size
    return out


def _r2_matrix(X):
    Xc = X - X.mean(axis=0)
    ss = np.einsum("ij,ij->j", Xc, Xc)
    with np.errstate(divide="ignore", invalid="ignore"):
        C = (Xc.T @ Xc) / np.sqrt(np.outer(ss, ss))
    C = np.nan_to_num(C, nan=0.0, posinf=0.0, neginf=0.0)
    return C * C


def detect_snp_sets(X, r2_threshold=0.02, init_window=100, fraction=0.5):
    """Partition contiguous SNPs into LD blocks.

    From the current start SNP, blocks of size ``init_window`` down to 2 are
    tried; the first (largest) block in which more than ``fraction`` of the
    off-diagonal r^2 values exceed ``r2_threshold`` is accepted.  Otherwise
    the SNP forms a singleton.  Returns zero-based set labels of length P.
    """
    X = np.asarray(X, dtype=float)
    P = X.shape[1]
    labels = np.empty(P, dtype=int)
    start, q = 0, 0
    while start < P:
        w = min(init_window, P - start)
        size = 1
        if w >= 2:
            hit = np.triu(_r2_matrix(X[:, start:start + w]) > r2_threshold, k=1)
            # cum[d] = number of hits inside the leading d x d block
            cum = np.cumsum(hit.sum(axis=0))
            for d in range(w, 1, -1):
                if cum[d - 1] > fraction * d * (d - 1) / 2:
                    size = d
                    break
        labels[start:start + size] = q
        q += 1
        start += size
    return labels


def block_labels(block_sizes):
    """Set labels for known contiguous block sizes."""
    return np.repeat(np.arange(len(block_sizes)), block_sizes)


@dataclass(frozen=True)
class SignalSpec:
    """How the true coefficient tensor is drawn.

    ``pattern`` is ``"P1"`` (two sets x 50 risk SNPs), ``"P2"`` (ten sets x
    10) or ``"random"`` (``n_risk`` SNPs anywhere).  ``support="fraction"``
    keeps ``round(nonzero_fraction * V)`` nonzero loadings per vector;
    ``support="poisson"`` draws the count from Poisson(``poisson_mean``).
    """

    pattern: str = "P1"
    V: int = 20
    structure: str = "clique"
    nonzero_fraction: float = 0.75
    effect_var: float = 0.5
    support: str = "fraction"
    poisson_mean: float = 8.0
    n_risk: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("P1", "P2", "random"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.structure not in ("clique", "rank3"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.support not in ("fraction", "poisson"):
            raise ValueError(f"unknown support rule {self.support!r}")
        if self.V < 2:
            raise ValueError("V must be at least 2")

    @classmethod
    def simulation2(cls, V=40, n_risk=60, seed=0):
        return cls(pattern="random", V=V, structure="clique", support="poisson",
                   poisson_mean=8.0, effect_var=0.1, n_risk=n_risk, seed=seed)


@dataclass
class GroundTruth:
    B_edges: np.ndarray  # (P, E) true upper-triangle coefficients
    risk: np.ndarray  # sorted risk SNP indices
    B0: np.ndarray
    sigma2: float = 0.0
    U: np.ndarray = None  # (V, P) for clique truth

    @property
    def V(self):
        return self.B0.shape[0]

    @property
    def P(self):
        return self.B_edges.shape[0]

    def slice(self, p):
        return edges_to_matrix(self.B_edges[p], self.V, diag=0.0)


# SNPs per chosen set for the two concentrated/diluted patterns
_PATTERNS = {"P1": (2, 50), "P2": (10, 10)}


def _pick_risk(spec, set_of, rng):
    set_of = np.asarray(set_of)
    if spec.pattern == "random":
        P = set_of.size
        if spec.n_risk > P:
            raise ValueError("more risk SNPs requested than predictors")
        return np.sort(rng.choice(P, spec.n_risk, replace=False))
    n_sets, per_set = _PATTERNS[spec.pattern]
    counts = np.bincount(set_of)
    eligible = np.flatnonzero(counts >= per_set)
    if eligible.size < n_sets:
        raise ValueError(f"pattern {spec.pattern} needs {n_sets} sets with >= {per_set} "
                         f"SNPs; only {eligible.size} available")
    chosen = rng.choice(eligible, n_sets, replace=False)
    risk = [rng.choice(np.flatnonzero(set_of == q), per_set, replace=False) for q in chosen]
    return np.sort(np.concatenate(risk))


def _draw_vector(spec, rng):
    V = spec.V
    if spec.support == "poisson":
        k = int(np.clip(rng.poisson(spec.poisson_mean), 2, V))
    else:
        k = int(np.clip(round(spec.nonzero_fraction * V), 1, V))
    u = np.zeros(V)
    idx = rng.choice(V, k, replace=False)
    u[idx] = rng.normal(0.0, np.sqrt(spec.effect_var), size=k)
    return u


def gen_signal(spec, set_of):
    """Draw the true coefficient slices for the risk SNPs; others are zero."""
    rng = np.random.default_rng(spec.seed)
    set_of = np.asarray(set_of)
    P, V = set_of.size, spec.V
    risk = _pick_risk(spec, set_of, rng)
    iu, ju = upper_indices(V)
    B = np.zeros((P, iu.size))
    U = np.zeros((V, P)) if spec.structure == "clique" else None
    rank = 1 if spec.structure == "clique" else 3
    for p in risk:
        for _ in range(rank):
            u = _draw_vector(spec, rng)
            B[p] += u[iu] * u[ju]
            if U is not None:
                U[:, p] = u
    return GroundTruth(B, risk, np.zeros((V, V)), U=U)


def gen_connectomes(X, truth, sigma2, seed=0):
    """Gaussian connectome responses from the true tensor.

    Returns ``(dataset, snr)`` where ``snr`` is the pooled variance of the
    noiseless upper-triangle signal divided by ``sigma2`` (inf if 0).
    """
    X = np.asarray(X, dtype=float)
    if X.shape[1] != truth.P:
        raise ValueError("X and truth disagree on the number of predictors")
    rng = np.random.default_rng(seed)
    signal = X @ truth.B_edges
    mean = matrix_to_edges(truth.B0) + signal
    noise = rng.normal(0.0, np.sqrt(sigma2), size=mean.shape) if sigma2 > 0 else 0.0
    A = edges_to_matrix(mean + noise, truth.V)
    truth.sigma2 = float(sigma2)
    var = float(np.var(signal))
    snr = var / sigma2 if sigma2 > 0 else np.inf
    return Dataset(A, X, np.zeros(X.shape[1], dtype=int)), snr


def build_prior_network(source, rule="any-subject", threshold=0.0):
    """Binary population template from a dataset or from the truth.

    ``any-subject``: edge present if any subject has ``|a| > threshold``;
    ``all-subjects``: every subject must; ``from-truth``: edge present if any
    true slice is nonzero there (``source`` is a GroundTruth).
    """
    if rule == "from-truth":
        if not isinstance(source, GroundTruth):
            raise TypeError("from-truth rule needs a GroundTruth")
        present = np.any(source.B_edges != 0, axis=0)
        V = source.V
    elif rule in ("any-subject", "all-subjects"):
        E = source.A_edges if isinstance(source, Dataset) else matrix_to_edges(source)
        hit = np.abs(E) > threshold
        present = hit.any(axis=0) if rule == "any-subject" else hit.all(axis=0)
        V = source.V if isinstance(source, Dataset) else np.asarray(source).shape[-1]
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return PriorNetwork(edges_to_matrix(present.astype(float), V, diag=0.0))


def corrupt(net, fraction, seed=0):
    """Flip ``floor(fraction * E)`` distinct upper-triangle entries."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    e = matrix_to_edges(net.psi_tilde)
    k = int(np.floor(fraction * e.size))
    idx = rng.choice(e.size, k, replace=False)
    e = e.copy()
    e[idx] = 1.0 - e[idx]
    return PriorNetwork(edges_to_matrix(e, net.V, diag=0.0))


@dataclass
class Scenario:
    """Everything generated for one replicate."""

    data: Dataset
    truth: GroundTruth
    prior_net: PriorNetwork
    snr: float
    block_sizes: tuple = field(default=())


def simulate_scenario(N=300, n_blocks=20, block_size=100, rho=0.7, signal=None,
                      sigma2=0.1, prior_rule="any-subject", corrupt_fraction=0.0,
                      detect_sets=True, seed=0, target_snr=None):
    """Genotypes, SNP sets, truth, responses and prior network in one call.

    Seeds for each stage are derived from ``seed`` so replicates with the
    same seed but different ``sigma2`` or signal pattern share genotypes.
    With ``target_snr`` the noise variance is set to the pooled signal
    variance over ``target_snr`` and ``sigma2`` is ignored.
    """
    ss = np.random.SeedSequence(seed)
    s_geno, s_sig, s_noise, s_net = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    cfg = GenotypeConfig(N, (block_size,) * n_blocks, rho=rho, seed=s_geno)
    X = gen_genotypes(cfg)
    set_of = detect_snp_sets(X) if detect_sets else block_labels(cfg.block_sizes)
    signal = signal or SignalSpec()
    truth = gen_signal(replace(signal, seed=s_sig), set_of)
    if target_snr is not None:
        if not target_snr > 0:
            raise ValueError("target_snr must be positive")
        sigma2 = float(np.var(X @ truth.B_edges)) / target_snr
        if sigma2 == 0:
            raise ValueError("signal has zero variance; cannot match an SNR")
    raw, snr = gen_connectomes(X, truth, sigma2, seed=s_noise)
    data = Dataset(raw.A, X, set_of)
    net = build_prior_network(data if prior_rule != "from-truth" else truth, prior_rule)
    if corrupt_fraction:
        net = corrupt(net, corrupt_fraction, seed=s_net)
    return Scenario(data, truth, net, snr, cfg.block_sizes)
