"""Data model, coefficient parameterization and the MAP objective.

Each subject contributes a symmetric V x V connectivity matrix ``A_i`` and a
predictor vector ``x_i``.  The regression is

    A_i = B0 + sum_p (u_p outer u_p) x_ip + noise,

with ``u_vp = sqrt(f_q(p)) * g_v * h_vp``.  Only the strictly upper triangle
of each matrix enters the likelihood; diagonals are never read.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

# lambda^h used for unpenalized covariate columns
COVARIATE_LAMBDA_H = 1e-8


def upper_indices(V):
    """Row/column index arrays of the strict upper triangle (v < v')."""
    return np.triu_indices(V, k=1)


def n_edges(V):
    return V * (V - 1) // 2


def edges_to_matrix(values, V, diag=np.nan):
    """Expand ``(..., E)`` upper-triangle values to ``(..., V, V)`` symmetric."""
    values = np.asarray(values, dtype=float)
    iu, ju = upper_indices(V)
    out = np.zeros(values.shape[:-1] + (V, V))
    out[..., iu, ju] = values
    out[..., ju, iu] = values
    idx = np.arange(V)
    out[..., idx, idx] = diag
    return out


def matrix_to_edges(M):
    M = np.asarray(M, dtype=float)
    iu, ju = upper_indices(M.shape[-1])
    return M[..., iu, ju]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Subjects' connectivity matrices, predictors and the predictor grouping.

    Parameters
    ----------
    A : array (N, V, V)
        Symmetric response matrices.  Only the strict upper triangle is used;
        the stored diagonal is set to NaN.
    X : array (N, P)
        Predictors (genotype dosages and/or covariates).
    set_of : int array (P,)
        Zero-based set index of every predictor; sets are ``0..Q-1``.
    unpenalized : tuple of int
        Covariate columns.  Each must be alone in its set; its set weight is
        fixed at one and its entry penalty is negligible.
    """

    A: np.ndarray
    X: np.ndarray
    set_of: np.ndarray
    unpenalized: tuple = ()

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array (N, P)")
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("A must have shape (N, V, V)")
        N, P = X.shape
        if A.shape[0] != N:
            raise ValueError(f"A has {A.shape[0]} subjects but X has {N}")
        V = A.shape[1]
        if N < 3 or V < 2 or P < 1:
            raise ValueError("need N >= 3, V >= 2 and P >= 1")
        up = matrix_to_edges(A)
        if not np.all(np.isfinite(up)):
            raise ValueError("A contains non-finite off-diagonal entries")
        A = edges_to_matrix(up, V)
        set_of = np.asarray(self.set_of)
        if set_of.shape != (P,):
            raise ValueError(f"set_of must have length P={P}")
        if not np.issubdtype(set_of.dtype, np.integer):
            if not np.all(set_of == np.round(set_of)):
                raise ValueError("set_of must hold integer set labels")
            set_of = set_of.astype(int)
        if set_of.min() < 0:
            raise ValueError("set labels must be nonnegative")
        Q = int(set_of.max()) + 1
        counts = np.bincount(set_of, minlength=Q)
        if np.any(counts == 0):
            raise ValueError("set labels must be contiguous 0..Q-1")
        unpen = tuple(sorted(int(p) for p in self.unpenalized))
        for p in unpen:
            if not 0 <= p < P:
                raise ValueError(f"unpenalized index {p} out of range")
            if counts[set_of[p]] != 1:
                raise ValueError(f"unpenalized predictor {p} must form a singleton set")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "set_of", _frozen(set_of, int))
        object.__setattr__(self, "unpenalized", unpen)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def P(self):
        return self.X.shape[1]

    @property
    def V(self):
        return self.A.shape[1]

    @property
    def Q(self):
        return int(self.set_of.max()) + 1

    @cached_property
    def A_edges(self):
        """Upper-triangle responses as an (N, E) array."""
        out = matrix_to_edges(self.A)
        out.setflags(write=False)
        return out

    @cached_property
    def fixed_sets(self):
        """Boolean mask over sets whose weight f_q is pinned at one."""
        mask = np.zeros(self.Q, dtype=bool)
        mask[self.set_of[list(self.unpenalized)]] = True
        return mask

    def lambda_h_vector(self, hyper):
        lam = np.full(self.P, float(hyper.lambda_h))
        lam[list(self.unpenalized)] = COVARIATE_LAMBDA_H
        return lam

    def subset(self, idx):
        """Dataset restricted to the given subjects."""
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.A[idx], self.X[idx], self.set_of, self.unpenalized)


@dataclass(frozen=True)
class PriorNetwork:
    """Binary symmetric template coupling node-level shrinkage rates."""

    psi_tilde: np.ndarray

    def __post_init__(self):
        M = np.array(self.psi_tilde, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("prior network must be a square matrix")
        if not np.all((M == 0) | (M == 1)):
            raise ValueError("prior network entries must be 0 or 1")
        if not np.array_equal(M, M.T):
            raise ValueError("prior network must be symmetric")
        if np.any(np.diag(M) != 0):
            raise ValueError("prior network diagonal must be zero")
        object.__setattr__(self, "psi_tilde", _frozen(M))

    @property
    def V(self):
        return self.psi_tilde.shape[0]

    @classmethod
    def empty(cls, V):
        return cls(np.zeros((V, V)))

    @classmethod
    def complete(cls, V):
        return cls(np.ones((V, V)) - np.eye(V))

    @classmethod
    def from_edges(cls, V, edges):
        M = np.zeros((V, V))
        for v, w in edges:
            M[v, w] = M[w, v] = 1.0
        return cls(M)


@dataclass(frozen=True)
class Hyperparams:
    """Prior hyper-parameters.

    ``nu = 0`` pins every node rate at ``exp(psi)``.
    """

    lambda_f: float = 1.0
    lambda_h: float = 1.0
    psi: float = 0.0
    nu: float = 1.0
    tau: float = 1.0
    eta: float = 1.0
    sigma2_floor: float = 1e-10

    def __post_init__(self):
        for name in ("lambda_f", "lambda_h", "tau", "eta", "sigma2_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.nu >= 0:
            raise ValueError("nu must be nonnegative")
        if not np.isfinite(self.psi):
            raise ValueError("psi must be finite")

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


@dataclass
class ModelParams:
    """Full MAP state ``(f, g, H, B0, alpha, sigma2)``."""

    f: np.ndarray
    g: np.ndarray
    H: np.ndarray
    B0: np.ndarray
    alpha: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.f = np.array(self.f, dtype=float)
        self.g = np.array(self.g, dtype=float)
        self.H = np.array(self.H, dtype=float)
        self.B0 = np.array(self.B0, dtype=float)
        self.alpha = np.array(self.alpha, dtype=float)
        self.sigma2 = float(self.sigma2)
        V, P = self.H.shape
        if self.g.shape != (V,) or self.alpha.shape != (V,):
            raise ValueError("g and alpha must have length V")
        if self.B0.shape != (V, V):
            raise ValueError("B0 must be V x V")

    @property
    def V(self):
        return self.H.shape[0]

    @property
    def P(self):
        return self.H.shape[1]

    def copy(self):
        return replace(self, f=self.f.copy(), g=self.g.copy(), H=self.H.copy(),
                       B0=self.B0.copy(), alpha=self.alpha.copy())

    @classmethod
    def null(cls, V, P, Q, psi=0.0, sigma2=1.0):
        """All-zero coefficients; handy for tests and as a reference point."""
        return cls(np.zeros(Q), np.zeros(V), np.zeros((V, P)), np.zeros((V, V)),
                   np.full(V, float(psi)), sigma2)


def assemble_u(params, set_of):
    """Coefficient matrix U (V x P) with ``u_vp = sqrt(f_q(p)) g_v h_vp``."""
    set_of = np.asarray(set_of, dtype=int)
    if set_of.shape != (params.P,):
        raise ValueError(f"set_of has length {set_of.shape[0]}, H has {params.P} columns")
    if set_of.max() >= params.f.shape[0]:
        raise ValueError("set_of refers to a set beyond len(f)")
    f0 = np.sqrt(params.f[set_of])
    return params.g[:, None] * params.H * f0[None, :]


def coefficient_slice(U, p):
    """Rank-one slice ``u_p outer u_p``.

    The diagonal is filled in for convenience but is not part of the model.
    """
    U = np.asarray(U)
    if not 0 <= p < U.shape[1]:
        raise IndexError(f"predictor index {p} out of range for P={U.shape[1]}")
    u = U[:, p]
    return np.outer(u, u)


def edge_coefficients(U):
    """Upper-triangle entries of every slice as a (P, E) array."""
    iu, ju = upper_indices(U.shape[0])
    return (U[iu] * U[ju]).T


def predict(params, x, set_of):
    """Expected connectivity matrix for one predictor vector (NaN diagonal)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.P,):
        raise ValueError(f"x has length {x.shape[0]}, expected {params.P}")
    U = assemble_u(params, set_of)
    out = params.B0 + (U * x) @ U.T
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, np.nan)
    return out


def fitted_edges(params, X, set_of, U=None):
    """Upper-triangle fitted values for every subject, shape (N, E)."""
    if U is None:
        U = assemble_u(params, set_of)
    act = np.flatnonzero(np.any(U != 0, axis=0))
    b0 = matrix_to_edges(params.B0)
    if act.size == 0:
        return np.broadcast_to(b0, (X.shape[0], b0.size)).copy()
    return b0 + X[:, act] @ edge_coefficients(U[:, act])


def effective_alpha(params, hyper):
    if hyper.nu == 0:
        return np.full(params.V, float(hyper.psi))
    return params.alpha


def neg_log_likelihood(params, data):
    """Gaussian negative log-likelihood over upper-triangle entries (no constant)."""
    if not params.sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    r = data.A_edges - fitted_edges(params, data.X, data.set_of)
    m = r.size
    return 0.5 * m * np.log(params.sigma2) + 0.5 * np.sum(r * r) / params.sigma2


def log_prior_fgh(params, hyper, lambda_h=None):
    """Log prior of ``(f, g, H, sigma2)`` given the node rates, up to a constant.

    ``lambda_h`` optionally overrides the entry rate per column.
    """
    if np.any(params.f < 0) or np.any(params.g < 0):
        raise ValueError("f and g must be nonnegative")
    if not params.sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    lam_h = hyper.lambda_h if lambda_h is None else np.asarray(lambda_h)[None, :]
    alpha = effective_alpha(params, hyper)
    return (-hyper.lambda_f * np.sum(params.f)
            + np.sum(alpha - np.exp(alpha) * params.g)
            - np.sum(lam_h * np.abs(params.H))
            - 1.5 * np.log(params.sigma2) - 0.5 / params.sigma2)


def log_alpha_marginal(alpha, hyper, prior_net):
    """Log prior of the log node rates with the edge weights integrated out.

    Integrating each Gamma(tau, eta) edge weight against the Gaussian
    coupling gives, up to a constant,

        -sum_v (a_v - psi)^2 / (2 nu)
        - tau * sum_{edges} log(1 + (a_v - a_v')^2 / (2 nu eta)).
    """
    if hyper.nu == 0:
        return 0.0
    alpha = np.asarray(alpha, dtype=float)
    iu, ju = np.nonzero(np.triu(prior_net.psi_tilde, k=1))
    d2 = (alpha[iu] - alpha[ju]) ** 2
    return (-np.sum((alpha - hyper.psi) ** 2) / (2 * hyper.nu)
            - hyper.tau * np.sum(np.log1p(d2 / (2 * hyper.nu * hyper.eta))))


def objective_blocks(params, data, hyper, prior_net):
    """The three additive pieces of the negative log posterior."""
    _check_dims(params, data, prior_net)
    return {
        "likelihood": neg_log_likelihood(params, data),
        "prior": -log_prior_fgh(params, hyper, data.lambda_h_vector(hyper)),
        "alpha": -log_alpha_marginal(effective_alpha(params, hyper), hyper, prior_net),
    }


def neg_log_posterior(params, data, hyper, prior_net):
    """Negative log posterior with the latent edge weights marginalized."""
    return float(sum(objective_blocks(params, data, hyper, prior_net).values()))


def _check_dims(params, data, prior_net):
    if params.H.shape != (data.V, data.P):
        raise ValueError(f"H has shape {params.H.shape}, data needs {(data.V, data.P)}")
    if params.f.shape != (data.Q,):
        raise ValueError(f"f has length {params.f.shape[0]}, data has Q={data.Q}")
    if prior_net.V != data.V:
        raise ValueError("prior network size does not match V")


def precision_from_omega(omega):
    """Precision matrix with off-diagonal -w and diagonal 1 + row sums of w."""
    W = np.triu(np.asarray(omega, dtype=float), k=1)
    W = W + W.T
    Om = -W
    Om[np.diag_indices_from(Om)] = 1.0 + W.sum(axis=1)
    return Om


def gradients(params, data, hyper, prior_net):
    """Analytic gradients of the negative log posterior for every block.

    ``H`` uses ``sign(h)`` for the l1 term, so it is only meaningful away
    from zeros; ``f`` and ``g`` likewise assume interior points.
    """
    _check_dims(params, data, prior_net)
    X, set_of = data.X, data.set_of
    s2 = params.sigma2
    f0 = np.sqrt(params.f[set_of])
    U = assemble_u(params, set_of)
    r = data.A_edges - fitted_edges(params, X, set_of, U)
    V = data.V
    R = edges_to_matrix(r, V, diag=0.0)  # (N, V, V)
    # d(-loglik)/dU[v, p] = -(1/s2) sum_i x_ip sum_{w != v} r_ivw U[w, p]
    XtR = np.einsum("ip,ivw->pvw", X, R)
    dU = -np.einsum("pvw,wp->vp", XtR, U) / s2
    lam_h = data.lambda_h_vector(hyper)
    alpha = effective_alpha(params, hyper)
    grad_H = dU * params.g[:, None] * f0[None, :] + lam_h[None, :] * np.sign(params.H)
    grad_g = np.sum(dU * params.H * f0[None, :], axis=1) + np.exp(alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        dfcol = np.sum(dU * params.g[:, None] * params.H, axis=0) * 0.5 / f0
    dfcol[f0 == 0] = 0.0
    grad_f = np.bincount(set_of, weights=dfcol, minlength=data.Q) + hyper.lambda_f
    m = r.size
    S = np.sum(r * r)
    grad_s2 = 0.5 * m / s2 - 0.5 * S / s2**2 + 1.5 / s2 - 0.5 / s2**2
    grad_B0 = -edges_to_matrix(r.sum(axis=0), V, diag=0.0) / s2
    if hyper.nu > 0:
        d = alpha[:, None] - alpha[None, :]
        w = prior_net.psi_tilde * 2 * hyper.tau / (2 * hyper.nu * hyper.eta + d**2)
        grad_alpha = ((alpha - hyper.psi) / hyper.nu + np.sum(w * d, axis=1)
                      - 1.0 + params.g * np.exp(alpha))
    else:
        grad_alpha = np.zeros(V)
    return {"f": grad_f, "g": grad_g, "H": grad_H, "B0": grad_B0,
            "alpha": grad_alpha, "sigma2": grad_s2}
