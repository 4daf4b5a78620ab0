"""EM algorithm for MAP estimation under the network-response shrinkage prior.

One outer iteration runs, in order:

1. E-step for the latent edge weights and the closed-form intercept update;
2. for every node, one (or more) proximal-gradient steps on ``h_v`` followed
   by the exact ``g_v`` update;
3. proximal-gradient steps on the set weights ``f`` (nonnegative);
4. the noise variance;
5. one safeguarded Newton step on the log node rates ``alpha``.

All likelihood quantities are computed from a cached (N, E) residual matrix
and restricted to predictor columns that can actually influence the fit, so
the per-node cost shrinks as the estimate becomes sparse.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import linalg

from .model import (
    ModelParams,
    assemble_u,
    edges_to_matrix,
    fitted_edges,
    log_alpha_marginal,
    log_prior_fgh,
    matrix_to_edges,
    precision_from_omega,
    upper_indices,
)

logger = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Raised when the fit produces non-finite values."""


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    tol: float = 1e-6
    step_shrink: float = 0.5
    armijo: float = 1e-4
    inner_iter: int = 1
    seed: int = 0
    init_scale: float = 0.01
    explicit_r: bool = False
    lipschitz_every: int = 10
    power_iter: int = 20
    refresh_every: int = 25
    newton_halvings: int = 30
    max_backtracks: int = 60
    # "posterior" minimizes the full objective in sigma2; "mle" is the
    # maximum-likelihood update S / m, which ignores the sigma2 prior.
    sigma2_rule: str = "posterior"
    # multiplier on 1/L for the first trial step of each backtracking search
    step_boost: float = 1.0
    # random restarts (seeds seed, seed+1, ...); the lowest objective wins
    n_starts: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.step_shrink < 1:
            raise ValueError("step_shrink must lie in (0, 1)")
        if self.max_iter < 1 or self.inner_iter < 1 or self.lipschitz_every < 1 or self.n_starts < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.sigma2_rule not in ("posterior", "mle"):
            raise ValueError("sigma2_rule must be 'posterior' or 'mle'")

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentGraph:
    """Nonnegative edge weights on the prior network (stored upper-triangular)."""

    omega: np.ndarray

    def precision(self):
        return precision_from_omega(self.omega)


@dataclass
class FitResult:
    params: ModelParams
    omega: LatentGraph
    trace: list
    n_iter: int
    converged: bool
    wall_time: float = 0.0
    set_of: np.ndarray = field(default=None, repr=False)

    @property
    def objective(self):
        return self.trace[-1]

    @property
    def U(self):
        return assemble_u(self.params, self.set_of)


def prox_l1(x, lam, t, nonneg=False):
    """Soft threshold ``(1 - lam t / |x|)_+ x``; ``nonneg`` also projects on x >= 0.

    ``lam`` may be a scalar or an array matching ``x``.  Ties at exactly
    ``|x| = lam t`` map to zero.
    """
    x = np.asarray(x, dtype=float)
    thr = np.asarray(lam, dtype=float) * t
    if nonneg:
        return np.maximum(x - thr, 0.0)
    mag = np.abs(x) - thr
    return np.where(mag > 0, np.sign(x) * mag, 0.0)


def e_step(alpha, psi_tilde, nu, tau, eta):
    """Posterior mean of the edge weights: ``2 nu tau / (2 nu eta + (a_v - a_w)^2)``.

    Returns the upper-triangular weight matrix; zero off the prior network.
    """
    alpha = np.asarray(alpha, dtype=float)
    psi_tilde = np.asarray(psi_tilde, dtype=float)
    V = alpha.shape[0]
    if nu <= 0:
        return LatentGraph(np.zeros((V, V)))
    d2 = (alpha[:, None] - alpha[None, :]) ** 2
    w = np.triu(2 * nu * tau * psi_tilde / (2 * nu * eta + d2), k=1)
    return LatentGraph(w)


def _power_max_eig(matvec, k, rng, n_iter):
    if k == 0:
        return 0.0
    w = rng.standard_normal(k)
    w /= np.linalg.norm(w)
    lam = 0.0
    for _ in range(n_iter):
        z = matvec(w)
        nz = np.linalg.norm(z)
        if nz == 0:
            return 0.0
        lam = float(w @ z)
        w = z / nz
    # one more Rayleigh quotient on the final vector; power iteration
    # approaches from below so inflate slightly
    return max(lam, float(w @ matvec(w))) * 1.05


class WorkState:
    """Mutable solver state: parameters plus cached residuals and step sizes."""

    def __init__(self, data, prior_net, hyper, opts, params):
        self.data = data
        self.hyper = hyper
        self.opts = opts
        self.psi_tilde = prior_net.psi_tilde
        self.X = data.X
        self.set_of = data.set_of
        self.N, self.P = data.X.shape
        self.V, self.Q = data.V, data.Q
        self.E = self.V * (self.V - 1) // 2
        self.iu, self.ju = upper_indices(self.V)
        eid = np.zeros((self.V, self.V), dtype=int)
        eid[self.iu, self.ju] = np.arange(self.E)
        eid[self.ju, self.iu] = np.arange(self.E)
        self.others = [np.delete(np.arange(self.V), v) for v in range(self.V)]
        self.node_edges = [eid[v, self.others[v]] for v in range(self.V)]
        self.lam_h = data.lambda_h_vector(hyper)
        self.free_sets = ~data.fixed_sets
        self.params = params.copy()
        self.params.f[data.fixed_sets] = 1.0
        if hyper.nu == 0:
            self.params.alpha[:] = hyper.psi
        self.rng = np.random.default_rng(opts.seed + 7919)
        self.lip_h = np.zeros(self.V)  # lambda_max(R_v) * sigma2
        self.lip_f = 0.0
        self.omega = e_step(self.params.alpha, self.psi_tilde, hyper.nu, hyper.tau, hyper.eta)
        self.refresh()

    # -- caches -----------------------------------------------------------
    def refresh(self):
        """Recompute U and the residual matrix from scratch."""
        p = self.params
        self.f0 = np.sqrt(p.f[self.set_of])
        self.U = assemble_u(p, self.set_of)
        self.resid = self.data.A_edges - fitted_edges(p, self.X, self.set_of, self.U)

    def residual_drift(self):
        direct = self.data.A_edges - fitted_edges(self.params, self.X, self.set_of)
        return float(np.max(np.abs(direct - self.resid)))

    # -- objective --------------------------------------------------------
    def objective(self):
        p = self.params
        m = self.resid.size
        nll = 0.5 * m * np.log(p.sigma2) + 0.5 * np.sum(self.resid**2) / p.sigma2
        return float(nll - log_prior_fgh(p, self.hyper, self.lam_h)
                     - log_alpha_marginal(p.alpha, self.hyper, _Net(self.psi_tilde)))

    # -- node block -------------------------------------------------------
    def node_system(self, v):
        """Active columns, restricted design and the residual without node v."""
        others = self.others[v]
        Uo = self.U[others]
        act = np.flatnonzero(np.any(Uo != 0, axis=0))
        Xa = self.X[:, act]
        Uoa = Uo[:, act]
        ev = self.node_edges[v]
        c = self.resid[:, ev] + Xa @ (self.U[v, act] * Uoa).T
        return act, Xa, Uoa, c

    def node_lipschitz(self, v, system=None):
        act, Xa, Uoa, _ = system or self.node_system(v)
        f0a = self.f0[act]

        def matvec(w):
            M = Xa @ ((f0a * w) * Uoa).T
            return f0a * np.sum((Xa.T @ M) * Uoa.T, axis=1)

        self.lip_h[v] = _power_max_eig(matvec, act.size, self.rng, self.opts.power_iter)
        return self.lip_h[v]

    def f_system(self):
        """Columns with at least two nonzero node loadings in free sets."""
        K = self.params.g[:, None] * self.params.H
        mask = (np.count_nonzero(K, axis=0) >= 2) & self.free_sets[self.set_of]
        pa = np.flatnonzero(mask)
        Ka = K[:, pa]
        G = (Ka[self.iu] * Ka[self.ju]).T  # (k, E)
        return pa, self.X[:, pa], G

    def f_lipschitz(self, system=None):
        pa, Xa, G = system or self.f_system()
        qa = self.set_of[pa]
        Q = self.Q

        def matvec(w):
            Y = (Xa * w[qa]) @ G
            return np.bincount(qa, weights=np.sum((Xa.T @ Y) * G, axis=1), minlength=Q)

        if pa.size == 0:
            self.lip_f = 0.0
        else:
            self.lip_f = _power_max_eig(matvec, Q, self.rng, self.opts.power_iter)
        return self.lip_f


class _Net:
    def __init__(self, psi_tilde):
        self.psi_tilde = psi_tilde


# -- block updates ---------------------------------------------------------

def node_gradient(state, v, system=None, h=None):
    """Gradient of the smooth part of the node-v lasso problem in h_v[act].

    Returns ``(act, grad, smooth_value)``; computed matrix-free or from the
    explicit ``R_v`` / ``s_v`` depending on ``state.opts.explicit_r``.
    """
    act, Xa, Uoa, c = system or state.node_system(v)
    p = state.params
    s2 = p.sigma2
    g = p.g[v]
    f0a = state.f0[act]
    hv = p.H[v, act] if h is None else h
    if state.opts.explicit_r:
        R, s = explicit_node_system(state, v, (act, Xa, Uoa, c))
        grad = g * g * (R @ hv) - g * s
        smooth = 0.5 * g * g * hv @ R @ hv - g * hv @ s + 0.5 * np.sum(c * c) / s2
        return act, grad, smooth
    r = c - Xa @ ((g * f0a * hv) * Uoa).T
    grad = -(g / s2) * f0a * np.sum((Xa.T @ r) * Uoa.T, axis=1)
    return act, grad, 0.5 * np.sum(r * r) / s2


def explicit_node_system(state, v, system=None):
    """Form ``R_v`` (k x k) and ``s_v`` (k,) over the node's active columns."""
    act, Xa, Uoa, c = system or state.node_system(v)
    s2 = state.params.sigma2
    f0a = state.f0[act]
    R = np.outer(f0a, f0a) * (Uoa.T @ Uoa) * (Xa.T @ Xa) / s2
    s = f0a * np.sum(Uoa.T * (Xa.T @ c), axis=1) / s2
    return R, s


def _node_smooth(state, v, system, h):
    act, Xa, Uoa, c = system
    p = state.params
    r = c - Xa @ ((p.g[v] * state.f0[act] * h) * Uoa).T
    return 0.5 * np.sum(r * r) / p.sigma2


def node_lasso_objective(state, v, system=None, h=None):
    """``(g^2/2) h'R h - g h's + lambda_h |h|_1`` plus the constant residual term."""
    system = system or state.node_system(v)
    hv = state.params.H[v] if h is None else h
    act = system[0]
    return _node_smooth(state, v, system, hv[act]) + np.sum(state.lam_h * np.abs(hv))


def update_h(state, v, system=None):
    """Proximal-gradient steps with backtracking on node v's loadings."""
    system = system or state.node_system(v)
    act = system[0]
    p = state.params
    g = p.g[v]
    lam = state.lam_h
    h = p.H[v].copy()
    L = g * g * state.lip_h[v] / p.sigma2
    if g == 0 or act.size == 0:
        # smooth part is constant in h: the exact minimizer is zero
        p.H[v] = 0.0
        return p.H[v]
    opts = state.opts
    for _ in range(opts.inner_iter):
        ha = h[act]
        _, grad, smooth = node_gradient(state, v, system, ha)
        if not np.all(np.isfinite(grad)):
            raise FitError(f"non-finite gradient for node {v}")
        step = opts.step_boost / L if L > 0 else 1.0
        for _ in range(opts.max_backtracks):
            hn = prox_l1(ha - step * grad, lam[act], step)
            d = hn - ha
            sm_new = _node_smooth(state, v, system, hn)
            if sm_new <= smooth + grad @ d + (d @ d) / (2 * step) + 1e-12 * abs(smooth):
                break
            step *= opts.step_shrink
        old_obj = smooth + np.sum(lam[act] * np.abs(ha))
        new_obj = sm_new + np.sum(lam[act] * np.abs(hn))
        if new_obj > old_obj:
            hn = ha
        h[act] = hn
    # the likelihood ignores columns where every other node is zero, so the
    # exact minimizer over those coordinates is zero
    inactive = np.ones(h.size, dtype=bool)
    inactive[act] = False
    h[inactive] = 0.0
    p.H[v] = h
    return h


def g_closed_form(hs, hRh, lam_g):
    """Minimizer over g >= 0 of ``(g^2/2) hRh - g hs + lam_g g``."""
    return max(hs - lam_g, 0.0) / hRh if hRh > 0 else 0.0


def update_g(state, v, system=None):
    """Exact nonnegative minimizer ``(h's - exp(alpha_v))_+ / h'R h``.

    Also refreshes U[v] and the residual columns for node v.
    """
    act, Xa, Uoa, c = system or state.node_system(v)
    p = state.params
    w = state.f0[act] * p.H[v, act]
    M = Xa @ (w * Uoa).T
    a = np.sum(M * M) / p.sigma2
    b = np.sum(M * c) / p.sigma2
    g = g_closed_form(b, a, np.exp(p.alpha[v]))
    p.g[v] = g
    state.U[v] = g * state.f0 * p.H[v]
    state.resid[:, state.node_edges[v]] = c - g * M
    return g


def f_objective(state, system, f):
    pa, Xa, G = system
    qa = state.set_of[pa]
    df = (f - state.params.f)[qa]
    r = state.resid - (Xa * df) @ G if pa.size else state.resid
    return 0.5 * np.sum(r * r) / state.params.sigma2 + state.hyper.lambda_f * np.sum(f)


def update_f(state, system=None):
    """Nonnegative proximal-gradient steps on the set weights."""
    p = state.params
    opts = state.opts
    system = system or state.f_system()
    pa, Xa, G = system
    qa = state.set_of[pa]
    free = state.free_sets
    lam = state.hyper.lambda_f
    s2 = p.sigma2
    f_start = p.f.copy()
    f = f_start.copy()
    for _ in range(opts.inner_iter):
        df = (f - f_start)[qa]
        r = state.resid - (Xa * df) @ G if pa.size else state.resid
        smooth = 0.5 * np.sum(r * r) / s2
        if pa.size:
            grad = -np.bincount(qa, weights=np.sum((Xa.T @ r) * G, axis=1),
                                minlength=state.Q) / s2
        else:
            grad = np.zeros(state.Q)
        if not np.all(np.isfinite(grad)):
            raise FitError("non-finite gradient in f update")
        grad[~free] = 0.0
        L = state.lip_f / s2
        step = opts.step_boost / L if L > 0 else 1.0
        if L == 0:
            fn = f.copy()
            fn[free] = 0.0  # smooth part constant: exact minimizer
        else:
            for _ in range(opts.max_backtracks):
                fn = f.copy()
                fn[free] = prox_l1(f[free] - step * grad[free], lam, step, nonneg=True)
                d = fn - f
                rn = state.resid - (Xa * (fn - f_start)[qa]) @ G if pa.size else r
                sm_new = 0.5 * np.sum(rn * rn) / s2
                if sm_new <= smooth + grad @ d + (d @ d) / (2 * step) + 1e-12 * abs(smooth):
                    break
                step *= opts.step_shrink
            if sm_new + lam * np.sum(fn[free]) > smooth + lam * np.sum(f[free]):
                fn = f
        f = fn
    if pa.size:
        state.resid = state.resid - (Xa * (f - f_start)[qa]) @ G
    p.f = f
    state.f0 = np.sqrt(f[state.set_of])
    state.U = p.g[:, None] * p.H * state.f0[None, :]
    return f


def alpha_surrogate(alpha, state, omega=None):
    """Expected complete-data objective in alpha given the E-step weights."""
    hyper = state.hyper
    p = state.params
    Om = (omega or state.omega).precision()
    d = alpha - hyper.psi
    return float(d @ Om @ d / (2 * hyper.nu) - np.sum(alpha - np.exp(alpha) * p.g))


def alpha_gradient(alpha, state, omega=None):
    hyper = state.hyper
    Om = (omega or state.omega).precision()
    return Om @ (alpha - hyper.psi) / hyper.nu - 1.0 + state.params.g * np.exp(alpha)


def update_alpha(state, omega=None):
    """One Newton step on the log node rates, halved until Armijo decrease."""
    p = state.params
    hyper = state.hyper
    if hyper.nu == 0:
        p.alpha[:] = hyper.psi
        return p.alpha
    omega = omega or state.omega
    Om = omega.precision()
    a = p.alpha
    ea = np.exp(a)
    s = alpha_gradient(a, state, omega)
    Hs = Om / hyper.nu + np.diag(p.g * ea)
    try:
        d = -linalg.solve(Hs, s, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        logger.warning("Newton system for alpha is singular; using gradient step")
        d = -s
    q0 = alpha_surrogate(a, state, omega)
    slope = s @ d
    if slope >= 0:
        d = -s
        slope = -(s @ s)
    t = 1.0
    for _ in range(state.opts.newton_halvings + 1):
        cand = a + t * d
        if np.all(np.isfinite(cand)):
            qc = alpha_surrogate(cand, state, omega)
            if qc <= q0 + state.opts.armijo * t * slope:
                p.alpha = cand
                return p.alpha
        t *= 0.5
    return p.alpha


def closed_form_updates(state):
    """Intercept given U, then sigma2 from the resulting residuals."""
    update_intercept(state)
    return state.params.B0, update_sigma2(state)


def update_intercept(state):
    p = state.params
    shift = state.resid.mean(axis=0)
    b0 = matrix_to_edges(p.B0) + shift
    state.resid = state.resid - shift
    p.B0 = edges_to_matrix(b0, state.V, diag=0.0)
    return p.B0


def update_sigma2(state):
    p = state.params
    S = float(np.sum(state.resid**2))
    m = state.resid.size
    if state.opts.sigma2_rule == "mle":
        s2 = S / m
    else:
        s2 = (S + 1.0) / (m + 3.0)
    p.sigma2 = max(s2, state.hyper.sigma2_floor)
    return p.sigma2


# -- driver ------------------------------------------------------------------

def initial_params(data, hyper, opts):
    """Null model plus a small random perturbation of H."""
    rng = np.random.default_rng(opts.seed)
    V, P, Q = data.V, data.P, data.Q
    H = rng.normal(0.0, opts.init_scale, size=(V, P))
    abar = data.A_edges.mean(axis=0)
    B0 = edges_to_matrix(abar, V, diag=0.0)
    resid = data.A_edges - abar
    s2 = max(float(np.mean(resid**2)), hyper.sigma2_floor)
    return ModelParams(np.ones(Q), np.ones(V), H, B0, np.full(V, float(hyper.psi)), s2)


def run_iteration(state, iteration):
    p = state.params
    hyper, opts = state.hyper, state.opts
    state.omega = e_step(p.alpha, state.psi_tilde, hyper.nu, hyper.tau, hyper.eta)
    update_intercept(state)
    relip = iteration % opts.lipschitz_every == 0
    for v in range(state.V):
        system = state.node_system(v)
        if relip or state.lip_h[v] == 0:
            state.node_lipschitz(v, system)
        update_h(state, v, system)
        update_g(state, v, system)
    fsys = state.f_system()
    if relip or state.lip_f == 0:
        state.f_lipschitz(fsys)
    update_f(state, fsys)
    update_sigma2(state)
    update_alpha(state)


def fit(data, prior_net, hyper, opts=None, init=None, callback=None):
    """Run the EM algorithm to convergence.

    Parameters
    ----------
    data : Dataset
    prior_net : PriorNetwork
    hyper : Hyperparams
    opts : FitOptions, optional
    init : ModelParams, optional
        Starting point; defaults to :func:`initial_params`. With
        ``opts.n_starts > 1`` and no explicit start, the fit is repeated
        from that many random starts and the best one is returned.
    callback : callable, optional
        Called as ``callback(iteration, state)`` after every iteration.

    Returns
    -------
    FitResult
        ``trace[0]`` is the objective at the starting point and
        ``trace[k]`` the value after iteration k.
    """
    opts = opts or FitOptions()
    if prior_net.V != data.V:
        raise ValueError("prior network size does not match the data")
    if init is None and opts.n_starts > 1:
        best = None
        for k in range(opts.n_starts):
            res = fit(data, prior_net, hyper, replace(opts, seed=opts.seed + k, n_starts=1),
                      callback=callback)
            if best is None or res.objective < best.objective:
                best = res
        return best
    if init is None:
        init = initial_params(data, hyper, opts)
    elif init.H.shape != (data.V, data.P) or init.f.shape != (data.Q,):
        raise ValueError("initial parameters do not match the data dimensions")
    t0 = time.perf_counter()
    state = WorkState(data, prior_net, hyper, opts, init)
    trace = [state.objective()]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        run_iteration(state, it - 1)
        if it % opts.refresh_every == 0:
            state.refresh()
        obj = state.objective()
        if not np.isfinite(obj):
            raise FitError(f"objective became non-finite at iteration {it}")
        trace.append(obj)
        if callback is not None:
            callback(it, state)
        prev = trace[-2]
        if abs(prev - obj) < opts.tol * max(abs(prev), 1e-300):
            converged = True
            break
    state.refresh()
    trace[-1] = state.objective()
    state.omega = e_step(state.params.alpha, state.psi_tilde, hyper.nu, hyper.tau, hyper.eta)
    logger.debug("fit finished after %d iterations (converged=%s)", it, converged)
    return FitResult(state.params, state.omega, trace, it, converged,
                     time.perf_counter() - t0, np.asarray(data.set_of))
