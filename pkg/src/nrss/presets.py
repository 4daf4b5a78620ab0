"""Solver settings and search grids used for the desk-scale simulations.

Fits at these problem sizes have more loadings than observations, so the
penalized likelihood keeps decreasing towards interpolating solutions and
the useful estimates are the sparse local optima.  They are reached by a
warm-started path of increasing penalties starting from a moderately
perturbed null model, with a few dozen iterations per stage.
"""

from dataclasses import replace

import numpy as np

from .em import FitOptions
from .model import edges_to_matrix
from .selection import make_grid

DESK_OPTIONS = FitOptions(max_iter=100, tol=1e-6, init_scale=0.3, step_boost=8.0)

# (lambda_h, lambda_f) path; the first stage is a lightly penalized warm-up
DESK_PATH = ((5.0, 1.0), (50.0, 300.0), (100.0, 1000.0), (200.0, 3000.0),
             (400.0, 10000.0), (800.0, 30000.0))


def desk_grid(psi=(0.0,), nu=(1.0,), path=DESK_PATH):
    lh, lf = zip(*path)
    return make_grid(lh, lf, psi=psi, nu=nu, paired=True)

# loading_scale of a Simulation-1 training set, where the path above was tuned
DESK_LOADING_SCALE = 0.45


def marginal_loadings(data):
    """Rank-one loadings of each predictor's marginal regression slice.

    Every edge is regressed on one predictor at a time; the resulting
    coefficient matrix is replaced by its leading eigenpair as
    ``sqrt(max(l, 0)) w``.  Returns a (V, P) array.
    """
    Xc = data.X - data.X.mean(axis=0)
    Ec = data.A_edges - data.A_edges.mean(axis=0)
    ss = np.einsum("ij,ij->j", Xc, Xc)
    ss[ss == 0] = np.inf
    B = edges_to_matrix((Xc.T @ Ec) / ss[:, None], data.V, diag=0.0)  # (P, V, V)
    w, vec = np.linalg.eigh(B)
    return (np.sqrt(np.maximum(w[:, -1], 0.0))[:, None] * vec[:, :, -1]).T


def loading_scale(data):
    """Root mean square of :func:`marginal_loadings`."""
    return float(np.sqrt(np.mean(marginal_loadings(data) ** 2)))


def scaled_preset(data, opts=DESK_OPTIONS, path=DESK_PATH, ref=DESK_LOADING_SCALE):
    """Options and path adapted to the loading scale of ``data``.

    Multiplying all loadings by ``c`` leaves the fit unchanged if
    ``lambda_h`` is divided by ``c``, so with ``k = ref / loading_scale``
    the ``lambda_h`` path is multiplied and the initial loading spread
    divided by ``k``.  The set weights are left unscaled.
    """
    s = loading_scale(data)
    if not s > 0:
        raise ValueError("no predictor shows any marginal association")
    k = ref / s
    opts = replace(opts, init_scale=opts.init_scale / k)
    return opts, tuple((float(lh * k), lf) for lh, lf in path)
