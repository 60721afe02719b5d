"""Chamfer distance, auction-approximated EMD, their gradients and the staged loss."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from ._auction import auction
from .core import SpatialIndex, as_cloud

# default auction tolerance: mean-cost gap bounded by this fraction of the largest pair distance
DEFAULT_EMD_REL_TOL = 1e-4

BRUTE_FORCE_MAX = 9


class SizeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    """Bijection ``mapping[i] = j`` from points of the first cloud onto the second.

    ``gap_bound`` is the auction's guarantee on ``total_cost`` (mean distance)
    relative to the exact optimum: ``opt <= total_cost <= opt + gap_bound``.
    """

    mapping: np.ndarray
    total_cost: float
    gap_bound: float = 0.0
    prices: np.ndarray | None = None


@dataclass(frozen=True)
class LossBreakdown:
    cd_inter: float
    emd_final: float
    alpha: float
    total: float


def _pts(cloud, what):
    c = as_cloud(cloud)
    c.require_nonempty(what)
    return c.points


def _check_same_size(a, b):
    if len(a) != len(b):
        raise SizeMismatchError(
            f"EMD needs equal sizes, got {len(a)} and {len(b)}; resample first"
        )


def _nn(src, dst):
    """Lowest-index nearest neighbour in ``dst`` for each point of ``src``."""
    d2, idx = SpatialIndex(dst).nearest(src)
    return d2, idx


def chamfer_distance(p1, p2) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    a = _pts(p1, "p1")
    b = _pts(p2, "p2")
    d_ab, _ = _nn(a, b)
    d_ba, _ = _nn(b, a)
    return float(np.mean(d_ab) + np.mean(d_ba))


def chamfer_gradient(p1, p2):
    """Analytic (sub)gradient of :func:`chamfer_distance` w.r.t. both clouds."""
    a = _pts(p1, "p1")
    b = _pts(p2, "p2")
    _, nn_ab = _nn(a, b)
    _, nn_ba = _nn(b, a)
    n1, n2 = len(a), len(b)

    diff_ab = a - b[nn_ab]
    diff_ba = b - a[nn_ba]
    g1 = 2.0 * diff_ab / n1
    g2 = 2.0 * diff_ba / n2
    # the target-side term pulls each point of the other cloud's nearest match
    np.add.at(g1, nn_ba, -2.0 * diff_ba / n2)
    np.add.at(g2, nn_ab, -2.0 * diff_ab / n1)
    return g1, g2


def chamfer_value_and_grad(x, y):
    """CD(x, y) and its gradient w.r.t. ``x`` only, sharing the NN queries."""
    a = _pts(x, "x")
    b = _pts(y, "y")
    d_ab, nn_ab = _nn(a, b)
    d_ba, nn_ba = _nn(b, a)
    n1, n2 = len(a), len(b)
    diff_ab = a - b[nn_ab]
    g = 2.0 * diff_ab / n1
    np.add.at(g, nn_ba, 2.0 * (a[nn_ba] - b) / n2)
    return float(np.mean(d_ab) + np.mean(d_ba)), g


def emd_assignment(p1, p2, eps: float | None = None, *, warm: Assignment | None = None) -> Assignment:
    """Approximate optimal bijection between two equal-size clouds.

    ``eps`` bounds the excess of the summed cost over the optimum; the auction
    scales its bid increment down by 4 each phase until it drops to
    ``eps / n``. By default ``eps = n * 1e-4 * d`` with ``d`` the diagonal of the joint
    bounding box, i.e. the mean cost is within ``1e-4 * d`` of optimal.

    ``warm`` reuses a previous assignment's prices and pairs (only at the
    final increment), which is how the optimizer refreshes cheaply.
    """
    a = _pts(p1, "p1")
    b = _pts(p2, "p2")
    _check_same_size(a, b)
    n = len(a)
    if eps is not None and not eps > 0:
        raise ValueError("eps must be positive")

    if warm is not None and warm.prices is not None and len(warm.mapping) == n:
        eps_final = (eps / n) if eps is not None else warm.gap_bound
        if not eps_final > 0:
            eps_final = DEFAULT_EMD_REL_TOL * _span(a, b)
        mapping, prices, used = auction(
            a, b, eps_final, eps_start=eps_final, prices=warm.prices, mapping=warm.mapping
        )
    else:
        if eps is None:
            eps_final = DEFAULT_EMD_REL_TOL * _span(a, b)
        else:
            eps_final = eps / n
        if eps_final <= 0:
            # coincident clouds: any positive increment is exact
            eps_final = 1e-12
        mapping, prices, used = auction(a, b, eps_final)
    cost = float(np.mean(np.linalg.norm(a - b[mapping], axis=1)))
    return Assignment(mapping=mapping, total_cost=cost, gap_bound=float(used), prices=prices)


def _span(a, b):
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    hi = np.maximum(a.max(axis=0), b.max(axis=0))
    return float(np.linalg.norm(hi - lo))


def emd_distance(p1, p2, eps: float | None = None) -> float:
    return emd_assignment(p1, p2, eps).total_cost


def emd_gradient(p1, p2, assignment: Assignment) -> np.ndarray:
    """Gradient of the mean matched distance w.r.t. ``p1`` at a frozen assignment."""
    a = _pts(p1, "p1")
    b = _pts(p2, "p2")
    _check_same_size(a, b)
    mapping = np.asarray(assignment.mapping)
    if mapping.shape != (len(a),):
        raise SizeMismatchError("assignment does not match the clouds")
    diff = a - b[mapping]
    norm = np.linalg.norm(diff, axis=1)
    g = np.zeros_like(diff)
    nz = norm > 0
    g[nz] = diff[nz] / (norm[nz, None] * len(a))
    return g


def combined_loss(x_inter, x_final, y, alpha: float) -> LossBreakdown:
    """Chamfer on the intermediate cloud plus ``alpha`` times EMD(y, x_final)."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    cd = chamfer_distance(x_inter, y)
    emd = emd_distance(y, x_final)
    return LossBreakdown(cd_inter=cd, emd_final=emd, alpha=float(alpha), total=cd + alpha * emd)


def brute_force_emd(p1, p2) -> float:
    """Exact optimal mean assignment cost by enumerating every permutation."""
    a = _pts(p1, "p1")
    b = _pts(p2, "p2")
    _check_same_size(a, b)
    n = len(a)
    if n > BRUTE_FORCE_MAX:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX} points, got {n}")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    perms = _permutations(n)
    totals = cost[np.arange(n), perms].sum(axis=1)
    return float(totals.min() / n)


@functools.lru_cache(maxsize=None)
def _permutations(n):
    return np.array(list(itertools.permutations(range(n))), dtype=np.int8)
