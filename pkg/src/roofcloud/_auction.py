"""Forward auction with epsilon scaling for the Euclidean assignment problem.

Persons are rows of ``a``, objects are rows of ``b``; a person pays the
Euclidean distance plus the object price. Prices persist across scaling
phases. A previous assignment may be carried into a phase: pairs that still
satisfy epsilon complementary slackness are kept, the rest re-bid.
"""

import numpy as np
from numba import njit

# above this size costs are recomputed per bid instead of cached
_DENSE_LIMIT = 4096


@njit(cache=True)
def _cost_matrix(a, b):
    n = a.shape[0]
    c = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            c[i, j] = np.sqrt(dx * dx + dy * dy + dz * dz)
    return c


@njit(cache=True)
def _best_two(a, b, c, dense, prices, i):
    best = np.inf
    second = np.inf
    jbest = -1
    n = b.shape[0]
    if dense:
        for j in range(n):
            v = c[i, j] + prices[j]
            if v < best:
                second = best
                best = v
                jbest = j
            elif v < second:
                second = v
    else:
        ax = a[i, 0]
        ay = a[i, 1]
        az = a[i, 2]
        for j in range(n):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            v = np.sqrt(dx * dx + dy * dy + dz * dz) + prices[j]
            if v < best:
                second = best
                best = v
                jbest = j
            elif v < second:
                second = v
    if second == np.inf:
        second = best
    return jbest, best, second


@njit(cache=True)
def _pair_cost(a, b, c, dense, i, j):
    if dense:
        return c[i, j]
    dx = a[i, 0] - b[j, 0]
    dy = a[i, 1] - b[j, 1]
    dz = a[i, 2] - b[j, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


@njit(cache=True)
def _phase(a, b, c, dense, prices, eps, person_to_obj, obj_to_person, keep):
    n = a.shape[0]
    queue = np.empty(n, dtype=np.int64)
    count = 0
    for j in range(n):
        obj_to_person[j] = -1
    if keep:
        for i in range(n):
            j = person_to_obj[i]
            if j < 0:
                queue[count] = i
                count += 1
                continue
            jb, best, second = _best_two(a, b, c, dense, prices, i)
            if _pair_cost(a, b, c, dense, i, j) + prices[j] <= best + eps:
                obj_to_person[j] = i
            else:
                person_to_obj[i] = -1
                queue[count] = i
                count += 1
    else:
        for i in range(n):
            person_to_obj[i] = -1
            queue[count] = i
            count += 1
    head = 0
    bids = 0
    while count > 0:
        i = queue[head]
        head = (head + 1) % n
        count -= 1
        jbest, best, second = _best_two(a, b, c, dense, prices, i)
        prices[jbest] += (second - best) + eps
        bids += 1
        prev = obj_to_person[jbest]
        obj_to_person[jbest] = i
        person_to_obj[i] = jbest
        if prev >= 0:
            person_to_obj[prev] = -1
            queue[(head + count) % n] = prev
            count += 1
    return bids


@njit(cache=True)
def _max_cost(a, b):
    n = a.shape[0]
    m = 0.0
    for i in range(n):
        for j in range(n):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d > m:
                m = d
    return np.sqrt(m)


def auction(a, b, eps_final, eps_start=None, prices=None, mapping=None):
    """Solve min-cost assignment of rows of ``a`` onto rows of ``b``.

    Returns ``(mapping, prices, eps_used)``; the total cost is within
    ``n * eps_used`` of the optimum. ``prices`` and ``mapping`` warm-start
    the search and are not modified. Without ``eps_start`` the scaling
    starts from a quarter of the largest pairwise distance.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    n = a.shape[0]
    person_to_obj = np.full(n, -1, dtype=np.int64)
    obj_to_person = np.full(n, -1, dtype=np.int64)
    p = np.zeros(n) if prices is None else np.array(prices, dtype=np.float64)
    if n == 1:
        person_to_obj[0] = 0
        return person_to_obj, p, 0.0

    keep = mapping is not None
    if keep:
        person_to_obj[:] = mapping
    if eps_start is None:
        eps_start = _max_cost(a, b) / 4.0
    eps = max(eps_start, eps_final)
    n_phases = 1
    e = eps
    while e > eps_final:
        e = max(e / 4.0, eps_final)
        n_phases += 1
    dense = n <= _DENSE_LIMIT and (n_phases > 1 or not keep)
    c = _cost_matrix(a, b) if dense else np.empty((1, 1))
    while True:
        _phase(a, b, c, dense, p, eps, person_to_obj, obj_to_person, keep)
        if eps <= eps_final:
            break
        eps = max(eps / 4.0, eps_final)
        keep = False
    return person_to_obj, p, eps
