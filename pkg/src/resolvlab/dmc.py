"""Finite-alphabet channel numerics.

Resolution of a channel w.r.t. a reference output measure, the i.i.d.
random-coding block resolvability exponent, the straight-line exponent
achievable with feedback over a BSC, and the converse functions used to
lower-bound the rate of any variable-length scheme.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.linalg import null_space

from .errors import DomainError, InfeasibleReference, ResolvlabError
from .infomath import beta_bound, binary_capacity

MAX_ALPHABET = 6
FEASIBILITY_TV = 1e-9
ROW_TOL = 1e-12


def _as_distribution(x, size=None, name="distribution"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError(f"{name} must be a vector")
    if size is not None and x.size != size:
        raise DomainError(f"{name} has {x.size} entries, expected {size}")
    if np.any(x < 0) or abs(x.sum() - 1.0) > ROW_TOL:
        raise DomainError(f"{name} is not a probability vector: {x}")
    return x


def entropy(dist):
    """Shannon entropy in bits of a probability vector or array."""
    d = np.asarray(dist, dtype=float).ravel()
    d = d[d > 0]
    return float(-(d * np.log2(d)).sum())


@dataclass(frozen=True, eq=False)
class Dmc:
    """Discrete memoryless channel; ``transition[u, v] = P(v|u)``."""

    transition: np.ndarray

    def __post_init__(self):
        w = np.array(self.transition, dtype=float)
        if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] < 2:
            raise DomainError("transition matrix must be at least 2x2")
        if max(w.shape) > MAX_ALPHABET:
            raise DomainError(f"alphabets larger than {MAX_ALPHABET} are not supported")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > ROW_TOL):
            raise DomainError("every row of the transition matrix must be a distribution")
        w.setflags(write=False)
        object.__setattr__(self, "transition", w)

    @property
    def input_size(self):
        return self.transition.shape[0]

    @property
    def output_size(self):
        return self.transition.shape[1]

    @classmethod
    def bsc(cls, p):
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"crossover {p} is not a probability")
        return cls(np.array([[1.0 - p, p], [p, 1.0 - p]]))

    def row_entropies(self):
        return np.array([entropy(row) for row in self.transition])

    def key(self):
        return self.transition.tobytes()

    def __repr__(self):
        return f"Dmc({self.transition.tolist()})"


def parse_matrix(text):
    """Parse rows of decimal numbers; '#' starts a comment, commas optional."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise DomainError(f"line {lineno}: {exc}") from None
    if not rows:
        raise DomainError("no matrix rows found")
    if len({len(r) for r in rows}) != 1:
        raise DomainError("ragged matrix rows")
    return np.array(rows)


def format_matrix(matrix):
    return "\n".join(" ".join(repr(float(x)) for x in row) for row in np.atleast_2d(matrix)) + "\n"


def parse_channel(spec):
    """Channel from the shorthand ``bsc:<p>`` or from plain-text matrix rows."""
    spec = spec.strip()
    if spec.lower().startswith("bsc:"):
        try:
            p = float(spec[4:])
        except ValueError:
            raise DomainError(f"bad BSC crossover in {spec!r}") from None
        return Dmc.bsc(p)
    return Dmc(parse_matrix(spec))


def load_channel(path):
    return Dmc(parse_matrix(Path(path).read_text()))


def parse_distribution(text):
    m = parse_matrix(text)
    if m.shape[0] != 1:
        raise DomainError("a distribution file holds exactly one row")
    return _as_distribution(m[0])


def uniform(size):
    return np.full(size, 1.0 / size)


def output_distribution(channel, input_dist):
    """(P_U o P_{V|U})(v) = sum_u P_U(u) P(v|u)."""
    x = _as_distribution(input_dist, channel.input_size, "input distribution")
    out = x @ channel.transition
    return out / out.sum()


def joint(channel, input_dist):
    x = _as_distribution(input_dist, channel.input_size, "input distribution")
    return x[:, None] * channel.transition


def mutual_information(channel, input_dist):
    pv = output_distribution(channel, input_dist)
    return max(entropy(pv) - float(np.dot(input_dist, channel.row_entropies())), 0.0)


def _info_density(channel, input_dist):
    """log2(P(v|u)/P_V(v)); -inf where P(v|u) = 0."""
    pv = output_distribution(channel, input_dist)
    with np.errstate(divide="ignore"):
        return np.log2(channel.transition) - np.log2(pv)[None, :]


def relative_information(q, channel, marginal_input):
    """f(Q||P) = sum_{u,v} Q(u,v) log2(P(v|u)/P_V(v))."""
    q = np.asarray(q, dtype=float)
    if q.shape != channel.transition.shape:
        raise DomainError("joint distribution shape does not match the channel")
    if np.any(q < 0) or abs(q.sum() - 1.0) > ROW_TOL:
        raise DomainError("Q is not a joint distribution")
    g = _info_density(channel, marginal_input)
    support = q > 0
    if np.any(~np.isfinite(g[support])):
        raise DomainError("Q places mass where P(v|u) = 0")
    return float((q[support] * g[support]).sum())


def joint_divergence(q, p):
    """D(Q||P) for joint arrays, inf if Q is not absolutely continuous."""
    q = np.asarray(q, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    s = q > 0
    if np.any(p[s] <= 0):
        return math.inf
    return max(float((q[s] * np.log2(q[s] / p[s])).sum()), 0.0)


# ---------------------------------------------------------------------------
# resolution


def _feasible_input(channel, reference):
    """Any P_U inducing the reference measure, or InfeasibleReference."""
    w = channel.transition
    a_eq = np.vstack([w.T, np.ones(channel.input_size)])
    b_eq = np.concatenate([reference, [1.0]])
    res = optimize.linprog(
        np.zeros(channel.input_size), A_eq=a_eq, b_eq=b_eq, bounds=[(0, None)] * channel.input_size,
        method="highs",
    )
    if res.status != 0:
        raise InfeasibleReference("no exact synthesis: the reference measure is not an output law")
    x = np.clip(res.x, 0, None)
    x /= x.sum()
    tv = 0.5 * np.abs(x @ w - reference).sum()
    if tv > FEASIBILITY_TV:
        raise InfeasibleReference(f"no exact synthesis: best input misses by TV {tv:.3g}")
    return x


def _nullspace(channel):
    return null_space(np.vstack([channel.transition.T, np.ones(channel.input_size)]))


def _mi_vector(channel, x):
    x = np.clip(x, 0, None)
    x = x / x.sum()
    return mutual_information(channel, x)


def resolution(channel, reference):
    """min I(U;V) over inputs whose output law equals the reference measure."""
    ref = _as_distribution(reference, channel.output_size, "reference measure")
    x0 = _feasible_input(channel, ref)
    basis = _nullspace(channel)
    if basis.shape[1] == 0:
        return _mi_vector(channel, x0)

    def fun(z):
        return _mi_vector(channel, x0 + basis @ z)

    cons = [{"type": "ineq", "fun": lambda z: x0 + basis @ z}]
    best = fun(np.zeros(basis.shape[1]))
    starts = [np.zeros(basis.shape[1])] + list(_nullspace_vertices(x0, basis))
    for z0 in starts:
        res = optimize.minimize(fun, z0, method="SLSQP", constraints=cons,
                                options={"ftol": 1e-14, "maxiter": 500})
        x = x0 + basis @ res.x
        if np.all(x >= -1e-12):
            best = min(best, fun(res.x))
    return best


def _nullspace_vertices(x0, basis):
    """Extreme points of {z : x0 + basis z >= 0} along each basis axis, shrunk inward."""
    d = basis.shape[1]
    for i in range(d):
        for sign in (1.0, -1.0):
            c = np.zeros(d)
            c[i] = -sign
            res = optimize.linprog(c, A_ub=-basis, b_ub=x0, bounds=[(None, None)] * d, method="highs")
            if res.status == 0:
                yield 0.9 * res.x


def resolution_grid(channel, reference, points_per_axis=101):
    """Brute-force oracle for resolution() over a grid on the feasible slice."""
    if channel.input_size > 4:
        raise DomainError("grid oracle is limited to input alphabets of size <= 4")
    ref = _as_distribution(reference, channel.output_size, "reference measure")
    x0 = _feasible_input(channel, ref)
    basis = _nullspace(channel)
    d = basis.shape[1]
    if d == 0:
        return _mi_vector(channel, x0)
    lo, hi = np.zeros(d), np.zeros(d)
    for i in range(d):
        c = np.zeros(d)
        c[i] = 1.0
        lo[i] = optimize.linprog(c, A_ub=-basis, b_ub=x0, bounds=[(None, None)] * d, method="highs").x[i]
        hi[i] = optimize.linprog(-c, A_ub=-basis, b_ub=x0, bounds=[(None, None)] * d, method="highs").x[i]
    axes = [np.linspace(lo[i], hi[i], points_per_axis) for i in range(d)]
    z = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    x = x0[None, :] + z @ basis.T
    x = x[np.all(x >= -1e-12, axis=1)]
    x = np.clip(x, 0, None)
    x /= x.sum(axis=1, keepdims=True)
    return float(min(_mi_batch(channel, x)))


def _mi_batch(channel, xs):
    w = channel.transition
    pv = xs @ w
    with np.errstate(divide="ignore", invalid="ignore"):
        hv = -np.where(pv > 0, pv * np.log2(pv), 0.0).sum(axis=1)
    return np.maximum(hv - xs @ channel.row_entropies(), 0.0)


# ---------------------------------------------------------------------------
# block resolvability exponent


def _grid_resolution(cells):
    """Largest m such that the m-composition grid of `cells` parts stays desk sized."""
    if cells == 4:
        return 400
    m = 400
    while math.comb(m + cells - 1, cells - 1) > 2_000_000 and m > 2:
        m -= 1
    return m


def _compositions(m, d):
    """All vectors of d nonnegative integers summing to m, as an (N, d) uint16 array."""
    if d == 1:
        return np.array([[m]], dtype=np.uint16)
    if d == 2:
        a = np.arange(m + 1, dtype=np.uint16)
        return np.stack([a, m - a], axis=1)
    blocks = []
    for first in range(m + 1):
        rest = _compositions(m - first, d - 1)
        blocks.append(np.hstack([np.full((rest.shape[0], 1), first, dtype=np.uint16), rest]))
    return np.vstack(blocks)


@dataclass(frozen=True)
class BlockExponentResult:
    rate: float
    value: float
    minimizer: np.ndarray
    grid_value: float


class BlockExponentSolver:
    """Primal solver for min_Q D(Q||P) + [R - f(Q||P)]^+ at a fixed (channel, input).

    The exhaustive composition grid is evaluated once; each rate is then
    answered exactly over the grid by a prefix/suffix-minimum lookup on the
    grid sorted by f, and polished by pattern search.
    """

    def __init__(self, channel, input_dist, resolution=None):
        self.channel = channel
        self.input = _as_distribution(input_dist, channel.input_size, "input distribution")
        self.p = joint(channel, self.input).ravel()
        self.g = _info_density(channel, self.input).ravel()
        self.mutual_info = mutual_information(channel, self.input)
        cells = self.p.size
        m = resolution or _grid_resolution(cells)
        self.m = m
        comps = _compositions(m, cells)
        xlogx = np.array([0.0] + [c / m * math.log2(c / m) for c in range(1, m + 1)])
        with np.errstate(divide="ignore"):
            logp = np.log2(self.p)
        gz = np.where(np.isfinite(self.g), self.g, 0.0)
        div = xlogx[comps].sum(axis=1)
        bad = np.zeros(comps.shape[0], dtype=bool)
        for c in range(cells):
            if self.p[c] > 0:
                div -= comps[:, c] / m * logp[c]
            else:
                bad |= comps[:, c] > 0
        f = (comps / m) @ gz
        div[bad] = np.inf
        order = np.argsort(f, kind="stable")
        self._comps = comps[order]
        self._f = f[order]
        d = np.maximum(div[order], 0.0)
        # suffix argmin of D (for f >= R) and prefix argmin of D - f (for f < R)
        self._suffix_arg = _running_argmin(d[::-1])[::-1]
        self._suffix_arg = len(d) - 1 - self._suffix_arg
        self._prefix_arg = _running_argmin(d - f[order])
        self._d = d

    def objective(self, q, rate):
        q = np.asarray(q, dtype=float).ravel()
        d = joint_divergence(q, self.p)
        if not math.isfinite(d):
            return math.inf
        s = q > 0
        f = float((q[s] * self.g[s]).sum())
        return d + max(rate - f, 0.0)

    def grid_minimum(self, rate):
        i = int(np.searchsorted(self._f, rate, side="left"))
        cands = []
        if i < len(self._f):
            j = self._suffix_arg[i]
            cands.append((self._d[j], j))
        if i > 0:
            j = self._prefix_arg[i - 1]
            cands.append((self._d[j] + rate - self._f[j], j))
        val, j = min(cands)
        return float(val), self._comps[j].astype(float) / self.m

    def solve(self, rate):
        if rate < 0 or math.isnan(rate):
            raise DomainError(f"rate {rate} must be nonnegative")
        grid_val, q = self.grid_minimum(rate)
        best_q, best = _pattern_search(lambda x: self.objective(x, rate), q, self.g, 1.0 / self.m)
        at_p = self.objective(self.p, rate)
        if at_p < best:
            best, best_q = at_p, self.p.copy()
        return BlockExponentResult(rate, best, best_q.reshape(self.channel.transition.shape), grid_val)


def _running_argmin(a):
    idx = np.arange(len(a))
    # position of the running minimum; ties keep the earliest index
    mins = np.minimum.accumulate(a)
    is_new = np.concatenate([[True], a[1:] < mins[:-1]])
    return np.maximum.accumulate(np.where(is_new, idx, 0))


def _pattern_search(fun, x0, g, step, tol=1e-11):
    """Direct search on the simplex along pairwise mass transfers.

    Directions also include the transfers projected onto the level set of
    ``g @ x``, which lets the search slide along the kink of the positive part.
    """
    n = x0.size
    dirs = []
    gt = np.where(np.isfinite(g), g, 0.0)
    gt = gt - gt.mean()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = np.zeros(n)
            d[i], d[j] = 1.0, -1.0
            dirs.append(d)
            if gt @ gt > 0:
                pd = d - (gt @ d) / (gt @ gt) * gt
                if np.abs(pd).max() > 1e-12:
                    dirs.append(pd / np.abs(pd).max())
    x = x0.copy()
    fx = fun(x)
    h = step
    while h > tol:
        improved = False
        for d in dirs:
            y = x + h * d
            if np.any(y < 0):
                continue
            fy = fun(y)
            if fy < fx - 1e-15:
                x, fx, improved = y, fy, True
        if not improved:
            h *= 0.5
    return x, fx


@functools.lru_cache(maxsize=8)
def _cached_solver(channel_key, shape, input_key):
    w = np.frombuffer(channel_key).reshape(shape)
    return BlockExponentSolver(Dmc(w), np.frombuffer(input_key))


def block_solver(channel, input_dist):
    x = _as_distribution(input_dist, channel.input_size, "input distribution")
    return _cached_solver(channel.key(), channel.transition.shape, x.tobytes())


def block_exponent(channel, input_dist, rate):
    """Random-coding block resolvability exponent at rate R (primal solver)."""
    return block_solver(channel, input_dist).solve(rate).value


def block_exponent_dual(channel, input_dist, rate):
    """Cross-check oracle: max over lambda in [0,1] of
    lambda R - log2 sum P_U P(v|u)^{1+lambda} P_V^{-lambda}."""
    if rate < 0:
        raise DomainError(f"rate {rate} must be nonnegative")
    p = joint(channel, input_dist).ravel()
    g = _info_density(channel, input_dist).ravel()
    s = p > 0
    p, g = p[s], g[s]
    lg = np.log2(p)

    def neg_phi(lam):
        e = lg + lam * g
        mx = e.max()
        return -(lam * rate - (mx + math.log2(np.exp2(e - mx).sum())))

    res = optimize.minimize_scalar(neg_phi, bounds=(0.0, 1.0), method="bounded",
                                   options={"xatol": 1e-12})
    return max(-neg_phi(res.x), -neg_phi(0.0), -neg_phi(1.0))


def straight_line_exponent(p, rate):
    """[R - c2(p)]^+ for the BSC(p), p in (0, 1/2)."""
    if not 0.0 < p < 0.5:
        raise DomainError(f"crossover {p} must lie in (0, 1/2)")
    if rate < 0:
        raise DomainError(f"rate {rate} must be nonnegative")
    return max(rate - binary_capacity(p), 0.0)


# ---------------------------------------------------------------------------
# converse


def _output_divergence(channel, x, reference):
    pv = np.clip(x, 0, None) @ channel.transition
    pv = pv / pv.sum()
    return joint_divergence(pv, reference)


def gamma_bound(channel, reference, delta):
    """max H(V|U) over inputs whose output law is within delta (bits) of the reference."""
    if delta < 0 or math.isnan(delta):
        raise DomainError(f"delta={delta} must be nonnegative")
    ref = _as_distribution(reference, channel.output_size, "reference measure")
    hrow = channel.row_entropies()
    n = channel.input_size
    if delta == 0:
        _feasible_input(channel, ref)
        res = optimize.linprog(-hrow, A_eq=np.vstack([channel.transition.T, np.ones(n)]),
                               b_eq=np.concatenate([ref, [1.0]]), bounds=[(0, None)] * n, method="highs")
        if res.status != 0:
            raise InfeasibleReference("no exact synthesis: the reference measure is not an output law")
        return float(hrow @ np.clip(res.x, 0, None))

    def excess(x):
        return delta - _output_divergence(channel, x, ref)

    # feasibility: closest output law to the reference
    closest = optimize.minimize(
        lambda x: _output_divergence(channel, x, ref), uniform(n), method="SLSQP",
        bounds=[(0, 1)] * n, constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1}],
        options={"ftol": 1e-15, "maxiter": 500},
    )
    x_feas = np.clip(closest.x, 0, None)
    x_feas /= x_feas.sum()
    try:
        x_feas = _feasible_input(channel, ref)
    except InfeasibleReference:
        pass
    if excess(x_feas) < -1e-12:
        raise InfeasibleReference(f"no input gets within {delta} bits of the reference measure")

    best = float(hrow @ x_feas)
    starts = [x_feas] + [np.eye(n)[u] * 0.98 + 0.02 / n for u in range(n)] + [uniform(n)]
    for x0 in starts:
        res = optimize.minimize(
            lambda x: -(hrow @ x), x0, method="SLSQP", bounds=[(0, 1)] * n,
            constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1}, {"type": "ineq", "fun": excess}],
            options={"ftol": 1e-15, "maxiter": 1000},
        )
        x = np.clip(res.x, 0, None)
        x /= x.sum()
        if excess(x) >= -1e-12:
            best = max(best, float(hrow @ x))
    return min(best, float(hrow.max()))


def gamma_grid(channel, reference, delta, resolution=None):
    """Brute-force oracle for gamma_bound() over a simplex grid (input size <= 4)."""
    n = channel.input_size
    if n > 4:
        raise DomainError("grid oracle is limited to input alphabets of size <= 4")
    m = resolution or {2: 20000, 3: 600, 4: 120}[n]
    xs = _compositions(m, n).astype(float) / m
    pv = xs @ channel.transition
    ref = _as_distribution(reference, channel.output_size, "reference measure")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pv > 0, pv * (np.log2(pv) - np.log2(ref)[None, :]), 0.0)
    div = terms.sum(axis=1)
    ok = div <= delta + 1e-15
    if not np.any(ok):
        raise InfeasibleReference("empty constraint set on the grid")
    return float((xs[ok] @ channel.row_entropies()).max())


def converse_lower_bound(channel, reference, div_per_block, expected_length):
    """H(V) - gamma(D/E[N]) - beta(D/E[N]): lower bound on k/E[N] for any scheme."""
    if expected_length <= 0 or not math.isfinite(expected_length):
        raise DomainError("expected length must be positive and finite")
    if div_per_block < 0 or not math.isfinite(div_per_block):
        raise DomainError("divergence must be nonnegative and finite")
    ref = _as_distribution(reference, channel.output_size, "reference measure")
    delta = div_per_block / expected_length
    return entropy(ref) - gamma_bound(channel, ref, delta) - beta_bound(delta, channel.output_size)


class SolverDisagreement(ResolvlabError):
    """Primal and dual block-exponent solvers disagree beyond tolerance."""


def exponent_table(channel, input_dist, rates, reference=None, dual_tol=1e-3):
    """Rows of (R, straight-line, block, dual, resolution) for a rate grid.

    The straight-line column is only defined for a BSC; for other channels it
    is ``[R - I(U;V)]^+`` at the given input.
    """
    solver = block_solver(channel, input_dist)
    reference = output_distribution(channel, input_dist) if reference is None else reference
    res = resolution(channel, reference)
    w = channel.transition
    is_bsc = w.shape == (2, 2) and abs(w[0, 1] - w[1, 0]) < 1e-15 and 0 < w[0, 1] < 0.5
    rows = []
    for r in rates:
        try:
            primal = solver.solve(r).value
            dual = block_exponent_dual(channel, input_dist, r)
        except (ValueError, ArithmeticError) as exc:
            raise ResolvlabError(f"block exponent solver failed at R={r}: {exc}") from exc
        if abs(primal - dual) > dual_tol:
            raise SolverDisagreement(f"R={r}: primal {primal:.6g} vs dual {dual:.6g}")
        e_sl = straight_line_exponent(w[0, 1], r) if is_bsc else max(r - solver.mutual_info, 0.0)
        rows.append({"R": float(r), "E_sl": float(e_sl), "E_block": float(primal), "E_block_dual": float(dual),
                     "resolution": res})
    return rows
