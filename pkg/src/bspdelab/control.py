"""Controlled forward dynamics, cost, adjoint coupling, and policy tools.

The forward state follows an explicit Euler-Maruyama recursion on the same
Bernoulli tree the backward solver uses,

    xi_{n+1} = xi_n + dt (L(t, v) xi_n + F) + (M^k(t, v) xi_n + G^k) dW^k,

with L in divergence form, L phi = D_i(a^{ij} D_j phi) + b^i D_i phi + c phi,
and M^k phi = sigma^{ik} D_i phi + nu^k phi.  On full trees the recursion is
pathwise, one child per increment sign pattern.  On recombining trees the
pathwise state is not a function of the lattice node, so the solver evolves
the probability-weighted conditional means instead; the recursion is affine
in xi, hence the means are exact, and every downstream functional here (cost,
Hamiltonian pairings, duality sums) is linear in xi, so nothing is lost.

The adjoint pair (u, q) comes from the backward solver run with the formal
adjoints L* u = D_i(a^{ij} D_j u) - D_i(b^i u) + c u and
M^{k*} q = -D_i(sigma^{ik} q^k) + nu^k q^k, terminal weight phi and forcing
equal to the running cost density under the current policy.  Because both
sweeps share one grid and one tree, summation by parts makes the discrete
pairings exactly adjoint, which is what keeps the duality defect tight:

    J = <xi_0, u(0)> + sum_n dt E[<F, u(t_n)> + <G^k, q^k(t_n)>] + O(dt).

Replacing u(t_n) by the predictor ubar_n = E_n u(t_{n+1}) turns the O(dt)
remainder into an exact telescoping identity for the explicit single-pass
scheme; duality_check reports both gaps.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coefficients import (
    CoefficientDataError,
    CoefficientSet,
    ParabolicityError,
    constant_sampler,
)
from .grid import TOL_PSD, SpatialGrid, batch_divergence, batch_gradient, inner_product
from .lattice import (
    AdaptedGridField,
    BudgetExceededError,
    NodeId,
    PathTree,
    UnsupportedModeError,
    level_conditional_expectation,
)
from .solver import (
    CflError,
    CflReport,
    LevelCoefficients,
    ProblemData,
    SolutionPair,
    SolverBlowupError,
    SolverConfig,
    StochasticCouplingWarning,
    solve,
)

# the adjoint pair is a plain backward solution under the policy-frozen data
AdjointPair = SolutionPair

MAX_REPORTED_FAILURES = 20


class PolicyOscillationWarning(UserWarning):
    """Policy iteration entered a period-2 cycle; the best-cost iterate wins."""


@dataclass(frozen=True)
class ControlSample:
    """All control-problem fields sampled at one (t, v): arrays on the grid."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    big_f: np.ndarray
    big_g: np.ndarray
    cost_f: np.ndarray


@dataclass(frozen=True)
class ControlProblem:
    """A finite-control SPDE steering problem on a fixed grid and tree.

    Samplers take (t, v, grid) and return grid fields; None means zero.
    Shapes: a (grid, d, d) symmetric, b (grid, d), c (grid,),
    sigma (grid, d, d'), nu (grid, d'), big_f and cost_f (grid,),
    big_g (grid, d').  Scalar returns broadcast.  gamma lists the admissible
    control values; ties in any argmax resolve to the earliest entry.

    Construction probes every v in gamma at three times and refuses samplers
    that come back non-finite, an asymmetric a, or a degeneracy violation
    (2a - sigma sigma^T must stay positive semidefinite for each control).
    """

    grid: SpatialGrid
    tree: PathTree
    gamma: tuple
    terminal_phi: np.ndarray
    xi0: np.ndarray
    a: object = None
    b: object = None
    c: object = None
    sigma: object = None
    nu: object = None
    big_f: object = None
    big_g: object = None
    cost_f: object = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(self.gamma))
        if len(self.gamma) == 0:
            raise ValueError("gamma must list at least one control value")
        for attr in ("terminal_phi", "xi0"):
            arr = np.asarray(getattr(self, attr), dtype=np.float64)
            if arr.shape != self.grid.shape:
                raise ValueError(
                    f"{attr} shape {arr.shape} != grid shape {self.grid.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{attr} contains non-finite values")
            object.__setattr__(self, attr, arr)
        horizon = self.tree.time_grid.horizon
        for v in self.gamma:
            for t in (0.0, 0.5 * horizon, horizon):
                smp = self.sample_all(t, v)
                if not np.allclose(smp.a, smp.a.swapaxes(-1, -2)):
                    raise CoefficientDataError(
                        f"a sampled at t={t}, v={v!r} is not symmetric"
                    )
                dp = 2.0 * smp.a - smp.sigma @ smp.sigma.swapaxes(-1, -2)
                min_eig = float(np.linalg.eigvalsh(dp).min())
                if min_eig < -TOL_PSD:
                    raise ParabolicityError(
                        f"2a - sigma sigma^T has eigenvalue {min_eig:.3e} "
                        f"at t={t}, v={v!r}"
                    )

    def _suffix(self, name: str) -> tuple[int, ...]:
        d, dw = self.grid.dim, self.tree.wiener_dim
        return {
            "a": (d, d),
            "b": (d,),
            "c": (),
            "sigma": (d, dw),
            "nu": (dw,),
            "big_f": (),
            "big_g": (dw,),
            "cost_f": (),
        }[name]

    def sample_field(self, name: str, t: float, v) -> np.ndarray:
        """One field at (t, v) broadcast to its full grid shape; zeros if unset."""
        target = self.grid.shape + self._suffix(name)
        fn = getattr(self, name)
        if fn is None:
            return np.zeros(target)
        arr = np.asarray(fn(t, v, self.grid), dtype=np.float64)
        try:
            out = np.broadcast_to(arr, target)
        except ValueError:
            raise CoefficientDataError(
                f"{name} sampled shape {arr.shape} does not broadcast to {target}"
            ) from None
        if not np.all(np.isfinite(out)):
            raise CoefficientDataError(f"{name} sampled non-finite at t={t}, v={v!r}")
        return out

    def sample_all(self, t: float, v) -> ControlSample:
        return ControlSample(
            a=self.sample_field("a", t, v),
            b=self.sample_field("b", t, v),
            c=self.sample_field("c", t, v),
            sigma=self.sample_field("sigma", t, v),
            nu=self.sample_field("nu", t, v),
            big_f=self.sample_field("big_f", t, v),
            big_g=self.sample_field("big_g", t, v),
            cost_f=self.sample_field("cost_f", t, v),
        )


@dataclass(frozen=True)
class ControlPolicy:
    """Adapted control choice: one gamma index per node on levels 0..n-1."""

    indices: tuple

    def __post_init__(self):
        object.__setattr__(
            self,
            "indices",
            tuple(np.asarray(arr, dtype=np.int64) for arr in self.indices),
        )

    def value_index(self, node: NodeId) -> int:
        return int(self.indices[node.level][node.index])

    def dump(self, gamma: tuple) -> list:
        """Node -> control listing, JSON-shaped."""
        rows = []
        for level, arr in enumerate(self.indices):
            for index, gi in enumerate(arr):
                rows.append(
                    {"level": level, "index": index, "control": gamma[int(gi)]}
                )
        return rows


def constant_policy(tree: PathTree, index: int = 0) -> ControlPolicy:
    """The policy playing gamma[index] at every non-leaf node."""
    return ControlPolicy(
        tuple(
            np.full(tree.level_sizes[level], index, dtype=np.int64)
            for level in range(tree.n_steps)
        )
    )


def policies_equal(p1: ControlPolicy, p2: ControlPolicy) -> bool:
    if len(p1.indices) != len(p2.indices):
        return False
    return all(np.array_equal(x, y) for x, y in zip(p1.indices, p2.indices))


def _validate_policy(problem: ControlProblem, policy: ControlPolicy) -> None:
    tree = problem.tree
    if len(policy.indices) != tree.n_steps:
        raise ValueError(
            f"policy covers {len(policy.indices)} levels, tree has {tree.n_steps}"
        )
    for level, arr in enumerate(policy.indices):
        if arr.shape != (tree.level_sizes[level],):
            raise ValueError(
                f"policy level {level} has shape {arr.shape}, "
                f"expected ({tree.level_sizes[level]},)"
            )
        if arr.min() < 0 or arr.max() >= len(problem.gamma):
            raise ValueError(f"policy level {level} indexes outside gamma")


# batched generator applications; axis 0 = nodes, axes 1..d = grid


def _l_apply(xi, a, b, c, grid: SpatialGrid) -> np.ndarray:
    du = batch_gradient(xi, grid)
    flux = np.einsum("...ij,...j->...i", a, du)
    out = batch_divergence(flux, grid)
    return out + np.einsum("...i,...i->...", b, du) + c * xi


def _m_apply(xi, sigma, nu, grid: SpatialGrid) -> np.ndarray:
    du = batch_gradient(xi, grid)
    return np.einsum("...ik,...i->...k", sigma, du) + nu * xi[..., None]


def forward_cfl(problem: ControlProblem, cfl_safety: float = 0.9) -> CflReport:
    """Explicit step bounds for the forward scheme, maximized over gamma."""
    tree, grid = problem.tree, problem.grid
    dt, h = tree.time_grid.dt, grid.h
    horizon = tree.time_grid.horizon
    max_a = max_b = max_sigma = 0.0
    for v in problem.gamma:
        for t in (0.0, 0.5 * horizon, horizon):
            smp = problem.sample_all(t, v)
            max_a = max(max_a, float(np.abs(smp.a).sum(axis=-1).max()))
            max_b = max(max_b, float(np.sqrt((smp.b**2).sum(axis=-1)).max()))
            max_sigma = max(
                max_sigma, float(np.sqrt((smp.sigma**2).sum(axis=(-2, -1))).max())
            )
    denom = 2.0 * grid.dim * max_a
    dt_parabolic = cfl_safety * h * h / denom if denom > 0 else math.inf
    dt_transport = cfl_safety * h / max_b if max_b > 0 else math.inf
    allowed = min(dt_parabolic, dt_transport)
    satisfied = dt <= allowed * (1.0 + 1e-12)
    suggested = tree.n_steps
    if not satisfied and math.isfinite(allowed) and allowed > 0:
        suggested = max(tree.n_steps, int(math.ceil(horizon / allowed)))
    return CflReport(
        dt=dt,
        dt_parabolic=dt_parabolic,
        dt_transport=dt_transport,
        max_a=max_a,
        max_drift=max_b,
        max_sigma=max_sigma,
        coupling_indicator=dt * max_sigma**2 / (h * h),
        satisfied=satisfied,
        suggested_n_steps=suggested,
    )


@dataclass
class ForwardState:
    """Forward solution: per-level conditional means of xi given the node.

    On full trees the node determines the path, so mean[level] is the
    pathwise state; on recombining trees it is the exact conditional mean,
    which every cost and duality functional below needs and nothing more.
    """

    mean: AdaptedGridField
    tree: PathTree
    meta: dict = field(default_factory=dict)


def _forward_level_terms(problem, policy, level, xi):
    """Drift L xi + F and martingale loading M xi + G, grouped by control."""
    grid = problem.grid
    t = problem.tree.time_grid.time(level)
    idx = policy.indices[level]
    drift = np.empty_like(xi)
    mart = np.empty(xi.shape + (problem.tree.wiener_dim,))
    for gi in np.unique(idx):
        smp = problem.sample_all(t, problem.gamma[int(gi)])
        sel = np.flatnonzero(idx == gi)
        sub = xi[sel]
        drift[sel] = _l_apply(sub, smp.a, smp.b, smp.c, grid) + smp.big_f
        mart[sel] = _m_apply(sub, smp.sigma, smp.nu, grid) + smp.big_g
    return drift, mart


def solve_forward(
    problem: ControlProblem,
    policy: ControlPolicy,
    cfl_safety: float = 0.9,
) -> ForwardState:
    """March xi forward from xi0 under the policy; refuses CFL violations."""
    _validate_policy(problem, policy)
    tree, grid = problem.tree, problem.grid
    dt = tree.time_grid.dt
    sq = math.sqrt(dt)
    report = forward_cfl(problem, cfl_safety)
    if not report.satisfied:
        raise CflError(
            f"forward step dt = {report.dt:.3e} exceeds the explicit bound "
            f"min({report.dt_parabolic:.3e}, {report.dt_transport:.3e}); "
            f"n_steps >= {report.suggested_n_steps} would satisfy it",
            report,
        )
    if report.coupling_indicator > 1.0:
        warnings.warn(
            f"stochastic coupling number {report.coupling_indicator:.2f} > 1; "
            "multiplicative noise may amplify faster than the drift smooths",
            StochasticCouplingWarning,
        )

    levels = [np.broadcast_to(problem.xi0, (1,) + grid.shape).copy()]
    incr = tree.increments()
    for level in range(tree.n_steps):
        xi = levels[level]
        drift, mart = _forward_level_terms(problem, policy, level, xi)
        stepped = xi + dt * drift
        if tree.mode == "full":
            kick = np.einsum("n...k,ck->nc...", mart, incr)
            new = (stepped[:, None] + kick).reshape((-1,) + grid.shape)
        else:
            # push probability-weighted means through the affine step
            wshape = (-1,) + (1,) * grid.dim
            w = tree.level_probabilities(level).reshape(wshape)
            up = stepped + mart[..., 0] * sq
            down = stepped - mart[..., 0] * sq
            weighted = np.zeros((xi.shape[0] + 1,) + grid.shape)
            weighted[1:] += 0.5 * w * up
            weighted[:-1] += 0.5 * w * down
            new = weighted / tree.level_probabilities(level + 1).reshape(wshape)
        if not np.all(np.isfinite(new)):
            raise SolverBlowupError(
                f"forward state lost finiteness advancing level {level}; "
                "check the CFL margin and the coupling indicator"
            )
        levels.append(new)
    meta = {
        "dt": dt,
        "h": grid.h,
        "tree_mode": tree.mode,
        "cfl": report,
    }
    return ForwardState(mean=AdaptedGridField(levels), tree=tree, meta=meta)


def _mean_levels(forward) -> AdaptedGridField:
    return getattr(forward, "mean", forward)


def _policy_field(problem, policy, level, name) -> np.ndarray:
    """Per-node sample of one field under the policy: (nodes, ...) or (1, ...)."""
    t = problem.tree.time_grid.time(level)
    idx = policy.indices[level]
    uniq, inv = np.unique(idx, return_inverse=True)
    rows = np.stack(
        [problem.sample_field(name, t, problem.gamma[int(g)]) for g in uniq]
    )
    if len(uniq) == 1:
        return rows
    return rows[np.asarray(inv).reshape(-1)]


def cost(problem: ControlProblem, policy: ControlPolicy, forward) -> float:
    """J = sum_n dt E<f(t, V), xi(t)> + E<phi, xi(T)>, exact on the tree."""
    _validate_policy(problem, policy)
    xi = _mean_levels(forward)
    tree, grid = problem.tree, problem.grid
    dt, vol = tree.time_grid.dt, grid.cell_volume
    gax = tuple(range(1, 1 + grid.dim))
    total = 0.0
    for level in range(tree.n_steps):
        f_nodes = _policy_field(problem, policy, level, "cost_f")
        vals = np.sum(f_nodes * xi[level], axis=gax) * vol
        p = tree.level_probabilities(level)
        total += dt * float(p @ np.broadcast_to(vals, p.shape))
    p = tree.level_probabilities(tree.n_steps)
    terminal = np.sum(problem.terminal_phi * xi[tree.n_steps], axis=gax) * vol
    return total + float(p @ terminal)


def _frozen_sampler(problem: ControlProblem, name: str, v):
    if getattr(problem, name) is None:
        return None

    def sampler(t, w, grid):
        return problem.sample_field(name, t, v)

    return sampler


def solve_adjoint(
    problem: ControlProblem,
    policy: ControlPolicy,
    config: SolverConfig | None = None,
) -> AdjointPair:
    """Backward pair (u, q) for the formal adjoint under the frozen policy.

    The adjoint operators are D_i(a^{ij} D_j u) - D_i(b^i u) + c u and
    -D_i(sigma^{ik} q^k) + nu^k q^k; terminal data is phi and the forcing is
    the running cost density evaluated along the policy.  Coefficients are
    pre-sampled per level and grouped by control value, so the backward
    solver sees exactly the fields the forward sweep used.
    """
    _validate_policy(problem, policy)
    grid, tree = problem.grid, problem.tree
    g0 = problem.gamma[0]
    d = grid.dim
    representative = CoefficientSet(
        dim=d,
        wiener_dim=tree.wiener_dim,
        a=_frozen_sampler(problem, "a", g0) or constant_sampler(0.0, (d, d)),
        b=_frozen_sampler(problem, "b", g0),
        c=_frozen_sampler(problem, "c", g0),
        sigma=_frozen_sampler(problem, "sigma", g0),
        nu=_frozen_sampler(problem, "nu", g0),
        time_dependent=True,
        name=f"policy-frozen:{problem.name or 'control'}",
    )

    def level_coeffs(level: int) -> LevelCoefficients:
        t = tree.time_grid.time(level)
        idx = policy.indices[level]
        uniq, inv = np.unique(idx, return_inverse=True)
        smps = [problem.sample_all(t, problem.gamma[int(g)]) for g in uniq]

        def stack(attr):
            return np.stack([getattr(s, attr) for s in smps])

        return LevelCoefficients(
            a=stack("a"),
            b=stack("b"),
            c=stack("c"),
            sigma=stack("sigma"),
            nu=stack("nu"),
            inv=None if len(uniq) == 1 else np.asarray(inv).reshape(-1),
        )

    adjoint_data = ProblemData(
        grid=grid,
        tree=tree,
        coefficients=representative,
        terminal=lambda w, g: problem.terminal_phi,
        forcing_level=lambda level: _policy_field(problem, policy, level, "cost_f"),
        level_coefficients=level_coeffs,
        operator_kind="adjoint",
    )
    return solve(adjoint_data, config)


def _level_hamiltonians(problem, level, xi_level, u_level, q_level) -> np.ndarray:
    """H(node, v) for every node at a level and every v: shape (nodes, |gamma|)."""
    grid = problem.grid
    vol = grid.cell_volume
    gax = tuple(range(1, 1 + grid.dim))
    qax = gax + (1 + grid.dim,)
    t = problem.tree.time_grid.time(level)
    out = np.empty((xi_level.shape[0], len(problem.gamma)))
    for gi, v in enumerate(problem.gamma):
        smp = problem.sample_all(t, v)
        lxi = _l_apply(xi_level, smp.a, smp.b, smp.c, grid)
        mxi = _m_apply(xi_level, smp.sigma, smp.nu, grid)
        out[:, gi] = -(
            np.sum(lxi * u_level, axis=gax)
            + np.sum(smp.big_f * u_level, axis=gax)
            + np.sum((mxi + smp.big_g) * q_level, axis=qax)
            + np.sum(smp.cost_f * xi_level, axis=gax)
        ) * vol
    return out


def hamiltonian(
    problem: ControlProblem,
    node: NodeId,
    xi_state: np.ndarray,
    v,
    u: np.ndarray,
    q: np.ndarray,
) -> float:
    """H = -<L xi, u> - <F, u> - <M^k xi, q^k> - <G^k, q^k> - <f, xi> at a node."""
    if not (0 <= node.level < problem.tree.n_steps):
        raise ValueError(f"level {node.level} is not a non-leaf level")
    grid = problem.grid
    t = problem.tree.time_grid.time(node.level)
    smp = problem.sample_all(t, v)
    lxi = _l_apply(xi_state[None], smp.a, smp.b, smp.c, grid)[0]
    mxi = _m_apply(xi_state[None], smp.sigma, smp.nu, grid)[0]
    value = (
        inner_product(lxi, u, grid)
        + inner_product(smp.big_f, u, grid)
        + float(np.sum((mxi + smp.big_g) * q)) * grid.cell_volume
        + inner_product(smp.cost_f, xi_state, grid)
    )
    return -value


@dataclass(frozen=True)
class MaxPrincipleReport:
    """Per-node certification of H(policy) >= max_v H - tol.

    flat nodes (max_v H - min_v H below resolution) pass vacuously and are
    counted separately rather than interpreted.
    """

    pass_fraction: float
    n_nodes: int
    n_failures: int
    n_flat: int
    flat_fraction: float
    tol: float
    failures: list


def check_max_principle(
    problem: ControlProblem,
    policy: ControlPolicy,
    forward,
    adjoint: AdjointPair,
    tol: float | None = None,
) -> MaxPrincipleReport:
    """Certify the maximum condition node by node under one policy.

    tol defaults to 5 (dt + h^2) scaled by the largest |H| seen, the
    first-order-in-time, second-order-in-space scheme error.
    """
    _validate_policy(problem, policy)
    xi = _mean_levels(forward)
    tree = problem.tree
    dt, h = tree.time_grid.dt, problem.grid.h
    all_h = [
        _level_hamiltonians(problem, level, xi[level], adjoint.u[level], adjoint.q[level])
        for level in range(tree.n_steps)
    ]
    h_scale = max(1.0, max(float(np.abs(hl).max()) for hl in all_h))
    if tol is None:
        tol = 5.0 * (dt + h * h) * h_scale
    flat_tol = 1e-12 * h_scale

    n_nodes = n_failures = n_flat = 0
    failures = []
    for level, hl in enumerate(all_h):
        chosen = hl[np.arange(hl.shape[0]), policy.indices[level]]
        best = hl.max(axis=1)
        gaps = best - chosen
        flat = (best - hl.min(axis=1)) <= flat_tol
        bad = gaps > tol
        n_nodes += hl.shape[0]
        n_flat += int(flat.sum())
        n_failures += int(bad.sum())
        for index in np.flatnonzero(bad)[:MAX_REPORTED_FAILURES]:
            if len(failures) < MAX_REPORTED_FAILURES:
                failures.append(
                    {"level": level, "index": int(index), "gap": float(gaps[index])}
                )
    return MaxPrincipleReport(
        pass_fraction=1.0 - n_failures / n_nodes,
        n_nodes=n_nodes,
        n_failures=n_failures,
        n_flat=n_flat,
        flat_fraction=n_flat / n_nodes,
        tol=float(tol),
        failures=failures,
    )


@dataclass(frozen=True)
class DualityReport:
    """Cost against the adjoint representation, two independent code paths.

    defect pairs F with the post-step u(t_n) and decays first order in dt;
    predictor_gap pairs F with the predictor E_n u(t_{n+1}) instead, which
    telescopes exactly for the explicit single-pass scheme and should sit at
    rounding level.
    """

    j_direct: float
    dual_value: float
    defect: float
    predictor_dual: float
    predictor_gap: float


def duality_check(
    problem: ControlProblem,
    policy: ControlPolicy,
    forward,
    adjoint: AdjointPair,
) -> DualityReport:
    """defect = |J - (E<xi0, u(0)> + sum_n dt E[<F, u> + <G^k, q^k>])|."""
    _validate_policy(problem, policy)
    tree, grid = problem.tree, problem.grid
    dt, vol = tree.time_grid.dt, grid.cell_volume
    gax = tuple(range(1, 1 + grid.dim))
    qax = gax + (1 + grid.dim,)

    j_direct = cost(problem, policy, forward)
    base = inner_product(problem.xi0, adjoint.u[0][0], grid)
    acc = acc_pred = 0.0
    for level in range(tree.n_steps):
        p = tree.level_probabilities(level)
        f_big = _policy_field(problem, policy, level, "big_f")
        g_big = _policy_field(problem, policy, level, "big_g")
        ubar = level_conditional_expectation(tree, adjoint.u[level + 1], level)
        gq = np.sum(g_big * adjoint.q[level], axis=qax) * vol
        fu = np.sum(f_big * adjoint.u[level], axis=gax) * vol
        fubar = np.sum(f_big * ubar, axis=gax) * vol
        acc += dt * float(p @ np.broadcast_to(fu + gq, p.shape))
        acc_pred += dt * float(p @ np.broadcast_to(fubar + gq, p.shape))
    dual = base + acc
    pred = base + acc_pred
    return DualityReport(
        j_direct=j_direct,
        dual_value=dual,
        defect=abs(j_direct - dual),
        predictor_dual=pred,
        predictor_gap=abs(j_direct - pred),
    )


def _argmax_policy(problem, forward, adjoint) -> ControlPolicy:
    # np.argmax takes the first maximizer, honoring gamma's declared order
    xi = _mean_levels(forward)
    levels = tuple(
        np.argmax(
            _level_hamiltonians(
                problem, level, xi[level], adjoint.u[level], adjoint.q[level]
            ),
            axis=1,
        )
        for level in range(problem.tree.n_steps)
    )
    return ControlPolicy(levels)


@dataclass
class PolicyIterationRecord:
    """History of successive Hamiltonian maximization from a starting policy."""

    final_policy: ControlPolicy
    js: list
    iterations: list
    n_iterations: int
    converged: bool
    oscillated: bool


def policy_iteration(
    problem: ControlProblem,
    policy: ControlPolicy | None = None,
    max_iters: int = 20,
    solver_config: SolverConfig | None = None,
    forward: ForwardState | None = None,
    adjoint: AdjointPair | None = None,
    tol: float | None = None,
    diagnostics: bool = False,
) -> PolicyIterationRecord:
    """Iterate per-node argmax of H until a fixed point, a cycle, or max_iters.

    A period-2 cycle returns the best-cost iterate with a warning; exhausting
    max_iters also falls back to the best-cost iterate.  Warm-start forward
    and adjoint inputs, when given, must correspond to the starting policy.
    """
    if policy is None:
        policy = constant_policy(problem.tree)
    _validate_policy(problem, policy)
    history = [policy]
    js: list = []
    iteration_rows: list = []
    best_j = math.inf
    best_policy = policy
    converged = oscillated = False
    for it in range(max_iters):
        fwd = forward if (it == 0 and forward is not None) else solve_forward(
            problem, policy
        )
        adj = adjoint if (it == 0 and adjoint is not None) else solve_adjoint(
            problem, policy, solver_config
        )
        j = cost(problem, policy, fwd)
        js.append(j)
        if diagnostics:
            duality = duality_check(problem, policy, fwd, adj)
            principle = check_max_principle(problem, policy, fwd, adj, tol)
            iteration_rows.append(
                {
                    "iteration": it,
                    "j": j,
                    "defect": duality.defect,
                    "pass_fraction": principle.pass_fraction,
                }
            )
        if j < best_j:
            best_j, best_policy = j, policy
        new = _argmax_policy(problem, fwd, adj)
        if policies_equal(new, policy):
            converged = True
            break
        if len(history) >= 2 and policies_equal(new, history[-2]):
            oscillated = True
            warnings.warn(
                "policy iteration entered a period-2 cycle; "
                "returning the best-cost iterate",
                PolicyOscillationWarning,
            )
            break
        history.append(new)
        policy = new
    final = policy if converged else best_policy
    return PolicyIterationRecord(
        final_policy=final,
        js=js,
        iterations=iteration_rows,
        n_iterations=len(js),
        converged=converged,
        oscillated=oscillated,
    )


def improve_policy(
    problem: ControlProblem,
    policy: ControlPolicy,
    adjoint: AdjointPair | None = None,
    forward: ForwardState | None = None,
    max_iters: int = 20,
    solver_config: SolverConfig | None = None,
) -> ControlPolicy:
    """Successive per-node Hamiltonian maximization; ties pick gamma's first."""
    record = policy_iteration(
        problem,
        policy,
        max_iters=max_iters,
        solver_config=solver_config,
        forward=forward,
        adjoint=adjoint,
    )
    return record.final_policy


@dataclass(frozen=True)
class ExhaustiveResult:
    """Brute-force optimum over every node -> gamma assignment."""

    policy: ControlPolicy
    j: float
    n_policies: int
    costs: np.ndarray


def exhaustive_policy_search(
    problem: ControlProblem,
    budget: int = 2**20,
    workspace_bytes: int = 2**31,
) -> ExhaustiveResult:
    """Evaluate J for all |gamma|^nodes policies at once, batched per level.

    Full trees only: the enumeration assigns controls per pathwise node.
    Every policy's forward state advances in one vectorized sweep with a
    leading policy axis, so the cost per level is |gamma| generator
    applications on a (policies * nodes)-sized batch.
    """
    tree, grid = problem.tree, problem.grid
    if tree.mode != "full":
        raise UnsupportedModeError(
            "exhaustive search enumerates pathwise policies; use a full tree"
        )
    report = forward_cfl(problem)
    if not report.satisfied:
        raise CflError("forward CFL bound fails for the exhaustive sweep", report)
    n_gamma = len(problem.gamma)
    sizes = tree.level_sizes[:-1]
    total = int(sum(sizes))
    n_policies = n_gamma**total
    if n_policies > budget:
        raise BudgetExceededError(
            f"{n_gamma}^{total} = {n_policies} policies exceed budget {budget}"
        )
    leaf_bytes = (1 + n_gamma) * n_policies * tree.level_sizes[-1] * grid.size * 8
    if leaf_bytes > workspace_bytes:
        raise BudgetExceededError(
            f"exhaustive sweep needs ~{leaf_bytes} bytes, over {workspace_bytes}"
        )

    # column j of `assign` is the control index at the j-th non-leaf node,
    # nodes ordered level-major
    codes = np.arange(n_policies, dtype=np.int64)
    weights = n_gamma ** np.arange(total, dtype=np.int64)
    assign = (codes[:, None] // weights[None, :]) % n_gamma
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    dt, vol = tree.time_grid.dt, grid.cell_volume
    gax = tuple(range(2, 2 + grid.dim))
    incr = tree.increments()
    xi = np.broadcast_to(problem.xi0, (n_policies, 1) + grid.shape)
    costs = np.zeros(n_policies)
    for level in range(tree.n_steps):
        t = tree.time_grid.time(level)
        m = sizes[level]
        pol = assign[:, offsets[level] : offsets[level + 1]]
        mask_shape = pol.shape + (1,) * grid.dim
        drift = np.zeros(xi.shape)
        mart = np.zeros(xi.shape + (tree.wiener_dim,))
        f_vals = np.zeros(pol.shape)
        flat = xi.reshape((-1,) + grid.shape)
        for gi, v in enumerate(problem.gamma):
            smp = problem.sample_all(t, v)
            dr = (_l_apply(flat, smp.a, smp.b, smp.c, grid) + smp.big_f).reshape(
                xi.shape
            )
            mt = (_m_apply(flat, smp.sigma, smp.nu, grid) + smp.big_g).reshape(
                xi.shape + (tree.wiener_dim,)
            )
            mask = (pol == gi).reshape(mask_shape)
            drift += np.where(mask, dr, 0.0)
            mart += np.where(mask[..., None], mt, 0.0)
            f_vals += np.where(pol == gi, np.sum(smp.cost_f * xi, axis=gax) * vol, 0.0)
        costs += dt * (f_vals @ tree.level_probabilities(level))
        kick = np.einsum("pm...k,ck->pmc...", mart, incr)
        xi = ((xi + dt * drift)[:, :, None] + kick).reshape(
            (n_policies, m * tree.child_count) + grid.shape
        )
    terminal = np.sum(problem.terminal_phi * xi, axis=gax) * vol
    costs += terminal @ tree.level_probabilities(tree.n_steps)

    best = int(np.argmin(costs))
    levels = tuple(
        assign[best, offsets[level] : offsets[level + 1]]
        for level in range(tree.n_steps)
    )
    return ExhaustiveResult(
        policy=ControlPolicy(levels),
        j=float(costs[best]),
        n_policies=n_policies,
        costs=costs,
    )


def control_report(
    problem: ControlProblem,
    policy: ControlPolicy | None = None,
    max_iters: int = 20,
    tol: float | None = None,
    solver_config: SolverConfig | None = None,
) -> dict:
    """JSON-shaped experiment record: per-iteration J, defect, pass fraction.

    The final block re-solves under the returned policy and dumps it node by
    node.
    """
    record = policy_iteration(
        problem,
        policy,
        max_iters=max_iters,
        solver_config=solver_config,
        tol=tol,
        diagnostics=True,
    )
    final = record.final_policy
    fwd = solve_forward(problem, final)
    adj = solve_adjoint(problem, final, solver_config)
    duality = duality_check(problem, final, fwd, adj)
    principle = check_max_principle(problem, final, fwd, adj, tol)
    return {
        "name": problem.name,
        "n_steps": problem.tree.n_steps,
        "tree_mode": problem.tree.mode,
        "grid_points": problem.grid.points,
        "gamma": list(problem.gamma),
        "converged": record.converged,
        "oscillated": record.oscillated,
        "n_iterations": record.n_iterations,
        "iterations": record.iterations,
        "final": {
            "j": duality.j_direct,
            "defect": duality.defect,
            "predictor_gap": duality.predictor_gap,
            "pass_fraction": principle.pass_fraction,
            "flat_fraction": principle.flat_fraction,
            "tol": principle.tol,
            "policy": final.dump(problem.gamma),
        },
    }
