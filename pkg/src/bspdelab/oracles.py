"""Closed-form reference solutions used to calibrate the backward solver.

Two families:

  * heat: deterministic smoothing u(t) = exp(a (T - t) Lap) phi computed by
    FFT on the periodic box, with q identically zero.  Exercises the second
    order spatial operator and the time stepper in isolation.

  * wiener_linear: a genuinely stochastic pair on d = d' = 1,

        u(t, x) = W_t h(t, x) + m(t, x),   q(t, x) = h(t, x),

    solving du = -(a u_xx + s q_x) dt + q dW, u(T) = W_T g, where in Fourier
    space h_hat(t, k) = exp(-a k^2 (T-t)) g_hat(k) and
    m_hat(t, k) = s (T-t) (i k) g_hat(k) exp(-a k^2 (T-t)).

Both produce a coefficient set, a forcing, a terminal map and exact (t, W)
field evaluators, so a numeric run can be scored against them node by node.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .coefficients import CoefficientSet, constant_sampler
from .grid import SpatialGrid
from .lattice import PathTree

TerminalMap = Callable[[np.ndarray, SpatialGrid], np.ndarray]


def _wavenumbers(grid: SpatialGrid) -> list[np.ndarray]:
    # angular wavenumbers pi*m/R for m in [-M/2, M/2)
    return [2.0 * np.pi * np.fft.fftfreq(grid.points, d=grid.h) for _ in range(grid.dim)]


def _laplace_symbol(grid: SpatialGrid) -> np.ndarray:
    ks = _wavenumbers(grid)
    out = np.zeros(grid.shape)
    for axis, k in enumerate(ks):
        shape = [1] * grid.dim
        shape[axis] = grid.points
        out = out + (k.reshape(shape)) ** 2
    return out


@dataclass(frozen=True)
class OracleSolution:
    """Exact (u, q) pair plus the problem ingredients that generate it."""

    name: str
    grid: SpatialGrid
    horizon: float
    coefficients: CoefficientSet
    terminal: TerminalMap
    u_exact: Callable[[float, np.ndarray], np.ndarray]
    q_exact: Callable[[float, np.ndarray], np.ndarray]
    forcing: Callable[[float, np.ndarray, SpatialGrid], np.ndarray] | None = None


def heat_oracle(
    grid: SpatialGrid,
    horizon: float,
    diffusion: float = 0.5,
    terminal_field: np.ndarray | None = None,
    wiener_dim: int = 1,
) -> OracleSolution:
    """Backward heat semigroup on the box; q = 0, noise never enters.

    Default terminal is cos(x1) + 0.5 cos(2 x1) (times cos(x2) bumps in 2d),
    chosen smooth and mean-free enough to exercise several Fourier modes.
    """
    if terminal_field is None:
        coords = grid.coordinates()
        scale = np.pi / grid.half_width
        terminal_field = np.cos(scale * coords[0]) + 0.5 * np.cos(2.0 * scale * coords[0])
        if grid.dim == 2:
            terminal_field = terminal_field * (1.0 + 0.5 * np.cos(scale * coords[1]))
    phi = np.asarray(terminal_field, dtype=np.float64)
    if phi.shape != grid.shape:
        raise ValueError(f"terminal field has shape {phi.shape}, expected {grid.shape}")
    sym = _laplace_symbol(grid)
    phi_hat = np.fft.fftn(phi)
    T = float(horizon)

    def u_exact(t: float, w: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(phi_hat * np.exp(-diffusion * sym * (T - t))).real

    def q_exact(t: float, w: np.ndarray) -> np.ndarray:
        return np.zeros(grid.shape + (wiener_dim,))

    d = grid.dim
    eye = np.eye(d) * diffusion
    coeffs = CoefficientSet(
        dim=d,
        wiener_dim=wiener_dim,
        a=constant_sampler(eye, (d, d)),
        sigma=None,
        w_dependent=False,
        periodic=True,
        name="heat",
    )

    def terminal(w: np.ndarray, g: SpatialGrid) -> np.ndarray:
        return phi.copy()

    return OracleSolution(
        name="heat",
        grid=grid,
        horizon=T,
        coefficients=coeffs,
        terminal=terminal,
        u_exact=u_exact,
        q_exact=q_exact,
    )


def wiener_linear_oracle(
    grid: SpatialGrid,
    horizon: float,
    diffusion: float = 0.5,
    transport: float = 1.0,
    profile: np.ndarray | None = None,
) -> OracleSolution:
    """Wiener-affine exact pair on d = d' = 1; degenerate when 2a = s^2.

    With the defaults a = 1/2, s = 1 and g = cos on half_width pi the pair is
    u = W_t e^{-(T-t)/2} cos x + (t - T) e^{-(T-t)/2} sin x, q = e^{-(T-t)/2} cos x.
    """
    if grid.dim != 1:
        raise ValueError("wiener_linear oracle is one dimensional")
    if profile is None:
        profile = np.cos((np.pi / grid.half_width) * grid.axis_coordinates())
    g = np.asarray(profile, dtype=np.float64)
    if g.shape != grid.shape:
        raise ValueError(f"profile has shape {g.shape}, expected {grid.shape}")
    k = _wavenumbers(grid)[0]
    g_hat = np.fft.fft(g)
    T = float(horizon)
    a, s = float(diffusion), float(transport)

    def h_field(t: float) -> np.ndarray:
        return np.fft.ifft(g_hat * np.exp(-a * k**2 * (T - t))).real

    def m_field(t: float) -> np.ndarray:
        return np.fft.ifft(s * (T - t) * 1j * k * g_hat * np.exp(-a * k**2 * (T - t))).real

    def u_exact(t: float, w: np.ndarray) -> np.ndarray:
        return float(np.asarray(w).reshape(-1)[0]) * h_field(t) + m_field(t)

    def q_exact(t: float, w: np.ndarray) -> np.ndarray:
        return h_field(t)[..., None]

    coeffs = CoefficientSet(
        dim=1,
        wiener_dim=1,
        a=constant_sampler(np.array([[a]]), (1, 1)),
        sigma=constant_sampler(np.array([[s]]), (1, 1)),
        w_dependent=False,
        periodic=True,
        name="wiener-linear",
    )

    def terminal(w: np.ndarray, gr: SpatialGrid) -> np.ndarray:
        return float(np.asarray(w).reshape(-1)[0]) * g

    return OracleSolution(
        name="wiener_linear",
        grid=grid,
        horizon=T,
        coefficients=coeffs,
        terminal=terminal,
        u_exact=u_exact,
        q_exact=q_exact,
    )


# -- scoring a numeric run against an oracle -----------------------------------


def exact_level_fields(
    oracle: OracleSolution, tree: PathTree, level: int
) -> tuple[np.ndarray, np.ndarray]:
    """Oracle u and q stacked over every node of a tree level.

    Nodes sharing a Wiener state are evaluated once.
    """
    t = tree.time_grid.time(level)
    w = tree.level_w(level)
    uniq, inverse = np.unique(w, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    u_rows = np.stack([oracle.u_exact(t, row) for row in uniq])
    q_rows = np.stack([oracle.q_exact(t, row) for row in uniq])
    return u_rows[inverse], q_rows[inverse]


def solution_error(u_levels, q_levels, tree: PathTree, oracle: OracleSolution) -> dict:
    """Error norms of a numeric pair against the oracle.

    Returns u_sup_error = max_n sqrt(E ||u_n - u*_n||_{L2}^2), the analogous
    q_sup_error, and q_integrated_error = sqrt(sum_n dt E ||q_n - q*_n||^2).
    """
    grid = oracle.grid
    vol = grid.cell_volume
    dt = tree.time_grid.dt
    comp_axes_u = tuple(range(1, 1 + grid.dim))
    u_sup = 0.0
    q_sup = 0.0
    q_int = 0.0
    for level in range(tree.n_steps + 1):
        p = tree.level_probabilities(level)
        u_ex, q_ex = exact_level_fields(oracle, tree, level)
        du = np.asarray(u_levels[level]) - u_ex
        dq = np.asarray(q_levels[level]) - q_ex if level < len(q_levels) else None
        u_ms = float(np.sum(p * np.sum(du**2, axis=comp_axes_u) * vol))
        u_sup = max(u_sup, np.sqrt(u_ms))
        if dq is not None:
            q_axes = comp_axes_u + (1 + grid.dim,)
            q_ms = float(np.sum(p * np.sum(dq**2, axis=q_axes) * vol))
            q_sup = max(q_sup, np.sqrt(q_ms))
            q_int += dt * q_ms
    return {
        "u_sup_error": u_sup,
        "q_sup_error": q_sup,
        "q_integrated_error": float(np.sqrt(q_int)),
    }


def convergence_constant(error: float, dt: float, h: float) -> float:
    """error / (dt + h^2), the constant a first-order-in-time scheme should keep bounded."""
    return error / (dt + h * h)
