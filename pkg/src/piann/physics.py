"""Two-phase displacement physics on the unit saturation interval.

The conservation law is u_t + (f_M(u))_x = 0 with fractional-flow function

    f_M(u) = u^2 / (u^2 + (1 - u)^2 / M),

water injected at the left boundary (u = 1) into a dry medium (u = 0).  The
flux is S-shaped, so the entropy solution is a rarefaction attached to a
shock.  The post-shock saturation u* is the tangency point where the chord
from the origin touches the flux curve, f'(u*) = f(u*)/u*, and the shock
travels at s = f(u*)/u*.  Everything here is plain numpy; the network is
deliberately kept out of this module so it can serve as an independent
reference.
"""

from __future__ import annotations

import numpy as np

from piann.grid import GridSpec, SolutionField

_BISECT_TOL = 1e-12
_SPEED_SAMPLES = 4097


def flux(u, m_value: float):
    """Fractional flow f_M(u); accepts scalars or arrays.

    The denominator u^2 + (1-u)^2/M is positive everywhere (its two terms
    cannot vanish together), so no special-casing is needed: f(0) = 0 and
    f(1) = 1 fall out of the formula.
    """
    if m_value <= 0.0:
        raise ValueError(f"mobility ratio must be positive, got {m_value}")
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    denom = u2 + (1.0 - u) * (1.0 - u) / m_value
    out = u2 / denom
    return float(out) if out.ndim == 0 else out


def flux_derivative(u, m_value: float):
    """df_M/du via the quotient rule on D = u^2 + (1-u)^2/M."""
    if m_value <= 0.0:
        raise ValueError(f"mobility ratio must be positive, got {m_value}")
    u = np.asarray(u, dtype=np.float64)
    d = u * u + (1.0 - u) * (1.0 - u) / m_value
    d_prime = 2.0 * u - 2.0 * (1.0 - u) / m_value
    out = (2.0 * u * d - u * u * d_prime) / (d * d)
    return float(out) if out.ndim == 0 else out


def shock_saturation(m_value: float, tol: float = _BISECT_TOL) -> float:
    """Post-shock saturation u*: the root of f'(u) - f(u)/u on (0, 1).

    Bisection on g(u) = f'(u) - f(u)/u, which is positive near 0 (both terms
    shrink linearly but f' twice as fast upward) and equals -1 at u = 1.
    """
    def g(u: float) -> float:
        return flux_derivative(u, m_value) - flux(u, m_value) / u

    lo, hi = 1e-9, 1.0
    if g(lo) <= 0.0 or g(hi) >= 0.0:
        raise ValueError(f"no sign change for mobility ratio {m_value}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def shock_speed(m_value: float) -> float:
    """Front speed s = f(u*)/u* (equal to f'(u*) by the tangency condition)."""
    u_star = shock_saturation(m_value)
    return flux(u_star, m_value) / u_star


def rarefaction_saturation(xi, m_value: float, u_star: float | None = None):
    """Invert f'(u) = xi on [u*, 1], where f' decreases monotonically.

    ``xi`` may be a scalar or an array with entries in [f'(1), f'(u*)] =
    [0, s]; the bisection runs vectorized to tolerance 1e-12.
    """
    if u_star is None:
        u_star = shock_saturation(m_value)
    xi_arr = np.atleast_1d(np.asarray(xi, dtype=np.float64))
    lo = np.full_like(xi_arr, u_star)
    hi = np.ones_like(xi_arr)
    # 52 halvings of an interval of length <= 1 reach 1e-12 everywhere
    for _ in range(52):
        mid = 0.5 * (lo + hi)
        too_steep = flux_derivative(mid, m_value) > xi_arr
        lo = np.where(too_steep, mid, lo)
        hi = np.where(too_steep, hi, mid)
    out = 0.5 * (lo + hi)
    return float(out[0]) if np.asarray(xi).ndim == 0 else out


def analytic_solution(x: float, t: float, m_value: float) -> float:
    """Entropy solution at a single point; see ``analytic_profile`` for rows."""
    return float(analytic_profile(np.array([x]), t, m_value)[0])


def analytic_profile(x, t: float, m_value: float, u_star: float | None = None) -> np.ndarray:
    """Saturation profile at time t on the nodes ``x``.

    Self-similar in x/t: zero ahead of the shock at s*t, the rarefaction
    fan f'(u) = x/t back to the injection value, and u = 1 where x/t has
    fallen to f'(1) = 0.  At t = 0 only the injection node x = 0 is wet.
    """
    x = np.asarray(x, dtype=np.float64)
    if t < 0.0:
        raise ValueError(f"time must be non-negative, got {t}")
    if np.any(x < 0.0):
        raise ValueError("positions must be non-negative")
    if t == 0.0:
        return np.where(x == 0.0, 1.0, 0.0)
    if u_star is None:
        u_star = shock_saturation(m_value)
    speed = flux(u_star, m_value) / u_star
    xi = x / t
    out = np.zeros_like(x)
    fan = (xi <= speed) & (xi > 0.0)
    if np.any(fan):
        out[fan] = rarefaction_saturation(xi[fan], m_value, u_star)
    out[xi <= 0.0] = 1.0
    return out


def analytic_field(grid: GridSpec, m_value: float) -> SolutionField:
    """Exact solution sampled on every grid node."""
    u_star = shock_saturation(m_value)
    rows = [analytic_profile(grid.x, t, m_value, u_star) for t in grid.t]
    return SolutionField(m_value, grid, np.stack(rows))


def max_wave_speed(m_value: float) -> float:
    """max |f'(u)| over u in [0, 1], for CFL step sizing."""
    u = np.linspace(0.0, 1.0, _SPEED_SAMPLES)
    return float(np.max(np.abs(flux_derivative(u, m_value))))


def solve_upwind_fv(grid: GridSpec, m_value: float, cfl: float = 0.9) -> tuple[SolutionField, int]:
    """First-order upwind finite-volume reference solution.

    Conservative update u_i <- u_i - (dt/dx)(f_i - f_{i-1}) with the inflow
    value pinned to 1; valid because f' >= 0 on [0, 1], so all waves move
    rightward.  Each grid time interval is split into equal substeps no
    larger than cfl * dx / max|f'|, landing exactly on the grid t-nodes.
    Returns the sampled field and the total substep count.
    """
    if not 0.0 < cfl <= 1.0:
        raise ValueError(f"cfl must lie in (0, 1], got {cfl}")
    if abs(grid.x[0]) > 1e-12:
        raise ValueError("finite-volume solver expects the inflow boundary at x = 0")
    speed = max_wave_speed(m_value)
    dx = grid.dx
    u = np.zeros(grid.n_x)
    u[0] = 1.0
    rows = [u.copy()]
    substeps = 0
    for j in range(1, grid.n_t):
        interval = float(grid.t[j] - grid.t[j - 1])
        n_sub = max(1, int(np.ceil(interval * speed / (cfl * dx))))
        step = interval / n_sub
        lam = step / dx
        for _ in range(n_sub):
            f = flux(u, m_value)
            u[1:] = u[1:] - lam * (f[1:] - f[:-1])
            u[0] = 1.0
        substeps += n_sub
        rows.append(u.copy())
    return SolutionField(m_value, grid, np.stack(rows)), substeps
