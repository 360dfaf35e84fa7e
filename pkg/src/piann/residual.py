"""Interior PDE residual and the physics-informed training loss.

For one mobility ratio the residual pairs a time difference R1 with a flux
divergence R2 on the interior nodes and sums |R1 + R2|^2 over the grid; the
loss adds those norms over the mobility list.  There is no data term and no
boundary penalty: the initial and inflow values are built into the network,
and the only place the initial profile informs the residual is the optional
first-step row, the forward difference from t_0 anchored at the known dry
interior.  Without that row the all-wet field u == 1 is a perfect minimum,
so the anchor is on by default.

R1 comes in two modes: ``finite_difference`` divides consecutive saturation
rows, ``autodiff`` reads du/dt off a forward-mode sweep.  Both stay on the
tape, so either loss is differentiable in the parameters.  R2 offers the
symmetric ``central`` stencil and the left-leaning ``upwind`` one; upwind
matches the physics (all waves travel toward larger x).

Each residual row is collocated at the later time of its difference pair:
row j couples (u(t_j) - u(t_{j-1}))/dt with the flux stencil of u(t_j).
This makes the zero-residual field the solution of a stable implicit
update.  Sampling the flux at the earlier time instead would make it the
explicit central/upwind evolution, which is unstable at dt = dx for this
flux (wave speeds exceed 1), so the loss could never reach zero on a field
that keeps the front: its minimizers travel at visibly wrong speeds.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from piann import autodiff as ad
from piann.autodiff import Dual, Tensor
from piann.grid import GridSpec, SolutionField
from piann.model import Piann

R1_MODES = ("finite_difference", "autodiff")
R2_MODES = ("central", "upwind")


@dataclass(frozen=True)
class ResidualConfig:
    grid: GridSpec
    r1_mode: str = "finite_difference"
    r2_mode: str = "central"
    include_first_step: bool = True

    def __post_init__(self):
        if self.r1_mode not in R1_MODES:
            raise ValueError(f"unknown r1_mode {self.r1_mode!r}; expected one of {R1_MODES}")
        if self.r2_mode not in R2_MODES:
            raise ValueError(f"unknown r2_mode {self.r2_mode!r}; expected one of {R2_MODES}")
        if self.grid.n_x < 3:
            raise ValueError(f"flux stencils need at least 3 spatial nodes, got {self.grid.n_x}")
        # anchored grids form a residual row from a single pair (t_0 -> t_1);
        # without the anchor the first evaluated row only feeds a difference
        min_t = 2 if self.include_first_step else 3
        if self.grid.n_t < min_t:
            raise ValueError(f"residual needs at least {min_t} time levels, got {self.grid.n_t}")


def pair_windows(config: ResidualConfig, time_window: int) -> list[tuple[int, int]]:
    """Partition the residual's difference pairs into contiguous spans.

    Pair j couples t_j -> t_{j+1}; anchored configs own pair 0 (the forward
    difference from the initial profile), truncated ones start at pair 1.
    Returns half-open spans [a, b) of width ``time_window`` (the last span
    may be shorter); ``time_window <= 0`` yields one span covering all
    pairs, the full-batch layout.
    """
    first = 0 if config.include_first_step else 1
    last = config.grid.n_t - 1
    if time_window <= 0:
        return [(first, last)]
    return [(a, min(a + time_window, last)) for a in range(first, last, time_window)]


def window_config(config: ResidualConfig, a: int, b: int) -> ResidualConfig:
    """Residual over pairs [a, b) only, as a config on a sliced grid.

    The sliced grid keeps the time level before the span so the first
    difference pair is available; a span holding pair 0 keeps its anchor
    row.  Residual rows of the window configs over ``pair_windows`` tile
    the full residual exactly, so window losses sum to the full loss.
    """
    first = 0 if config.include_first_step else 1
    if not first <= a < b <= config.grid.n_t - 1:
        raise ValueError(f"window [{a}, {b}) out of range for {config.grid.n_t} time levels")
    anchored = config.include_first_step and a == 0
    lo = a if anchored else a - 1
    sliced = GridSpec(config.grid.x, config.grid.t[lo : b + 1])
    return ResidualConfig(sliced, config.r1_mode, config.r2_mode, include_first_step=anchored)


@dataclass
class FieldSeries:
    """Saturation rows at t_1..t_T for one mobility ratio, on or off tape.

    ``u`` is [T x n_x]; ``du_dt`` mirrors it with time derivatives when the
    series was built with a forward-mode sweep.
    """

    u: Tensor
    grid: GridSpec
    m_value: float
    du_dt: Tensor | None = None

    @staticmethod
    def from_network(net: Piann, config: ResidualConfig, m_value: float) -> "FieldSeries":
        grid = config.grid
        if net.config.n_x != grid.n_x:
            raise ValueError(f"network emits {net.config.n_x} nodes but the grid has {grid.n_x}")
        if abs(net.config.x_max - grid.x[-1]) > 1e-9 or abs(grid.x[0]) > 1e-12:
            raise ValueError("network x-lattice does not match the grid")
        want_tangent = config.r1_mode == "autodiff"
        u, _ = net.forward_batch(grid.t[1:], m_value, tangent=want_tangent)
        if isinstance(u, Dual):
            return FieldSeries(u.p, grid, m_value, du_dt=u.t)
        return FieldSeries(u, grid, m_value)

    @staticmethod
    def from_field(field: SolutionField) -> "FieldSeries":
        """Wrap precomputed samples (for truncation studies and diagnostics)."""
        return FieldSeries(ad.constant(field.u[1:]), field.grid, field.m_value)


def flux_on_tape(u, m_value: float):
    """Fractional flow u^2 / (u^2 + (1-u)^2/M) built from taped ops.

    Mirrors the scalar flux in ``piann.physics`` operation for operation so
    taped and plain evaluations agree to the last bit.
    """
    u2 = ad.square(u)
    om2 = ad.square(ad.sub(1.0, u))
    return ad.div(u2, ad.add(u2, ad.div(om2, m_value)))


def residual_r1(fields: FieldSeries, config: ResidualConfig):
    """Time part on interior nodes: [rows x (N-1)] where rows = T-1 (+1 anchored)."""
    grid = config.grid
    n_int = grid.n_x - 2
    rows = grid.n_t - 1  # saturation rows at t_1..t_T
    u_int = ad.narrow(fields.u, 1, 1, n_int)
    inv_dt = 1.0 / grid.dt
    if rows > 1:
        if config.r1_mode == "finite_difference":
            later = ad.narrow(u_int, 0, 1, rows - 1)
            earlier = ad.narrow(u_int, 0, 0, rows - 1)
            body = ad.mul(ad.sub(later, earlier), inv_dt)
        else:
            if fields.du_dt is None:
                raise ValueError("autodiff r1 needs a series built with a tangent sweep")
            # du/dt at the later member of each pair, matching the flux rows
            body = ad.narrow(ad.narrow(fields.du_dt, 1, 1, n_int), 0, 1, rows - 1)
    else:
        body = None
    if not config.include_first_step:
        return body
    # the interior of the t_0 row is identically zero (dry medium), so the
    # anchored forward difference is just u(t_1)/dt
    first = ad.mul(ad.narrow(u_int, 0, 0, 1), inv_dt)
    return first if body is None else ad.concat(first, body, 0)


def residual_r2(fields: FieldSeries, config: ResidualConfig):
    """Flux part on interior nodes, same row layout as ``residual_r1``.

    Row j holds the stencil of f(u(t)) at the later time of pair j, so the
    anchored layout uses every saturation row t_1..t_T and the truncated
    one drops t_1.
    """
    grid = config.grid
    n_int = grid.n_x - 2
    rows = grid.n_t - 1
    start = 0 if config.include_first_step else 1
    f = flux_on_tape(ad.narrow(fields.u, 0, start, rows - start), fields.m_value)
    if config.r2_mode == "central":
        return ad.mul(ad.sub(ad.narrow(f, 1, 2, n_int), ad.narrow(f, 1, 0, n_int)), 0.5 / grid.dx)
    return ad.mul(ad.sub(ad.narrow(f, 1, 1, n_int), ad.narrow(f, 1, 0, n_int)), 1.0 / grid.dx)


def loss_for_m(fields: FieldSeries, config: ResidualConfig):
    """Squared Frobenius norm of R1 + R2 for one mobility ratio."""
    return ad.frobenius_sq(ad.add(residual_r1(fields, config), residual_r2(fields, config)))


def loss(net: Piann, config: ResidualConfig, m_list) -> Tensor:
    """Total loss as one taped scalar (single tape across the mobility list)."""
    total = None
    for m_value in m_list:
        term = loss_for_m(FieldSeries.from_network(net, config, m_value), config)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("mobility list is empty")
    return total


def worker_count() -> int:
    """Worker cap from PIANN_THREADS (default 1)."""
    raw = os.environ.get("PIANN_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"PIANN_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"PIANN_THREADS must be at least 1, got {n}")
    return n


def loss_and_grads(
    net: Piann,
    config: ResidualConfig,
    m_list,
    workers: int | None = None,
) -> tuple[float, dict[str, np.ndarray], list[float]]:
    """Loss and parameter gradients, one tape per mobility ratio.

    Per fixed summation order the result is independent of the worker
    count: partial results are collected per index and reduced in
    ``m_list`` order.
    """
    m_list = list(m_list)
    if not m_list:
        raise ValueError("mobility list is empty")
    if workers is None:
        workers = worker_count()
    names = net.registry.names()
    tensors = net.registry.tensors()

    def one(m_value: float) -> tuple[float, list[np.ndarray]]:
        with ad.Tape() as tape:
            term = loss_for_m(FieldSeries.from_network(net, config, m_value), config)
            grads = tape.gradient(term, tensors)
        return float(term.value), grads

    if workers <= 1 or len(m_list) == 1:
        results = [one(m) for m in m_list]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, m_list))

    per_m = [r[0] for r in results]
    total = 0.0
    for v in per_m:
        total += v
    grad_sums = [g.copy() for g in results[0][1]]
    for _, grads in results[1:]:
        for acc, g in zip(grad_sums, grads):
            acc += g
    return total, dict(zip(names, grad_sums)), per_m
