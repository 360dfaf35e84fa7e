"""Evaluation against the exact solution, studies, and CSV/SVG artifacts.

Error metrics are reported twice per profile: over the whole row and with a
band of ``band_cells`` grid cells around the moving front excluded.  The
front is where a trained network is allowed to smear the jump, so hiding it
inside one aggregate number would hide exactly the interesting failure
mode.  The predicted front location is read off the profile as the node of
steepest descent.

CSV is the normative artifact format; SVG charts are a convenience for
eyeballing runs.  All floats pass through ``repr`` (Python's shortest
round-trip form), so parsing a file back yields bit-identical values.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from piann import physics
from piann.grid import GridSpec
from piann.model import Piann, PiannConfig
from piann.residual import ResidualConfig, loss
from piann.training import TrainLog, train


# ---------------------------------------------------------------- metrics


def shock_location(x: np.ndarray, u: np.ndarray, u_star: float | None = None) -> float:
    """Node of steepest descent: x[i] maximizing |u[i+1] - u[i-1]|.

    Ties resolve to the smallest index.  When ``u_star`` is given, candidate
    windows are restricted to those whose downstream node has dropped to the
    post-front level (u[i+1] <= u_star).  Without that restriction the
    estimator latches onto the inlet rarefaction for large M, where the fan
    is steeper across two cells than the front jump itself (the jump height
    shrinks like 1/sqrt(1+M)).  If no window qualifies, the unrestricted
    argmax is returned so the estimate is always finite.
    """
    if len(x) < 3:
        raise ValueError("need at least three nodes to locate a front")
    drops = np.abs(u[2:] - u[:-2])
    if u_star is not None:
        reaches_dry = u[2:] <= u_star
        if reaches_dry.any():
            drops = np.where(reaches_dry, drops, -np.inf)
    return float(x[1 + int(np.argmax(drops))])


def entropy_rows(alpha: np.ndarray) -> np.ndarray:
    """Shannon entropy -sum(a ln a) per row; 0 ln 0 reads as 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(alpha > 0.0, alpha * np.log(alpha), 0.0)
    return -terms.sum(axis=1)


@dataclass(frozen=True)
class ProfileError:
    m_value: float
    t: float
    l2: float
    linf: float
    l2_outside_band: float
    linf_outside_band: float
    shock_x_pred: float
    shock_x_true: float  # s*t, may lie past the outlet
    shock_error_cells: float  # nan when the true front has left the domain
    shock_in_domain: bool


@dataclass(frozen=True)
class EvalReport:
    m_value: float
    band_cells: float
    dx: float
    rows: tuple[ProfileError, ...]


def _l2(x: np.ndarray, diff: np.ndarray) -> float:
    dx = x[1] - x[0]
    return float(np.sqrt(dx * np.sum(diff * diff)))


def evaluate_profiles(
    x: np.ndarray,
    u_rows: np.ndarray,
    m_value: float,
    times: Sequence[float],
    band_cells: float = 5.0,
) -> EvalReport:
    """Error report for precomputed profile rows (one per time)."""
    dx = float(x[1] - x[0])
    speed = physics.shock_speed(m_value)
    u_star = physics.shock_saturation(m_value)
    rows = []
    for t, u_pred in zip(times, u_rows):
        u_exact = physics.analytic_profile(x, t, m_value)
        diff = u_pred - u_exact
        front = speed * t
        outside = np.abs(x - front) > band_cells * dx
        in_domain = front <= x[-1]
        pred_front = shock_location(x, u_pred, u_star)
        rows.append(
            ProfileError(
                m_value=m_value,
                t=float(t),
                l2=_l2(x, diff),
                linf=float(np.abs(diff).max()),
                l2_outside_band=_l2(x, diff[outside]) if outside.any() else 0.0,
                linf_outside_band=float(np.abs(diff[outside]).max()) if outside.any() else 0.0,
                shock_x_pred=pred_front,
                shock_x_true=front,
                shock_error_cells=abs(pred_front - front) / dx if in_domain else float("nan"),
                shock_in_domain=in_domain,
            )
        )
    return EvalReport(m_value=m_value, band_cells=band_cells, dx=dx, rows=tuple(rows))


def evaluate(
    net: Piann,
    m_value: float,
    times: Sequence[float],
    band_cells: float = 5.0,
) -> tuple[EvalReport, np.ndarray]:
    """Evaluate a network at the given times; also returns the profile rows."""
    x = net.config.x_nodes
    u_rows = np.stack([net.forward(t, m_value).u for t in times])
    return evaluate_profiles(x, u_rows, m_value, times, band_cells), u_rows


def attention_map(net: Piann, m_value: float, t: float) -> tuple[np.ndarray, np.ndarray]:
    """The [N x N] attention matrix at (t, M) and its per-row entropy."""
    if t <= 0.0:
        raise ValueError(f"attention is only defined for t > 0, got {t}")
    out = net.forward(t, m_value, want_attention=True)
    return out.attention, entropy_rows(out.attention)


# ------------------------------------------------------- training protocol


@dataclass(frozen=True)
class TrainingProtocol:
    """Everything that defines a training run except the grid resolution."""

    m_list: tuple[float, ...] = (2.0, 10.0, 50.0)
    epochs: int = 200
    learning_rate: float = 1e-3
    time_window: int | tuple[tuple[int, int], ...] = 1
    seed: int = 0
    hidden_dim: int = 32
    attention_dim: int = 32
    scorer: str = "additive"
    r1_mode: str = "finite_difference"
    r2_mode: str = "central"
    include_first_step: bool = True
    x_max: float = 1.0
    t_max: float = 0.5

    def grid(self, dx: float, dt: float) -> GridSpec:
        return GridSpec.from_steps(self.x_max, dx, self.t_max, dt)

    def residual_config(self, grid: GridSpec) -> ResidualConfig:
        return ResidualConfig(
            grid,
            r1_mode=self.r1_mode,
            r2_mode=self.r2_mode,
            include_first_step=self.include_first_step,
        )

    def network(self, grid: GridSpec) -> Piann:
        return Piann(
            PiannConfig(
                n_x=grid.n_x,
                hidden_dim=self.hidden_dim,
                attention_dim=self.attention_dim,
                scorer=self.scorer,
                x_max=self.x_max,
            )
        )


def train_protocol(
    protocol: TrainingProtocol,
    dx: float,
    dt: float,
    workers: int | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    on_epoch=None,
) -> tuple[Piann, TrainLog, ResidualConfig]:
    grid = protocol.grid(dx, dt)
    net = protocol.network(grid)
    rcfg = protocol.residual_config(grid)
    log = train(
        net,
        rcfg,
        protocol.m_list,
        epochs=protocol.epochs,
        learning_rate=protocol.learning_rate,
        time_window=protocol.time_window,
        seed=protocol.seed,
        workers=workers,
        checkpoint_path=checkpoint_path,
        checkpoint_every=checkpoint_every,
        on_epoch=on_epoch,
    )
    return net, log, rcfg


@dataclass(frozen=True)
class ResolutionRow:
    dx: float
    dt: float
    residual: float


def resolution_study(
    protocol: TrainingProtocol,
    resolutions: Sequence[tuple[float, float]],
    m_value: float,
    workers: int | None = None,
    on_epoch=None,
) -> list[ResolutionRow]:
    """Train the same protocol at several resolutions, report the residual at M.

    ``resolutions`` is a coarse-to-fine list of (dx, dt) pairs; the reported
    number is the squared residual of the trained network at ``m_value`` on
    that resolution's own grid, as a mean per collocation point so grids
    with different entry counts stay comparable.
    """
    rows = []
    for dx, dt in resolutions:
        net, _, rcfg = train_protocol(protocol, dx, dt, workers=workers, on_epoch=on_epoch)
        grid = rcfg.grid
        residual_rows = grid.n_t - 1 if rcfg.include_first_step else grid.n_t - 2
        entries = residual_rows * (grid.n_x - 2)
        residual = float(loss(net, rcfg, [m_value]).value) / entries
        rows.append(ResolutionRow(dx=dx, dt=dt, residual=residual))
    return rows


@dataclass(frozen=True)
class SchemeComparison:
    m_value: float
    times: tuple[float, ...]
    linf_between: float  # max over times and nodes of |u_a - u_b|


def compare_predictions(
    net_a: Piann,
    net_b: Piann,
    m_value: float,
    times: Sequence[float],
) -> tuple[SchemeComparison, np.ndarray, np.ndarray]:
    """L-infinity distance between two models' predictions on shared times."""
    if net_a.config.n_x != net_b.config.n_x:
        raise ValueError("models discretize x differently; nothing to compare")
    rows_a = np.stack([net_a.forward(t, m_value).u for t in times])
    rows_b = np.stack([net_b.forward(t, m_value).u for t in times])
    comparison = SchemeComparison(
        m_value=m_value,
        times=tuple(float(t) for t in times),
        linf_between=float(np.abs(rows_a - rows_b).max()),
    )
    return comparison, rows_a, rows_b


# ------------------------------------------------------------ CSV artifacts


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def _cell(v) -> str:
    return repr(float(v))


def profile_rows(
    x: np.ndarray,
    u_rows: np.ndarray,
    m_value: float,
    times: Sequence[float],
) -> list[tuple[str, str, str, str, str]]:
    """``M,t,x,u_pred,u_exact`` rows, one per node per time."""
    rows = []
    for t, u_pred in zip(times, u_rows):
        u_exact = physics.analytic_profile(x, t, m_value)
        for xi, up, ue in zip(x, u_pred, u_exact):
            rows.append((_cell(m_value), _cell(t), _cell(xi), _cell(up), _cell(ue)))
    return rows


def write_profiles_csv(path, x, u_rows, m_value, times) -> None:
    write_csv(path, ["M", "t", "x", "u_pred", "u_exact"], profile_rows(x, u_rows, m_value, times))


def write_analytic_csv(path, grid: GridSpec, m_value: float) -> None:
    rows = []
    for t in grid.t:
        u = physics.analytic_profile(grid.x, t, m_value)
        for xi, ui in zip(grid.x, u):
            rows.append((_cell(m_value), _cell(t), _cell(xi), _cell(ui)))
    write_csv(path, ["M", "t", "x", "u_exact"], rows)


def write_attention_csv(path, alpha: np.ndarray) -> None:
    """``i,j,alpha`` rows; indices are 1-based interior node numbers."""
    rows = []
    for i in range(alpha.shape[0]):
        for j in range(alpha.shape[1]):
            rows.append((str(i + 1), str(j + 1), _cell(alpha[i, j])))
    write_csv(path, ["i", "j", "alpha"], rows)


def write_entropy_csv(path, entropy: np.ndarray) -> None:
    write_csv(path, ["i", "entropy"], [(str(i + 1), _cell(h)) for i, h in enumerate(entropy)])


def write_log_csv(path, log: TrainLog) -> None:
    rows = [(str(s.epoch), _cell(s.loss), _cell(s.seconds)) for s in log.epochs]
    write_csv(path, ["epoch", "loss", "seconds"], rows)


def write_resolution_csv(path, rows: Sequence[ResolutionRow]) -> None:
    write_csv(
        path,
        ["dx", "dt", "residual"],
        [(_cell(r.dx), _cell(r.dt), _cell(r.residual)) for r in rows],
    )


def write_comparison_csv(path, x, rows_a, rows_b, m_value, times) -> None:
    """``M,t,x,u_central,u_upwind,u_exact`` rows, one per node per time."""
    rows = []
    for t, ua, ub in zip(times, rows_a, rows_b):
        u_exact = physics.analytic_profile(x, t, m_value)
        for xi, a, b, e in zip(x, ua, ub, u_exact):
            rows.append((_cell(m_value), _cell(t), _cell(xi), _cell(a), _cell(b), _cell(e)))
    write_csv(path, ["M", "t", "x", "u_central", "u_upwind", "u_exact"], rows)


# ------------------------------------------------------------ SVG artifacts
#
# Fixed 800x600 viewBox with a 70px margin.  Line charts draw one polyline
# per series from a small color cycle; heatmaps linearly map cell values
# from white (minimum) to dark blue rgb(8,48,107) (maximum).

SVG_W, SVG_H, SVG_MARGIN = 800, 600, 70
SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _svg_open(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_W} {SVG_H}">',
        f'<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<text x="{SVG_W / 2}" y="30" text-anchor="middle" font-size="18">{title}</text>',
    ]


def _scale(values: np.ndarray, lo: float, hi: float, out_lo: float, out_hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return out_lo + (values - lo) * (out_hi - out_lo) / span


def svg_line_chart(
    path: str | Path,
    x: np.ndarray,
    series: dict[str, np.ndarray],
    title: str,
    x_label: str = "x",
    y_label: str = "u",
) -> None:
    x = np.asarray(x, dtype=np.float64)
    ys = [np.asarray(y, dtype=np.float64) for y in series.values()]
    y_lo = min(float(y.min()) for y in ys)
    y_hi = max(float(y.max()) for y in ys)
    left, right = SVG_MARGIN, SVG_W - SVG_MARGIN
    top, bottom = SVG_MARGIN, SVG_H - SVG_MARGIN
    parts = _svg_open(title)
    parts.append(
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
        f'fill="none" stroke="black"/>'
    )
    colors = itertools.cycle(SERIES_COLORS)
    for (label, y), color in zip(series.items(), colors):
        px = _scale(x, float(x.min()), float(x.max()), left, right)
        py = _scale(np.asarray(y, dtype=np.float64), y_lo, y_hi, bottom, top)
        points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    legend_y = top + 10
    for (label, _), color in zip(series.items(), itertools.cycle(SERIES_COLORS)):
        parts.append(
            f'<rect x="{right - 150}" y="{legend_y}" width="12" height="12" fill="{color}"/>'
            f'<text x="{right - 132}" y="{legend_y + 11}" font-size="13">{label}</text>'
        )
        legend_y += 18
    parts.append(
        f'<text x="{(left + right) / 2}" y="{SVG_H - 20}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>'
    )
    parts.append(
        f'<text x="20" y="{(top + bottom) / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {(top + bottom) / 2})">{y_label}</text>'
    )
    for frac in (0.0, 0.5, 1.0):
        vx = float(x.min()) + frac * (float(x.max()) - float(x.min()))
        vy = y_lo + frac * (y_hi - y_lo)
        parts.append(
            f'<text x="{left + frac * (right - left):.1f}" y="{bottom + 20}" '
            f'text-anchor="middle" font-size="12">{vx:.3g}</text>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{bottom - frac * (bottom - top):.1f}" '
            f'text-anchor="end" font-size="12">{vy:.3g}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _heat_color(v: float) -> str:
    # white at 0 to dark blue at 1
    r = round(255 + (8 - 255) * v)
    g = round(255 + (48 - 255) * v)
    b = round(255 + (107 - 255) * v)
    return f"rgb({r},{g},{b})"


def svg_heatmap(path: str | Path, matrix: np.ndarray, title: str) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    n_rows, n_cols = matrix.shape
    lo, hi = float(matrix.min()), float(matrix.max())
    span = hi - lo if hi > lo else 1.0
    left, right = SVG_MARGIN, SVG_W - SVG_MARGIN
    top, bottom = SVG_MARGIN, SVG_H - SVG_MARGIN
    cw = (right - left) / n_cols
    ch = (bottom - top) / n_rows
    parts = _svg_open(title)
    for i in range(n_rows):
        for j in range(n_cols):
            v = (matrix[i, j] - lo) / span
            parts.append(
                f'<rect x="{left + j * cw:.2f}" y="{top + i * ch:.2f}" '
                f'width="{cw + 0.5:.2f}" height="{ch + 0.5:.2f}" fill="{_heat_color(v)}"/>'
            )
    parts.append(
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
        f'fill="none" stroke="black"/>'
    )
    parts.append(
        f'<text x="{(left + right) / 2}" y="{SVG_H - 20}" text-anchor="middle" '
        f'font-size="14">encoder position j</text>'
    )
    parts.append(
        f'<text x="20" y="{(top + bottom) / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {(top + bottom) / 2})">decoder step i</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
