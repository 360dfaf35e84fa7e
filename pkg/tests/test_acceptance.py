"""End-to-end acceptance gates for the whole pipeline.

Each numbered test checks one release gate with pinned tolerances and
records a single pass/fail line; the collected lines are printed in the
pytest terminal summary.  Training-dependent gates share session-scoped
fixtures so the expensive runs happen once.
"""

import dataclasses
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import record_criterion
from gradcheck import fd_gradients, max_rel_err, op_cases
from piann import autodiff as ad
from piann import physics
from piann import report
from piann.grid import GridSpec
from piann.model import Piann, PiannConfig
from piann.report import read_csv, shock_location, write_profiles_csv
from piann.residual import ResidualConfig, loss
from piann.training import net_from_checkpoint, train


def _criterion(number: int, ok: bool, detail: str) -> None:
    record_criterion(number, ok, detail)
    assert ok, f"criterion {number}: {detail}"


def residual_entries(rcfg: ResidualConfig, n_m: int) -> int:
    """Collocation entries in the loss: residual rows times interior nodes."""
    rows = rcfg.grid.n_t - 1 if rcfg.include_first_step else rcfg.grid.n_t - 2
    return rows * (rcfg.grid.n_x - 2) * n_m


def _train_desk(protocol: report.TrainingProtocol) -> SimpleNamespace:
    """Train the desk-scale protocol and report per-point mean losses.

    The gates below are stated per collocation point (the loss sum divided
    by the entry count), the only normalization under which the reference
    residual magnitudes are comparable across grids.
    """
    grid = protocol.grid(0.01, 0.01)
    rcfg = protocol.residual_config(grid)
    probe = protocol.network(grid)
    probe.init(protocol.seed)
    entries = residual_entries(rcfg, len(protocol.m_list))
    init_mean = float(loss(probe, rcfg, list(protocol.m_list)).value) / entries
    started = time.perf_counter()
    net, log, _ = report.train_protocol(protocol, 0.01, 0.01)
    minutes = (time.perf_counter() - started) / 60.0
    return SimpleNamespace(
        protocol=protocol,
        net=net,
        log=log,
        rcfg=rcfg,
        entries=entries,
        init_mean=init_mean,
        final_mean=log.final_loss / entries,
        minutes=minutes,
    )


@pytest.fixture(scope="session")
def desk_run():
    """The shared desk-scale training run (criteria 4, 5, 6, and 7)."""
    return _train_desk(report.TrainingProtocol())


@pytest.fixture(scope="session")
def upwind_run(desk_run):
    """Same protocol with the upwind flux stencil (criterion 7)."""
    return _train_desk(dataclasses.replace(desk_run.protocol, r2_mode="upwind"))


# --------------------------------------------------------------- criterion 1


def test_1_tape_gradients_match_finite_differences(rng):
    started = time.perf_counter()
    worst = 0.0

    probe_rng = np.random.default_rng(99)
    for name, make_inputs, op in op_cases():
        arrays = make_inputs(rng)
        leaves = [ad.leaf(x) for x in arrays]
        with ad.Tape() as tape:
            out = op(leaves)
            if out.value.shape == ():
                probe = None
                objective = out
            else:
                probe = probe_rng.uniform(-1.0, 1.0, size=out.value.shape)
                objective = ad.sum_all(ad.mul(out, ad.constant(probe)))
            tape_grads = tape.gradient(objective, leaves)

        def scalar(xs) -> float:
            result = op([ad.leaf(x) for x in xs])
            if result.value.shape == ():
                return float(result.value)
            return float(np.sum(result.value * probe))

        for got, want in zip(tape_grads, fd_gradients(scalar, arrays)):
            worst = max(worst, max_rel_err(got, want))

    # full model loss on a desk-corner configuration: 5 nodes, 3 time levels
    net = Piann(PiannConfig(n_x=5, hidden_dim=4, attention_dim=4))
    net.init(0)
    grid = GridSpec.from_steps(1.0, 0.25, 0.5, 0.25)
    config = ResidualConfig(grid)
    tensors = net.registry.tensors()
    with ad.Tape() as tape:
        total = loss(net, config, [2.0])
        tape_grads = tape.gradient(total, tensors)

    def full_loss(_arrays) -> float:
        # fd_gradients perturbs the live parameter arrays in place
        return float(loss(net, config, [2.0]).value)

    fd = fd_gradients(full_loss, [t.value for t in tensors])
    for got, want in zip(tape_grads, fd):
        worst = max(worst, max_rel_err(got, want))

    elapsed = time.perf_counter() - started
    _criterion(
        1,
        worst < 1e-5 and elapsed < 10.0,
        f"max rel err {worst:.3e} over {len(op_cases())} ops + full loss"
        f" (tol 1e-5), {elapsed:.1f}s (budget 10s)",
    )


# --------------------------------------------------------------- criterion 2


def test_2_analytic_solution_identities():
    started = time.perf_counter()
    worst_root = 0.0
    for m_value in (0.5, 1.0, 2.0, 4.5, 48.0, 98.0, 500.0):
        u_star = physics.shock_saturation(m_value)
        worst_root = max(worst_root, abs(u_star * np.sqrt(1.0 + m_value) - 1.0))

    # unit inflow flux means the profile holds mass t over any span past the front
    dx = 1e-3
    worst_mass = 0.0
    for m_value in (2.0, 48.0, 98.0):
        speed = physics.shock_speed(m_value)
        for t in (0.04, 0.2, 0.4):
            x_max = max(1.0, np.ceil(1.25 * speed * t / dx) * dx)
            x = np.arange(0.0, x_max + dx / 2, dx)
            u = physics.analytic_profile(x, t, m_value)
            mass = float(np.trapezoid(u, x))
            worst_mass = max(worst_mass, abs(mass - t))

    elapsed = time.perf_counter() - started
    _criterion(
        2,
        worst_root < 1e-10 and worst_mass < 2e-3 and elapsed < 5.0,
        f"shock-saturation identity off by {worst_root:.2e} (tol 1e-10),"
        f" mass defect {worst_mass:.2e} (tol 2e-3), {elapsed:.1f}s (budget 5s)",
    )


# --------------------------------------------------------------- criterion 3


def test_3_finite_volume_convergence():
    started = time.perf_counter()
    m_value, t_final = 2.0, 0.4
    speed = physics.shock_speed(m_value)
    u_star = physics.shock_saturation(m_value)
    errors = []
    shock_ok = True
    details = []
    for dx in (1e-2, 5e-3, 2.5e-3):
        grid = GridSpec.from_steps(1.0, dx, t_final, 0.1)
        field, _ = physics.solve_upwind_fv(grid, m_value)
        u_exact = physics.analytic_profile(grid.x, t_final, m_value)
        l1 = float(dx * np.abs(field.u[-1] - u_exact).sum())
        errors.append(l1)
        shock_err = abs(speed * t_final - shock_location(grid.x, field.u[-1], u_star))
        shock_ok = shock_ok and shock_err <= 2 * dx
        details.append(f"dx={dx:g}: L1={l1:.2e}")
    decreasing = errors[0] > errors[1] > errors[2]
    elapsed = time.perf_counter() - started
    _criterion(
        3,
        decreasing and shock_ok and elapsed < 30.0,
        f"{', '.join(details)}; strictly decreasing={decreasing},"
        f" shock within 2dx at front {speed * t_final:.4f}, {elapsed:.1f}s (budget 30s)",
    )


# --------------------------------------------------------------- criterion 4


def test_4_training_convergence(desk_run):
    reduction = desk_run.init_mean / desk_run.final_mean
    orders = np.log10(reduction) if reduction > 0 else float("-inf")
    _criterion(
        4,
        desk_run.final_mean < 1e-3 and orders >= 2.0 and desk_run.minutes < 30.0,
        f"mean squared residual {desk_run.final_mean:.3e} (gate 1e-3, stretch 1e-4),"
        f" down {orders:.2f} orders from {desk_run.init_mean:.3e},"
        f" {desk_run.minutes:.1f} min (budget 30)",
    )


# --------------------------------------------------------------- criterion 5


def test_5_profiles_outside_the_shock_band(desk_run):
    times = (0.04, 0.2, 0.4)
    worst_linf = 0.0
    worst_cells = 0.0
    skipped = []
    for m_value in (2.0, 50.0):
        eval_report, _ = report.evaluate(desk_run.net, m_value, times, band_cells=5.0)
        for row in eval_report.rows:
            worst_linf = max(worst_linf, row.linf_outside_band)
            if row.shock_in_domain:
                worst_cells = max(worst_cells, row.shock_error_cells)
            else:
                # the true front has left the unit domain; there is no shock
                # position to estimate, but the profile gate still applies
                skipped.append(f"M={row.m_value:g} t={row.t:g}")
    note = f" (front past outlet for {', '.join(skipped)})" if skipped else ""
    _criterion(
        5,
        worst_linf < 0.05 and worst_cells <= 3.0,
        f"L-inf outside 5dx band {worst_linf:.3f} (gate 0.05),"
        f" worst shock error {worst_cells:.2f} cells (gate 3){note}",
    )


# --------------------------------------------------------------- criterion 6


def test_6_interpolated_and_extrapolated_mobility(desk_run):
    times = (0.04, 0.2, 0.4)
    eval_report, _ = report.evaluate(desk_run.net, 4.5, times, band_cells=5.0)
    worst_cells = max(row.shock_error_cells for row in eval_report.rows)
    far_rows = np.stack([desk_run.net.forward(t, 500.0).u for t in times])
    finite = bool(np.isfinite(far_rows).all())
    _criterion(
        6,
        worst_cells <= 4.0 and finite,
        f"untrained M=4.5 shock error {worst_cells:.2f} cells (gate 4),"
        f" M=500 outputs finite={finite} (no accuracy gate)",
    )


# --------------------------------------------------------------- criterion 7


def test_7_central_and_upwind_schemes_agree(desk_run, upwind_run):
    comparison, _, _ = report.compare_predictions(desk_run.net, upwind_run.net, 2.0, [0.2])
    both_converged = desk_run.final_mean < 1e-3 and upwind_run.final_mean < 1e-3
    _criterion(
        7,
        both_converged and comparison.linf_between < 0.1,
        f"mean residual central {desk_run.final_mean:.3e} / upwind"
        f" {upwind_run.final_mean:.3e} (gate 1e-3 each),"
        f" prediction gap at M=2 t=0.2 {comparison.linf_between:.3f} (gate 0.1)",
    )


# --------------------------------------------------------------- criterion 8


def test_8_residual_stable_under_refinement():
    protocol = dataclasses.replace(report.TrainingProtocol(), m_list=(2.0,))
    rows = report.resolution_study(protocol, [(1e-2, 1e-2), (5e-3, 5e-3)], m_value=2.0)
    coarse, fine = rows[0].residual, rows[1].residual
    _criterion(
        8,
        fine <= 1.5 * coarse,
        f"mean squared residual {coarse:.3e} at dx=dt=1e-2 vs {fine:.3e}"
        f" at 5e-3 (gate: fine <= 1.5x coarse)",
    )


# --------------------------------------------------------------- criterion 9


def test_9_determinism_and_persistence(tmp_path):
    grid = GridSpec.from_steps(1.0, 0.125, 0.5, 0.125)
    config = ResidualConfig(grid)

    def run(path: Path) -> Piann:
        net = Piann(PiannConfig(n_x=grid.n_x, hidden_dim=4, attention_dim=4))
        train(net, config, [2.0], epochs=3, seed=11, checkpoint_path=path)
        return net

    net_a = run(tmp_path / "a.ckpt")
    run(tmp_path / "b.ckpt")
    identical = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    loss_direct = float(loss(net_a, config, [2.0]).value)
    restored, _ = net_from_checkpoint(tmp_path / "a.ckpt")
    loss_restored = float(loss(restored, config, [2.0]).value)
    roundtrip_exact = loss_restored == loss_direct

    values = np.array([[0.1, 1.0 / 3.0, 2.0**-40, 0.9999999999999999]])
    csv_path = tmp_path / "roundtrip.csv"
    write_profiles_csv(csv_path, np.linspace(0, 1, 4), values, 2.0, [0.25])
    _, rows = read_csv(csv_path)
    csv_exact = all(float(row[3]) == values[0, i] for i, row in enumerate(rows))

    _criterion(
        9,
        identical and roundtrip_exact and csv_exact,
        f"checkpoints byte-identical={identical},"
        f" loss after reload {loss_restored!r} == {loss_direct!r} is {roundtrip_exact},"
        f" CSV floats lossless={csv_exact}",
    )
