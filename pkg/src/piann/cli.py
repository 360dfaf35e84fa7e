"""Command-line driver for solves, training, evaluation, and studies.

All subcommands share one flat configuration namespace.  Values resolve in
a fixed order: built-in defaults, then ``key = value`` lines from the file
named by ``--config``, then flags, which mirror the file keys one to one.
The fully resolved configuration is echoed to stdout before any work
starts, in a form that is itself a valid config file, so every artifact
records exactly how it was produced.

Exit codes are a stable contract for scripting: 0 success, 1 usage error,
2 I/O error (unreadable or unwritable files, malformed checkpoints),
3 numerical abort (training diverged).
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from piann import physics, report
from piann.grid import GridSpec
from piann.model import Piann, PiannConfig
from piann.residual import ResidualConfig
from piann.training import TrainingDiverged, net_from_checkpoint, train


class UsageError(Exception):
    """Bad flags, bad config values, or an inconsistent combination."""


class IoError(Exception):
    """Missing, unreadable, or malformed input file; unwritable output."""


class _Parser(argparse.ArgumentParser):
    # argparse wants to sys.exit(2) on bad flags; route that to exit code 1
    def error(self, message: str):
        raise UsageError(message)


# --------------------------------------------------------------- key table
#
# One row per configuration key: value kind, default, help line.  Each
# subcommand picks an ordered subset; the same key means the same thing
# everywhere.  Defaults reproduce the desk-scale training run.

_KEYS: dict[str, tuple[str, object, str]] = {
    "x-min": ("float", 0.0, "left edge of the spatial domain"),
    "x-max": ("float", 1.0, "right edge of the spatial domain"),
    "dx": ("float", 0.01, "spatial node spacing"),
    "t-min": ("float", 0.0, "first time level"),
    "t-max": ("float", 0.5, "last time level"),
    "dt": ("float", 0.01, "time node spacing"),
    "m": ("float", 2.0, "mobility ratio for single-M commands"),
    "m-list": ("str", "2,10,50", "training mobility ratios, comma separated"),
    "m-range": ("str", "", "training mobility ratios as start:step:end, inclusive"),
    "hidden-dim": ("int", 32, "GRU state width"),
    "attention-dim": ("int", 32, "attention scorer width"),
    "scorer": ("str", "additive", "attention scorer kind"),
    "r1-mode": ("str", "finite_difference", "time-derivative residual mode"),
    "r2-mode": ("str", "central", "flux-divergence stencil"),
    "include-first-step": ("bool", True, "anchor the residual at the known initial profile"),
    "epochs": ("int", 200, "training passes over the grid to reach in total"),
    "learning-rate": ("float", 1e-3, "Adam step size"),
    "time-window": (
        "str",
        "1",
        "time pairs per optimizer step: a width, 0 for full batch, or width:epochs stages",
    ),
    "seed": ("int", 0, "parameter initialization seed"),
    "resume": ("bool", False, "continue from the checkpoint instead of reinitializing"),
    "checkpoint-every": ("int", 0, "save every k epochs (0: only at the end)"),
    "checkpoint": ("str", "piann.ckpt", "checkpoint path to write or read"),
    "checkpoint-a": ("str", "", "first checkpoint to compare"),
    "checkpoint-b": ("str", "", "second checkpoint to compare"),
    "t": ("float", 0.2, "time level for the attention map"),
    "times": ("str", "0.04,0.2,0.4", "report times, comma separated"),
    "band-cells": ("float", 5.0, "half-width of the excluded shock band, in cells"),
    "cfl": ("float", 0.9, "CFL number for the finite-volume solver"),
    "resolutions": ("str", "0.01:0.01,0.005:0.005", "dx:dt pairs, comma separated"),
    "out": ("str", "", "primary CSV output path"),
    "svg-out": ("str", "", "chart output path"),
    "entropy-out": ("str", "entropy.csv", "attention entropy CSV path"),
    "log-out": ("str", "training_log.csv", "per-epoch loss CSV path"),
}

_GRID_KEYS = ("x-min", "x-max", "dx", "t-min", "t-max", "dt")
_MODEL_KEYS = ("hidden-dim", "attention-dim", "scorer")
_RESIDUAL_KEYS = ("r1-mode", "r2-mode", "include-first-step")
_PROTOCOL_KEYS = ("m-list", "m-range", "epochs", "learning-rate", "time-window", "seed")

_COMMANDS: dict[str, tuple[str, ...]] = {
    "analytic": _GRID_KEYS + ("m", "out"),
    "train": _GRID_KEYS
    + _MODEL_KEYS
    + _RESIDUAL_KEYS
    + _PROTOCOL_KEYS
    + ("resume", "checkpoint-every", "checkpoint", "log-out"),
    "eval": ("checkpoint", "m", "times", "band-cells", "out", "svg-out"),
    "attention": ("checkpoint", "m", "t", "out", "entropy-out", "svg-out"),
    "fv": _GRID_KEYS + ("m", "cfl", "out"),
    "compare": ("checkpoint-a", "checkpoint-b", "m", "times", "out", "svg-out"),
    "resolution": ("x-max", "t-max")
    + _MODEL_KEYS
    + _RESIDUAL_KEYS
    + _PROTOCOL_KEYS
    + ("m", "resolutions", "out"),
}

_DEFAULT_OUT = {
    "analytic": "analytic.csv",
    "train": "",
    "eval": "profiles.csv",
    "attention": "attention.csv",
    "fv": "fv.csv",
    "compare": "comparison.csv",
    "resolution": "resolution.csv",
}

_DEFAULT_SVG = {"eval": "profiles.svg", "attention": "attention.svg", "compare": "comparison.svg"}


def _coerce(key: str, raw: str):
    kind = _KEYS[key][0]
    raw = raw.strip()
    try:
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        if kind == "int":
            return int(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError
        return raw
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments allowed."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config file: {exc}") from None
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key not in _KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = raw.strip()
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="piann", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    briefs = {
        "analytic": "write the exact solution on a grid to CSV",
        "train": "fit a model to the PDE residual and checkpoint it",
        "eval": "compare a checkpoint against the exact solution",
        "attention": "dump a checkpoint's attention map at one (t, M)",
        "fv": "run the finite-volume reference solver",
        "compare": "L-infinity distance between two checkpoints' predictions",
        "resolution": "train at several resolutions and report residuals",
    }
    for command, keys in _COMMANDS.items():
        p = sub.add_parser(command, help=briefs[command])
        p.add_argument("--config", default=None, help="flat key = value file applied before flags")
        for key in keys:
            kind, default, help_text = _KEYS[key]
            if key == "out":
                default = _DEFAULT_OUT[command]
            if key == "svg-out":
                default = _DEFAULT_SVG[command]
            metavar = {"float": "X", "int": "N", "bool": "true|false", "str": "VALUE"}[kind]
            p.add_argument(
                f"--{key}",
                default=None,
                metavar=metavar,
                help=f"{help_text} (default {_format(default)})",
            )
    return parser


class RunConfig:
    """Resolved values for one subcommand, with knowledge of what was set."""

    def __init__(self, command: str, values: dict[str, object], explicit: set[str]):
        self.command = command
        self.values = values
        self.explicit = explicit

    def __getitem__(self, key: str):
        return self.values[key]

    def echo(self) -> None:
        print(f"# piann {self.command}")
        for key, value in self.values.items():
            print(f"{key} = {_format(value)}")
        print()


def resolve_config(command: str, file_values: dict[str, str], flag_values: dict[str, str]) -> RunConfig:
    keys = _COMMANDS[command]
    values: dict[str, object] = {}
    explicit: set[str] = set()
    for key in keys:
        kind, default, _ = _KEYS[key]
        if key == "out":
            default = _DEFAULT_OUT[command]
        if key == "svg-out":
            default = _DEFAULT_SVG[command]
        raw = None
        if key in file_values:
            raw = file_values[key]
        if flag_values.get(key) is not None:
            raw = flag_values[key]
        if raw is None:
            values[key] = default
        else:
            values[key] = _coerce(key, raw)
            explicit.add(key)
    if "m-range" in values:
        # normalize to m-list so the echoed config round-trips unambiguously
        if "m-range" in explicit:
            if "m-list" in explicit:
                raise UsageError("m-list and m-range are mutually exclusive")
            expanded = parse_m_range(str(values["m-range"]))
            values["m-list"] = ",".join(_format(v) for v in expanded)
        del values["m-range"]
    if "time-window" in values:
        # validate early and echo in canonical form
        window = parse_time_window(str(values["time-window"]))
        if isinstance(window, int):
            values["time-window"] = str(window)
        else:
            values["time-window"] = ",".join(f"{w}:{e}" for w, e in window)
    return RunConfig(command, values, explicit)


# ----------------------------------------------------------- value parsing


def _positive(cfg: RunConfig, key: str) -> float:
    value = float(cfg[key])
    if value <= 0.0:
        raise UsageError(f"{key} must be positive, got {value:g}")
    return value


def _parse_floats(raw: str, key: str) -> list[float]:
    tokens = [tok.strip() for tok in raw.split(",") if tok.strip()]
    if not tokens:
        raise UsageError(f"{key}: expected at least one value, got {raw!r}")
    try:
        return [float(tok) for tok in tokens]
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r}") from None


def parse_m_range(raw: str) -> list[float]:
    parts = raw.split(":")
    if len(parts) != 3:
        raise UsageError(f"m-range: expected start:step:end, got {raw!r}")
    try:
        start, step, end = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"m-range: cannot parse {raw!r}") from None
    if step <= 0.0 or end < start:
        raise UsageError(f"m-range: need step > 0 and end >= start, got {raw!r}")
    count = int(math.floor((end - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(count)]


def _m_values(cfg: RunConfig) -> list[float]:
    values = _parse_floats(str(cfg["m-list"]), "m-list")
    for m in values:
        if m <= 0.0:
            raise UsageError(f"mobility ratios must be positive, got {m:g}")
    return values


def parse_time_window(raw: str) -> int | tuple[tuple[int, int], ...]:
    text = raw.strip()
    try:
        return int(text)
    except ValueError:
        pass
    stages = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        parts = tok.split(":")
        if len(parts) != 2:
            raise UsageError(f"time-window: expected width or width:epochs stages, got {tok!r}")
        try:
            width, count = int(parts[0]), int(parts[1])
        except ValueError:
            raise UsageError(f"time-window: cannot parse {tok!r}") from None
        if width < 1 or count < 1:
            raise UsageError(f"time-window: stages need width >= 1 and epochs >= 1, got {tok!r}")
        stages.append((width, count))
    if not stages:
        raise UsageError(f"time-window: expected width or width:epochs stages, got {raw!r}")
    return tuple(stages)


def _parse_resolutions(raw: str) -> list[tuple[float, float]]:
    pairs = []
    for tok in raw.split(","):
        tok = tok.strip()
        if not tok:
            continue
        parts = tok.split(":")
        if len(parts) != 2:
            raise UsageError(f"resolutions: expected dx:dt, got {tok!r}")
        try:
            dx, dt = float(parts[0]), float(parts[1])
        except ValueError:
            raise UsageError(f"resolutions: cannot parse {tok!r}") from None
        if dx <= 0.0 or dt <= 0.0:
            raise UsageError(f"resolutions: steps must be positive, got {tok!r}")
        pairs.append((dx, dt))
    if not pairs:
        raise UsageError("resolutions: expected at least one dx:dt pair")
    return pairs


def _grid(cfg: RunConfig) -> GridSpec:
    return GridSpec.from_steps(
        float(cfg["x-max"]),
        float(cfg["dx"]),
        float(cfg["t-max"]),
        float(cfg["dt"]),
        x_min=float(cfg["x-min"]),
        t_min=float(cfg["t-min"]),
    )


def _origin_grid(cfg: RunConfig) -> GridSpec:
    # the network hard-codes u(0, x) and u(t, 0), so its lattice starts at 0
    if float(cfg["x-min"]) != 0.0 or float(cfg["t-min"]) != 0.0:
        raise UsageError("training assumes the domain starts at x = 0, t = 0")
    return _grid(cfg)


def _load_net(path: str) -> Piann:
    if not path:
        raise UsageError("a checkpoint path is required")
    try:
        net, _ = net_from_checkpoint(path)
    except OSError as exc:
        raise IoError(f"cannot read checkpoint: {exc}") from None
    except ValueError as exc:
        raise IoError(str(exc)) from None
    return net


# ------------------------------------------------------------- subcommands


def cmd_analytic(cfg: RunConfig) -> None:
    m_value = _positive(cfg, "m")
    grid = _grid(cfg)
    out = str(cfg["out"])
    report.write_analytic_csv(out, grid, m_value)
    print(f"wrote {out} ({grid.n_t * grid.n_x} rows)")


def cmd_train(cfg: RunConfig) -> None:
    grid = _origin_grid(cfg)
    m_list = _m_values(cfg)
    net = Piann(
        PiannConfig(
            n_x=grid.n_x,
            hidden_dim=int(cfg["hidden-dim"]),
            attention_dim=int(cfg["attention-dim"]),
            scorer=str(cfg["scorer"]),
            x_max=float(cfg["x-max"]),
        )
    )
    rcfg = ResidualConfig(
        grid,
        r1_mode=str(cfg["r1-mode"]),
        r2_mode=str(cfg["r2-mode"]),
        include_first_step=bool(cfg["include-first-step"]),
    )
    resume = bool(cfg["resume"])
    log = train(
        net,
        rcfg,
        m_list,
        epochs=int(cfg["epochs"]),
        learning_rate=_positive(cfg, "learning-rate"),
        time_window=parse_time_window(str(cfg["time-window"])),
        seed=None if resume else int(cfg["seed"]),
        checkpoint_path=str(cfg["checkpoint"]),
        checkpoint_every=int(cfg["checkpoint-every"]),
        resume=resume,
        on_epoch=lambda s: print(f"epoch={s.epoch} loss={s.loss!r}"),
    )
    report.write_log_csv(str(cfg["log-out"]), log)
    print(f"final loss {log.final_loss!r}")
    print(f"wrote {cfg['checkpoint']} and {cfg['log-out']}")


def cmd_eval(cfg: RunConfig) -> None:
    net = _load_net(str(cfg["checkpoint"]))
    m_value = _positive(cfg, "m")
    times = _parse_floats(str(cfg["times"]), "times")
    eval_report, u_rows = report.evaluate(net, m_value, times, float(cfg["band-cells"]))
    x = net.config.x_nodes
    out, svg_out = str(cfg["out"]), str(cfg["svg-out"])
    report.write_profiles_csv(out, x, u_rows, m_value, times)
    series: dict[str, np.ndarray] = {}
    for t, u_pred in zip(times, u_rows):
        series[f"t={t:g} model"] = u_pred
        series[f"t={t:g} exact"] = physics.analytic_profile(x, t, m_value)
    report.svg_line_chart(svg_out, x, series, f"saturation profiles, M={m_value:g}")
    for row in eval_report.rows:
        print(
            f"t={row.t:g} l2={row.l2!r} linf={row.linf!r}"
            f" l2_outside_band={row.l2_outside_band!r}"
            f" linf_outside_band={row.linf_outside_band!r}"
            f" shock_pred={row.shock_x_pred!r} shock_true={row.shock_x_true!r}"
            f" shock_error_cells={row.shock_error_cells!r}"
        )
    print(f"wrote {out} and {svg_out}")


def cmd_attention(cfg: RunConfig) -> None:
    net = _load_net(str(cfg["checkpoint"]))
    m_value = _positive(cfg, "m")
    t = float(cfg["t"])
    alpha, entropy = report.attention_map(net, m_value, t)
    out, entropy_out, svg_out = str(cfg["out"]), str(cfg["entropy-out"]), str(cfg["svg-out"])
    report.write_attention_csv(out, alpha)
    report.write_entropy_csv(entropy_out, entropy)
    report.svg_heatmap(svg_out, alpha, f"attention map, M={m_value:g}, t={t:g}")
    uniform = math.log(alpha.shape[1])
    print(f"mean entropy {float(entropy.mean())!r} (uniform rows would give {uniform!r})")
    print(f"wrote {out}, {entropy_out}, and {svg_out}")


def cmd_fv(cfg: RunConfig) -> None:
    m_value = _positive(cfg, "m")
    grid = _grid(cfg)
    field, substeps = physics.solve_upwind_fv(grid, m_value, cfl=_positive(cfg, "cfl"))
    out = str(cfg["out"])
    report.write_profiles_csv(out, grid.x, field.u, m_value, grid.t)
    t_final = float(grid.t[-1])
    u_star = physics.shock_saturation(m_value)
    shock_fv = report.shock_location(grid.x, field.u[-1], u_star)
    shock_exact = physics.shock_speed(m_value) * t_final
    diff = np.abs(field.u[-1] - physics.analytic_profile(grid.x, t_final, m_value))
    l1 = float(grid.dx * diff.sum())
    print(
        f"t={t_final:g} shock_fv={shock_fv!r} shock_exact={shock_exact!r}"
        f" l1_error={l1!r} substeps={substeps}"
    )
    print(f"wrote {out}")


def cmd_compare(cfg: RunConfig) -> None:
    net_a = _load_net(str(cfg["checkpoint-a"]))
    net_b = _load_net(str(cfg["checkpoint-b"]))
    m_value = _positive(cfg, "m")
    times = _parse_floats(str(cfg["times"]), "times")
    comparison, rows_a, rows_b = report.compare_predictions(net_a, net_b, m_value, times)
    x = net_a.config.x_nodes
    out, svg_out = str(cfg["out"]), str(cfg["svg-out"])
    report.write_comparison_csv(out, x, rows_a, rows_b, m_value, times)
    series: dict[str, np.ndarray] = {}
    for t, ua, ub in zip(times, rows_a, rows_b):
        series[f"t={t:g} a"] = ua
        series[f"t={t:g} b"] = ub
        series[f"t={t:g} exact"] = physics.analytic_profile(x, t, m_value)
    report.svg_line_chart(svg_out, x, series, f"scheme comparison, M={m_value:g}")
    print(f"linf_between={comparison.linf_between!r}")
    print(f"wrote {out} and {svg_out}")


def cmd_resolution(cfg: RunConfig) -> None:
    m_value = _positive(cfg, "m")
    protocol = report.TrainingProtocol(
        m_list=tuple(_m_values(cfg)),
        epochs=int(cfg["epochs"]),
        learning_rate=_positive(cfg, "learning-rate"),
        time_window=parse_time_window(str(cfg["time-window"])),
        seed=int(cfg["seed"]),
        hidden_dim=int(cfg["hidden-dim"]),
        attention_dim=int(cfg["attention-dim"]),
        scorer=str(cfg["scorer"]),
        r1_mode=str(cfg["r1-mode"]),
        r2_mode=str(cfg["r2-mode"]),
        include_first_step=bool(cfg["include-first-step"]),
        x_max=float(cfg["x-max"]),
        t_max=float(cfg["t-max"]),
    )
    resolutions = _parse_resolutions(str(cfg["resolutions"]))
    rows = report.resolution_study(protocol, resolutions, m_value)
    out = str(cfg["out"])
    report.write_resolution_csv(out, rows)
    for row in rows:
        print(f"dx={row.dx:g} dt={row.dt:g} residual={row.residual!r}")
    print(f"wrote {out}")


_DISPATCH = {
    "analytic": cmd_analytic,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "fv": cmd_fv,
    "compare": cmd_compare,
    "resolution": cmd_resolution,
}


def _run(argv: Sequence[str]) -> None:
    parser = _build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config")
    file_values = read_config_file(config_path) if config_path else {}
    flag_values = {key.replace("_", "-"): value for key, value in args.items()}
    cfg = resolve_config(command, file_values, flag_values)
    cfg.echo()
    try:
        _DISPATCH[command](cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise IoError(str(exc)) from None


def main(argv: Sequence[str] | None = None) -> int:
    try:
        _run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
