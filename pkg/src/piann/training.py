"""Adam training over residual windows, and binary checkpoints.

An epoch visits every collocation point and every mobility ratio exactly
once; regimes differ only in how many optimizer steps they extract from
that pass.  With ``time_window <= 0`` an epoch is a single full-batch
step: gradients are summed over the whole grid and the mobility list,
then all parameters move at once.  With ``time_window = w > 0`` the
epoch sweeps the time-difference pairs in ascending order in contiguous
spans of w pairs, taking one step per span and mobility ratio.  A
schedule of ``(width, epochs)`` stages widens the spans as training
proceeds: at a fixed step size the loss a sweep settles at is set by the
spread between consecutive step gradients, so widening the spans once
the fast descent is over trades steps the run no longer needs for
variance it can no longer afford.  A width-0 stage takes full-batch
epochs, the zero-spread endpoint of that ladder.  Every stage starts
with zeroed Adam moments and a restarted bias correction: the second
moment carries the gradient scale of the previous stage, which after a
narrow-to-wide switch is far too large and would shrink the effective
step for hundreds of updates.  All regimes are deterministic given the
seed.

The sweep regime exists because the full-batch gradient is dominated by
the time-average of the residual: time and mobility enter the network
only through the encoder's initial hidden state, whose influence on the
outputs is heavily diluted at initialization, so a few hundred
full-batch steps converge to the best time-constant saturation field
and stall there.  Narrow windows make consecutive steps pull toward
different time levels, which breaks the collapse on the same per-epoch
budget; single-pair windows escape that plateau within tens of epochs
where the full-batch loop never leaves it.

Training aborts with ``TrainingDiverged`` the moment a loss or gradient
turns non-finite; the optimizer state is never advanced past a bad step.

Checkpoints are a single little-endian file::

    magic  b"PIANN"
    u16    format version (currently 1)
    u32    manifest length in bytes
    ...    manifest, canonical JSON (sorted keys, no whitespace)
    ...    raw float64 blocks, back to back

The manifest holds the model config, the global step, and one entry per
array: name, shape, and byte offset into the data section.  Arrays cover
the parameters plus the Adam moments under ``opt.m.<name>`` and
``opt.v.<name>``.  Entries are sorted by name and the JSON is canonical,
so two runs that reach the same state write the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from piann import autodiff as ad
from piann.model import Piann, PiannConfig
from piann.residual import (
    FieldSeries,
    ResidualConfig,
    loss,
    loss_and_grads,
    loss_for_m,
    pair_windows,
    window_config,
)

CHECKPOINT_MAGIC = b"PIANN"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, epoch: int, m_value: float | None, detail: str):
        self.epoch = epoch
        self.m_value = m_value
        where = f" at M={m_value:g}" if m_value is not None else ""
        super().__init__(f"training diverged at epoch {epoch}{where}: {detail}")


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def fresh(net: Piann) -> "AdamState":
        zeros = lambda t: np.zeros_like(t.value)
        return AdamState(
            step=0,
            m={name: zeros(t) for name, t in net.registry.items()},
            v={name: zeros(t) for name, t in net.registry.items()},
        )


def adam_step(
    net: Piann,
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step_origin: int = 0,
) -> None:
    """One bias-corrected Adam update, in place.

    ``step_origin`` is the global step count at the last moment reset;
    bias correction runs on steps taken since then.
    """
    state.step += 1
    t = state.step - step_origin
    scale_m = 1.0 / (1.0 - beta1**t)
    scale_v = 1.0 / (1.0 - beta2**t)
    for name, tensor in net.registry.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        tensor.value = tensor.value - learning_rate * (m * scale_m) / (
            np.sqrt(v * scale_v) + eps
        )


def _epoch_plan(time_window, epochs: int) -> list[tuple[int, int]]:
    """Per-epoch (width, stage) pairs; width 0 means a full-batch epoch.

    ``time_window`` is a constant width (or <= 0 for full batch), making
    the whole run one stage, or a schedule of (width, epochs) stages that
    must cover the run exactly so every epoch has one unambiguous layout.
    """
    if isinstance(time_window, int):
        return [(max(time_window, 0), 0)] * epochs
    plan: list[tuple[int, int]] = []
    for stage, (width, count) in enumerate(time_window):
        if width < 0 or count < 1:
            raise ValueError(f"schedule stages need width >= 0 and epochs >= 1, got {(width, count)}")
        plan.extend([(int(width), stage)] * int(count))
    if len(plan) != epochs:
        raise ValueError(f"window schedule covers {len(plan)} epochs, but epochs={epochs}")
    return plan


def _step_checked(net, grads, state, learning_rate, beta1, beta2, eps, epoch, origin) -> None:
    """Adam update guarded on both sides; never advances past a bad step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(epoch, None, f"gradient of {name!r} is not finite")
    adam_step(net, grads, state, learning_rate, beta1, beta2, eps, step_origin=origin)
    for name, tensor in net.registry.items():
        if not np.all(np.isfinite(tensor.value)):
            raise TrainingDiverged(epoch, None, f"parameter {name!r} is not finite")


@dataclass
class EpochStats:
    """Per-epoch record: ``loss`` sums the step losses of the epoch, each
    at the parameters that step saw, so in the full-batch regime it is the
    loss entering the epoch and under window sweeps it is the sweep total,
    comparable epoch to epoch."""

    epoch: int  # 1-based
    loss: float
    per_m: list[float]
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    final_loss: float = float("nan")
    final_per_m: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        if not self.epochs:
            return self.final_loss
        return self.epochs[0].loss


def train(
    net: Piann,
    config: ResidualConfig,
    m_list: Sequence[float],
    *,
    epochs: int,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    time_window: int | Sequence[tuple[int, int]] = 0,
    workers: int | None = None,
    seed: int | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    resume: bool = False,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainLog:
    """Run Adam for ``epochs`` passes over the residual grid.

    ``time_window <= 0`` takes one full-batch step per epoch; a positive
    width sweeps spans of that many time pairs per epoch, one step per
    span and mobility ratio; a schedule of ``(width, epochs)`` stages
    changes the width over the run, resetting the optimizer moments at
    each stage start (see the module docstring).  With
    ``seed`` the parameters are (re)initialized here, making the whole
    run a function of the arguments alone.  With ``resume`` the
    checkpoint at ``checkpoint_path`` is loaded instead and the loop
    continues from its step count, so interrupt plus resume lands on
    exactly the same state as an uninterrupted run.  ``workers`` only
    affects the full-batch regime; window sweeps update parameters
    between tapes, so their steps are inherently serial.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {epochs}")
    if resume and seed is not None:
        raise ValueError("resume and seed are mutually exclusive")
    m_list = list(m_list)
    if not m_list:
        raise ValueError("mobility list is empty")
    plan = _epoch_plan(time_window, epochs)
    spans_for = {w: pair_windows(config, w) for w, _ in set(plan) if w > 0}
    # cumulative optimizer steps at each epoch boundary
    bounds = [0]
    for width, _ in plan:
        bounds.append(bounds[-1] + (len(spans_for[width]) * len(m_list) if width > 0 else 1))
    # moments reset where a new stage begins; bias correction restarts there
    stage_first = {stage: epoch for epoch, (_, stage) in reversed(list(enumerate(plan, 1)))}
    origin_of = {stage: bounds[first - 1] for stage, first in stage_first.items()}
    if seed is not None:
        net.init(seed)
    state = AdamState.fresh(net)
    if resume:
        if checkpoint_path is None:
            raise ValueError("resume requires a checkpoint path")
        ckpt = load_checkpoint(checkpoint_path)
        restore(net, ckpt, state)
        if state.step >= bounds[-1]:
            completed = epochs
        elif state.step in bounds:
            completed = bounds.index(state.step)
        else:
            raise ValueError(
                f"checkpoint step {state.step} does not land on an epoch boundary "
                f"of this window layout; resume with the protocol that wrote it"
            )
    else:
        completed = 0

    log = TrainLog()
    for epoch in range(completed + 1, epochs + 1):
        started = time.perf_counter()
        width, stage = plan[epoch - 1]
        if epoch == stage_first[stage]:
            for name in state.m:
                state.m[name][...] = 0.0
                state.v[name][...] = 0.0
        origin = origin_of[stage]
        if width == 0:
            total, grads, per_m = loss_and_grads(net, config, m_list, workers=workers)
            for m_value, lm in zip(m_list, per_m):
                if not np.isfinite(lm):
                    raise TrainingDiverged(epoch, m_value, f"loss is {lm!r}")
            _step_checked(net, grads, state, learning_rate, beta1, beta2, eps, epoch, origin)
        else:
            per_m = [0.0] * len(m_list)
            tensors = net.registry.tensors()
            names = net.registry.names()
            for a, b in spans_for[width]:
                span = window_config(config, a, b)
                for i, m_value in enumerate(m_list):
                    with ad.Tape() as tape:
                        term = loss_for_m(FieldSeries.from_network(net, span, m_value), span)
                        glist = tape.gradient(term, tensors)
                    value = float(term.value)
                    if not np.isfinite(value):
                        raise TrainingDiverged(epoch, m_value, f"loss is {value!r}")
                    per_m[i] += value
                    grads = dict(zip(names, glist))
                    _step_checked(net, grads, state, learning_rate, beta1, beta2, eps, epoch, origin)
            total = 0.0
            for value in per_m:
                total += value
        stats = EpochStats(epoch, total, per_m, time.perf_counter() - started)
        log.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if checkpoint_path is not None and checkpoint_every > 0 and epoch % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, net, state)

    # summed in m_list order, so this matches loss(net, config, m_list) bitwise
    log.final_per_m = [float(loss(net, config, [m_value]).value) for m_value in m_list]
    log.final_loss = 0.0
    for value in log.final_per_m:
        log.final_loss += value
    if not np.isfinite(log.final_loss):
        raise TrainingDiverged(epochs, None, "final loss is not finite")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, state)
    return log


@dataclass
class Checkpoint:
    step: int
    config: dict
    arrays: dict[str, np.ndarray]

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("opt.")}

    def moments(self, which: str) -> dict[str, np.ndarray]:
        prefix = f"opt.{which}."
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def save_checkpoint(path: str | Path, net: Piann, state: AdamState) -> None:
    arrays: dict[str, np.ndarray] = dict(net.registry.value_dict())
    for name, arr in state.m.items():
        arrays[f"opt.m.{name}"] = arr
    for name, arr in state.v.items():
        arrays[f"opt.v.{name}"] = arr

    entries = []
    blocks = []
    offset = 0
    for name in sorted(arrays):
        block = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        entries.append({"name": name, "offset": offset, "shape": list(arrays[name].shape)})
        blocks.append(block)
        offset += len(block)
    manifest = {
        "config": net.config.to_dict(),
        "entries": entries,
        "step": state.step,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for block in blocks:
            fh.write(block)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 2 + 4
    if len(raw) < head or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (manifest_len,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC) + 2)
    if head + manifest_len > len(raw):
        raise ValueError(f"{path}: truncated manifest")
    manifest = json.loads(raw[head : head + manifest_len].decode("utf-8"))
    data = raw[head + manifest_len :]

    arrays: dict[str, np.ndarray] = {}
    consumed = 0
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated data for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
        consumed = max(consumed, end)
    if consumed != len(data):
        raise ValueError(f"{path}: {len(data) - consumed} trailing bytes after arrays")
    return Checkpoint(step=manifest["step"], config=manifest["config"], arrays=arrays)


def restore(net: Piann, ckpt: Checkpoint, state: AdamState | None = None) -> None:
    """Load parameters (and, if given, Adam state) from a checkpoint."""
    if ckpt.config != net.config.to_dict():
        raise ValueError(
            f"checkpoint was written for config {ckpt.config}, not {net.config.to_dict()}"
        )
    net.registry.load_values(ckpt.params())
    if state is not None:
        names = set(net.registry.names())
        m = ckpt.moments("m")
        v = ckpt.moments("v")
        if set(m) != names or set(v) != names:
            raise ValueError("checkpoint optimizer state does not cover the parameters")
        state.step = ckpt.step
        state.m = {k: arr.copy() for k, arr in m.items()}
        state.v = {k: arr.copy() for k, arr in v.items()}


def net_from_checkpoint(path: str | Path) -> tuple[Piann, Checkpoint]:
    """Rebuild a model from a checkpoint alone (for evaluation commands)."""
    ckpt = load_checkpoint(path)
    net = Piann(PiannConfig.from_dict(ckpt.config))
    net.registry.load_values(ckpt.params())
    return net, ckpt
