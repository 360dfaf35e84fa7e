"""Network building blocks over the autodiff tape.

Every trainable tensor lives in a ``ParamRegistry`` keyed by a dotted name;
registration order is the canonical order for initialization, optimizer
state, and checkpoints.  Layers expose two call paths: a vector path
(single sample, 1-D tensors) and a row-batched path where each row of a
2-D tensor is an independent sample.  Both paths share the same weights.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from piann import autodiff as ad
from piann.autodiff import Tensor

INIT_SCHEMES = ("xavier_uniform",)


class ParamRegistry:
    """Ordered name -> trainable tensor map with a weight/bias kind tag."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}

    def register(self, name: str, shape: tuple[int, ...], kind: str) -> Tensor:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} registered twice")
        if kind not in ("weight", "bias"):
            raise ValueError(f"unknown parameter kind {kind!r}")
        tensor = ad.leaf(np.zeros(shape))
        self._entries[name] = (tensor, kind)
        return tensor

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return [t for t, _ in self._entries.values()]

    def items(self) -> Iterable[tuple[str, Tensor]]:
        for name, (tensor, _) in self._entries.items():
            yield name, tensor

    def kind(self, name: str) -> str:
        return self._entries[name][1]

    def get(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def value_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.value.copy() for name, tensor in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        for name, tensor in self.items():
            if name not in values:
                raise KeyError(f"missing value for parameter {name!r}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {tensor.value.shape}")
            tensor.value = np.ascontiguousarray(arr)


def xavier_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(registry: ParamRegistry, scheme: str = "xavier_uniform", seed: int = 0) -> None:
    """Fill weights from the uniform Xavier window and zero the biases.

    One generator drawn in registration order keeps the full parameter
    vector a pure function of the seed.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    for name, (tensor, kind) in registry._entries.items():
        if kind == "bias":
            tensor.value = np.zeros_like(tensor.value)
            continue
        shape = tensor.value.shape
        if len(shape) != 2:
            raise ValueError(f"{name}: weight tensors must be 2-D, got {shape}")
        limit = xavier_limit(fan_in=shape[1], fan_out=shape[0])
        tensor.value = rng.uniform(-limit, limit, size=shape)


class DenseLayer:
    """Affine map with weight [out x in] and optional bias [out]."""

    def __init__(self, registry: ParamRegistry, name: str, n_in: int, n_out: int, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.W = registry.register(f"{name}.W", (n_out, n_in), "weight")
        self.b = registry.register(f"{name}.b", (n_out,), "bias") if bias else None

    def __call__(self, x):
        """Vector path: [in] -> [out]."""
        out = ad.matmul(self.W, x)
        return out if self.b is None else ad.add(out, self.b)

    def rows(self, x, w_t=None):
        """Row-batched path: [B x in] -> [B x out]; pass a cached transpose to reuse it."""
        out = ad.matmul(x, ad.transpose(self.W) if w_t is None else w_t)
        return out if self.b is None else ad.add_bias(out, self.b)


def dense_forward(layer: DenseLayer, x):
    return layer(x)


class GruCell:
    """Gated recurrent cell with the update-gate convention.

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    hbar = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * hbar

    so z = 0 keeps the previous state and z = 1 adopts the candidate.
    """

    GATES = ("z", "r", "h")

    def __init__(self, registry: ParamRegistry, name: str, n_in: int, n_hidden: int):
        self.n_in, self.n_hidden = n_in, n_hidden
        for gate in self.GATES:
            setattr(self, f"w_{gate}", registry.register(f"{name}.w_{gate}", (n_hidden, n_in), "weight"))
            setattr(self, f"u_{gate}", registry.register(f"{name}.u_{gate}", (n_hidden, n_hidden), "weight"))
            setattr(self, f"b_{gate}", registry.register(f"{name}.b_{gate}", (n_hidden,), "bias"))

    def step(self, x, h):
        """Vector path: input [in] and state [hid] -> new state [hid]."""
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(self.w_z, x), ad.matmul(self.u_z, h)), self.b_z))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(self.w_r, x), ad.matmul(self.u_r, h)), self.b_r))
        hbar = ad.tanh(ad.add(ad.add(ad.matmul(self.w_h, x), ad.matmul(self.u_h, ad.mul(r, h))), self.b_h))
        return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, hbar))

    def prepare(self) -> "PreparedGru":
        """Transpose the six weight matrices once so batched steps can reuse them."""
        return PreparedGru(self)


class PreparedGru:
    """Per-forward cache of transposed GRU weights for the row-batched path."""

    def __init__(self, cell: GruCell):
        self.cell = cell
        self.w_t = {g: ad.transpose(getattr(cell, f"w_{g}")) for g in GruCell.GATES}
        self.u_t = {g: ad.transpose(getattr(cell, f"u_{g}")) for g in GruCell.GATES}

    def step_rows(self, x, h):
        """Row-batched step: [B x in], [B x hid] -> [B x hid]."""
        cell = self.cell
        z = ad.sigmoid(ad.add_bias(ad.add(ad.matmul(x, self.w_t["z"]), ad.matmul(h, self.u_t["z"])), cell.b_z))
        r = ad.sigmoid(ad.add_bias(ad.add(ad.matmul(x, self.w_t["r"]), ad.matmul(h, self.u_t["r"])), cell.b_r))
        hbar = ad.tanh(
            ad.add_bias(ad.add(ad.matmul(x, self.w_t["h"]), ad.matmul(ad.mul(r, h), self.u_t["h"])), cell.b_h)
        )
        return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, hbar))


def gru_step(cell: GruCell, x, h):
    return cell.step(x, h)


class AdditiveScorer:
    """Attention score a(d, y) = v . tanh(W [d; y] + b)."""

    kind = "additive"

    def __init__(self, registry: ParamRegistry, name: str, n_hidden: int, n_attn: int):
        self.n_hidden, self.n_attn = n_hidden, n_attn
        self.proj = DenseLayer(registry, f"{name}.proj", 2 * n_hidden, n_attn, bias=True)
        # the final projection carries no bias: softmax over keys would
        # cancel a constant shift, leaving it a permanently dead parameter
        self.out = DenseLayer(registry, f"{name}.out", n_attn, 1, bias=False)

    def score(self, d, y):
        """Vector path: states [hid], [hid] -> score [1]."""
        return self.out(ad.tanh(self.proj(ad.concat(d, y, 0))))

    def prepare(self) -> "PreparedAdditive":
        return PreparedAdditive(self)


class PreparedAdditive:
    """Splits the concat projection so keys are projected once per forward."""

    def __init__(self, scorer: AdditiveScorer):
        h, a = scorer.n_hidden, scorer.n_attn
        self.scorer = scorer
        self.w_d_t = ad.transpose(ad.narrow(scorer.proj.W, 1, 0, h))  # [hid x attn]
        self.w_y_t = ad.transpose(ad.narrow(scorer.proj.W, 1, h, h))
        self.v = ad.reshape(scorer.out.W, (a,))
        self.bias = scorer.proj.b

    def keys(self, ystack):
        """[n*B x hid] -> [n*B x attn] with the projection bias folded in."""
        return ad.add_bias(ad.matmul(ystack, self.w_y_t), self.bias)

    def scores_rows(self, d_rows, keys):
        """[B x hid] queries against prepared keys -> [B x n] scores."""
        return ad.additive_scores(ad.matmul(d_rows, self.w_d_t), keys, self.v)


class LinearScorer:
    """Attention score a(d, y) = w . [d; y] (single affine map, no squashing)."""

    kind = "linear"

    def __init__(self, registry: ParamRegistry, name: str, n_hidden: int, n_attn: int = 0):
        self.n_hidden = n_hidden
        self.out = DenseLayer(registry, f"{name}.out", 2 * n_hidden, 1, bias=False)

    def score(self, d, y):
        return self.out(ad.concat(d, y, 0))

    def prepare(self) -> "PreparedLinear":
        return PreparedLinear(self)


class PreparedLinear:
    def __init__(self, scorer: LinearScorer):
        h = scorer.n_hidden
        self.scorer = scorer
        self.w_d_t = ad.transpose(ad.narrow(scorer.out.W, 1, 0, h))  # [hid x 1]
        self.w_y_t = ad.transpose(ad.narrow(scorer.out.W, 1, h, h))

    def keys(self, ystack):
        return ad.matmul(ystack, self.w_y_t)  # [n*B x 1]

    def scores_rows(self, d_rows, keys):
        b_rows = d_rows.value.shape[0] if isinstance(d_rows, Tensor) else d_rows.p.value.shape[0]
        key_rows = keys.value.shape[0] if isinstance(keys, Tensor) else keys.p.value.shape[0]
        n = key_rows // b_rows
        q = ad.matmul(d_rows, self.w_d_t)  # [B x 1]
        spread = ad.transpose(ad.reshape(keys, (n, b_rows)))  # [B x n]
        ones_row = ad.constant(np.ones((1, n)))
        return ad.add(ad.matmul(q, ones_row), spread)


def make_scorer(registry: ParamRegistry, name: str, kind: str, n_hidden: int, n_attn: int):
    if kind == "additive":
        return AdditiveScorer(registry, name, n_hidden, n_attn)
    if kind == "linear":
        return LinearScorer(registry, name, n_hidden)
    raise ValueError(f"unknown scorer kind {kind!r}; expected 'additive' or 'linear'")


def attention_scores(scorer, d_prev, ys: Sequence):
    """Scores of one query against a list of states, as a length-n vector."""
    out = None
    for y in ys:
        s = scorer.score(d_prev, y)
        out = s if out is None else ad.concat(out, s, 0)
    if out is None:
        raise ValueError("attention_scores: need at least one state")
    return out
