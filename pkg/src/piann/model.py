"""Encoder/attention/decoder network for saturation profiles.

One forward pass maps (t, M) to the whole saturation row u_0..u_N on the
fixed x-lattice.  The pair (t, M/m_scale) is embedded into the initial
recurrent state; an encoder GRU walks the interior nodes x_1..x_N; the
decoder GRU walks them again, attending over all encoder states, and emits
u_i through a sigmoid.  The constitutive constraints are structural, not
penalized: the output row always starts with the injection value u_0 = 1,
and at t = 0 the dry initial profile is returned without evaluating the
network at all.

The batched path treats each row of a [B x k] tensor as an independent time
sample, which is exactly equivalent to B separate vector forwards; it exists
because the finite-difference time residual needs every t-node of one
mobility ratio on a single tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from piann import autodiff as ad
from piann import layers
from piann.autodiff import Dual, Tensor
from piann.layers import DenseLayer, GruCell, ParamRegistry

SCORER_KINDS = ("additive", "linear")


@dataclass(frozen=True)
class PiannConfig:
    """Architecture and input-normalization hyperparameters."""

    n_x: int
    hidden_dim: int = 32
    attention_dim: int = 32
    scorer: str = "additive"
    x_max: float = 1.0
    t_scale: float = 1.0
    m_scale: float = 100.0

    def __post_init__(self):
        if self.n_x < 3:
            raise ValueError(f"need at least three x-nodes, got {self.n_x}")
        if self.hidden_dim < 1 or self.attention_dim < 1:
            raise ValueError("hidden_dim and attention_dim must be positive")
        if self.scorer not in SCORER_KINDS:
            raise ValueError(f"unknown scorer {self.scorer!r}; expected one of {SCORER_KINDS}")
        if self.x_max <= 0.0 or self.t_scale <= 0.0 or self.m_scale <= 0.0:
            raise ValueError("x_max, t_scale, and m_scale must be positive")

    @property
    def n_steps(self) -> int:
        """Interior walk length N (encoder and decoder both take N steps)."""
        return self.n_x - 1

    @property
    def x_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.x_max, self.n_x)

    def to_dict(self) -> dict:
        return {
            "n_x": self.n_x,
            "hidden_dim": self.hidden_dim,
            "attention_dim": self.attention_dim,
            "scorer": self.scorer,
            "x_max": self.x_max,
            "t_scale": self.t_scale,
            "m_scale": self.m_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "PiannConfig":
        return PiannConfig(
            n_x=int(d["n_x"]),
            hidden_dim=int(d["hidden_dim"]),
            attention_dim=int(d["attention_dim"]),
            scorer=str(d["scorer"]),
            x_max=float(d["x_max"]),
            t_scale=float(d["t_scale"]),
            m_scale=float(d["m_scale"]),
        )


@dataclass
class PiannOutput:
    """One predicted saturation row and, optionally, the attention map."""

    u: np.ndarray  # [n_x]
    attention: np.ndarray | None = None  # [N x N], decoder step i attends over encoder step j


class Piann:
    """The network plus its parameter registry."""

    def __init__(self, config: PiannConfig):
        self.config = config
        reg = ParamRegistry()
        h = config.hidden_dim
        self.embed = DenseLayer(reg, "embed", 2, h)
        self.lift = DenseLayer(reg, "lift", 1, h)
        self.encoder = GruCell(reg, "enc", h, h)
        self.scorer = layers.make_scorer(reg, "att", config.scorer, h, config.attention_dim)
        self.decoder = GruCell(reg, "dec", 1 + h, h)
        self.out = DenseLayer(reg, "out", h, 1)
        self.registry = reg

    def init(self, seed: int = 0) -> "Piann":
        layers.init_params(self.registry, seed=seed)
        return self

    # -- forward passes ----------------------------------------------------

    def forward_batch(
        self,
        ts: np.ndarray,
        m_value: float,
        *,
        tangent: bool = False,
        want_attention: bool = False,
    ):
        """Saturation rows for all strictly positive times in ``ts`` at once.

        Returns ``(U, attention)`` where U is a [B x n_x] tensor (a Dual
        when ``tangent`` is set, its tangent holding du/dt row-wise) and
        attention is a list of per-step [B x N] weight arrays or None.
        """
        cfg = self.config
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        if ts.size == 0:
            raise ValueError("need at least one time sample")
        if np.any(ts <= 0.0):
            raise ValueError("batched forward requires t > 0; the t = 0 row is the fixed initial profile")
        if m_value <= 0.0:
            raise ValueError(f"mobility ratio must be positive, got {m_value}")
        b_rows = ts.size
        n = cfg.n_steps
        x_nodes = cfg.x_nodes

        inputs = ad.constant(np.stack([ts / cfg.t_scale, np.full(b_rows, m_value / cfg.m_scale)], axis=1))
        if tangent:
            seed_rows = np.zeros((b_rows, 2))
            seed_rows[:, 0] = 1.0 / cfg.t_scale
            inputs = Dual(inputs, ad.constant(seed_rows))

        ones_col = ad.constant(np.ones((b_rows, 1)))
        h_state = self.embed.rows(inputs)

        enc = self.encoder.prepare()
        lift_w_t = ad.transpose(self.lift.W)
        states = []
        for i in range(1, n + 1):
            lifted = self.lift.rows(ad.constant([[x_nodes[i]]]), lift_w_t)  # [1 x hid]
            x_i = ad.matmul(ones_col, lifted)  # same lifted node for every row
            h_state = enc.step_rows(x_i, h_state)
            states.append(h_state)
        ystack = ad.stack_rows(states)  # [n*B x hid], encoder step major

        prep = self.scorer.prepare()
        keys = prep.keys(ystack)
        dec = self.decoder.prepare()
        out_w_t = ad.transpose(self.out.W)

        d_state = h_state  # decoder starts from the final encoder state
        u_prev = ones_col  # hard inflow value u_0 = 1
        outputs = []
        attention = [] if want_attention else None
        for _ in range(n):
            scores = prep.scores_rows(d_state, keys)
            alpha = ad.softmax_rows(scores)
            context = ad.attn_context(alpha, ystack)
            d_state = dec.step_rows(ad.concat(u_prev, context, 1), d_state)
            u_i = ad.sigmoid(self.out.rows(d_state, out_w_t))  # [B x 1]
            outputs.append(u_i)
            u_prev = u_i
            if want_attention:
                alpha_p = alpha.p if isinstance(alpha, Dual) else alpha
                attention.append(alpha_p.value.copy())

        stacked = ad.stack_rows(outputs)  # [n*B x 1]
        u_net = ad.transpose(ad.reshape(stacked, (n, b_rows)))  # [B x n]
        u_full = ad.concat(ones_col, u_net, 1)  # prepend the constant inflow column
        return u_full, attention

    def forward(self, t: float, m_value: float, want_attention: bool = False) -> PiannOutput:
        """Single saturation row; at t = 0 the initial profile is returned as is."""
        if t < 0.0:
            raise ValueError(f"time must be non-negative, got {t}")
        if t == 0.0:
            return self.forward_at_t0(m_value)
        u, attention = self.forward_batch(np.array([t]), m_value, want_attention=want_attention)
        att = np.stack([a[0] for a in attention]) if attention is not None else None
        return PiannOutput(u=u.value[0].copy(), attention=att)

    def forward_at_t0(self, m_value: float) -> PiannOutput:
        """The dry initial profile with a wet inlet; no parameters involved."""
        if m_value <= 0.0:
            raise ValueError(f"mobility ratio must be positive, got {m_value}")
        u = np.zeros(self.config.n_x)
        u[0] = 1.0
        return PiannOutput(u=u, attention=None)

    def time_derivative(self, t: float, m_value: float) -> np.ndarray:
        """du/dt of every output component via a forward-mode sweep.

        The inflow component is structurally constant, so its derivative is
        exactly zero.  Rejects t = 0, where the output is the fixed initial
        profile rather than a function of the network.
        """
        if t <= 0.0:
            raise ValueError(f"time derivative needs t > 0, got {t}")
        u, _ = self.forward_batch(np.array([t]), m_value, tangent=True)
        return u.t.value[0].copy()
