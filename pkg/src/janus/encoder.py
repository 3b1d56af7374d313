"""Unidirectional encoder stacks: gated recurrence, FFN / top-1 MoE, causal attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import ValueGrid

Params = dict[str, ValueGrid]


@dataclass
class ModelConfig:
    d_model: int = 32
    n_layers: int = 8
    vocab_size: int = 7
    ffn_mult: int = 4
    n_experts: int = 16
    moe_ratio: float = 0.5
    n_heads: int = 4
    mid_attention: int | None = None
    alpha_aux: float = 0.2
    # learned relative-position bias radius for the fusion attention (0 disables)
    fusion_rel_window: int = 8
    # per-row feed-forward block after the fusion attention
    fusion_ffn: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_layers < 0 or self.vocab_size < 2:
            raise ValueError("d_model, n_layers and vocab_size must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.moe_ratio <= 1.0:
            raise ValueError(f"moe_ratio must lie in [0, 1], got {self.moe_ratio}")
        if self.mid_attention is not None and not 0 <= self.mid_attention < self.n_layers:
            raise ValueError(f"mid_attention index {self.mid_attention} outside [0, {self.n_layers})")
        if self.n_experts < 1:
            raise ValueError("n_experts must be at least 1")
        if self.fusion_rel_window < 0:
            raise ValueError("fusion_rel_window must be non-negative")

    @property
    def expand(self) -> int:
        return 2 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def is_moe_layer(self, i: int) -> bool:
        r = Fraction(self.moe_ratio).limit_denominator(1000)
        return math.floor((i + 1) * r) > math.floor(i * r)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RouterStats:
    f: np.ndarray  # dispatch fraction per expert
    P: ValueGrid  # mean router probability per expert
    n_tokens: int

    @property
    def balance(self) -> float:
        n = len(self.f)
        return float(n * np.dot(self.f, self.P.data))


@dataclass
class DirectionalStates:
    forward: ValueGrid
    backward: ValueGrid
    stats: list[RouterStats] = field(default_factory=list)


# ---------------------------------------------------------------------------
# parameters


def _linear(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return nx.uniform_init(rng, (fan_in, fan_out), fan_in)


def _ffn_params(rng, d: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        "w1": _linear(rng, d, hidden),
        "b1": np.zeros(hidden),
        "w2": _linear(rng, hidden, d),
        "b2": np.zeros(d),
    }


def stack_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Raw arrays for one directional stack, keyed by local names."""
    d, e, h = config.d_model, config.expand, config.ffn_mult * config.d_model
    out: dict[str, np.ndarray] = {"embed": rng.uniform(-1.0, 1.0, size=(config.vocab_size, d))}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        out[p + "mix.norm"] = np.ones(d)
        if config.mid_attention == i:
            for name in ("w_q", "w_k", "w_v", "w_o"):
                out[p + "mix." + name] = _linear(rng, d, d)
        else:
            out[p + "mix.w_in"] = _linear(rng, d, e)
            out[p + "mix.w_gate"] = _linear(rng, d, e)
            out[p + "mix.w_alpha"] = _linear(rng, d, e)
            out[p + "mix.b_alpha"] = np.zeros(e)
            out[p + "mix.w_out"] = _linear(rng, e, d)
        out[p + "ff.norm"] = np.ones(d)
        if config.is_moe_layer(i):
            out[p + "ff.router"] = _linear(rng, d, config.n_experts)
            for k in range(config.n_experts):
                for name, arr in _ffn_params(rng, d, h).items():
                    out[p + f"ff.expert{k}.{name}"] = arr
        else:
            for name, arr in _ffn_params(rng, d, h).items():
                out[p + "ff." + name] = arr
    out["final_norm"] = np.ones(d)
    return out


def sub_params(params: Mapping[str, ValueGrid], prefix: str) -> dict[str, ValueGrid]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def expert_param_names(params: Mapping[str, ValueGrid]) -> list[str]:
    return [k for k in params if ".expert" in k]


# ---------------------------------------------------------------------------
# blocks


def _batched(u: ValueGrid) -> tuple[ValueGrid, bool]:
    if u.ndim == 2:
        return nx.reshape(u, (1,) + u.shape), True
    return u, False


def _unbatched(y: ValueGrid, squeeze: bool) -> ValueGrid:
    return nx.reshape(y, y.shape[1:]) if squeeze else y


def linear_scan(a: ValueGrid, b: ValueGrid) -> ValueGrid:
    """s_t = a_t * s_{t-1} + b_t along axis -2, with s_{-1} = 0."""
    ad, bd = a.data, b.data
    T = ad.shape[-2]
    s = np.empty_like(bd)
    prev = np.zeros_like(bd[..., 0, :])
    for t in range(T):
        prev = ad[..., t, :] * prev + bd[..., t, :]
        s[..., t, :] = prev

    def grad_fn(g):
        ga = np.empty_like(ad)
        gb = np.empty_like(bd)
        carry = np.zeros_like(g[..., 0, :])
        for t in range(T - 1, -1, -1):
            carry = g[..., t, :] + carry
            gb[..., t, :] = carry
            ga[..., t, :] = carry * s[..., t - 1, :] if t > 0 else 0.0
            carry = carry * ad[..., t, :]
        return ga, gb

    return nx.make_op("linear_scan", s, (a, b), grad_fn)


def gated_recurrence_scan(u: ValueGrid, p: Mapping[str, ValueGrid]) -> ValueGrid:
    """Input-gated diagonal linear recurrence with a residual connection.

    Local keys: norm, w_in, w_gate, w_alpha, b_alpha, w_out.
    """
    u, squeeze = _batched(u)
    v = nx.rms_norm(u, p["norm"])
    x = v @ p["w_in"]
    z = v @ p["w_gate"]
    alpha = nx.sigmoid(v @ p["w_alpha"] + p["b_alpha"])
    s = linear_scan(alpha, (1.0 - alpha) * x)
    y = (s * nx.silu(z)) @ p["w_out"]
    return _unbatched(u + y, squeeze)


def _ffn_core(v: ValueGrid, p: Mapping[str, ValueGrid], prefix: str = "") -> ValueGrid:
    hidden = nx.silu(v @ p[prefix + "w1"] + p[prefix + "b1"])
    return hidden @ p[prefix + "w2"] + p[prefix + "b2"]


def ffn_forward(u: ValueGrid, p: Mapping[str, ValueGrid]) -> ValueGrid:
    """u + W2 SiLU(W1 RMSNorm(u)). Local keys: norm, w1, b1, w2, b2."""
    return u + _ffn_core(nx.rms_norm(u, p["norm"]), p)


def route_top1(v: ValueGrid, router: ValueGrid):
    """Top-1 routing of the rows of ``v`` ([n, d]).

    Returns (expert id per row, chosen probability [n, 1], probability rows,
    RouterStats). Ties go to the lowest expert index.
    """
    n = v.shape[0]
    n_experts = router.shape[1]
    probs = nx.softmax_rows(v @ router)
    choice = np.argmax(probs.data, axis=-1)
    flat = nx.reshape(probs, (n * n_experts, 1))
    chosen = nx.take(flat, np.arange(n) * n_experts + choice, axis=0)
    f = np.bincount(choice, minlength=n_experts) / n
    stats = RouterStats(f=f, P=nx.reduce_mean(probs, axis=0), n_tokens=n)
    return choice, chosen, probs, stats


def moe_forward(u: ValueGrid, p: Mapping[str, ValueGrid]) -> tuple[ValueGrid, RouterStats]:
    """Top-1 mixture of FFN experts scaled by the router probability, plus residual."""
    shape = u.shape
    d = shape[-1]
    flat_u = nx.reshape(u, (-1, d))
    n = flat_u.shape[0]
    v = nx.rms_norm(flat_u, p["norm"])
    choice, chosen, _, stats = route_top1(v, p["router"])
    n_experts = p["router"].shape[1]
    pieces, rows = [], []
    for k in range(n_experts):
        idx = np.flatnonzero(choice == k)
        if len(idx) == 0:
            continue
        out_k = _ffn_core(nx.take(v, idx, axis=0), p, f"expert{k}.")
        pieces.append(out_k * nx.take(chosen, idx, axis=0))
        rows.append(idx)
    mixed = nx.scatter_rows(nx.concat(pieces, axis=0), np.concatenate(rows), n)
    return nx.reshape(flat_u + mixed, shape), stats


def aux_loss(stats: list[RouterStats], alpha: float) -> ValueGrid:
    """Mean over MoE layers of alpha * N * sum_i f_i P_i."""
    if not stats:
        return ValueGrid(np.zeros(()))
    terms = []
    for s in stats:
        n = len(s.f)
        f = ValueGrid(s.f.astype(s.P.dtype))
        terms.append(nx.reduce_sum(s.P * f) * float(alpha * n))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def multihead_attention(
    x: ValueGrid,
    p: Mapping[str, ValueGrid],
    mask: np.ndarray,
    n_heads: int,
    bias: ValueGrid | None = None,
    rows: np.ndarray | None = None,
) -> ValueGrid:
    """Masked multi-head scaled dot-product attention over [B, L, d]; no residual.

    ``rows`` restricts the queries to a subset of positions (keys stay complete);
    the output then has one row per selected query.
    """
    B, L, d = x.shape
    dh = d // n_heads
    xq = x if rows is None else nx.take(x, rows, axis=1)
    Lq = xq.shape[1]

    def heads(src, w, n):
        return nx.transpose(nx.reshape(src @ w, (B, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(xq, p["w_q"] * (1.0 / math.sqrt(dh)), Lq)
    k, v = heads(x, p["w_k"], L), heads(x, p["w_v"], L)
    scores = q @ nx.swap_last(k)
    if rows is not None:
        mask = mask[rows]
        if bias is not None:
            bias = nx.take(bias, rows, axis=-2)
    if bias is not None:
        scores = scores + bias
    attn = nx.softmax_rows(scores, mask)
    out = nx.reshape(nx.transpose(attn @ v, (0, 2, 1, 3)), (B, Lq, d))
    return out @ p["w_o"]


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def causal_attention_block(u: ValueGrid, p: Mapping[str, ValueGrid], n_heads: int) -> ValueGrid:
    """u + MHA(RMSNorm(u)) under a lower-triangular mask."""
    u, squeeze = _batched(u)
    v = nx.rms_norm(u, p["norm"])
    y = multihead_attention(v, p, causal_mask(u.shape[1]), n_heads)
    return _unbatched(u + y, squeeze)


# ---------------------------------------------------------------------------
# stacks


def run_stack(ids: np.ndarray, config: ModelConfig, p: Mapping[str, ValueGrid]) -> tuple[ValueGrid, list[RouterStats]]:
    """Left-to-right pass of one stack over ids [B, T]."""
    ids = np.asarray(ids)
    if p["embed"].shape != (config.vocab_size, config.d_model):
        raise ValueError(
            f"embedding shape {p['embed'].shape} does not match config "
            f"({config.vocab_size}, {config.d_model})"
        )
    h = nx.take(p["embed"], ids, axis=0)
    stats: list[RouterStats] = []
    for i in range(config.n_layers):
        mix = sub_params(p, f"layers.{i}.mix.")
        if config.mid_attention == i:
            if "w_q" not in mix:
                raise ValueError(f"layer {i} lacks attention parameters")
            h = causal_attention_block(h, mix, config.n_heads)
        else:
            if "w_in" not in mix:
                raise ValueError(f"layer {i} lacks recurrence parameters")
            h = gated_recurrence_scan(h, mix)
        ff = sub_params(p, f"layers.{i}.ff.")
        if config.is_moe_layer(i):
            if "router" not in ff:
                raise ValueError(f"layer {i} lacks router parameters")
            h, s = moe_forward(h, ff)
            stats.append(s)
        else:
            if "w1" not in ff:
                raise ValueError(f"layer {i} lacks FFN parameters")
            h = ffn_forward(h, ff)
    return nx.rms_norm(h, p["final_norm"]), stats


def encode_directional(
    ids,
    direction: str,
    config: ModelConfig,
    params: Mapping[str, ValueGrid],
    reverse: bool = True,
) -> tuple[ValueGrid, list[RouterStats]]:
    """Encode ids ([T] or [B, T]) with the stack for ``direction`` ('fwd' or 'bwd').

    For 'bwd' the sequence is reversed before the stack and the output is
    re-reversed so row t aligns with original position t; ``reverse=False``
    disables that bookkeeping. ``params`` holds the full model table.
    """
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    ids = np.asarray(getattr(ids, "ids", ids), dtype=np.int64)
    squeeze = ids.ndim == 1
    ids2 = ids[None] if squeeze else ids
    p = sub_params(params, direction + ".")
    flip = direction == "bwd" and reverse
    if flip:
        ids2 = ids2[:, ::-1]
    h, stats = run_stack(ids2, config, p)
    if flip:
        h = nx.take(h, np.arange(h.shape[1])[::-1], axis=1)
    if squeeze:
        h = nx.reshape(h, h.shape[1:])
    return h, stats
