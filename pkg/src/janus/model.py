"""The full Janus model: two directional stacks, fusion attention and a shared head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import (
    DirectionalStates,
    ModelConfig,
    Params,
    RouterStats,
    _ffn_params,
    encode_directional,
    ffn_forward,
    stack_params,
    sub_params,
)
from .fusion import FusionMask, build_mask, full_mask, fused_attention, target_map
from .numerics import ValueGrid


@dataclass
class ForwardOutput:
    fused: ValueGrid  # [B, 2T, d]
    logits: ValueGrid  # [B, 2T, V]
    stats: list[RouterStats]


def init_params(config: ModelConfig, dtype=None) -> Params:
    dtype = dtype or nx.default_dtype()
    rng = np.random.default_rng(config.seed)
    raw: dict[str, np.ndarray] = {}
    for direction in ("fwd", "bwd"):
        for k, v in stack_params(config, rng).items():
            raw[f"{direction}.{k}"] = v
    d = config.d_model
    for name in ("w_q", "w_k", "w_v", "w_o"):
        raw["fusion." + name] = nx.uniform_init(rng, (d, d), d)
    if config.fusion_rel_window:
        raw["fusion.rel_bias"] = np.zeros((config.n_heads, 4, 2 * config.fusion_rel_window + 1))
    raw["fusion.norm"] = np.ones(d)
    if config.fusion_ffn:
        raw["fusion_ffn.norm"] = np.ones(d)
        for k, v in _ffn_params(rng, d, config.ffn_mult * d).items():
            raw["fusion_ffn." + k] = v
    raw["head.w"] = nx.uniform_init(rng, (d, config.vocab_size), d)
    raw["head.b"] = np.zeros(config.vocab_size)
    return {k: ValueGrid(v.astype(dtype), requires_grad=True) for k, v in raw.items()}


class JanusModel:
    """Functional parameters plus the forward pass that ties the modules together."""

    def __init__(self, config: ModelConfig, params: Params | None = None, dtype=None):
        self.config = config
        self.params = init_params(config, dtype) if params is None else params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "JanusModel":
        params = {k: ValueGrid(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return JanusModel(self.config, params)

    def copy(self) -> "JanusModel":
        return self.astype(self.dtype)

    def encode(self, ids, zero_backward: bool = False) -> DirectionalStates:
        fwd, s_f = encode_directional(ids, "fwd", self.config, self.params)
        bwd, s_b = encode_directional(ids, "bwd", self.config, self.params)
        if zero_backward:
            bwd = bwd * 0.0
        return DirectionalStates(fwd, bwd, s_f + s_b)

    def fuse(self, states: DirectionalStates, mask: FusionMask, rows=None) -> ValueGrid:
        fused = fused_attention(states, mask, sub_params(self.params, "fusion."), self.config.n_heads, rows)
        if self.config.fusion_ffn:
            fused = ffn_forward(fused, sub_params(self.params, "fusion_ffn."))
        return fused

    def head(self, fused: ValueGrid) -> ValueGrid:
        return fused @ self.params["head.w"] + self.params["head.b"]

    def forward(
        self,
        ids,
        mask: str | FusionMask = "janus",
        zero_backward: bool = False,
        rows=None,
    ) -> ForwardOutput:
        """Run the model on ids [B, T] (or [T]).

        ``mask`` is 'janus', 'full' (masked-LM baseline) or an explicit FusionMask.
        ``rows`` limits the fused output (and logits) to those query rows.
        """
        ids = np.asarray(getattr(ids, "ids", ids), dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        T = ids.shape[1]
        if isinstance(mask, str):
            if mask == "janus":
                mask = build_mask(T)
            elif mask == "full":
                mask = full_mask(T)
            else:
                raise ValueError(f"unknown mask kind {mask!r}")
        states = self.encode(ids, zero_backward=zero_backward)
        fused = self.fuse(states, mask, rows)
        return ForwardOutput(fused, self.head(fused), states.stats)

    def __call__(self, ids, mask="janus", zero_backward=False, rows=None) -> ForwardOutput:
        return self.forward(ids, mask, zero_backward, rows)


# ---------------------------------------------------------------------------
# parameter audit


@dataclass
class ParamAudit:
    total: int
    activated: int
    by_group: dict[str, int]

    def report(self) -> str:
        lines = [f"total parameters:     {self.total}", f"activated parameters: {self.activated}"]
        lines += [f"  {k}: {v}" for k, v in sorted(self.by_group.items())]
        return "\n".join(lines)


def audit_params(config: ModelConfig, params: Params | None = None) -> ParamAudit:
    """Total vs per-token activated parameter counts (one expert per MoE layer)."""
    params = init_params(config) if params is None else params
    total = sum(p.size for p in params.values())
    idle = 0
    groups: dict[str, int] = {}
    for name, p in params.items():
        group = name.split(".")[0]
        groups[group] = groups.get(group, 0) + p.size
        if ".expert" in name:
            groups["experts"] = groups.get("experts", 0) + p.size
    if config.n_experts > 1:
        expert_total = groups.get("experts", 0)
        idle = expert_total - expert_total // config.n_experts
    return ParamAudit(total=total, activated=total - idle, by_group=groups)


# ---------------------------------------------------------------------------
# non-leakage verification


@dataclass
class LeakageReport:
    T: int
    seed: int
    max_diff: float
    worst: tuple[int, int, float] | None  # (target position, substitute id, diff)
    n_checks: int
    min_nontarget_diff: float | None = None

    def passed(self, tol: float) -> bool:
        return self.max_diff <= tol

    def failure(self, tol: float) -> str:
        if self.passed(tol) or self.worst is None:
            return ""
        t, v, d = self.worst
        return f"leak at target position {t} with substitute {v}: diff {d:.3e} > {tol:g}"


def leakage_check(
    config: ModelConfig,
    seed: int,
    T: int,
    dtype=np.float32,
    mask: FusionMask | None = None,
    alphabet: int | None = None,
) -> LeakageReport:
    """Substitute every token with every other vocabulary id and confirm the
    logits of every row predicting that token are unchanged.

    Also records the smallest change seen at rows whose target differs from
    the substituted position (non-degeneracy).
    """
    cfg = ModelConfig(**{**config.to_dict(), "seed": seed})
    with nx.precision(dtype):
        model = JanusModel(cfg, dtype=dtype)
    mask = build_mask(T) if mask is None else mask
    vocab = cfg.vocab_size if alphabet is None else alphabet
    rng = np.random.default_rng([seed, T])
    base = rng.integers(0, 4, size=T)
    variants, keys = [base], []
    for t in range(T):
        for v in range(vocab):
            if v == base[t]:
                continue
            x = base.copy()
            x[t] = v
            variants.append(x)
            keys.append((t, v))
    with nx.no_grad(), nx.precision(dtype):
        logits = model.forward(np.stack(variants), mask=mask).logits.data.astype(np.float64)
    tm = target_map(T)
    by_target: dict[int, list[int]] = {}
    for row, tgt in zip(tm.rows, tm.targets):
        by_target.setdefault(int(tgt), []).append(int(row))
    max_diff, worst, n_checks = 0.0, None, 0
    min_other = None
    for k, (t, v) in enumerate(keys, start=1):
        diff_rows = np.abs(logits[k] - logits[0]).max(axis=-1)
        rows = by_target.get(t, [])
        if rows:
            d = float(diff_rows[rows].max())
            n_checks += len(rows)
            if d > max_diff or worst is None:
                max_diff = max(max_diff, d)
                if worst is None or d >= worst[2]:
                    worst = (t, v, d)
        others = np.setdiff1d(tm.rows, rows)
        if len(others):
            m = float(diff_rows[others].max())
            min_other = m if min_other is None else min(min_other, m)
    return LeakageReport(T, seed, max_diff, worst, n_checks, min_other)
