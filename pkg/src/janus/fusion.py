"""Bidirectional global fusion: the 2T x 2T admissibility mask, masked fusion
attention over [H^F; H^B], the row-to-target alignment and a reachability
oracle for non-leakage."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoder import DirectionalStates, multihead_attention
from .numerics import ValueGrid


@dataclass(frozen=True)
class FusionMask:
    T: int
    admissible: np.ndarray  # [2T, 2T] bool, rows are queries

    def __post_init__(self):
        if self.admissible.shape != (2 * self.T, 2 * self.T):
            raise ValueError("mask shape does not match 2T x 2T")

    def to_text(self) -> str:
        return "\n".join("".join("1" if a else "0" for a in row) for row in self.admissible) + "\n"

    def to_pbm(self) -> str:
        """Plain (P1) portable bitmap; black pixels are admissible entries."""
        n = 2 * self.T
        rows = [" ".join("1" if a else "0" for a in row) for row in self.admissible]
        return f"P1\n{n} {n}\n" + "\n".join(rows) + "\n"


@lru_cache(maxsize=64)
def _mask_array(T: int, offset: int) -> np.ndarray:
    q = np.arange(2 * T)[:, None]
    kv = np.arange(2 * T)[None, :]
    fq, fk = q < T, kv < T
    m = (
        (fq & fk & (q >= kv))
        | (~fq & ~fk & (q <= kv))
        | (fq & ~fk & (kv >= T + q + offset))
        | (~fq & fk & (q >= kv + T + offset))
    )
    m.setflags(write=False)
    return m


def build_mask(T: int, offset: int = 2) -> FusionMask:
    """Four-case Janus mask. ``offset`` exists only for mutation testing."""
    if T < 2:
        raise ValueError(f"fusion mask needs T >= 2, got {T}")
    return FusionMask(T, _mask_array(T, offset))


def full_mask(T: int) -> FusionMask:
    """Unrestricted attention, used by the masked-LM baseline."""
    return FusionMask(T, np.ones((2 * T, 2 * T), dtype=bool))


@dataclass(frozen=True)
class TargetMap:
    rows: np.ndarray  # query row in [0, 2T)
    targets: np.ndarray  # predicted position in [0, T)
    halves: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def instances(self) -> list[tuple[int, int, str]]:
        return list(zip(self.rows.tolist(), self.targets.tolist(), self.halves))


@lru_cache(maxsize=64)
def target_map(T: int) -> TargetMap:
    """Forward row i predicts i+1; backward row T+j predicts j-1."""
    if T < 2:
        raise ValueError(f"target map needs T >= 2, got {T}")
    fwd_rows = np.arange(0, T - 1)
    bwd_rows = T + np.arange(1, T)
    rows = np.concatenate([fwd_rows, bwd_rows])
    targets = np.concatenate([fwd_rows + 1, bwd_rows - T - 1])
    halves = ("fwd",) * (T - 1) + ("bwd",) * (T - 1)
    return TargetMap(rows, targets, halves)


# ---------------------------------------------------------------------------
# reachability oracle (independent of the mask formula)


def _dependence_sets(T: int) -> list[int]:
    """Bitset of input positions reaching each of the 2T fused inputs.

    Built by walking the recurrence graphs: H^F_i <- (H^F_{i-1}, x_i) and
    H^B_j <- (H^B_{j+1}, x_j).
    """
    deps = [0] * (2 * T)
    acc = 0
    for i in range(T):
        acc |= 1 << i
        deps[i] = acc
    acc = 0
    for j in range(T - 1, -1, -1):
        acc |= 1 << j
        deps[T + j] = acc
    return deps


def _virtual_target(q: int, T: int) -> int:
    return q + 1 if q < T else q - T - 1


def oracle_admissibility(T: int) -> np.ndarray:
    """Admissibility implied by dependence sets alone.

    A forward-half key may serve query q iff everything it depends on lies
    strictly left of q's target; a backward-half key iff everything lies
    strictly right of it. Rows without a real target use the virtual target
    just beyond the sequence end.
    """
    deps = _dependence_sets(T)
    everything = (1 << T) - 1
    out = np.zeros((2 * T, 2 * T), dtype=bool)
    for q in range(2 * T):
        t = _virtual_target(q, T)
        left = (1 << max(t, 0)) - 1 if t > 0 else 0
        right = everything & ~((1 << (t + 1)) - 1) if t >= 0 else everything
        for kv in range(2 * T):
            allowed = left if kv < T else right
            out[q, kv] = deps[kv] & ~allowed == 0
    return out


def influence_oracle(T: int, mask: FusionMask | None = None) -> list[frozenset[int]]:
    """Input positions able to influence each fused query row under ``mask``."""
    mask = build_mask(T) if mask is None else mask
    deps = _dependence_sets(T)
    result = []
    for q in range(2 * T):
        acc = 0
        for kv in np.flatnonzero(mask.admissible[q]):
            acc |= deps[kv]
        result.append(frozenset(i for i in range(T) if acc >> i & 1))
    return result


# ---------------------------------------------------------------------------
# fused attention


@lru_cache(maxsize=64)
def rel_bias_index(T: int, window: int) -> np.ndarray:
    """Index into a flattened [4, 2*window+1] table for every (query, key) pair.

    Forward row i sits at position i and backward row T+j at position j; the
    table is selected by the (query half, key half) pair and the clipped
    position offset.
    """
    pos = np.concatenate([np.arange(T), np.arange(T)])
    half = np.concatenate([np.zeros(T, dtype=int), np.ones(T, dtype=int)])
    offset = np.clip(pos[None, :] - pos[:, None], -window, window) + window
    pair = 2 * half[:, None] + half[None, :]
    idx = pair * (2 * window + 1) + offset
    idx.setflags(write=False)
    return idx


def fused_attention(
    states: DirectionalStates,
    mask: FusionMask,
    params: Mapping[str, ValueGrid],
    n_heads: int,
    rows: np.ndarray | None = None,
) -> ValueGrid:
    """RMSNorm(R + MHA(R)) with R = concat(H^F, H^B) along the sequence axis.

    ``params`` uses local keys w_q, w_k, w_v, w_o, norm and optionally rel_bias.
    ``rows`` computes only the listed query rows of the 2T outputs.
    """
    fwd, bwd = states.forward, states.backward
    squeeze = fwd.ndim == 2
    if squeeze:
        fwd = nx.reshape(fwd, (1,) + fwd.shape)
        bwd = nx.reshape(bwd, (1,) + bwd.shape)
    T = fwd.shape[1]
    if mask.T != T:
        raise ValueError(f"mask built for T={mask.T} but states have T={T}")
    r = nx.concat([fwd, bwd], axis=1)
    bias = None
    if "rel_bias" in params:
        table = params["rel_bias"]
        heads, pairs, width = table.shape
        window = (width - 1) // 2
        flat = nx.reshape(table, (heads, pairs * width))
        bias = nx.take(flat, rel_bias_index(T, window), axis=1)
    attended = multihead_attention(r, params, mask.admissible, n_heads, bias, rows)
    resid = r if rows is None else nx.take(r, rows, axis=1)
    out = nx.rms_norm(resid + attended, params["norm"])
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
    return out
