"""Pretraining objectives, AdamW with warmup-cosine schedule, the training loop
and the binary checkpoint format."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .encoder import ModelConfig, RouterStats, aux_loss
from .fusion import target_map
from .genome_io import MASK, PAD, VOCAB, SequenceBatch, windows
from .model import JanusModel
from .numerics import NonFiniteError, ValueGrid

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "ce", "aux", "ppl", "lr", "balance", "tps")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 1
    seq_len: int = 128
    peak_lr: float = 8e-3
    floor_lr: float = 1e-6
    warmup_frac: float = 0.10
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    alpha_aux: float | None = None  # None: use the model config value
    objective: str = "janus"
    mask_frac: float = 0.15
    stride: int | None = None
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must lie in (0, 1), got {self.warmup_frac}")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.objective not in ("janus", "mlm", "janus_left"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 < self.mask_frac < 1.0:
            raise ValueError("mask_frac must lie in (0, 1)")
        if self.steps < 1 or self.batch_size < 1 or self.seq_len < 2:
            raise ValueError("steps, batch_size must be >= 1 and seq_len >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossOutput:
    total: ValueGrid
    ce: ValueGrid
    aux: ValueGrid
    stats: list[RouterStats]
    per_instance: np.ndarray  # CE of every included prediction instance
    positions: np.ndarray  # (batch index, target position) per instance


def _balance(stats: list[RouterStats]) -> float:
    return float(np.mean([s.balance for s in stats])) if stats else 0.0


def _instance_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    logp = nx.log_softmax_np(logits.astype(np.float64))
    return -logp[np.arange(len(targets)), targets]


# ---------------------------------------------------------------------------
# objectives


def janus_loss(batch: SequenceBatch, model: JanusModel, alpha: float | None = None, zero_backward: bool = False) -> LossOutput:
    """Mean CE over every target-map instance whose target is not PAD, plus the MoE term.

    ``zero_backward`` gives the left-context-only ablation.
    """
    ids = batch.ids
    B, T = ids.shape
    if T < 2:
        raise ValueError("janus_loss needs T >= 2")
    alpha = model.config.alpha_aux if alpha is None else alpha
    out = model.forward(ids, mask="janus", zero_backward=zero_backward)
    tm = target_map(T)
    flat = nx.reshape(out.logits, (B * 2 * T, -1))
    rows = (np.arange(B)[:, None] * 2 * T + tm.rows[None, :]).reshape(-1)
    targets = ids[:, tm.targets].reshape(-1)
    include = batch.include[:, tm.targets].reshape(-1)
    if not include.any():
        raise ValueError("janus_loss: every instance is excluded")
    picked = nx.take(flat, rows, axis=0)
    ce = nx.cross_entropy_mean(picked, targets, include)
    aux = aux_loss(out.stats, alpha)
    per = _instance_ce(picked.data[include], targets[include])
    b_idx = np.repeat(np.arange(B), len(tm.rows))
    positions = np.stack([b_idx, np.tile(tm.targets, B)], axis=1)[include]
    return LossOutput(ce + aux, ce, aux, out.stats, per, positions)


def mlm_positions(batch: SequenceBatch, frac: float, rng: np.random.Generator) -> list[np.ndarray]:
    """ceil(frac * T) distinct positions per sequence, drawn from non-PAD positions."""
    B, T = batch.ids.shape
    k = math.ceil(frac * T)
    out = []
    for b in range(B):
        candidates = np.flatnonzero(batch.include[b])
        if len(candidates) < 1 or k < 1:
            raise ValueError("sequence too short to mask any position")
        out.append(np.sort(rng.choice(candidates, size=min(k, len(candidates)), replace=False)))
    return out


def mlm_loss(
    batch: SequenceBatch,
    model: JanusModel,
    rng: np.random.Generator,
    frac: float = 0.15,
    alpha: float | None = None,
) -> LossOutput:
    """Masked-LM baseline: replace positions with MASK, fuse without restriction,
    score the forward-half row of each masked position against the original token."""
    if not 0.0 < frac < 1.0:
        raise ValueError("mask fraction must lie in (0, 1)")
    ids = batch.ids
    B, T = ids.shape
    alpha = model.config.alpha_aux if alpha is None else alpha
    picks = mlm_positions(batch, frac, rng)
    corrupted = ids.copy()
    for b, pos in enumerate(picks):
        corrupted[b, pos] = MASK
    out = model.forward(corrupted, mask="full")
    flat = nx.reshape(out.logits, (B * 2 * T, -1))
    b_idx = np.concatenate([np.full(len(p), b) for b, p in enumerate(picks)])
    pos = np.concatenate(picks)
    picked = nx.take(flat, b_idx * 2 * T + pos, axis=0)
    targets = ids[b_idx, pos]
    ce = nx.cross_entropy_mean(picked, targets)
    aux = aux_loss(out.stats, alpha)
    per = _instance_ce(picked.data, targets)
    return LossOutput(ce + aux, ce, aux, out.stats, per, np.stack([b_idx, pos], axis=1))


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from the floor to the peak, then cosine back to the floor."""
    steps = config.steps
    if not 0 <= step <= steps:
        raise ValueError(f"step {step} outside [0, {steps}]")
    warm = math.ceil(config.warmup_frac * steps)
    lo, hi = config.floor_lr, config.peak_lr
    if step <= warm:
        return lo + (hi - lo) * step / warm if warm else hi
    progress = (step - warm) / (steps - warm)
    return lo + (hi - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm."""
    norm = global_norm(grads.values())
    if not math.isfinite(norm):
        raise NonFiniteError("gradient norm is not finite")
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def is_decayed(name: str, value: ValueGrid) -> bool:
    """Weight decay applies to weight matrices only (not biases, gains or embeddings)."""
    return value.ndim == 2 and not name.endswith("embed")


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    last_metrics: dict = field(default_factory=dict)
    best_metrics: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: dict[str, ValueGrid], seed: int = 0) -> "TrainState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        rng = np.random.default_rng(seed)
        return cls(0, m, v, rng.bit_generator.state)


def adamw_step(
    params: dict[str, ValueGrid],
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    config: TrainConfig,
    lr_scale: dict[str, float] | None = None,
) -> None:
    """Decoupled-weight-decay Adam update with bias correction, in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        w = p.data
        if config.weight_decay and is_decayed(name, p):
            w = w - step_lr * config.weight_decay * w
        p.data = (w - step_lr * update).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"JNSC"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    params: dict[str, np.ndarray]
    state: TrainState | None = None
    vocabulary: tuple[str, ...] = VOCAB.symbols
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def model(self) -> JanusModel:
        params = {k: ValueGrid(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return JanusModel(self.model_config, params)


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw_name = name.encode()
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=dt).tobytes()
    return head + struct.pack("<Q", len(body)) + body


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    header: dict = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "vocabulary": list(ckpt.vocabulary),
        "meta": ckpt.meta,
    }
    if ckpt.state is not None:
        s = ckpt.state
        header["state"] = {
            "step": s.step,
            "rng_state": s.rng_state,
            "last_metrics": s.last_metrics,
            "best_metrics": s.best_metrics,
        }
        tensors += [(f"adam_m/{k}", v) for k, v in s.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in s.v.items()]
    tensors += [(f"extra/{k}", v) for k, v in ckpt.extra.items()]
    raw_header = json.dumps(header, sort_keys=True).encode()
    body = io.BytesIO()
    body.write(struct.pack("<I", len(raw_header)))
    body.write(raw_header)
    body.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        body.write(_tensor_bytes(name, arr))
    payload = body.getvalue()
    return MAGIC + struct.pack("<H", ckpt.version) + payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 6 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if len(data) < 10:
        raise CheckpointError("truncated checkpoint")
    payload, (crc,) = data[6:-4], struct.unpack("<I", data[-4:])
    r = _Reader(payload)
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (blen,) = r.unpack("<Q")
        tensors[name] = np.frombuffer(r.take(blen), dtype=_DTYPES[code]).reshape(shape).copy()
    if r.pos != len(payload) or zlib.crc32(payload) != crc:
        raise CheckpointError("truncated or corrupted checkpoint")

    def group(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}

    state = None
    if "state" in header:
        s = header["state"]
        state = TrainState(s["step"], group("adam_m/"), group("adam_v/"), s["rng_state"], s["last_metrics"], s["best_metrics"])
    tc = header["train_config"]
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig(**tc) if tc else None,
        params=group("param/"),
        state=state,
        vocabulary=tuple(header["vocabulary"]),
        extra=group("extra/"),
        meta=header.get("meta", {}),
        version=version,
    )


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loop


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoint: Checkpoint
    model: JanusModel
    out_dir: Path | None


def batch_for_step(data: SequenceBatch, step: int, batch_size: int, seed: int) -> SequenceBatch:
    """Deterministic batch for a step: a seeded permutation per epoch."""
    n = len(data.ids)
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ValueError(f"corpus has {n} windows, fewer than batch size {batch_size}")
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    idx = perm[k * batch_size : (k + 1) * batch_size]
    return SequenceBatch(data.ids[idx], data.include[idx])


def compute_loss(batch: SequenceBatch, model: JanusModel, config: TrainConfig, step: int) -> LossOutput:
    if config.objective == "mlm":
        rng = np.random.default_rng([config.seed, 1, step])
        return mlm_loss(batch, model, rng, config.mask_frac, config.alpha_aux)
    return janus_loss(batch, model, config.alpha_aux, zero_backward=config.objective == "janus_left")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [_fmt(r[k]) for k in METRIC_FIELDS[1:]])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    corpus: Sequence[tuple[str, str]] | SequenceBatch,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    callback: Callable[[int, JanusModel], None] | None = None,
) -> TrainResult:
    """Seeded, deterministic pretraining loop.

    ``corpus`` is a list of FASTA-style records (windowed here) or a ready
    SequenceBatch of windows. ``stop_at`` ends early (for resume tests);
    ``callback(step, model)`` runs before the first step and after each step.
    """
    tc = train_config
    data = corpus if isinstance(corpus, SequenceBatch) else windows(corpus, tc.seq_len, tc.stride)
    if len(data.ids) == 0:
        raise ValueError("corpus yields no windows")
    if resume is not None:
        model = resume.model()
        state = resume.state
        if state is None:
            raise CheckpointError("checkpoint carries no training state")
        state = TrainState(state.step, {k: v.copy() for k, v in state.m.items()},
                           {k: v.copy() for k, v in state.v.items()}, state.rng_state,
                           dict(state.last_metrics), dict(state.best_metrics))
    else:
        model = JanusModel(model_config)
        state = TrainState.fresh(model.params, tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if resume is not None and metrics_path.exists():
            metrics = [r for r in read_metrics(metrics_path) if r["step"] <= state.step]

    def snapshot() -> Checkpoint:
        return Checkpoint(
            model_config=model.config,
            train_config=tc,
            params={k: v.data.copy() for k, v in model.params.items()},
            state=TrainState(state.step, {k: v.copy() for k, v in state.m.items()},
                             {k: v.copy() for k, v in state.v.items()}, state.rng_state,
                             dict(state.last_metrics), dict(state.best_metrics)),
        )

    last_good = snapshot()
    end = tc.steps if stop_at is None else min(stop_at, tc.steps)
    if callback is not None and state.step == 0:
        callback(0, model)
    while state.step < end:
        step = state.step
        t0 = time.perf_counter()
        batch = batch_for_step(data, step, tc.batch_size, tc.seed)
        lr = lr_at(step, tc)
        for p in model.params.values():
            p.zero_grad()
        try:
            loss = compute_loss(batch, model, tc, step)
            if not math.isfinite(loss.total.item()):
                raise NonFiniteError("loss is not finite")
            nx.backward(loss.total)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            grads, _ = clip_gradients(grads, tc.clip_norm)
            adamw_step(model.params, grads, state, lr, tc)
        except NonFiniteError as exc:
            nx.reset_tape()
            if out is not None:
                save_checkpoint(last_good, out / "last_good.jnsc")
                write_metrics(metrics_path, metrics)
            raise TrainingAborted(f"step {step + 1}: {exc}") from exc
        elapsed = time.perf_counter() - t0
        ce = loss.ce.item()
        row = {
            "step": state.step,
            "ce": ce,
            "aux": loss.aux.item(),
            "ppl": math.exp(ce),
            "lr": lr,
            "balance": _balance(loss.stats),
            "tps": batch.ids.size / elapsed if elapsed > 0 else 0.0,
        }
        metrics.append(row)
        state.last_metrics = {k: v for k, v in row.items() if k != "tps"}
        if not state.best_metrics or ce < state.best_metrics["ce"]:
            state.best_metrics = dict(state.last_metrics)
        if callback is not None:
            callback(state.step, model)
        if tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
            last_good = snapshot()
            if out is not None:
                save_checkpoint(last_good, out / f"ckpt_{state.step:06d}.jnsc")
    final = snapshot()
    if out is not None:
        write_metrics(metrics_path, metrics)
        save_checkpoint(final, out / ("final.jnsc" if state.step == tc.steps else f"ckpt_{state.step:06d}.jnsc"))
    return TrainResult(metrics, final, model, out)
