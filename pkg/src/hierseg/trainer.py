"""Data-parallel training: Adam with a staircase schedule, EMA shadows, gradient averaging.

Each worker draws its own batch, runs forward/backward on private tensors that
wrap a shared read-only parameter snapshot, and hands back a gradient map.
The reducer averages the maps in worker order and is the only writer of
parameters, optimizer moments and EMA shadows.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .architectures import NetConfig, NetworkSpec, build_network, forward
from .autodiff import BatchNormState, Tensor, backward, softmax_channels
from .classifier import decisions_to_labels, hierarchical_decide_array
from .losses import LOSS_KINDS, LossParams, compute_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 5e-5
    lr_decay: float = 0.95
    decay_steps: int = 10000
    ema_decay: float = 0.9999
    # cap the EMA decay at (1 + n) / (10 + n) after n updates
    ema_warmup: bool = True
    batch_per_worker: int = 8
    workers: int = 1
    max_iterations: int = 1000
    loss: str = "hdice"
    loss_params: LossParams = field(default_factory=LossParams)
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def validate(self) -> None:
        for name in ("base_lr", "lr_decay", "ema_decay"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.workers < 1 or self.batch_per_worker < 1:
            raise ValueError("workers and batch_per_worker must be >= 1")
        if self.max_iterations < 0 or self.decay_steps < 1:
            raise ValueError("max_iterations must be >= 0 and decay_steps >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        self.loss_params.validate()
        self.net.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        lp = d.pop("loss_params", {})
        net = d.pop("net", {})
        lp = {k: tuple(v) if isinstance(v, list) else v for k, v in lp.items()}
        net = {k: tuple(v) if isinstance(v, list) else v for k, v in net.items()}
        return cls(loss_params=LossParams(**lp), net=NetConfig(**net), **d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr * cfg.lr_decay ** (iteration // cfg.decay_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            0, beta1, beta2, eps,
        )


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)


def ema_update(shadow: dict[str, np.ndarray], params: Mapping[str, np.ndarray], decay: float) -> None:
    if not 0 < decay < 1:
        raise ValueError("decay must lie in (0, 1)")
    for name, s in shadow.items():
        s *= decay
        s += (1 - decay) * params[name]


def ema_decay_at(cfg: TrainConfig, updates: int) -> float:
    if cfg.ema_warmup:
        return min(cfg.ema_decay, (1.0 + updates) / (10.0 + updates))
    return cfg.ema_decay


def average_gradients(maps: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Per-parameter arithmetic mean, accumulated in worker order.

    The running form ``acc += (g - acc) / k`` returns identical inputs exactly.
    """
    if not maps:
        raise ValueError("no gradient maps to average")
    keys = set(maps[0])
    out = {}
    for w, m in enumerate(maps[1:], 1):
        if set(m) != keys:
            raise ValueError(f"worker {w} has different parameter names")
    for k in maps[0]:
        acc = np.array(maps[0][k], copy=True)
        for w, m in enumerate(maps[1:], 1):
            if m[k].shape != acc.shape:
                raise ValueError(f"worker {w}: {k} has shape {m[k].shape}, expected {acc.shape}")
            acc += (m[k] - acc) / (w + 1)
        out[k] = acc
    return out


# checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"HNCK1\0"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_OF = {np.dtype(v.newbyteorder("=")).str: k for k, v in _DTYPE_CODES.items()}


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam: AdamState
    stats: dict[str, BatchNormState]
    iteration: int
    config: dict

    @property
    def fingerprint(self) -> str:
        return TrainConfig.from_dict(self.config).fingerprint()

    def records(self) -> list[tuple[str, np.ndarray]]:
        recs = [("meta/config", np.frombuffer(json.dumps(self.config, sort_keys=True).encode(), dtype=np.uint8))]
        recs.append(("meta/iteration", np.array(self.iteration, dtype=np.int64)))
        recs.append(("adam/t", np.array(self.adam.t, dtype=np.int64)))
        recs.append(("adam/hyper", np.array([self.adam.beta1, self.adam.beta2, self.adam.eps], dtype=np.float64)))
        for name in sorted(self.params):
            recs.append((f"param/{name}", self.params[name]))
            recs.append((f"ema/{name}", self.ema[name]))
            recs.append((f"adam_m/{name}", self.adam.m[name]))
            recs.append((f"adam_v/{name}", self.adam.v[name]))
        for name in sorted(self.stats):
            st = self.stats[name]
            recs.append((f"bn_mean/{name}", st.mean))
            recs.append((f"bn_var/{name}", st.var))
            recs.append((f"bn_momentum/{name}", np.array(st.momentum, dtype=np.float64)))
        return recs

    def save(self, path) -> None:
        buf = bytearray(CKPT_MAGIC)
        recs = self.records()
        buf += struct.pack("<I", len(recs))
        for name, arr in recs:
            arr = np.asarray(arr)
            code = _CODE_OF.get(arr.dtype.newbyteorder("=").str)
            if code is None:
                raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
            nb = name.encode()
            buf += struct.pack("<I", len(nb)) + nb
            buf += struct.pack("<BB", code, arr.ndim)
            buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        Path(path).write_bytes(bytes(buf))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:6] != CKPT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic")
        pos = 6

        def take(n):
            nonlocal pos
            if pos + n > len(raw):
                raise CheckpointFormatError(f"{path}: truncated")
            chunk = raw[pos:pos + n]
            pos += n
            return chunk

        (count,) = struct.unpack("<I", take(4))
        recs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode()
            code, rank = struct.unpack("<BB", take(2))
            if code not in _DTYPE_CODES:
                raise CheckpointFormatError(f"{path}: unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            dt = _DTYPE_CODES[code]
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
            recs[name] = arr.astype(dt.newbyteorder("="))
        if pos != len(raw):
            raise CheckpointFormatError(f"{path}: trailing bytes")
        config = json.loads(recs.pop("meta/config").tobytes().decode())
        iteration = int(recs.pop("meta/iteration"))
        t = int(recs.pop("adam/t"))
        b1, b2, eps = (float(x) for x in recs.pop("adam/hyper"))
        params, ema, m, v = {}, {}, {}, {}
        means, vars_, moms = {}, {}, {}
        for key, arr in recs.items():
            kind, name = key.split("/", 1)
            {"param": params, "ema": ema, "adam_m": m, "adam_v": v,
             "bn_mean": means, "bn_var": vars_, "bn_momentum": moms}[kind][name] = arr
        stats = {k: BatchNormState(means[k], vars_[k], float(moms[k])) for k in means}
        return cls(params, ema, AdamState(m, v, t, b1, b2, eps), stats, iteration, config)


def initial_checkpoint(cfg: TrainConfig) -> Checkpoint:
    spec = build_network(cfg.net, seed=cfg.seed)
    params = {k: v.astype(np.float32) for k, v in spec.params.items()}
    return Checkpoint(
        params=params,
        ema={k: v.copy() for k, v in params.items()},
        adam=AdamState.zeros_like(params, cfg.beta1, cfg.beta2, cfg.adam_eps),
        stats=spec.copy_stats(),
        iteration=0,
        config=cfg.to_dict(),
    )


def network_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> NetworkSpec:
    cfg = TrainConfig.from_dict(ckpt.config)
    spec = build_network(cfg.net, seed=cfg.seed)
    source = ckpt.ema if use_ema else ckpt.params
    spec.params = {k: np.array(source[k]) for k in spec.params}
    spec.stats = {k: s.copy() for k, s in ckpt.stats.items()}
    return spec


# training loop ---------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    stats: dict[str, BatchNormState]
    empty: bool


def sample_batch(pool_size: int, cfg: TrainConfig, worker: int, iteration: int) -> np.ndarray:
    """Slice indices for one worker at one iteration, drawn with replacement."""
    rng = np.random.default_rng([cfg.seed + worker, iteration])
    return rng.integers(0, pool_size, size=cfg.batch_per_worker)


def worker_step(spec: NetworkSpec, params: Mapping[str, np.ndarray], stats: Mapping[str, BatchNormState],
                images: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> StepResult:
    """Forward and backward on a private replica; returns the loss and gradient map."""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    local_stats = {k: s.copy() for k, s in stats.items()}
    logits = forward(spec, Tensor(images), params=tensors, stats=local_stats, train=True)
    loss, empty = compute_loss(cfg.loss, logits, labels, cfg.loss_params)
    backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return StepResult(float(loss.data), grads, local_stats, empty)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, float, float]]

    def history_csv(self) -> str:
        return "iteration,loss,lr\n" + "".join(f"{i},{l:.9g},{r:.9g}\n" for i, l, r in self.history)


def train_step(spec: NetworkSpec, ckpt: Checkpoint, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, pool: ThreadPoolExecutor | None = None) -> tuple[float, float, bool]:
    """Advance ``ckpt`` by one iteration; returns (mean worker loss, lr, skipped)."""
    it = ckpt.iteration
    batches = [sample_batch(len(images), cfg, w, it) for w in range(cfg.workers)]
    snapshot = {k: v.copy() for k, v in ckpt.params.items()}
    for v in snapshot.values():
        v.flags.writeable = False

    def run(w):
        idx = batches[w]
        return worker_step(spec, snapshot, ckpt.stats, images[idx], labels[idx], cfg)

    if pool is None:
        results = [run(w) for w in range(cfg.workers)]
    else:
        results = list(pool.map(run, range(cfg.workers)))
    mean_loss = sum(r.loss for r in results) / len(results)
    if not math.isfinite(mean_loss):
        raise FloatingPointError(f"non-finite loss {mean_loss} at iteration {it} ({cfg.loss})")
    lr = lr_at(it, cfg)
    skipped = all(r.empty for r in results)
    if not skipped:
        grads = average_gradients([r.grads for r in results])
        adam_step(ckpt.params, grads, ckpt.adam, lr)
        ema_update(ckpt.ema, ckpt.params, ema_decay_at(cfg, ckpt.adam.t - 1))
        ckpt.stats = results[0].stats
    ckpt.iteration += 1
    return mean_loss, lr, skipped


def train(cfg: TrainConfig, data, resume: Checkpoint | None = None, out_dir=None,
          iterations: int | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``) up to ``cfg.max_iterations``.

    ``data`` is either a manifest path or a pair of stacked slice arrays
    ``(images (S, 4, H, W), labels (S, H, W))`` as produced by
    :func:`hierseg.data.slice_pool`.
    """
    cfg.validate()
    images, labels = _resolve_data(data)
    spec = build_network(cfg.net, seed=cfg.seed)
    ckpt = resume if resume is not None else initial_checkpoint(cfg)
    stop = cfg.max_iterations if iterations is None else min(cfg.max_iterations, ckpt.iteration + iterations)
    history = []
    out = Path(out_dir) if out_dir is not None else None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        while ckpt.iteration < stop:
            it = ckpt.iteration
            loss, lr, skipped = train_step(spec, ckpt, images, labels, cfg, pool)
            history.append((it, loss, lr))
            if skipped:
                logger.info("iteration %d: every pixel filtered, update skipped", it)
            if it % 100 == 0:
                logger.info("iteration %d loss %.5f lr %.3g", it, loss, lr)
            if out is not None and cfg.checkpoint_every and ckpt.iteration % cfg.checkpoint_every == 0:
                ckpt.save(out / f"checkpoint_{ckpt.iteration:06d}.hnck")
    finally:
        if pool is not None:
            pool.shutdown()
    result = TrainResult(ckpt, history)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "checkpoint.hnck")
        (out / "loss.csv").write_text(result.history_csv())
    return result


def _resolve_data(data) -> tuple[np.ndarray, np.ndarray]:
    from .data import load_case, read_manifest, slice_pool

    if isinstance(data, (str, Path)):
        cases = [load_case(v, l) for v, l in read_manifest(data)]
        if not cases:
            raise ValueError(f"manifest {data} lists no cases")
        images, labels = slice_pool(cases)
    else:
        images, labels = data
    if len(images) == 0:
        raise ValueError("no training slices")
    return np.asarray(images, dtype=np.float32), np.asarray(labels)


# inference -------------------------------------------------------------------


def predict_probs(spec: NetworkSpec, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Softmax probabilities (S, 5, H, W) in eval mode."""
    out = []
    params = spec.tensors(requires_grad=False, dtype=np.float32)
    for i in range(0, len(images), batch):
        x = Tensor(np.asarray(images[i:i + batch], dtype=np.float32))
        out.append(softmax_channels(forward(spec, x, params=params, train=False)).data)
    return np.concatenate(out)


def predict_labels(spec: NetworkSpec, images: np.ndarray, hierarchical: bool) -> np.ndarray:
    """Label maps from either the nested-region classifier or a plain argmax."""
    q = predict_probs(spec, images).astype(np.float64)
    if not hierarchical:
        return q.argmax(axis=1).astype(np.uint8)
    p0 = np.clip(q[:, 1:].sum(axis=1), 0, 1)
    p1 = np.clip(q[:, [1, 3, 4]].sum(axis=1), 0, 1)
    p2 = np.clip(q[:, 4], 0, 1)
    return decisions_to_labels(hierarchical_decide_array(p0, p1, p2))


def evaluate(ckpt: Checkpoint, cases, use_ema: bool = True, hierarchical: bool | None = None):
    """Score a checkpoint on whole volumes; returns a :class:`hierseg.metrics.RegionScores`.

    ``hierarchical`` defaults to True for networks trained with the
    hierarchical dice loss and False otherwise.
    """
    from .data import normalize
    from .metrics import eval_table

    spec = network_from_checkpoint(ckpt, use_ema)
    if hierarchical is None:
        hierarchical = ckpt.config.get("loss") == "hdice"
    preds, truths = [], []
    for vol, lab in cases:
        images = normalize(vol).transpose(0, 3, 1, 2).astype(np.float32)
        preds.append(predict_labels(spec, images, hierarchical))
        truths.append(lab)
    return eval_table(preds, truths)
