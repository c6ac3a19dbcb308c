"""
Teacher-forced cross-entropy training with Adam and a warmup schedule.

All randomness is derived from ``TrainConfig.seed`` through independent
streams: parameter init, the per-epoch data order, and per-step dropout.
The pair ``(seed, step)`` is therefore the whole RNG state, which is what
makes resuming from a checkpoint bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tc
from . import text
from .data import Manifest, read_feature_file
from .errors import ConfigError, ContractError, DataError, FormatError, TrainingError
from .tensor import Tensor, rng_for
from .transformer import ModelConfig, forward, init_params

CKPT_MAGIC = b"CAPC"
CKPT_VERSION = 1

_STREAM_ORDER, _STREAM_DROPOUT, _STREAM_INIT = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 500
    lr_base: float = 0.5
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 100
    label: str = "run"

    def __post_init__(self):
        if self.batch_size < 1 or self.warmup_steps < 1:
            raise ConfigError("batch_size and warmup_steps must be positive")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("max_steps and checkpoint_every must be non-negative")
        if self.lr_base <= 0 or self.adam_eps <= 0 or self.grad_clip_norm <= 0:
            raise ConfigError("lr_base, adam_eps and grad_clip_norm must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict
    adam_m: dict
    adam_v: dict
    step: int = 0
    vocab_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def rng_state(self) -> dict:
        return {"seed": self.train_config.seed, "step": self.step}

    def param_tensors(self) -> dict:
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}


@dataclass
class Sample:
    image_id: str
    features: np.ndarray
    token_ids: list


# ---------------------------------------------------------------------------
# objective and optimizer
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, targets, pad_id: int = text.PAD) -> Tensor:
    """Mean of -log p(target) over the non-pad positions."""
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ContractError(f"targets shape {tgt.shape} does not match logits {logits.shape}")
    keep = tgt != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ContractError("every target position is padding")
    picked = tc.pick(tc.log_softmax(logits, axis=-1), np.where(keep, tgt, 0))
    return tc.tensor_sum(picked * keep) * (-1.0 / n)


def lr_schedule(step: int, d_model: int, warmup_steps: int, lr_base: float) -> float:
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    return lr_base * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def adam_step(params: dict, grads: dict, moments: tuple, step: int, cfg: TrainConfig,
              d_model: int = 1, lr: float | None = None) -> float:
    """One bias-corrected Adam update, in place.  ``moments`` is ``(m, v)``, two dicts keyed
    like ``params``.  ``lr`` defaults to the warmup schedule.  Returns the rate used."""
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {step}")
    if lr is None:
        lr = lr_schedule(step, d_model, cfg.warmup_steps, cfg.lr_base)
    m, v = moments
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.adam_eps)
    return lr


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def load_samples(manifest: Manifest, vocab: text.Vocab, max_len: int) -> list:
    samples = []
    for rec in manifest:
        path = manifest.feature_file(rec)
        if not path.exists():
            raise DataError(f"missing feature file {path}")
        feats = read_feature_file(path)
        for cap in rec.captions:
            ids = text.encode(text.normalize_and_tokenize(cap), vocab, max_len)
            samples.append(Sample(rec.image_id, feats, ids))
    return samples


def make_batch(samples: list):
    """Stack features ``[B, S, F]`` and right-pad decoder inputs/targets with pad ids."""
    shapes = {s.features.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"feature grids in one batch must share a shape, got {sorted(shapes)}")
    feats = np.stack([s.features for s in samples])
    T = max(len(s.token_ids) for s in samples) - 1
    inputs = np.full((len(samples), T), text.PAD, dtype=np.int64)
    targets = np.full((len(samples), T), text.PAD, dtype=np.int64)
    for i, s in enumerate(samples):
        ids = s.token_ids
        inputs[i, : len(ids) - 1] = ids[:-1]
        targets[i, : len(ids) - 1] = ids[1:]
    return feats, inputs, targets


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(step - 1, per_epoch)
    order = rng_for(seed, _STREAM_ORDER, epoch).permutation(n)
    return order[pos * batch_size:(pos + 1) * batch_size]


def batch_loss(params: dict, config: ModelConfig, batch, mode: str = "eval",
               rng: np.random.Generator | None = None) -> Tensor:
    feats, inputs, targets = batch
    return cross_entropy_loss(forward(feats, inputs, params, config, mode, rng), targets)


def dataset_loss(samples: list, params: dict, config: ModelConfig, batch_size: int = 64) -> float:
    """Token-weighted eval-mode loss over all samples."""
    total, count = 0.0, 0
    with tc.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = make_batch(samples[i:i + batch_size])
            n = int((batch[2] != text.PAD).sum())
            total += batch_loss(params, config, batch).item() * n
            count += n
    return total / count


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    key = name.encode("utf-8")
    head = struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "rng": ckpt.rng_state,
        "vocab_hash": ckpt.vocab_hash,
        "extra": ckpt.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = [("param/" + k, v) for k, v in ckpt.params.items()]
    tensors += [("adam_m/" + k, v) for k, v in ckpt.adam_m.items()]
    tensors += [("adam_v/" + k, v) for k, v in ckpt.adam_v.items()]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(k, v) for k, v in tensors]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
        version, n_meta = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(raw[off:off + n_meta].decode("utf-8"))
        off += n_meta
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4:off + 4 + klen].decode("utf-8")
            off += 4 + klen
            (ndim,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if off + 8 * n > len(raw):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            group, key = name.split("/", 1)
            groups[group][key] = arr
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        params=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
        step=meta["step"], vocab_hash=meta["vocab_hash"], extra=meta.get("extra", {}),
    )


def write_loss_curve(curve: list, path) -> None:
    lines = ["step,loss"] + [f"{s},{loss!r}" for s, loss in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def initial_checkpoint(model_config: ModelConfig, train_config: TrainConfig,
                       vocab_hash: str = "") -> Checkpoint:
    params = init_params(model_config, rng_for(train_config.seed, _STREAM_INIT))
    arrays = {k: p.data.copy() for k, p in params.items()}
    zeros = {k: np.zeros_like(a) for k, a in arrays.items()}
    return Checkpoint(model_config, train_config, arrays, zeros,
                      {k: z.copy() for k, z in zeros.items()}, 0, vocab_hash)


def train(manifest: Manifest | None, vocab: text.Vocab, model_config: ModelConfig,
          train_config: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
          samples: list | None = None, on_step: Callable | None = None):
    """Run (or continue) training up to ``train_config.max_steps``.

    Returns ``(checkpoint, curve)`` where ``curve`` lists ``(step, batch_loss)``
    for the steps run in this call.  With ``out_dir`` set, periodic and final
    checkpoints plus ``loss.csv`` are written there.
    """
    if model_config.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    if samples is None:
        samples = load_samples(manifest, vocab, model_config.max_len)
    if not samples:
        raise DataError("no training samples")
    if resume is None:
        ckpt = initial_checkpoint(model_config, train_config, vocab.digest())
    else:
        if resume.vocab_hash and resume.vocab_hash != vocab.digest():
            raise ConfigError("checkpoint was trained with a different vocabulary")
        if resume.model_config != model_config:
            raise ConfigError("checkpoint model config does not match")
        ckpt = resume
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = ckpt.param_tensors()
    m = {k: a.copy() for k, a in ckpt.adam_m.items()}
    v = {k: a.copy() for k, a in ckpt.adam_v.items()}
    curve, last_good = [], resume
    cfg = train_config

    def snapshot(step):
        return Checkpoint(model_config, cfg, {k: p.data.copy() for k, p in params.items()},
                          {k: a.copy() for k, a in m.items()}, {k: a.copy() for k, a in v.items()},
                          step, vocab.digest())

    for step in range(ckpt.step + 1, cfg.max_steps + 1):
        idx = batch_indices(step, len(samples), cfg.batch_size, cfg.seed)
        batch = make_batch([samples[i] for i in idx])
        for p in params.values():
            p.grad = None
        loss = batch_loss(params, model_config, batch, "train", rng_for(cfg.seed, _STREAM_DROPOUT, step))
        tc.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
        try:
            clip_grad_norm(grads, cfg.grad_clip_norm)
            adam_step(params, grads, (m, v), step, cfg, model_config.d_model)
        except TrainingError as exc:
            exc.last_checkpoint = last_good
            raise
        curve.append((step, loss.item()))
        if on_step is not None:
            on_step(step, loss.item())
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            last_good = snapshot(step)
            save_checkpoint(last_good, out / f"step_{step:06d}.capc")

    final = snapshot(max(ckpt.step, cfg.max_steps))
    if out is not None:
        save_checkpoint(final, out / "last.capc")
        write_loss_curve(curve, out / "loss.csv")
    return final, curve
