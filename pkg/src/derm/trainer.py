"""Optimization loop: batch window training, then daily incremental resumes.

The regime has two phases. Batch training runs a configured number of epochs
over an extended day window and ends in a snapshot whose watermark is the last
window day. Incremental training consumes exactly one new day per call, resumed
from a snapshot, and advances the watermark by one.

Determinism contract: every batch order and every negative draw comes from a
generator seeded by (rng_seed, day, epoch), so a run resumed from a snapshot
replays the same streams as an uninterrupted run, bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import TrainingSample
from .errors import (
    DivergedLossError,
    EmptyWindowError,
    IoFailureError,
    ShapeMismatchError,
    WatermarkGapError,
)
from .ioutil import crc64, read_sealed, write_sealed
from .objectives import (
    CONTRASTIVE,
    ContrastiveBatch,
    bce_loss,
    combined_loss,
    estimate_batch_frequencies,
    sampled_softmax_loss,
)
from .params import ParamDict, clone_params, zeros_like_params
from .towers import (
    UpstreamModel,
    embed_entity,
    embed_entity_backward,
    interaction_backward,
    interaction_forward,
)

SNAPSHOT_MAGIC = b"DSNP"
SNAPSHOT_VERSION = 1

# stream tags keep evaluation draws disjoint from any (day, epoch) pair
EVAL_STREAM = 0x7FFFFFFF


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.0
    batch_size: int = 8
    epochs: int = 2
    negatives_per_pair: int = 15
    seed: int = 0
    contrastive_weight: float = 1.0
    supervised_weights: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if not (self.learning_rate > 0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ValueError(
                f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.negatives_per_pair < 0:
            raise ValueError("negatives_per_pair must be >= 0")

    def weight_for(self, task: str) -> float:
        return float(self.supervised_weights.get(task, 1.0))


@dataclass
class ModelSnapshot:
    format_version: int
    watermark_day: int
    rng_seed: int
    params: ParamDict
    velocity: ParamDict


def _empty_velocity(params: ParamDict) -> ParamDict:
    return zeros_like_params(params)


def make_snapshot(model: UpstreamModel, watermark_day: int, rng_seed: int,
                  velocity: ParamDict | None = None) -> ModelSnapshot:
    vel = clone_params(velocity) if velocity is not None else _empty_velocity(model.params)
    return ModelSnapshot(SNAPSHOT_VERSION, watermark_day, rng_seed,
                         clone_params(model.params), vel)


def apply_snapshot(model: UpstreamModel, snapshot: ModelSnapshot) -> ParamDict:
    """Load snapshot weights into the model; returns a velocity copy to thread on."""
    model.params = clone_params(snapshot.params)
    return clone_params(snapshot.velocity)


def sgd_step(params: ParamDict, grads: ParamDict, lr: float,
             momentum: float = 0.0, velocity: ParamDict | None = None) -> None:
    """In-place SGD over parameters in sorted name order.

    With momentum: v <- momentum * v + g; p <- p - lr * v.
    """
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeMismatchError(
                f"gradient for {name} has shape {g.shape}, "
                f"parameter has {params[name].shape}"
            )
        if momentum > 0.0 and velocity is not None:
            v = velocity[name]
            v *= momentum
            v += g
            params[name] -= lr * v
        else:
            params[name] -= lr * g


def batch_step(model: UpstreamModel, samples: list[TrainingSample],
               cfg: TrainConfig, rng: np.random.Generator) -> tuple[float, ParamDict]:
    """One combined forward/backward pass over a minibatch.

    Returns (combined loss, gradient dict). Loss weights come from cfg; the
    contrastive positives are the samples whose first-task label is 1.
    """
    B = len(samples)
    grads = zeros_like_params(model.params)

    user_caches = []
    pin_caches = []
    U = np.zeros((B, model.embedding_dim))
    P = np.zeros((B, model.embedding_dim))
    for i, s in enumerate(samples):
        u, uc = embed_entity(model.user_cfg, model.params, "user", s.user)
        p, pc = embed_entity(model.pin_cfg, model.params, "pin", s.pin)
        U[i] = u
        P[i] = p
        user_caches.append(uc)
        pin_caches.append(pc)

    anchor_task = model.tasks[0]
    positives = np.array([s.labels.get(anchor_task, 0) == 1 for s in samples])
    pin_ids = [s.pin_id for s in samples]
    q = estimate_batch_frequencies(pin_ids)
    con = sampled_softmax_loss(
        ContrastiveBatch(U, P, pin_ids, positives), q,
        tau=model.temperature, negatives_per_pair=cfg.negatives_per_pair,
        rng_seed=rng,
    )

    w_con = cfg.contrastive_weight
    dU = w_con * con.du
    dP = w_con * con.dp
    grads["log_tau"][0] += w_con * con.dlog_tau

    sup_losses = {t: 0.0 for t in model.tasks}
    inter_caches = []
    sample_logits = []
    for i, s in enumerate(samples):
        logits, ic = interaction_forward(model, U[i], P[i], s.context)
        inter_caches.append(ic)
        sample_logits.append(logits)
        for t in model.tasks:
            loss_t, _ = bce_loss(logits[t], s.labels[t])
            sup_losses[t] += loss_t / B

    weights = {t: cfg.weight_for(t) for t in model.tasks}
    weights[CONTRASTIVE] = w_con
    total = combined_loss(sup_losses, con.loss, weights)

    for i, s in enumerate(samples):
        dlogits = {}
        for t in model.tasks:
            _, g = bce_loss(sample_logits[i][t], s.labels[t])
            dlogits[t] = weights[t] * g / B
        du_i, dp_i = interaction_backward(model, inter_caches[i], dlogits, grads)
        dU[i] += du_i
        dP[i] += dp_i

    for i, s in enumerate(samples):
        embed_entity_backward(model.user_cfg, model.params, "user",
                              user_caches[i], dU[i], grads)
        embed_entity_backward(model.pin_cfg, model.params, "pin",
                              pin_caches[i], dP[i], grads)
    return total, grads


def _day_batches(samples: list[TrainingSample], batch_size: int,
                 rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[j] for j in order[start:start + batch_size]]


def _train_one_day(model: UpstreamModel, samples: list[TrainingSample],
                   cfg: TrainConfig, rng_seed: int, day: int, epoch: int,
                   velocity: ParamDict, loss_log: list | None) -> None:
    rng = np.random.default_rng([rng_seed, day, epoch])
    for bi, batch in enumerate(_day_batches(samples, cfg.batch_size, rng)):
        loss, grads = batch_step(model, batch, cfg, rng)
        if not np.isfinite(loss):
            raise DivergedLossError(
                f"non-finite loss {loss} at day {day} epoch {epoch} batch {bi}; "
                f"lower the learning rate"
            )
        sgd_step(model.params, grads, cfg.learning_rate, cfg.momentum, velocity)
        if loss_log is not None:
            loss_log.append((day, epoch, bi, loss))


def train_batch_window(model: UpstreamModel,
                       data_by_day: dict[int, list[TrainingSample]],
                       cfg: TrainConfig,
                       loss_log: list | None = None) -> ModelSnapshot:
    """Epochs over an extended day window; snapshot watermark = last window day."""
    cfg.validate()
    days = sorted(data_by_day)
    if not days or all(len(data_by_day[d]) == 0 for d in days):
        raise EmptyWindowError("batch window contains no training samples")
    velocity = _empty_velocity(model.params)
    for epoch in range(cfg.epochs):
        for day in days:
            samples = data_by_day[day]
            if not samples:
                continue
            _train_one_day(model, samples, cfg, cfg.seed, day, epoch,
                           velocity, loss_log)
    return make_snapshot(model, days[-1], cfg.seed, velocity)


def train_incremental(snapshot: ModelSnapshot, new_day: int,
                      samples: list[TrainingSample], cfg: TrainConfig,
                      model: UpstreamModel,
                      loss_log: list | None = None) -> ModelSnapshot:
    """Single pass over one new day, resumed from the snapshot state."""
    cfg.validate()
    if new_day != snapshot.watermark_day + 1:
        raise WatermarkGapError(
            f"incremental day {new_day} does not follow watermark "
            f"{snapshot.watermark_day}"
        )
    velocity = apply_snapshot(model, snapshot)
    if samples:
        _train_one_day(model, samples, cfg, snapshot.rng_seed, new_day, 0,
                       velocity, loss_log)
    return make_snapshot(model, new_day, snapshot.rng_seed, velocity)


def evaluate_loss(model: UpstreamModel, samples: list[TrainingSample],
                  cfg: TrainConfig) -> float:
    """Mean combined loss over a sample slice, no updates, fixed eval stream."""
    if not samples:
        raise EmptyWindowError("no samples to evaluate")
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    total = 0.0
    count = 0
    for start in range(0, len(samples), cfg.batch_size):
        batch = samples[start:start + cfg.batch_size]
        loss, _ = batch_step(model, batch, cfg, rng)
        total += loss * len(batch)
        count += len(batch)
    return total / count


# ---------------------------------------------------------------------------
# snapshot serialization: little-endian, self-describing, CRC64 trailer


def _named_arrays(snapshot: ModelSnapshot) -> list[tuple[str, np.ndarray]]:
    out = [(name, snapshot.params[name]) for name in sorted(snapshot.params)]
    out += [("opt/" + name, snapshot.velocity[name])
            for name in sorted(snapshot.velocity)]
    return out


def snapshot_bytes(snapshot: ModelSnapshot) -> bytes:
    arrays = _named_arrays(snapshot)
    parts = [struct.pack("<4sIIQI", SNAPSHOT_MAGIC, snapshot.format_version,
                         snapshot.watermark_day, snapshot.rng_seed, len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def save_snapshot(snapshot: ModelSnapshot, path) -> None:
    arrays_blob = snapshot_bytes(snapshot)
    write_sealed(path, arrays_blob[:-8])


def load_snapshot(path) -> ModelSnapshot:
    body = read_sealed(path, f"snapshot {path}")
    head = struct.calcsize("<4sIIQI")
    if len(body) < head:
        raise IoFailureError(f"snapshot {path} is truncated")
    magic, version, watermark, rng_seed, count = struct.unpack_from("<4sIIQI", body)
    if magic != SNAPSHOT_MAGIC:
        raise IoFailureError(f"snapshot {path} has wrong magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise IoFailureError(f"snapshot {path} has unsupported version {version}")
    off = head
    params: ParamDict = {}
    velocity: ParamDict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        target = velocity if name.startswith("opt/") else params
        target[name.removeprefix("opt/")] = arr.astype(np.float64).copy()
    return ModelSnapshot(version, watermark, rng_seed, params, velocity)
