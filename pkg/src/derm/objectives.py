"""Training objectives for the upstream model.

The contrastive term is an in-batch sampled softmax between user and pin
embeddings with a popularity-bias correction: each candidate logit is
u.p/tau - log Q(p), where Q(p) is the pin's estimated in-batch frequency.
Only pairs carrying a positive label contribute; negatives are drawn from
the other pins of the same batch, without replacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, NonPositiveTauError, UnknownTaskError
from .numerics import sigmoid

CONTRASTIVE = "contrastive"

DEFAULT_NEGATIVES_PER_PAIR = 15


@dataclass
class ContrastiveBatch:
    """Aligned per-pair arrays; embeddings are unit-norm rows."""

    user_embs: np.ndarray  # (B, D)
    pin_embs: np.ndarray  # (B, D)
    pin_ids: list[int]
    positives: np.ndarray  # (B,) bool mask of click/conversion positives


@dataclass
class ContrastiveResult:
    loss: float
    du: np.ndarray  # (B, D) grads w.r.t. user embeddings
    dp: np.ndarray  # (B, D) grads w.r.t. pin embeddings
    dlog_tau: float
    num_positives: int
    empty_positives: bool


def estimate_batch_frequencies(pin_ids: list[int]) -> dict[int, float]:
    """Q(p) = count of p in batch / batch size."""
    if not pin_ids:
        raise EmptyBatchError("cannot estimate frequencies of an empty batch")
    n = len(pin_ids)
    counts: dict[int, int] = {}
    for pid in pin_ids:
        counts[pid] = counts.get(pid, 0) + 1
    return {pid: c / n for pid, c in counts.items()}


def sampled_softmax_loss(
    batch: ContrastiveBatch,
    q: dict[int, float],
    tau: float,
    negatives_per_pair: int = DEFAULT_NEGATIVES_PER_PAIR,
    rng_seed: int | np.random.Generator = 0,
) -> ContrastiveResult:
    """Bias-corrected in-batch sampled-softmax loss, averaged over positives.

    Returns the loss together with gradients w.r.t. every user embedding,
    every pin embedding involved as positive or sampled negative, and
    log(tau). A batch with no positive pairs yields loss 0, zero grads and
    the empty_positives flag instead of an error.
    """
    if tau <= 0:
        raise NonPositiveTauError(f"tau must be positive, got {tau}")
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    U, P = batch.user_embs, batch.pin_embs
    ids = batch.pin_ids
    B = U.shape[0]
    du = np.zeros_like(U)
    dp = np.zeros_like(P)
    dlog_tau = 0.0
    pos_idx = [i for i in range(B) if batch.positives[i]]
    if not pos_idx:
        return ContrastiveResult(0.0, du, dp, 0.0, 0, True)

    total = 0.0
    inv_n = 1.0 / len(pos_idx)
    for i in pos_idx:
        # candidate negatives: other batch positions holding a different pin
        cand = [j for j in range(B) if ids[j] != ids[i]]
        k = min(negatives_per_pair, len(cand))
        negs = sorted(rng.choice(len(cand), size=k, replace=False)) if k else []
        members = [i] + [cand[j] for j in negs]
        sims = np.array([float(U[i] @ P[j]) for j in members])
        logits = sims / tau - np.log(np.array([q[ids[j]] for j in members]))
        m = logits.max()
        e = np.exp(logits - m)
        z = e.sum()
        total += float(np.log(z) + m - logits[0])
        soft = e / z
        # dL/dlogit_j = softmax_j - [j == positive]
        dlogit = soft.copy()
        dlogit[0] -= 1.0
        dlogit *= inv_n
        for t, j in enumerate(members):
            du[i] += dlogit[t] * P[j] / tau
            dp[j] += dlogit[t] * U[i] / tau
            dlog_tau += dlogit[t] * (-sims[t] / tau)
    return ContrastiveResult(total * inv_n, du, dp, dlog_tau, len(pos_idx), False)


def bce_loss(logit: float, label: int) -> tuple[float, float]:
    """Stable binary cross-entropy from a logit; returns (loss, dloss/dlogit)."""
    x = float(logit)
    y = float(label)
    loss = max(x, 0.0) - x * y + np.log1p(np.exp(-abs(x)))
    return float(loss), float(sigmoid(np.float64(x)) - y)


def combined_loss(
    supervised_losses: dict[str, float],
    contrastive: float,
    weights: dict[str, float] | None = None,
) -> float:
    """Weighted sum of per-task supervised losses and the contrastive term.

    Weight keys are task names plus the reserved key "contrastive"; any
    unknown key is rejected. Missing weights default to 1.0.
    """
    weights = dict(weights or {})
    for key in weights:
        if key != CONTRASTIVE and key not in supervised_losses:
            raise UnknownTaskError(f"weight given for unknown task {key!r}")
        if weights[key] < 0:
            raise UnknownTaskError(f"negative weight for {key!r}")
    total = weights.get(CONTRASTIVE, 1.0) * contrastive
    for task, value in supervised_losses.items():
        total += weights.get(task, 1.0) * value
    return float(total)
