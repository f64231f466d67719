"""Downstream CTR/CVR consumers, evaluation metrics, sensitivity experiments.

Architecture per sample: pretrained embeddings fetched from the store are
concatenated, reduced by an affine projection, and crossed by a small DCN
stack (the quadratic cost lives in these feature interactions, which is why
the projection feeds them). The crossed block, the base features, presence
flags, and an attention-pooled view of the user's engagement sequence meet
in a concatenation layer, then a softmax-gated mixture of expert MLPs and a
scalar head produce the logit. Base features carry no entity ids; whatever
id-level signal the consumer gets arrives through the served embeddings.

Missing store lookups become a zero vector with presence flag 0, so serving
gaps degrade smoothly instead of erroring.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TrainingSample
from .errors import (
    DegenerateLabelsError,
    DivergedLossError,
    EmptyInputError,
    MissingBaselineError,
    ShapeMismatchError,
    UnknownTaskError,
)
from .lifecycle import AggregationHeuristic
from .params import ParamDict, zeros_like_params
from .store import StoreGeneration, StoreKey

CTR_TASK = "ctr"
CVR_TASK = "cvr"
TASK_LABELS = {CTR_TASK: "click", CVR_TASK: "conversion"}

# derm input name -> (source model tag, entity kind)
DERM_INPUTS = {
    "ctr-user": ("ctr-upstream", "user"),
    "ctr-pin": ("ctr-upstream", "pin"),
    "cvr-user": ("cvr-upstream", "user"),
    "cvr-pin": ("cvr-upstream", "pin"),
}


# ---------------------------------------------------------------------------
# metrics


def _check_binary(labels: np.ndarray) -> None:
    if labels.size == 0:
        raise DegenerateLabelsError("no labels")
    if not np.isin(labels, (0, 1)).all():
        raise DegenerateLabelsError("labels must be 0/1")


def roc_auc(scores, labels) -> float:
    """Exact ROC-AUC via sorting; ties get half credit.

    Equals the pair-counting probability P(s+ > s-) + 0.5 P(s+ == s-).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(
            f"need both classes, got {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks within tie groups
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Average precision: step-wise sum of precision over recall increments.

    Thresholds sweep distinct scores from high to low; a tie block enters
    as a whole before precision is read off.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise DegenerateLabelsError("need at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    area = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        block_pos = int(y[i:j + 1].sum())
        tp += block_pos
        seen += j - i + 1
        if block_pos:
            precision = tp / seen
            recall_step = block_pos / n_pos
            area += precision * recall_step
        i = j + 1
    return area


@dataclass
class EvalReport:
    roc_auc: float
    pr_auc: float
    samples: int
    positives: int


# ---------------------------------------------------------------------------
# configuration and feature assembly


@dataclass(frozen=True)
class DownstreamConfig:
    task: str = CTR_TASK
    derm_inputs: tuple[str, ...] = ()
    projection_dim: int | None = 16
    num_experts: int = 4
    cross_layers: int = 2
    sequence_encoder: bool = True
    expert_hidden: int = 16
    expert_out: int = 16
    seq_dim: int = 6

    def validate(self, derm_dim_total: int | None = None) -> None:
        if self.task not in TASK_LABELS:
            raise UnknownTaskError(f"unknown downstream task {self.task!r}")
        for name in self.derm_inputs:
            if name not in DERM_INPUTS:
                raise UnknownTaskError(f"unknown derm input {name!r}")
        if len(set(self.derm_inputs)) != len(self.derm_inputs):
            raise UnknownTaskError("duplicate derm inputs")
        if self.num_experts < 1:
            raise ShapeMismatchError("num_experts must be >= 1")
        if self.cross_layers < 0:
            raise ShapeMismatchError("cross_layers must be >= 0")
        if self.projection_dim is not None:
            if self.projection_dim < 1:
                raise ShapeMismatchError("projection_dim must be >= 1")
            if derm_dim_total is not None and self.projection_dim > derm_dim_total:
                raise ShapeMismatchError(
                    f"projection_dim {self.projection_dim} exceeds the "
                    f"concatenated embedding dim {derm_dim_total}"
                )

    @property
    def label(self) -> str:
        return TASK_LABELS[self.task]


def cross_layer_multiplies(dim: int, layers: int) -> int:
    """Matrix-product multiply count of the cross stack: d*d per layer.

    The elementwise gate adds a further d multiplies per layer but that
    term is linear and not what the d**2 * l scaling is about, so it is
    excluded from the reported figure.
    """
    return layers * dim * dim


@dataclass
class FeatureBatch:
    base: np.ndarray  # (B, base_dim)
    derm: np.ndarray  # (B, derm_dim_total), zeros when absent
    flags: np.ndarray  # (B, n_inputs)
    hist: list[list[int]]
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.labels)

    def slice(self, idx) -> "FeatureBatch":
        return FeatureBatch(self.base[idx], self.derm[idx], self.flags[idx],
                            [self.hist[i] for i in idx], self.labels[idx])


def build_features(samples: list[TrainingSample], cfg: DownstreamConfig,
                   generations: dict[str, StoreGeneration]) -> FeatureBatch:
    """Assemble the downstream input matrices for a sample list.

    generations maps source tags to loaded store generations; lookups that
    miss produce a zero block with presence flag 0.  Present blocks are
    L2-normalized so the consumer sees directions only: aggregation heuristics
    differ wildly in vector magnitude (lifetime sums grow without bound) and
    magnitude would otherwise dominate the projection layer's input scale.
    """
    if not samples:
        raise EmptyInputError("no samples to featurize")
    label_key = cfg.label
    dims = [generations[DERM_INPUTS[name][0]].dim for name in cfg.derm_inputs]
    total = sum(dims)
    B = len(samples)
    first = samples[0]
    base_dim = (len(first.user.dense["profile"]) + len(first.pin.dense["attrs"])
                + 1)
    base = np.zeros((B, base_dim))
    derm = np.zeros((B, total))
    flags = np.zeros((B, len(cfg.derm_inputs)))
    hist = []
    labels = np.zeros(B)
    for i, s in enumerate(samples):
        base[i] = np.concatenate([
            s.user.dense["profile"], s.pin.dense["attrs"],
            s.context.dense["hour"],
        ])
        off = 0
        for k, name in enumerate(cfg.derm_inputs):
            source, kind = DERM_INPUTS[name]
            entity_id = s.user_id if kind == "user" else s.pin_id
            vec = generations[source].lookup(StoreKey(kind, entity_id, source))
            if vec is not None:
                v = vec.astype(np.float64)
                norm = np.linalg.norm(v)
                if norm > 0.0:
                    v = v / norm
                derm[i, off:off + dims[k]] = v
                flags[i, k] = 1.0
            off += dims[k]
        hist.append(list(s.user.sequence.get("hist", [])))
        labels[i] = s.labels[label_key]
    return FeatureBatch(base, derm, flags, hist, labels)


# ---------------------------------------------------------------------------
# model


class DownstreamModel:
    """Hand-differentiated consumer model over assembled feature batches."""

    def __init__(self, cfg: DownstreamConfig, base_dim: int, derm_dim: int,
                 seq_vocab: int, seed: int):
        cfg.validate(derm_dim if cfg.derm_inputs else None)
        self.cfg = cfg
        self.base_dim = base_dim
        self.derm_dim = derm_dim
        self.seq_vocab = seq_vocab
        self.has_derm = bool(cfg.derm_inputs)
        if self.has_derm:
            self.proj_dim = cfg.projection_dim or derm_dim
        else:
            self.proj_dim = 0
        self.concat_dim = base_dim + self.proj_dim
        if self.has_derm:
            self.concat_dim += len(cfg.derm_inputs)  # presence flags
        if cfg.sequence_encoder:
            self.concat_dim += cfg.seq_dim
        self.params = self._init_params(seed)

    def _init_params(self, seed: int) -> ParamDict:
        cfg = self.cfg
        rng = np.random.default_rng([seed, 0xD0DE])
        p: ParamDict = {}
        if self.has_derm:
            p["proj/W"] = rng.normal(size=(self.proj_dim, self.derm_dim)) \
                / np.sqrt(self.derm_dim)
            p["proj/b"] = np.zeros(self.proj_dim)
            for l in range(cfg.cross_layers):
                p[f"cross/{l}/W"] = rng.normal(
                    size=(self.proj_dim, self.proj_dim)) / np.sqrt(self.proj_dim)
                p[f"cross/{l}/b"] = np.zeros(self.proj_dim)
        if cfg.sequence_encoder:
            p["seq/table"] = rng.normal(size=(self.seq_vocab, cfg.seq_dim)) \
                / np.sqrt(cfg.seq_dim)
            p["seq/query"] = rng.normal(size=cfg.seq_dim)
        d = self.concat_dim
        p["moe/gate/W"] = rng.normal(size=(cfg.num_experts, d)) / np.sqrt(d)
        p["moe/gate/b"] = np.zeros(cfg.num_experts)
        for e in range(cfg.num_experts):
            p[f"moe/expert{e}/W1"] = rng.normal(
                size=(cfg.expert_hidden, d)) / np.sqrt(d)
            p[f"moe/expert{e}/b1"] = np.zeros(cfg.expert_hidden)
            p[f"moe/expert{e}/W2"] = rng.normal(
                size=(cfg.expert_out, cfg.expert_hidden)) / np.sqrt(cfg.expert_hidden)
            p[f"moe/expert{e}/b2"] = np.zeros(cfg.expert_out)
        p["head/w"] = rng.normal(size=cfg.expert_out) / np.sqrt(cfg.expert_out)
        p["head/b"] = np.zeros(1)
        return p

    # forward ---------------------------------------------------------------

    def forward(self, batch: FeatureBatch):
        cfg = self.cfg
        p = self.params
        B = len(batch)
        pieces = [batch.base]
        cache: dict = {"batch": batch}
        if self.has_derm:
            if batch.derm.shape[1] != self.derm_dim:
                raise ShapeMismatchError(
                    f"derm block is {batch.derm.shape[1]}-dim, model expects "
                    f"{self.derm_dim}"
                )
            Z = batch.derm @ p["proj/W"].T + p["proj/b"]
            cache["Z0"] = Z
            zs, acts = [Z], []
            for l in range(cfg.cross_layers):
                A = zs[-1] @ p[f"cross/{l}/W"].T + p[f"cross/{l}/b"]
                acts.append(A)
                zs.append(cache["Z0"] * A + zs[-1])
            cache["zs"], cache["acts"] = zs, acts
            pieces.append(zs[-1])
            pieces.append(batch.flags)
        if cfg.sequence_encoder:
            pooled = np.zeros((B, cfg.seq_dim))
            seq_cache = []
            scale = 1.0 / np.sqrt(cfg.seq_dim)
            for i, ids in enumerate(batch.hist):
                if not ids:
                    seq_cache.append(None)
                    continue
                T = p["seq/table"][ids]
                scores = (T @ p["seq/query"]) * scale
                a = np.exp(scores - scores.max())
                a /= a.sum()
                pooled[i] = a @ T
                seq_cache.append((ids, T, a))
            cache["seq"] = seq_cache
            pieces.append(pooled)
        X = np.concatenate(pieces, axis=1)
        cache["X"] = X
        G = X @ p["moe/gate/W"].T + p["moe/gate/b"]
        G = G - G.max(axis=1, keepdims=True)
        Pg = np.exp(G)
        Pg /= Pg.sum(axis=1, keepdims=True)
        cache["Pg"] = Pg
        out = np.zeros((B, cfg.expert_out))
        hs, os = [], []
        for e in range(cfg.num_experts):
            H = np.maximum(0.0, X @ p[f"moe/expert{e}/W1"].T + p[f"moe/expert{e}/b1"])
            O = H @ p[f"moe/expert{e}/W2"].T + p[f"moe/expert{e}/b2"]
            hs.append(H)
            os.append(O)
            out += Pg[:, e:e + 1] * O
        cache["hs"], cache["os"], cache["moe_out"] = hs, os, out
        logits = out @ p["head/w"] + p["head/b"][0]
        return logits, cache

    # backward --------------------------------------------------------------

    def backward(self, cache, dlogits: np.ndarray, grads: ParamDict) -> None:
        cfg = self.cfg
        p = self.params
        out = cache["moe_out"]
        grads["head/w"] += out.T @ dlogits
        grads["head/b"][0] += dlogits.sum()
        dout = np.outer(dlogits, p["head/w"])

        X = cache["X"]
        Pg = cache["Pg"]
        dX = np.zeros_like(X)
        dPg = np.zeros_like(Pg)
        for e in range(cfg.num_experts):
            H, O = cache["hs"][e], cache["os"][e]
            dO = Pg[:, e:e + 1] * dout
            dPg[:, e] = (dout * O).sum(axis=1)
            grads[f"moe/expert{e}/W2"] += dO.T @ H
            grads[f"moe/expert{e}/b2"] += dO.sum(axis=0)
            dH = (dO @ p[f"moe/expert{e}/W2"]) * (H > 0)
            grads[f"moe/expert{e}/W1"] += dH.T @ X
            grads[f"moe/expert{e}/b1"] += dH.sum(axis=0)
            dX += dH @ p[f"moe/expert{e}/W1"]
        dG = Pg * (dPg - (dPg * Pg).sum(axis=1, keepdims=True))
        grads["moe/gate/W"] += dG.T @ X
        grads["moe/gate/b"] += dG.sum(axis=0)
        dX += dG @ p["moe/gate/W"]

        # split the concatenation layer gradient
        off = self.base_dim  # base features are inputs, not params
        if self.has_derm:
            dZL = dX[:, off:off + self.proj_dim]
            off += self.proj_dim + len(cfg.derm_inputs)  # flags are inputs
            zs, acts = cache["zs"], cache["acts"]
            Z0 = cache["Z0"]
            dZ = dZL.copy()
            dZ0 = np.zeros_like(Z0)
            for l in range(cfg.cross_layers - 1, -1, -1):
                dA = dZ * Z0
                dZ0 += dZ * acts[l]
                grads[f"cross/{l}/W"] += dA.T @ zs[l]
                grads[f"cross/{l}/b"] += dA.sum(axis=0)
                dZ = dZ + dA @ p[f"cross/{l}/W"]
            dZ0 += dZ
            batch = cache["batch"]
            grads["proj/W"] += dZ0.T @ batch.derm
            grads["proj/b"] += dZ0.sum(axis=0)
        if cfg.sequence_encoder:
            dpooled = dX[:, off:off + cfg.seq_dim]
            scale = 1.0 / np.sqrt(cfg.seq_dim)
            table = p["seq/table"]
            q = p["seq/query"]
            for i, entry in enumerate(cache["seq"]):
                if entry is None:
                    continue
                ids, T, a = entry
                dp = dpooled[i]
                da = T @ dp
                dT = np.outer(a, dp)
                ds = a * (da - float(da @ a))
                grads["seq/query"] += (T.T @ ds) * scale
                dT += np.outer(ds, q) * scale
                np.add.at(grads["seq/table"], ids, dT)

    def loss_and_grads(self, batch: FeatureBatch):
        logits, cache = self.forward(batch)
        y = batch.labels
        # stable binary cross entropy, mean over the batch
        losses = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
        loss = float(losses.mean())
        # sigmoid via tanh stays finite for any logit magnitude
        sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
        dlogits = (sig - y) / len(batch)
        grads = zeros_like_params(self.params)
        self.backward(cache, dlogits, grads)
        return loss, grads


def project_embeddings(vec: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine reduction of a concatenated embedding vector."""
    vec = np.asarray(vec, dtype=np.float64)
    if W.shape[1] != len(vec) or W.shape[0] != len(b):
        raise ShapeMismatchError(
            f"projection {W.shape} incompatible with input {len(vec)} "
            f"and bias {len(b)}"
        )
    return W @ vec + b


@dataclass
class DownstreamTrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 4
    momentum: float = 0.9
    max_grad_norm: float = 5.0
    weight_decay: float = 1e-3
    seed: int = 0


def train_downstream(model: DownstreamModel, features: FeatureBatch,
                     cfg: DownstreamTrainConfig,
                     loss_log: list | None = None) -> None:
    """Minibatch momentum SGD on BCE; deterministic given (features, cfg.seed).

    The learning rate decays linearly to a tenth of its starting value over
    the run so late epochs refine rather than overshoot.  Gradients are
    clipped by global norm and weights decay toward zero: the cross layers
    are multiplicative, so unchecked weight growth compounds through the
    forward pass until it overflows.
    """
    n = len(features)
    if n == 0:
        raise EmptyInputError("no training features")
    velocity = zeros_like_params(model.params)
    total = cfg.epochs * ((n + cfg.batch_size - 1) // cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 0xD5, epoch])
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(features.slice(idx))
            if not np.isfinite(loss):
                raise DivergedLossError(
                    f"non-finite downstream loss at epoch {epoch}"
                )
            if cfg.max_grad_norm > 0.0:
                gnorm = np.sqrt(sum(float((g * g).sum())
                                    for g in grads.values()))
                if gnorm > cfg.max_grad_norm:
                    scale = cfg.max_grad_norm / gnorm
                    for g in grads.values():
                        g *= scale
            frac = step / total if total > 1 else 0.0
            lr = cfg.learning_rate * (1.0 - 0.9 * frac)
            for name, g in grads.items():
                if cfg.weight_decay > 0.0:
                    g = g + cfg.weight_decay * model.params[name]
                velocity[name] = cfg.momentum * velocity[name] + g
                model.params[name] -= lr * velocity[name]
            step += 1
            if loss_log is not None:
                loss_log.append(loss)


def evaluate(model: DownstreamModel, features: FeatureBatch) -> EvalReport:
    logits, _ = model.forward(features)
    y = features.labels.astype(int)
    return EvalReport(
        roc_auc=roc_auc(logits, y),
        pr_auc=pr_auc(logits, y),
        samples=len(features),
        positives=int(y.sum()),
    )


# ---------------------------------------------------------------------------
# sensitivity experiments


@dataclass(frozen=True)
class ArmSpec:
    """One experiment arm: which embeddings the consumer sees, from which
    aggregation heuristic's store."""

    name: str
    derm_inputs: tuple[str, ...] = ()
    heuristic_label: str = ""

    @property
    def is_baseline(self) -> bool:
        return not self.derm_inputs


@dataclass
class ArmResult:
    arm: str
    seed: int
    roc_auc: float
    pr_auc: float
    lift: float = 0.0


@dataclass
class ExperimentResult:
    task: str
    rows: list[ArmResult]
    summary: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["arm", "seed", "roc_auc", "pr_auc", "lift"])
        for r in self.rows:
            writer.writerow([r.arm, r.seed, f"{r.roc_auc:.6f}",
                             f"{r.pr_auc:.6f}", f"{r.lift:.6f}"])
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [f"task: {self.task}"]
        for arm, stats in self.summary.items():
            lines.append(
                f"  {arm:>16}: roc_auc {stats['roc_auc_mean']:.4f} "
                f"± {stats['roc_auc_std']:.4f}  pr_auc {stats['pr_auc_mean']:.4f} "
                f"± {stats['pr_auc_std']:.4f}  lift {stats['lift_mean']:+.4f}"
            )
        return "\n".join(lines) + "\n"


def run_sensitivity_experiment(
        task: str,
        arms: list[ArmSpec],
        seeds: list[int],
        train_samples: list[TrainingSample],
        test_samples: list[TrainingSample],
        generations_by_heuristic: dict[str, dict[str, StoreGeneration]],
        seq_vocab: int,
        model_cfg_base: DownstreamConfig | None = None,
        train_cfg: DownstreamTrainConfig | None = None) -> ExperimentResult:
    """Train and evaluate every (arm, seed) pair against a shared baseline.

    Each arm reads store generations for its heuristic label; the baseline
    arm sees no embeddings at all. Lift is per-seed against the baseline.
    """
    if not any(a.is_baseline for a in arms):
        raise MissingBaselineError("experiment grid lacks the no-embedding arm")
    if len({a.name for a in arms}) != len(arms):
        raise MissingBaselineError("arm names must be unique")
    base_cfg = model_cfg_base or DownstreamConfig(task=task)
    tcfg = train_cfg or DownstreamTrainConfig()

    feature_cache: dict[tuple, tuple[FeatureBatch, FeatureBatch]] = {}
    results: dict[tuple[str, int], ArmResult] = {}
    for arm in arms:
        cfg = DownstreamConfig(
            task=task,
            derm_inputs=arm.derm_inputs,
            projection_dim=base_cfg.projection_dim,
            num_experts=base_cfg.num_experts,
            cross_layers=base_cfg.cross_layers,
            sequence_encoder=base_cfg.sequence_encoder,
            expert_hidden=base_cfg.expert_hidden,
            expert_out=base_cfg.expert_out,
            seq_dim=base_cfg.seq_dim,
        )
        gens = generations_by_heuristic.get(arm.heuristic_label, {})
        cache_key = (arm.derm_inputs, arm.heuristic_label)
        if cache_key not in feature_cache:
            feature_cache[cache_key] = (
                build_features(train_samples, cfg, gens),
                build_features(test_samples, cfg, gens),
            )
        train_feats, test_feats = feature_cache[cache_key]
        derm_dim = train_feats.derm.shape[1]
        for seed in seeds:
            model = DownstreamModel(cfg, train_feats.base.shape[1], derm_dim,
                                    seq_vocab, seed=seed)
            run_cfg = replace(tcfg, seed=seed)
            train_downstream(model, train_feats, run_cfg)
            report = evaluate(model, test_feats)
            results[(arm.name, seed)] = ArmResult(arm.name, seed,
                                                  report.roc_auc, report.pr_auc)

    baseline_name = next(a.name for a in arms if a.is_baseline)
    for (name, seed), r in results.items():
        r.lift = r.roc_auc - results[(baseline_name, seed)].roc_auc

    rows = [results[(a.name, s)] for a in arms for s in seeds]
    summary = {}
    for arm in arms:
        rs = [results[(arm.name, s)] for s in seeds]
        summary[arm.name] = {
            "roc_auc_mean": float(np.mean([r.roc_auc for r in rs])),
            "roc_auc_std": float(np.std([r.roc_auc for r in rs])),
            "pr_auc_mean": float(np.mean([r.pr_auc for r in rs])),
            "pr_auc_std": float(np.std([r.pr_auc for r in rs])),
            "lift_mean": float(np.mean([r.lift for r in rs])),
            "lift_std": float(np.std([r.lift for r in rs])),
        }
    return ExperimentResult(task, rows, summary)


def heuristic_arms(derm_inputs: tuple[str, ...],
                   heuristics: list[AggregationHeuristic]) -> list[ArmSpec]:
    arms = [ArmSpec("baseline")]
    for h in heuristics:
        arms.append(ArmSpec(h.label, derm_inputs, h.label))
    return arms


def input_count_arms(heuristic: AggregationHeuristic) -> list[ArmSpec]:
    arms = [ArmSpec("baseline")]
    for name in DERM_INPUTS:
        arms.append(ArmSpec(name, (name,), heuristic.label))
    arms.append(ArmSpec("all-four", tuple(DERM_INPUTS), heuristic.label))
    return arms
