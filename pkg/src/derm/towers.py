"""Multi-tower upstream model with hand-derived backprop.

Each tower maps a FeatureBundle to a token matrix and refines it through
stacked layers, every layer summing two feature-interaction blocks plus a
shortcut. Entity towers flatten and L2-normalize their tokens into the
served embedding; the interaction tower consumes both entity embeddings
together with context features and feeds per-task affine heads, so
context never touches the entity embeddings themselves.

Block kinds:
  masknet   - sigmoid gate from the (flattened) block input applied to a
              linear projection of the same input
  attention - single-head scaled dot-product self-attention over tokens
  mlp       - two-layer ReLU on the flattened tokens

Every forward returns a cache consumed by the matching backward; backward
accumulates parameter gradients into a flat ParamDict and returns the
gradient w.r.t. the block input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FeatureBundle
from .errors import ShapeMismatchError, UnknownCategoricalIdError, ZeroNormError
from .numerics import NORM_EPS, l2_norm, sigmoid
from .params import ParamDict

DENSE = "dense"
CATEGORICAL = "categorical"
SEQUENCE = "sequence"

BLOCK_KINDS = ("masknet", "attention", "mlp")

# interaction-tower slot names for the entity-tower outputs
USER_EMB_SLOT = "user_emb"
PIN_EMB_SLOT = "pin_emb"
UDOTP_SLOT = "u_dot_p"


@dataclass(frozen=True)
class SlotSpec:
    name: str
    kind: str  # dense | categorical | sequence
    dim: int = 0  # dense input width
    cardinality: int = 0  # id space for categorical/sequence; 0 is reserved

    def validate(self) -> None:
        if self.kind not in (DENSE, CATEGORICAL, SEQUENCE):
            raise ShapeMismatchError(f"slot {self.name}: unknown kind {self.kind!r}")
        if self.kind == DENSE and self.dim < 1:
            raise ShapeMismatchError(f"dense slot {self.name} needs dim >= 1")
        if self.kind in (CATEGORICAL, SEQUENCE) and self.cardinality < 1:
            raise ShapeMismatchError(f"slot {self.name} needs cardinality >= 1")


@dataclass(frozen=True)
class TowerConfig:
    slots: tuple[SlotSpec, ...]
    num_layers: int = 1
    blocks: tuple[tuple[str, str], ...] = (("mlp", "masknet"),)
    token_dim: int = 8
    num_tokens: int = 4

    @property
    def output_dim(self) -> int:
        return self.token_dim * self.num_tokens

    def validate(self) -> None:
        if not self.slots:
            raise ShapeMismatchError("tower needs at least one input slot")
        for s in self.slots:
            s.validate()
        if self.num_layers < 1:
            raise ShapeMismatchError("num_layers must be >= 1")
        if len(self.blocks) != self.num_layers:
            raise ShapeMismatchError("blocks must list exactly two kinds per layer")
        for pair in self.blocks:
            if len(pair) != 2 or any(k not in BLOCK_KINDS for k in pair):
                raise ShapeMismatchError(f"bad block pair {pair!r}")
        if self.token_dim < 1 or self.num_tokens < 1:
            raise ShapeMismatchError("token_dim and num_tokens must be >= 1")


# ---------------------------------------------------------------------------
# parameter initialization


def init_tower_params(
    cfg: TowerConfig, rng: np.random.Generator, prefix: str, params: ParamDict
) -> None:
    """Create this tower's parameters under `prefix/` in params.

    Creation order is fixed (slots in spec order, then mixer, then layers)
    so a given seed always produces the same values.
    """
    cfg.validate()
    d, n = cfg.token_dim, cfg.num_tokens
    flat = d * n
    for s in cfg.slots:
        if s.kind == DENSE:
            params[f"{prefix}/slot/{s.name}/W"] = rng.normal(
                0.0, 1.0 / np.sqrt(s.dim), (d, s.dim)
            )
            params[f"{prefix}/slot/{s.name}/b"] = np.zeros(d)
        else:
            params[f"{prefix}/slot/{s.name}/table"] = rng.normal(
                0.0, 1.0 / np.sqrt(d), (s.cardinality, d)
            )
    nslots = len(cfg.slots)
    params[f"{prefix}/mix/M"] = rng.normal(0.0, 1.0 / np.sqrt(nslots), (n, nslots))
    for li, (ka, kb) in enumerate(cfg.blocks):
        for tag, kind in (("a", ka), ("b", kb)):
            bp = f"{prefix}/layer{li}/{tag}"
            if kind == "masknet":
                params[f"{bp}/Wg"] = rng.normal(0.0, 1.0 / np.sqrt(flat), (flat, flat))
                params[f"{bp}/bg"] = np.zeros(flat)
                params[f"{bp}/Wp"] = rng.normal(0.0, 1.0 / np.sqrt(flat), (flat, flat))
                params[f"{bp}/bp"] = np.zeros(flat)
            elif kind == "attention":
                for w in ("Wq", "Wk", "Wv", "Wo"):
                    params[f"{bp}/{w}"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
            else:  # mlp
                params[f"{bp}/W1"] = rng.normal(0.0, 1.0 / np.sqrt(flat), (flat, flat))
                params[f"{bp}/b1"] = np.zeros(flat)
                params[f"{bp}/W2"] = rng.normal(0.0, 1.0 / np.sqrt(flat), (flat, flat))
                params[f"{bp}/b2"] = np.zeros(flat)


# ---------------------------------------------------------------------------
# featurization: bundle -> slot token matrix


def _featurize(cfg, params, prefix, bundle: FeatureBundle):
    d = cfg.token_dim
    tokens = np.zeros((len(cfg.slots), d))
    slot_caches = []
    for i, s in enumerate(cfg.slots):
        key = f"{prefix}/slot/{s.name}"
        if s.kind == DENSE:
            x = bundle.dense.get(s.name)
            x = np.zeros(s.dim) if x is None else np.asarray(x, dtype=np.float64)
            if x.shape != (s.dim,):
                raise ShapeMismatchError(
                    f"slot {s.name}: expected dense dim {s.dim}, got {x.shape}"
                )
            tokens[i] = params[f"{key}/W"] @ x + params[f"{key}/b"]
            slot_caches.append(("dense", s.name, x))
        elif s.kind == CATEGORICAL:
            cid = int(bundle.categorical.get(s.name, 0))
            if cid < 0 or cid >= s.cardinality:
                raise UnknownCategoricalIdError(
                    f"slot {s.name}: id {cid} outside [0, {s.cardinality})"
                )
            tokens[i] = params[f"{key}/table"][cid]
            slot_caches.append(("categorical", s.name, cid))
        else:  # sequence: mean-pool id embeddings, empty falls back to id 0
            ids = [int(t) for t in bundle.sequence.get(s.name, [])]
            for t in ids:
                if t < 0 or t >= s.cardinality:
                    raise UnknownCategoricalIdError(
                        f"slot {s.name}: id {t} outside [0, {s.cardinality})"
                    )
            if not ids:
                ids = [0]
            tokens[i] = params[f"{key}/table"][ids].mean(axis=0)
            slot_caches.append(("sequence", s.name, ids))
    return tokens, slot_caches


def _featurize_backward(cfg, prefix, params, slot_caches, dtokens, grads, want_input_grads):
    input_grads: dict[str, np.ndarray] = {}
    for i, s in enumerate(cfg.slots):
        key = f"{prefix}/slot/{s.name}"
        kind, name, cached = slot_caches[i]
        dt = dtokens[i]
        if kind == "dense":
            grads[f"{key}/W"] += np.outer(dt, cached)
            grads[f"{key}/b"] += dt
            if want_input_grads:
                input_grads[name] = params[f"{key}/W"].T @ dt
        elif kind == "categorical":
            grads[f"{key}/table"][cached] += dt
        else:
            share = dt / len(cached)
            for t in cached:
                grads[f"{key}/table"][t] += share
    return input_grads


# ---------------------------------------------------------------------------
# blocks


def _masknet_forward(x_flat, P, bp):
    h = P[f"{bp}/Wg"] @ x_flat + P[f"{bp}/bg"]
    g = sigmoid(h)
    q = P[f"{bp}/Wp"] @ x_flat + P[f"{bp}/bp"]
    return g * q, (x_flat, g, q)


def _masknet_backward(dy, cache, P, bp, grads):
    x, g, q = cache
    dg = dy * q
    dq = dy * g
    dh = dg * g * (1.0 - g)
    grads[f"{bp}/Wg"] += np.outer(dh, x)
    grads[f"{bp}/bg"] += dh
    grads[f"{bp}/Wp"] += np.outer(dq, x)
    grads[f"{bp}/bp"] += dq
    return P[f"{bp}/Wg"].T @ dh + P[f"{bp}/Wp"].T @ dq


def _attention_forward(X, P, bp):
    d = X.shape[1]
    scale = 1.0 / np.sqrt(d)
    Q = X @ P[f"{bp}/Wq"]
    K = X @ P[f"{bp}/Wk"]
    V = X @ P[f"{bp}/Wv"]
    S = scale * (Q @ K.T)
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    A = E / E.sum(axis=1, keepdims=True)
    H = A @ V
    Y = H @ P[f"{bp}/Wo"]
    return Y, (X, Q, K, V, A, H, scale)


def _attention_backward(dY, cache, P, bp, grads):
    X, Q, K, V, A, H, scale = cache
    dH = dY @ P[f"{bp}/Wo"].T
    grads[f"{bp}/Wo"] += H.T @ dY
    dA = dH @ V.T
    dV = A.T @ dH
    # row-wise softmax jacobian
    dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
    dQ = scale * (dS @ K)
    dK = scale * (dS.T @ Q)
    grads[f"{bp}/Wq"] += X.T @ dQ
    grads[f"{bp}/Wk"] += X.T @ dK
    grads[f"{bp}/Wv"] += X.T @ dV
    return dQ @ P[f"{bp}/Wq"].T + dK @ P[f"{bp}/Wk"].T + dV @ P[f"{bp}/Wv"].T


def _mlp_forward(x_flat, P, bp):
    z = P[f"{bp}/W1"] @ x_flat + P[f"{bp}/b1"]
    h = np.maximum(z, 0.0)
    y = P[f"{bp}/W2"] @ h + P[f"{bp}/b2"]
    return y, (x_flat, z, h)


def _mlp_backward(dy, cache, P, bp, grads):
    x, z, h = cache
    dh = P[f"{bp}/W2"].T @ dy
    dz = dh * (z > 0)
    grads[f"{bp}/W2"] += np.outer(dy, h)
    grads[f"{bp}/b2"] += dy
    grads[f"{bp}/W1"] += np.outer(dz, x)
    grads[f"{bp}/b1"] += dz
    return P[f"{bp}/W1"].T @ dz


def _block_forward(kind, X, P, bp):
    n, d = X.shape
    if kind == "attention":
        return _attention_forward(X, P, bp)
    if kind == "masknet":
        y, cache = _masknet_forward(X.ravel(), P, bp)
        return y.reshape(n, d), cache
    y, cache = _mlp_forward(X.ravel(), P, bp)
    return y.reshape(n, d), cache


def _block_backward(kind, dY, cache, P, bp, grads):
    if kind == "attention":
        return _attention_backward(dY, cache, P, bp, grads)
    if kind == "masknet":
        return _masknet_backward(dY.ravel(), cache, P, bp, grads).reshape(dY.shape)
    return _mlp_backward(dY.ravel(), cache, P, bp, grads).reshape(dY.shape)


# ---------------------------------------------------------------------------
# whole tower


def tower_forward(cfg: TowerConfig, params: ParamDict, prefix: str, bundle: FeatureBundle):
    """Run the tower, returning the flattened output and a backward cache."""
    T0, slot_caches = _featurize(cfg, params, prefix, bundle)
    X = params[f"{prefix}/mix/M"] @ T0
    layer_caches = []
    for li, (ka, kb) in enumerate(cfg.blocks):
        ya, ca = _block_forward(ka, X, params, f"{prefix}/layer{li}/a")
        yb, cb = _block_forward(kb, X, params, f"{prefix}/layer{li}/b")
        layer_caches.append((X, ca, cb))
        X = ya + yb + X
    flat = X.ravel()
    return flat, (T0, slot_caches, layer_caches)


def tower_backward(
    cfg: TowerConfig,
    params: ParamDict,
    prefix: str,
    cache,
    dflat: np.ndarray,
    grads: ParamDict,
    want_input_grads: bool = False,
):
    """Backprop dflat through the tower; accumulate into grads.

    Returns gradients w.r.t. the dense input slots when requested (used by
    the interaction tower to push gradients into the entity embeddings).
    """
    T0, slot_caches, layer_caches = cache
    dX = dflat.reshape(cfg.num_tokens, cfg.token_dim)
    for li in range(cfg.num_layers - 1, -1, -1):
        ka, kb = cfg.blocks[li]
        Xin, ca, cb = layer_caches[li]
        da = _block_backward(ka, dX, ca, params, f"{prefix}/layer{li}/a", grads)
        db = _block_backward(kb, dX, cb, params, f"{prefix}/layer{li}/b", grads)
        dX = da + db + dX
    M = params[f"{prefix}/mix/M"]
    grads[f"{prefix}/mix/M"] += dX @ T0.T
    dT0 = M.T @ dX
    return _featurize_backward(cfg, prefix, params, slot_caches, dT0, grads, want_input_grads)


def embed_entity(cfg: TowerConfig, params: ParamDict, prefix: str, bundle: FeatureBundle):
    """Entity embedding: flattened tower output, L2-normalized to unit norm."""
    flat, cache = tower_forward(cfg, params, prefix, bundle)
    r = l2_norm(flat)
    if r <= NORM_EPS:
        raise ZeroNormError(f"degenerate zero-norm embedding from tower {prefix!r}")
    y = flat / r
    return y, (cache, y, r)


def embed_entity_backward(cfg, params, prefix, emb_cache, dy, grads):
    """Backprop through the normalization jacobian, then the tower."""
    cache, y, r = emb_cache
    dflat = (dy - y * float(np.dot(y, dy))) / r
    tower_backward(cfg, params, prefix, cache, dflat, grads)


# ---------------------------------------------------------------------------
# upstream model: user tower + pin tower + interaction tower + heads


@dataclass
class UpstreamModel:
    user_cfg: TowerConfig
    pin_cfg: TowerConfig
    inter_cfg: TowerConfig
    tasks: tuple[str, ...]
    params: ParamDict = field(default_factory=dict)

    @property
    def embedding_dim(self) -> int:
        return self.user_cfg.output_dim

    @property
    def temperature(self) -> float:
        return float(np.exp(self.params["log_tau"][0]))

    def embed_user(self, bundle: FeatureBundle) -> np.ndarray:
        return embed_entity(self.user_cfg, self.params, "user", bundle)[0]

    def embed_pin(self, bundle: FeatureBundle) -> np.ndarray:
        return embed_entity(self.pin_cfg, self.params, "pin", bundle)[0]


def build_upstream_model(
    user_cfg: TowerConfig,
    pin_cfg: TowerConfig,
    inter_cfg: TowerConfig,
    tasks: tuple[str, ...],
    seed: int,
    tau_init: float = 0.07,
) -> UpstreamModel:
    if user_cfg.output_dim != pin_cfg.output_dim:
        raise ShapeMismatchError("user and pin towers must share output_dim")
    _check_inter_cfg(inter_cfg, user_cfg.output_dim)
    rng = np.random.default_rng([seed, 0x44455]) # derived stream for init
    params: ParamDict = {}
    init_tower_params(user_cfg, rng, "user", params)
    init_tower_params(pin_cfg, rng, "pin", params)
    init_tower_params(inter_cfg, rng, "inter", params)
    zdim = inter_cfg.output_dim
    for t in tasks:
        params[f"head/{t}/w"] = rng.normal(0.0, 1.0 / np.sqrt(zdim), (zdim,))
        params[f"head/{t}/b"] = np.zeros(1)
    params["log_tau"] = np.array([np.log(tau_init)])
    return UpstreamModel(user_cfg, pin_cfg, inter_cfg, tuple(tasks), params)


def _check_inter_cfg(inter_cfg: TowerConfig, emb_dim: int) -> None:
    names = {s.name: s for s in inter_cfg.slots}
    for required in (USER_EMB_SLOT, PIN_EMB_SLOT, UDOTP_SLOT):
        if required not in names:
            raise ShapeMismatchError(f"interaction tower missing slot {required!r}")
    if names[USER_EMB_SLOT].dim != emb_dim or names[PIN_EMB_SLOT].dim != emb_dim:
        raise ShapeMismatchError("interaction embedding slots must match output_dim")
    if names[UDOTP_SLOT].dim != 1:
        raise ShapeMismatchError(f"{UDOTP_SLOT} slot must have dim 1")


def _inter_bundle(u: np.ndarray, p: np.ndarray, context: FeatureBundle) -> FeatureBundle:
    dense = dict(context.dense)
    dense[USER_EMB_SLOT] = u
    dense[PIN_EMB_SLOT] = p
    dense[UDOTP_SLOT] = np.array([float(np.dot(u, p))])
    return FeatureBundle(dense=dense, categorical=dict(context.categorical),
                         sequence=dict(context.sequence))


def interaction_forward(model: UpstreamModel, u, p, context: FeatureBundle):
    """Cross the entity embeddings with context; one scalar logit per task."""
    bundle = _inter_bundle(u, p, context)
    z, cache = tower_forward(model.inter_cfg, model.params, "inter", bundle)
    logits = {
        t: float(model.params[f"head/{t}/w"] @ z + model.params[f"head/{t}/b"][0])
        for t in model.tasks
    }
    return logits, (cache, z, u, p)


def interaction_backward(model: UpstreamModel, fwd_cache, dlogits: dict, grads: ParamDict):
    """Backprop per-task logit grads; returns (du, dp) for the entity towers."""
    cache, z, u, p = fwd_cache
    dz = np.zeros_like(z)
    for t, dl in dlogits.items():
        grads[f"head/{t}/w"] += dl * z
        grads[f"head/{t}/b"][0] += dl
        dz += dl * model.params[f"head/{t}/w"]
    input_grads = tower_backward(
        model.inter_cfg, model.params, "inter", cache, dz, grads, want_input_grads=True
    )
    du = input_grads.get(USER_EMB_SLOT, np.zeros_like(u)).copy()
    dp = input_grads.get(PIN_EMB_SLOT, np.zeros_like(p)).copy()
    ddot = input_grads.get(UDOTP_SLOT)
    if ddot is not None:
        du += float(ddot[0]) * p
        dp += float(ddot[0]) * u
    return du, dp
