"""Shared helpers: gradient checks, a tiny upstream model, separable samples."""

import numpy as np

from derm.data import FeatureBundle, TrainingSample
from derm.numerics import check_gradient
from derm.params import flatten_params, unflatten_params
from derm.towers import SlotSpec, TowerConfig, build_upstream_model


def fd_check_params(make_loss, params, step=1e-5):
    """Finite-difference check of d(loss)/d(params).

    make_loss(params) must return (loss, grads) where grads is a ParamDict
    covering every key of params. Returns the GradReport over the flattened
    parameter vector.
    """
    vec, layout = flatten_params(params)
    _, grads = make_loss(params)
    gvec, _ = flatten_params({k: grads[k] for k in params})

    def f(v):
        return make_loss(unflatten_params(v, layout))[0]

    return check_gradient(f, vec, gvec, step=step)


def random_unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


NUM_TEST_USERS = 24
NUM_TEST_PINS = 32
LATENT = 4


def tiny_model(seed=0, tasks=("click",)):
    """Small three-tower model sized for fast unit tests (embedding dim 6)."""
    user_cfg = TowerConfig(
        slots=(
            SlotSpec("profile", "dense", dim=LATENT),
            SlotSpec("uid", "categorical", cardinality=NUM_TEST_USERS),
            SlotSpec("hist", "sequence", cardinality=NUM_TEST_PINS),
        ),
        num_layers=2,
        blocks=(("mlp", "masknet"), ("attention", "mlp")),
        token_dim=3,
        num_tokens=2,
    )
    pin_cfg = TowerConfig(
        slots=(
            SlotSpec("attrs", "dense", dim=LATENT),
            SlotSpec("pid", "categorical", cardinality=NUM_TEST_PINS),
        ),
        num_layers=2,
        blocks=(("masknet", "mlp"), ("mlp", "attention")),
        token_dim=3,
        num_tokens=2,
    )
    emb_dim = user_cfg.output_dim
    inter_cfg = TowerConfig(
        slots=(
            SlotSpec("user_emb", "dense", dim=emb_dim),
            SlotSpec("pin_emb", "dense", dim=emb_dim),
            SlotSpec("u_dot_p", "dense", dim=1),
            SlotSpec("hour", "dense", dim=1),
        ),
        num_layers=1,
        blocks=(("mlp", "masknet"),),
        token_dim=3,
        num_tokens=2,
    )
    return build_upstream_model(user_cfg, pin_cfg, inter_cfg, tasks, seed=seed)


def separable_samples(seed, days, per_day, task="click"):
    """Day-keyed samples whose labels are linearly separable in latent space.

    Users and pins carry fixed latent vectors, exposed through the dense
    slots, and the label is the sign of the latent dot product. The user
    history sequence lists previously engaged pin ids; day 1 has none.
    """
    rng = np.random.default_rng([seed, 0x5A11])
    zu = random_unit_rows(rng, NUM_TEST_USERS, LATENT)
    zp = random_unit_rows(rng, NUM_TEST_PINS, LATENT)
    hist = {u: [] for u in range(NUM_TEST_USERS)}
    out = {}
    for day in days:
        day_rng = np.random.default_rng([seed, 0xDA7A, day])
        samples = []
        for e in range(per_day):
            u = int(day_rng.integers(NUM_TEST_USERS))
            p = int(day_rng.integers(NUM_TEST_PINS))
            label = int(float(zu[u] @ zp[p]) > 0.0)
            samples.append(TrainingSample(
                user_id=u,
                pin_id=p,
                day=day,
                event_seq=e,
                user=FeatureBundle(
                    dense={"profile": zu[u].copy()},
                    categorical={"uid": u},
                    sequence={"hist": list(hist[u][-6:])},
                ),
                pin=FeatureBundle(
                    dense={"attrs": zp[p].copy()},
                    categorical={"pid": p},
                ),
                context=FeatureBundle(
                    dense={"hour": np.array([float(day_rng.uniform(-1, 1))])},
                ),
                labels={task: label},
            ))
            if label:
                hist[u].append(p)
        out[day] = samples
    return out
