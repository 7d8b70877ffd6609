"""Finite-difference battery over every training loss.

Adversarial terms are checked with a reversal strength of -1, which turns
the reversal node into the identity on gradients: the engine gradient is
then the true derivative of the forward value. Every no-gradient input
(teacher targets, VAT perturbation, augmented batch, pseudo-labels) is
frozen at the base parameters, matching what the objective detaches.
"""

from __future__ import annotations

from functools import partial

import numpy as np

from .augment import MixSpec, builtin_registry, mix_augment_batch
from .autodiff import GradReport, Graph, grad_check
from .losses import (
    LossWeights,
    cdan_loss,
    cliv_loss,
    cross_entropy,
    dann_loss,
    prepare_detached,
    total_objective,
    vat_direction,
    aug_term,
    vat_term,
)
from .nn import ModelBundle, bind, build_bundle

GRL_CHECK = -1.0


def _fixture(disc_kind: str | None, seed: int = 0, n: int = 6, d: int = 3, C: int = 3) -> tuple:
    rng = np.random.default_rng(seed)
    bundle = build_bundle(d, C, rng, hidden=(5,), feature_dim=4, disc_kind=disc_kind, disc_hidden=6, teacher=True)
    # zero biases put ReLU pre-activations exactly on the kink (a sample with
    # every hidden unit dead maps to z = 0), so jitter every tensor; the
    # teacher also moves away from the student so its targets are informative
    for t in [*bundle.parameters().values(), *bundle.teacher_parameters().values()]:
        t += 0.1 * rng.standard_normal(t.shape)
    x_s = rng.standard_normal((n, d))
    y_s = np.eye(C)[rng.integers(C, size=n)]
    x_t = rng.standard_normal((n, d)) + 0.5
    return bundle, x_s, y_s, x_t


def _params(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in bundle.parameters().items()}


def check_ce(step: float = 1e-5) -> GradReport:
    bundle, x_s, y_s, _ = _fixture(None)

    def loss(graph: Graph, ids):
        bb = bind(graph, bundle, leaves=ids)
        return cross_entropy(graph, bb.logits(graph, bb.encode(graph, graph.constant(x_s))), graph.constant(y_s))

    return grad_check(loss, _params(bundle), step)


def check_vat(step: float = 1e-5) -> GradReport:
    bundle, _, _, x_t = _fixture(None)
    weights = LossWeights(vat_eps=0.3)
    targets = bundle.predict_proba(x_t, use_teacher=True)
    r = vat_direction(bundle, x_t, weights, np.random.default_rng(1), targets)

    def loss(graph: Graph, ids):
        bb = bind(graph, bundle, leaves=ids)
        return vat_term(graph, bb, x_t, r, graph.constant(targets))

    return grad_check(loss, _params(bundle), step)


def check_aug(step: float = 1e-5) -> GradReport:
    bundle, _, _, x_t = _fixture(None)
    targets = bundle.predict_proba(x_t, use_teacher=True)
    x_aug = mix_augment_batch(x_t, builtin_registry("vector"), MixSpec(K=3), np.random.default_rng(2))

    def loss(graph: Graph, ids):
        bb = bind(graph, bundle, leaves=ids)
        return aug_term(graph, bb, x_aug, graph.constant(targets))

    return grad_check(loss, _params(bundle), step)


def _adversarial_check(kind: str, step: float) -> GradReport:
    bundle, x_s, y_s, x_t = _fixture(kind)
    yhat_s, yhat_t = bundle.predict_proba(x_s), bundle.predict_proba(x_t)

    def loss(graph: Graph, ids):
        bb = bind(graph, bundle, leaves=ids)
        z_s = bb.encode(graph, graph.constant(x_s))
        z_t = bb.encode(graph, graph.constant(x_t))
        if kind == "dann":
            return dann_loss(graph, bb, z_s, z_t, GRL_CHECK)
        if kind == "cdan":
            return cdan_loss(graph, bb, z_s, graph.constant(yhat_s), z_t, graph.constant(yhat_t), GRL_CHECK)
        return cliv_loss(graph, bb, z_s, graph.constant(y_s), z_t, graph.constant(yhat_t), GRL_CHECK)

    return grad_check(loss, _params(bundle), step)


def check_dann(step: float = 1e-5) -> GradReport:
    return _adversarial_check("dann", step)


def check_cdan(step: float = 1e-5) -> GradReport:
    return _adversarial_check("cdan", step)


def check_cliv(step: float = 1e-5) -> GradReport:
    return _adversarial_check("cliv", step)


def check_total(step: float = 1e-5, adv_kind: str = "cliv") -> GradReport:
    bundle, x_s, y_s, x_t = _fixture(adv_kind)
    weights = LossWeights(vat_eps=0.3)
    registry = builtin_registry("vector")
    det = prepare_detached(bundle, x_s, x_t, weights, adv_kind, registry, MixSpec(K=3), np.random.default_rng(3))

    def loss(graph: Graph, ids):
        obj = total_objective(
            bundle, x_s, y_s, x_t, weights, adv_kind, grl=GRL_CHECK, detached=det, graph=graph, leaves=ids
        )
        return obj.root

    return grad_check(loss, _params(bundle), step)


BATTERY = {
    "ce": check_ce,
    "vat": check_vat,
    "aug": check_aug,
    "dann": check_dann,
    "cdan": check_cdan,
    "cliv": check_cliv,
    "total": check_total,
    "total_dann": partial(check_total, adv_kind="dann"),
    "total_cdan": partial(check_total, adv_kind="cdan"),
}


def run_battery(battery=None, step: float = 1e-5) -> dict[str, GradReport]:
    battery = BATTERY if battery is None else battery
    return {name: fn(step) for name, fn in battery.items()}
