"""Training objectives: source CE, target consistency and adversarial alignment.

Adversarial terms are binary cross-entropies of a domain discriminator
(source = 1, target = 0). The feature path passes through a gradient
reversal node, so a single backward pass trains the discriminator to
minimise the term and the feature extractor to maximise it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .augment import MixSpec, OpRegistry, mix_augment_batch
from .autodiff import Graph, ShapeError
from .nn import BoundBundle, ModelBundle, bind

ADV_KINDS = ("none", "dann", "cdan", "cliv")


@dataclass
class LossWeights:
    lambda_cliv: float = 1.0  # weight of whichever adversarial term is active
    lambda_tc: float = 10.0
    vat_eps: float = 0.5
    vat_xi: float = 1e-2  # probe step, relative to the batch's per-dimension std
    vat_iters: int = 1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.vat_iters < 1:
            raise ValueError("vat_iters must be at least 1")


@dataclass
class LossBreakdown:
    ce: float = 0.0
    vat: float = 0.0
    aug: float = 0.0
    tc: float = 0.0
    adv: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def cross_entropy(graph: Graph, logits: int, y: int) -> int:
    """Mean CE from logits through a fused log-softmax."""
    return graph.scale(graph.mean(graph.sum(graph.mul(y, graph.log_softmax(logits)), axis=1)), -1.0)


def cross_entropy_from_probs(graph: Graph, probs: int, y: int) -> int:
    """Mean CE from probabilities; zero probabilities are allowed where the label is zero."""
    p, t = graph.value(probs), graph.value(y)
    pad = ((p == 0) & (t == 0)).astype(np.float64)
    safe = graph.add(probs, graph.constant(pad)) if pad.any() else probs
    return graph.scale(graph.mean(graph.sum(graph.mul(y, graph.log(safe)), axis=1)), -1.0)


def squared_distance(graph: Graph, p: int, q: int) -> int:
    """Batch mean of the squared L2 distance between rows."""
    diff = graph.sub(p, q)
    return graph.mean(graph.sum(graph.square(diff), axis=1))


# ---------------------------------------------------------------------------
# target consistency
# ---------------------------------------------------------------------------


def _probe_scale(x: np.ndarray, xi: float) -> float:
    std = float(x.std(axis=0).mean()) if len(x) > 1 else 0.0
    return xi * std if std > 0 else xi


def _unit_rows(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((d * d).sum(axis=1, keepdims=True))
    ok = norms[:, 0] > 0
    out = d.copy()
    out[ok] = d[ok] / norms[ok]
    return out, ok


def teacher_predictions(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    """Consistency targets: the EMA teacher if present, else the student."""
    graph = Graph()
    bb = bind(graph, bundle, trainable=False)
    return graph.value(bb.teacher_probs(graph, graph.constant(x)))


ProbFn = Callable[[Graph, int], int]


def power_iteration(
    prob_fn: ProbFn,
    x: np.ndarray,
    targets: np.ndarray,
    eps: float,
    xi: float,
    iters: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-row direction of steepest growth of ``||targets - p(x + r)||^2``, scaled to ``eps``.

    ``prob_fn(graph, x_node)`` returns a probability node. Rows whose probe
    gradient vanishes keep their current (random) direction.
    """
    d, _ = _unit_rows(rng.standard_normal(x.shape))
    for _ in range(iters):
        graph = Graph()
        di = graph.leaf(d)
        xp = graph.add(graph.constant(x), graph.scale(di, xi))
        dist = graph.sum(graph.square(graph.sub(graph.constant(targets), prob_fn(graph, xp))))
        unit, ok = _unit_rows(graph.backward(dist)[di])
        d = np.where(ok[:, None], unit, d)
    return eps * d


def vat_direction(
    bundle: ModelBundle,
    x: np.ndarray,
    weights: LossWeights,
    rng: np.random.Generator,
    targets: np.ndarray | None = None,
) -> np.ndarray:
    """Adversarial perturbation ``eps * d`` for the student, by power iteration."""
    x = np.asarray(x, dtype=np.float64)
    if targets is None:
        targets = teacher_predictions(bundle, x)

    def probs(graph, xp):
        bb = bind(graph, bundle, trainable=False)
        return graph.softmax(bb.logits(graph, bb.encode(graph, xp)))

    xi = _probe_scale(x, weights.vat_xi)
    return power_iteration(probs, x, targets, weights.vat_eps, xi, weights.vat_iters, rng)


def vat_term(graph: Graph, bb: BoundBundle, x: np.ndarray, r: np.ndarray, targets: int) -> int:
    """``mean ||targets - h(x + r)||^2`` with r a constant."""
    xr = graph.constant(np.asarray(x) + r)
    p = graph.softmax(bb.logits(graph, bb.encode(graph, xr)))
    return squared_distance(graph, targets, p)


def vat_loss(bundle: ModelBundle, x_t: np.ndarray, weights: LossWeights, rng: np.random.Generator) -> float:
    if weights.vat_eps == 0:
        return 0.0
    targets = teacher_predictions(bundle, x_t)
    r = vat_direction(bundle, x_t, weights, rng, targets)
    graph = Graph()
    bb = bind(graph, bundle)
    return float(graph.value(vat_term(graph, bb, x_t, r, graph.constant(targets))))


def aug_term(graph: Graph, bb: BoundBundle, x_aug: np.ndarray, targets: int) -> int:
    p = graph.softmax(bb.logits(graph, bb.encode(graph, graph.constant(x_aug))))
    return squared_distance(graph, targets, p)


def aug_consistency_loss(
    bundle: ModelBundle, x_t: np.ndarray, registry: OpRegistry, spec: MixSpec, rng: np.random.Generator
) -> float:
    x_aug = mix_augment_batch(x_t, registry, spec, rng)
    graph = Graph()
    bb = bind(graph, bundle)
    targets = graph.constant(teacher_predictions(bundle, x_t))
    return float(graph.value(aug_term(graph, bb, x_aug, targets)))


def tc_loss(
    bundle: ModelBundle,
    x_t: np.ndarray,
    registry: OpRegistry,
    spec: MixSpec,
    weights: LossWeights,
    rng: np.random.Generator,
) -> float:
    return vat_loss(bundle, x_t, weights, rng) + aug_consistency_loss(bundle, x_t, registry, spec, rng)


# ---------------------------------------------------------------------------
# adversarial alignment
# ---------------------------------------------------------------------------


def _source_bce(graph, logits):
    # -log sigmoid(a)
    return graph.softplus(graph.scale(logits, -1.0))


def _target_bce(graph, logits):
    # -log(1 - sigmoid(a))
    return graph.softplus(logits)


def _balanced(graph, loss_s, loss_t):
    return graph.scale(graph.add(graph.mean(loss_s), graph.mean(loss_t)), 0.5)


def dann_loss(graph: Graph, bb: BoundBundle, z_s: int, z_t: int, grl: float = 1.0) -> int:
    """Domain BCE averaged per domain, features behind a reversal node."""
    a_s = bb.disc_logits(graph, graph.grad_reversal(z_s, grl))
    a_t = bb.disc_logits(graph, graph.grad_reversal(z_t, grl))
    return _balanced(graph, _source_bce(graph, a_s), _target_bce(graph, a_t))


def cdan_loss(graph: Graph, bb: BoundBundle, z_s: int, yhat_s: int, z_t: int, yhat_t: int, grl: float = 1.0) -> int:
    """DANN on flattened ``yhat (x) z``; predictions carry no gradient."""
    a_s = bb.disc_logits(graph, graph.grad_reversal(z_s, grl), graph.stop_gradient(yhat_s))
    a_t = bb.disc_logits(graph, graph.grad_reversal(z_t, grl), graph.stop_gradient(yhat_t))
    return _balanced(graph, _source_bce(graph, a_s), _target_bce(graph, a_t))


def cliv_loss(graph: Graph, bb: BoundBundle, z_s: int, y_s: int, z_t: int, yhat_t: int, grl: float = 1.0) -> int:
    """Class-level domain BCE.

    Head c scores source samples weighted by their label mass on c and target
    samples weighted by their (detached) predicted mass on c.
    """
    c = bb.bundle.disc.n_classes
    if graph.value(y_s).shape[1] != c or graph.value(yhat_t).shape[1] != c:
        raise ShapeError(f"labels do not match the {c} discriminator heads")
    a_s = bb.disc_logits(graph, graph.grad_reversal(z_s, grl), y_s)
    a_t = bb.disc_logits(graph, graph.grad_reversal(z_t, grl), yhat_t)
    w_t = graph.stop_gradient(yhat_t)
    loss_s = graph.sum(graph.mul(y_s, _source_bce(graph, a_s)), axis=1)
    loss_t = graph.sum(graph.mul(w_t, _target_bce(graph, a_t)), axis=1)
    return _balanced(graph, loss_s, loss_t)


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------


@dataclass
class Detached:
    """Values that enter the objective as constants.

    Passing them explicitly freezes every no-gradient path of the objective,
    which is what finite-difference checks need.
    """

    targets_t: np.ndarray | None = None  # teacher probabilities on x_t
    r_adv: np.ndarray | None = None
    x_aug: np.ndarray | None = None
    yhat_s: np.ndarray | None = None
    yhat_t: np.ndarray | None = None


@dataclass
class Objective:
    graph: Graph
    bound: BoundBundle
    root: int
    breakdown: LossBreakdown
    nodes: dict[str, int]

    def gradients(self) -> dict[str, np.ndarray]:
        grads = self.graph.backward(self.root)
        return {name: grads[nid] for name, nid in self.bound.names.items()}


def prepare_detached(
    bundle: ModelBundle,
    x_s: np.ndarray,
    x_t: np.ndarray,
    weights: LossWeights,
    adv_kind: str,
    registry: OpRegistry | None,
    spec: MixSpec | None,
    rng: np.random.Generator,
) -> Detached:
    """Evaluate every constant of the objective at the current parameters."""
    det = Detached()
    if weights.lambda_tc > 0:
        det.targets_t = teacher_predictions(bundle, x_t)
        det.r_adv = vat_direction(bundle, x_t, weights, rng, det.targets_t)
        det.x_aug = mix_augment_batch(x_t, registry, spec, rng)
    if adv_kind in ("cdan", "cliv") and weights.lambda_cliv > 0:
        det.yhat_s = bundle.predict_proba(x_s)
        det.yhat_t = bundle.predict_proba(x_t)
    return det


def total_objective(
    bundle: ModelBundle,
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray,
    weights: LossWeights,
    adv_kind: str = "cliv",
    registry: OpRegistry | None = None,
    spec: MixSpec | None = None,
    rng: np.random.Generator | None = None,
    grl: float = 1.0,
    detached: Detached | None = None,
    graph: Graph | None = None,
    leaves: dict[str, int] | None = None,
) -> Objective:
    """``ce + lambda_cliv * adv + lambda_tc * (vat + aug)`` on one paired batch."""
    if adv_kind not in ADV_KINDS:
        raise ValueError(f"adv_kind must be one of {ADV_KINDS}")
    use_adv = adv_kind != "none" and weights.lambda_cliv > 0
    use_tc = weights.lambda_tc > 0
    if use_adv and (bundle.disc is None or bundle.disc.kind != adv_kind):
        raise ValueError(f"bundle discriminator does not support {adv_kind!r}")
    if use_tc and detached is None and (registry is None or spec is None or rng is None):
        raise ValueError("target consistency needs a registry, a MixSpec and an rng")
    det = detached or Detached()

    graph = Graph() if graph is None else graph
    bb = bind(graph, bundle, leaves=leaves)
    xs = graph.constant(x_s)
    ys = graph.constant(y_s)
    nodes = {}
    z_s = bb.encode(graph, xs)
    logits_s = bb.logits(graph, z_s)
    total = nodes["ce"] = cross_entropy(graph, logits_s, ys)

    if use_adv or use_tc:
        xt = graph.constant(x_t)
    if use_adv:
        z_t = bb.encode(graph, xt)

        def pseudo(z, given):
            if given is not None:
                return graph.constant(given)
            return graph.stop_gradient(graph.softmax(bb.logits(graph, z)))

        if adv_kind == "dann":
            adv = dann_loss(graph, bb, z_s, z_t, grl)
        elif adv_kind == "cdan":
            adv = cdan_loss(graph, bb, z_s, pseudo(z_s, det.yhat_s), z_t, pseudo(z_t, det.yhat_t), grl)
        else:
            adv = cliv_loss(graph, bb, z_s, ys, z_t, pseudo(z_t, det.yhat_t), grl)
        nodes["adv"] = adv
        total = graph.add(total, graph.scale(adv, weights.lambda_cliv))

    if use_tc:
        if det.targets_t is not None:
            targets = graph.constant(det.targets_t)
        else:
            targets = bb.teacher_probs(graph, xt)
        tvals = graph.value(targets)
        r = det.r_adv
        if r is None:
            r = vat_direction(bundle, x_t, weights, rng, tvals)
        x_aug = det.x_aug
        if x_aug is None:
            x_aug = mix_augment_batch(x_t, registry, spec, rng)
        nodes["vat"] = vat_term(graph, bb, x_t, r, targets)
        nodes["aug"] = aug_term(graph, bb, x_aug, targets)
        nodes["tc"] = graph.add(nodes["vat"], nodes["aug"])
        total = graph.add(total, graph.scale(nodes["tc"], weights.lambda_tc))

    nodes["total"] = total
    breakdown = LossBreakdown(**{k: float(graph.value(v)) for k, v in nodes.items()})
    return Objective(graph, bb, total, breakdown, nodes)
