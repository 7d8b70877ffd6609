"""MLP building blocks, discriminators, SGD with momentum and the EMA teacher."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, NonFiniteError, ShapeError

ACTIVATIONS = ("relu", "tanh")
DISC_KINDS = ("dann", "cdan", "cliv")
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    """Layers of (weight, bias); hidden layers use ``activation``, the last is linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} does not chain with layer {i - 1}")

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, activation: str = "relu") -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def named_parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def bind(self, graph: Graph, trainable: bool = True) -> list[tuple[int, int]]:
        return [(graph.leaf(w, trainable), graph.leaf(b, trainable)) for w, b in zip(self.weights, self.biases)]

    def forward(self, graph: Graph, bound: list[tuple[int, int]], x: int) -> int:
        h = x
        last = len(bound) - 1
        for i, (w, b) in enumerate(bound):
            h = graph.add(graph.matmul(h, w), b)
            if i < last:
                h = graph.relu(h) if self.activation == "relu" else graph.tanh(h)
        return h


@dataclass
class Discriminator:
    """Domain discriminator.

    ``dann`` scores z with one logit, ``cliv`` scores z with one logit per
    class and ``cdan`` scores the flattened outer product of prediction and z.
    With ``separate_heads`` the cliv variant holds C independent one-logit
    networks instead of one shared trunk with C outputs.
    """

    kind: str
    heads: list[Mlp]
    n_classes: int
    feature_dim: int

    @property
    def separate_heads(self) -> bool:
        return len(self.heads) > 1

    def named_parameters(self) -> dict[str, np.ndarray]:
        if len(self.heads) == 1:
            return self.heads[0].named_parameters("disc")
        out = {}
        for c, head in enumerate(self.heads):
            out.update(head.named_parameters(f"disc{c}"))
        return out


def make_discriminator(
    kind: str,
    feature_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    hidden: int = 64,
    separate_heads: bool = False,
    cdan_cap: int = 4096,
) -> Discriminator:
    if kind not in DISC_KINDS:
        raise ValueError(f"unknown discriminator kind {kind!r}")
    if kind == "cdan":
        in_dim = feature_dim * n_classes
        if in_dim > cdan_cap:
            raise ValueError(f"cdan input dimension {in_dim} exceeds cap {cdan_cap}")
        heads = [Mlp.init([in_dim, hidden, 1], rng)]
    elif kind == "cliv" and separate_heads:
        heads = [Mlp.init([feature_dim, hidden, 1], rng) for _ in range(n_classes)]
    else:
        out = n_classes if kind == "cliv" else 1
        heads = [Mlp.init([feature_dim, hidden, out], rng)]
    return Discriminator(kind, heads, n_classes, feature_dim)


@dataclass
class ModelBundle:
    """Feature extractor ``phi``, classifier ``g``, optional discriminator and EMA teacher."""

    phi: Mlp
    g: Mlp
    disc: Discriminator | None = None
    teacher: tuple[Mlp, Mlp] | None = None

    @property
    def feature_dim(self) -> int:
        return self.phi.sizes[-1]

    @property
    def n_classes(self) -> int:
        return self.g.sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.phi.sizes[0]

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable parameters (student and discriminator), by name."""
        out = {}
        out.update(self.phi.named_parameters("phi"))
        out.update(self.g.named_parameters("g"))
        if self.disc is not None:
            out.update(self.disc.named_parameters())
        return out

    def teacher_parameters(self) -> dict[str, np.ndarray]:
        if self.teacher is None:
            return {}
        out = {}
        out.update(self.teacher[0].named_parameters("phi"))
        out.update(self.teacher[1].named_parameters("g"))
        return out

    def add_teacher(self) -> None:
        self.teacher = (copy.deepcopy(self.phi), copy.deepcopy(self.g))

    def snapshot(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return forward_h(self, x)[0]

    def predict_proba(self, x: np.ndarray, use_teacher: bool = False) -> np.ndarray:
        return forward_h(self, x, use_teacher)[1]


def build_bundle(
    input_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (64, 64),
    feature_dim: int = 16,
    disc_kind: str | None = None,
    disc_hidden: int = 64,
    separate_heads: bool = False,
    teacher: bool = False,
    activation: str = "relu",
) -> ModelBundle:
    phi = Mlp.init([input_dim, *hidden, feature_dim], rng, activation)
    g = Mlp.init([feature_dim, n_classes], rng, activation)
    disc = None
    if disc_kind is not None:
        disc = make_discriminator(disc_kind, feature_dim, n_classes, rng, disc_hidden, separate_heads)
    bundle = ModelBundle(phi, g, disc)
    if teacher:
        bundle.add_teacher()
    return bundle


# ---------------------------------------------------------------------------
# graph-level forward passes
# ---------------------------------------------------------------------------


@dataclass
class BoundBundle:
    """Node ids of a bundle's parameters inside one graph."""

    bundle: ModelBundle
    phi: list[tuple[int, int]]
    g: list[tuple[int, int]]
    disc: list[list[tuple[int, int]]]
    teacher: tuple[list[tuple[int, int]], list[tuple[int, int]]] | None
    names: dict[str, int] = field(default_factory=dict)

    def encode(self, graph: Graph, x: int) -> int:
        return self.bundle.phi.forward(graph, self.phi, x)

    def logits(self, graph: Graph, z: int) -> int:
        return self.bundle.g.forward(graph, self.g, z)

    def teacher_probs(self, graph: Graph, x: int) -> int:
        """Teacher probabilities; the detached student when no teacher exists."""
        if self.teacher is None:
            z = self.encode(graph, x)
            return graph.stop_gradient(graph.softmax(self.logits(graph, z)))
        tphi, tg = self.bundle.teacher
        z = tphi.forward(graph, self.teacher[0], x)
        return graph.stop_gradient(graph.softmax(tg.forward(graph, self.teacher[1], z)))

    def disc_logits(self, graph: Graph, z: int, yhat: int | None = None) -> int:
        """Raw discriminator logits: [B,1] for dann/cdan, [B,C] for cliv."""
        disc = self.bundle.disc
        if disc is None:
            raise ValueError("bundle has no discriminator")
        if disc.kind == "cdan":
            if yhat is None:
                raise ValueError("cdan discriminator needs class probabilities")
            z = graph.outer(yhat, z)
        elif disc.kind == "cliv" and yhat is None:
            raise ValueError("cliv discriminator needs class probabilities")
        outs = [head.forward(graph, ids, z) for head, ids in zip(disc.heads, self.disc)]
        return outs[0] if len(outs) == 1 else graph.concat(outs, axis=1)


def bind(graph: Graph, bundle: ModelBundle, trainable: bool = True, leaves: dict[str, int] | None = None) -> BoundBundle:
    """Add the bundle's parameters to ``graph``.

    ``leaves`` maps parameter names to nodes that already exist in the graph;
    those nodes are used in place of fresh leaves (finite-difference checks
    rely on this).
    """
    leaves = leaves or {}

    def layers(mlp: Mlp, prefix: str):
        out = []
        for name, value in mlp.named_parameters(prefix).items():
            out.append(leaves[name] if name in leaves else graph.leaf(value, trainable))
        return list(zip(out[::2], out[1::2]))

    phi = layers(bundle.phi, "phi")
    g = layers(bundle.g, "g")
    disc = []
    prefixes = []
    if bundle.disc is not None:
        prefixes = ["disc"] if len(bundle.disc.heads) == 1 else [f"disc{c}" for c in range(len(bundle.disc.heads))]
        disc = [layers(head, prefix) for head, prefix in zip(bundle.disc.heads, prefixes)]
    teacher = None
    if bundle.teacher is not None:
        teacher = (bundle.teacher[0].bind(graph, False), bundle.teacher[1].bind(graph, False))
    bb = BoundBundle(bundle, phi, g, disc, teacher)
    for prefix, bound in [("phi", phi), ("g", g), *zip(prefixes, disc)]:
        for i, (w, b) in enumerate(bound):
            bb.names[f"{prefix}.W{i}"] = w
            bb.names[f"{prefix}.b{i}"] = b
    return bb


def forward_h(bundle: ModelBundle, x: np.ndarray, use_teacher: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z, probabilities)`` for a batch ``x`` of shape [B, d]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bundle.input_dim:
        raise ShapeError(f"expected input of shape [B, {bundle.input_dim}], got {x.shape}")
    if use_teacher and bundle.teacher is None:
        raise ValueError("bundle has no teacher")
    phi, g = bundle.teacher if use_teacher else (bundle.phi, bundle.g)
    graph = Graph()
    xi = graph.constant(x)
    z = phi.forward(graph, phi.bind(graph, False), xi)
    p = graph.softmax(g.forward(graph, g.bind(graph, False), z))
    return graph.value(z), graph.value(p)


def discriminator_forward(bundle: ModelBundle, z: np.ndarray, yhat: np.ndarray | None = None) -> np.ndarray:
    """Sigmoid domain scores (probability of the source domain)."""
    graph = Graph()
    bb = bind(graph, bundle, trainable=False)
    zi = graph.constant(z)
    yi = graph.constant(yhat) if yhat is not None else None
    return graph.value(graph.sigmoid(bb.disc_logits(graph, zi, yi)))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class SgdState:
    lr0: float = 1e-2
    momentum: float = 0.9
    alpha_lr: float = 10.0
    beta_lr: float = 0.75
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_schedule(state: SgdState, progress: float) -> float:
    """Annealed learning rate ``lr0 / (1 + alpha * p) ** beta``."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return state.lr0 / (1.0 + state.alpha_lr * progress) ** state.beta_lr


def sgd_step(state: SgdState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
    """In-place momentum update ``v = m v - lr g; p = p + v``."""
    lr = state.lr0 if lr is None else lr
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        p = params[name]
        if grad.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {p.shape}")
    for name, grad in grads.items():
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(params[name])
        v = state.momentum * v - lr * grad
        state.velocities[name] = v
        params[name] += v
    state.step += 1
    return params


def ema_update(bundle: ModelBundle, beta: float) -> None:
    """Move the teacher towards the student: ``t = beta t + (1 - beta) s``."""
    if bundle.teacher is None:
        raise ValueError("bundle has no teacher")
    student = {}
    student.update(bundle.phi.named_parameters("phi"))
    student.update(bundle.g.named_parameters("g"))
    for name, t in bundle.teacher_parameters().items():
        t *= beta
        t += (1.0 - beta) * student[name]


def grl_lambda(progress: float) -> float:
    """Gradient-reversal ramp ``2 / (1 + exp(-10 p)) - 1``."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.reshape(-1)]}


def _decode_array(d: dict) -> np.ndarray:
    return np.array([float.fromhex(v) for v in d["data"]], dtype=np.float64).reshape(d["shape"])


def _encode_mlp(m: Mlp) -> dict:
    return {
        "activation": m.activation,
        "weights": [_encode_array(w) for w in m.weights],
        "biases": [_encode_array(b) for b in m.biases],
    }


def _decode_mlp(d: dict) -> Mlp:
    return Mlp([_decode_array(w) for w in d["weights"]], [_decode_array(b) for b in d["biases"]], d["activation"])


def bundle_to_dict(bundle: ModelBundle) -> dict:
    out = {
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "phi": bundle.phi.sizes,
            "g": bundle.g.sizes,
            "disc": bundle.disc.kind if bundle.disc else None,
            "n_classes": bundle.n_classes,
            "feature_dim": bundle.feature_dim,
        },
        "phi": _encode_mlp(bundle.phi),
        "g": _encode_mlp(bundle.g),
        "disc": None,
        "teacher": None,
    }
    if bundle.disc is not None:
        out["disc"] = {
            "kind": bundle.disc.kind,
            "n_classes": bundle.disc.n_classes,
            "feature_dim": bundle.disc.feature_dim,
            "heads": [_encode_mlp(h) for h in bundle.disc.heads],
        }
    if bundle.teacher is not None:
        out["teacher"] = [_encode_mlp(bundle.teacher[0]), _encode_mlp(bundle.teacher[1])]
    return out


def bundle_from_dict(d: dict) -> ModelBundle:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    disc = None
    if d["disc"] is not None:
        dd = d["disc"]
        disc = Discriminator(dd["kind"], [_decode_mlp(h) for h in dd["heads"]], dd["n_classes"], dd["feature_dim"])
    teacher = None
    if d["teacher"] is not None:
        teacher = (_decode_mlp(d["teacher"][0]), _decode_mlp(d["teacher"][1]))
    return ModelBundle(_decode_mlp(d["phi"]), _decode_mlp(d["g"]), disc, teacher)


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(bundle_to_dict(bundle), indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> ModelBundle:
    return bundle_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
