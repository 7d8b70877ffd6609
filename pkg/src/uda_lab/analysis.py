"""Diagnostics on frozen models: input sensitivity, discrepancy and adaptability.

All functions read parameters only; none of them mutates a bundle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .autodiff import Graph
from .datasets import DomainPair, one_hot
from .nn import Mlp, ModelBundle, SgdState, bind, sgd_step

Encoder = Callable[[np.ndarray], np.ndarray]


class IncompatibleDiagnostic(ValueError):
    """Raised when a diagnostic does not apply to the data modality."""


def as_encoder(phi: Union[ModelBundle, Mlp, Encoder]) -> Encoder:
    if isinstance(phi, ModelBundle):
        return phi.encode
    if isinstance(phi, Mlp):

        def encode(x):
            graph = Graph()
            return graph.value(phi.forward(graph, phi.bind(graph, False), graph.constant(x)))

        return encode
    return phi


# ---------------------------------------------------------------------------
# Jacobian sensitivity
# ---------------------------------------------------------------------------


@dataclass
class SensitivityReport:
    mean_jacobian_norm_source: float
    mean_jacobian_norm_target: float
    per_sample_source: np.ndarray
    per_sample_target: np.ndarray


def input_jacobian(bundle: ModelBundle, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    """``J[n, i, j] = d p_i / d x_j`` via one backward pass per class."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty((len(x), bundle.n_classes, x.shape[1]))
    for start in range(0, len(x), chunk):
        graph = Graph()
        bb = bind(graph, bundle, trainable=False)
        xi = graph.leaf(x[start : start + chunk])
        p = graph.softmax(bb.logits(graph, bb.encode(graph, xi)))
        for c in range(bundle.n_classes):
            # rows are independent, so the gradient of the column sum is row-wise
            root = graph.sum(graph.slice(p, (slice(None), c)))
            out[start : start + chunk, c] = graph.backward(root)[xi]
    return out


def jacobian_norms(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    j = input_jacobian(bundle, x)
    return np.sqrt((j * j).sum(axis=(1, 2)))


def mean_jacobian_norm(bundle: ModelBundle, x: np.ndarray) -> float:
    if len(x) == 0:
        raise ValueError("need at least one sample")
    return float(jacobian_norms(bundle, x).mean())


def sensitivity_report(bundle: ModelBundle, x_s: np.ndarray, x_t: np.ndarray) -> SensitivityReport:
    ns, nt = jacobian_norms(bundle, x_s), jacobian_norms(bundle, x_t)
    return SensitivityReport(float(ns.mean()), float(nt.mean()), ns, nt)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryCurve:
    t: np.ndarray
    norms: np.ndarray
    anchor_indices: np.ndarray
    anchor_angles: np.ndarray
    center: np.ndarray
    radius: float
    basis: np.ndarray  # [2, d], orthonormal rows spanning the anchor plane

    def point(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return self.center + self.radius * (np.cos(t)[:, None] * self.basis[0] + np.sin(t)[:, None] * self.basis[1])


def circle_through(anchors: np.ndarray):
    """Centre, radius, plane basis and angles of the circle through 3 points."""
    a = np.asarray(anchors, dtype=np.float64)
    if a.shape[0] != 3:
        raise ValueError("need exactly three anchors")
    u, v = a[1] - a[0], a[2] - a[0]
    e1 = u / np.linalg.norm(u) if np.linalg.norm(u) > 0 else u
    v_perp = v - (v @ e1) * e1
    scale = max(np.linalg.norm(u), np.linalg.norm(v), 1e-300)
    if np.linalg.norm(u) == 0 or np.linalg.norm(v_perp) <= 1e-12 * scale:
        raise ValueError("anchors are collinear (or repeated); no circle passes through them")
    e2 = v_perp / np.linalg.norm(v_perp)
    # 2-D coordinates relative to the first anchor
    bx, by = u @ e1, 0.0
    cx, cy = v @ e1, v @ e2
    d = 2.0 * (bx * cy - by * cx)
    ox = (cy * (bx * bx + by * by) - by * (cx * cx + cy * cy)) / d
    oy = (bx * (cx * cx + cy * cy) - cx * (bx * bx + by * by)) / d
    center = a[0] + ox * e1 + oy * e2
    radius = float(np.hypot(ox, oy))
    rel = a - center
    angles = np.mod(np.arctan2(rel @ e2, rel @ e1), 2 * np.pi)
    return center, radius, np.stack([e1, e2]), angles


def trajectory_sensitivity(bundle: ModelBundle, anchors: np.ndarray, n_points: int = 200) -> TrajectoryCurve:
    """Jacobian norm along the circle through three anchors."""
    center, radius, basis, angles = circle_through(anchors)
    t = 2 * np.pi * np.arange(n_points) / n_points
    curve = TrajectoryCurve(t, np.empty(0), np.empty(0, int), angles, center, radius, basis)
    curve.norms = jacobian_norms(bundle, curve.point(t))
    diff = np.abs(np.angle(np.exp(1j * (t[None, :] - angles[:, None]))))
    curve.anchor_indices = diff.argmin(axis=1)
    return curve


def choose_anchors(
    bundle: ModelBundle, x: np.ndarray, y: np.ndarray, same_class: bool, rng: np.random.Generator
) -> np.ndarray:
    """Three correctly classified samples, all of one class or spanning classes."""
    labels = np.asarray(y).argmax(axis=1)
    correct = bundle.predict_proba(x).argmax(axis=1) == labels
    pools = {c: np.flatnonzero(correct & (labels == c)) for c in np.unique(labels)}
    pools = {c: p for c, p in pools.items() if len(p)}
    if same_class:
        choices = [c for c, p in pools.items() if len(p) >= 3]
        if not choices:
            raise ValueError("no class has three correctly classified samples")
        c = choices[int(rng.integers(len(choices)))]
        idx = rng.choice(pools[c], 3, replace=False)
    else:
        classes = list(pools)
        if len(classes) < 2:
            raise ValueError("need correctly classified samples from two classes")
        picked = rng.permutation(classes)
        order = [picked[i % len(picked)] for i in range(3)]
        idx = []
        for c in order:
            rest = np.setdiff1d(pools[c], idx)
            if not len(rest):
                raise ValueError("not enough correctly classified samples")
            idx.append(int(rng.choice(rest)))
        idx = np.array(idx)
    return np.asarray(x)[idx]


# ---------------------------------------------------------------------------
# probe classifiers
# ---------------------------------------------------------------------------


@dataclass
class Probe:
    mlp: Mlp
    mean: np.ndarray
    std: np.ndarray

    def predict(self, z: np.ndarray) -> np.ndarray:
        graph = Graph()
        zn = graph.constant((z - self.mean) / self.std)
        return graph.value(self.mlp.forward(graph, self.mlp.bind(graph, False), zn)).argmax(axis=1)


def train_probe(
    z: np.ndarray,
    y: np.ndarray,
    n_out: int,
    seed: int,
    hidden: int = 32,
    epochs: int = 200,
    batch_size: int = 64,
    lr: float = 0.05,
) -> Probe:
    """Fresh [dim(z) -> hidden -> n_out] classifier trained with momentum SGD on standardised inputs."""
    rng = np.random.default_rng(seed)
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    zn = (z - mean) / std
    targets = one_hot(np.asarray(y, int), n_out)
    mlp = Mlp.init([z.shape[1], hidden, n_out], rng)
    params = mlp.named_parameters("p")
    state = SgdState(lr0=lr, momentum=0.9)
    for _ in range(epochs):
        perm = rng.permutation(len(zn))
        for start in range(0, len(zn), batch_size):
            idx = perm[start : start + batch_size]
            graph = Graph()
            bound = mlp.bind(graph)
            logits = mlp.forward(graph, bound, graph.constant(zn[idx]))
            logp = graph.log_softmax(logits)
            loss = graph.scale(graph.mean(graph.sum(graph.mul(graph.constant(targets[idx]), logp), axis=1)), -1.0)
            grads = graph.backward(loss)
            names = list(params)
            ids = [i for pair in bound for i in pair]
            sgd_step(state, params, {n: grads[i] for n, i in zip(names, ids)})
    return Probe(mlp, mean, std)


def _split_indices(n: int, seed: int, train_fraction: float = 0.8):
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return perm[:cut], perm[cut:]


def domain_probe_error(phi, x_s: np.ndarray, x_t: np.ndarray, seed: int = 0) -> float:
    """Balanced held-out error of a source-vs-target probe on representations.

    Equal-sized domains share one split permutation, so identical domains
    give identical train/test partitions.
    """
    if len(x_s) == 0 or len(x_t) == 0:
        raise ValueError("both domains need samples")
    encode = as_encoder(phi)
    z_s, z_t = encode(x_s), encode(x_t)
    tr_s, te_s = _split_indices(len(z_s), seed)
    tr_t, te_t = _split_indices(len(z_t), seed)
    z = np.concatenate([z_s[tr_s], z_t[tr_t]])
    d = np.concatenate([np.zeros(len(tr_s), int), np.ones(len(tr_t), int)])
    probe = train_probe(z, d, 2, seed)
    err_s = float(np.mean(probe.predict(z_s[te_s]) != 0))
    err_t = float(np.mean(probe.predict(z_t[te_t]) != 1))
    return 0.5 * (err_s + err_t)


def a_distance_from_error(err: float) -> float:
    """``2 (1 - 2 err)`` with worse-than-chance probes floored at chance."""
    return 2.0 * (1.0 - 2.0 * min(err, 0.5))


def a_distance(phi, x_s: np.ndarray, x_t: np.ndarray, seed: int = 0) -> float:
    return a_distance_from_error(domain_probe_error(phi, x_s, x_t, seed))


def _labelled_split(encode, pair: DomainPair, seed: int):
    z_s, z_t = encode(pair.x_s), encode(pair.x_t)
    y_s, y_t = pair.y_s.argmax(axis=1), pair.y_t_eval.argmax(axis=1)
    tr_s, te_s = _split_indices(len(z_s), seed)
    tr_t, te_t = _split_indices(len(z_t), seed)
    return (z_s[tr_s], y_s[tr_s], z_s[te_s], y_s[te_s]), (z_t[tr_t], y_t[tr_t], z_t[te_t], y_t[te_t])


def ideal_joint_risk(phi, pair: DomainPair, seed: int = 0) -> float:
    """Held-out source + target error of a probe trained on both labelled domains."""
    encode = as_encoder(phi)
    (zs, ys, zs_te, ys_te), (zt, yt, zt_te, yt_te) = _labelled_split(encode, pair, seed)
    probe = train_probe(np.concatenate([zs, zt]), np.concatenate([ys, yt]), pair.n_classes, seed)
    err_s = float(np.mean(probe.predict(zs_te) != ys_te))
    err_t = float(np.mean(probe.predict(zt_te) != yt_te))
    return err_s + err_t


def nonconservative_gap(phi, pair: DomainPair, seed: int = 0) -> float:
    """Target error of the joint-optimal probe minus that of a target-only probe.

    Reported raw; small negative values are optimisation noise.
    """
    encode = as_encoder(phi)
    (zs, ys, _, _), (zt, yt, zt_te, yt_te) = _labelled_split(encode, pair, seed)
    joint = train_probe(np.concatenate([zs, zt]), np.concatenate([ys, yt]), pair.n_classes, seed)
    target_only = train_probe(zt, yt, pair.n_classes, seed)
    return float(np.mean(joint.predict(zt_te) != yt_te) - np.mean(target_only.predict(zt_te) != yt_te))


def rho_estimate(err_before: float, err_after: float) -> float:
    """``(1 - after / before) ** -1``; defined only when the error drops."""
    if err_before <= 0:
        raise ValueError("the original target error must be positive")
    if err_after >= err_before:
        raise ValueError("no improvement; rho undefined on this side")
    return 1.0 / (1.0 - err_after / err_before)


@dataclass
class AdaptabilityReport:
    d_A: float
    lambda_estimate: float
    nonconservative_gap: float
    rho: float | None = None
    metadata: dict = field(default_factory=dict)


def adaptability_report(
    phi, pair: DomainPair, seed: int = 0, err_before: float | None = None, err_after: float | None = None
) -> AdaptabilityReport:
    rho = None
    if err_before is not None and err_after is not None and 0 < err_before and err_after < err_before:
        rho = rho_estimate(err_before, err_after)
    return AdaptabilityReport(
        a_distance(phi, pair.x_s, pair.x_t, seed),
        ideal_joint_risk(phi, pair, seed),
        nonconservative_gap(phi, pair, seed),
        rho,
        {"probe_seed": seed, "probe_hidden": 32, "probe_epochs": 200, "err_before": err_before, "err_after": err_after},
    )


# ---------------------------------------------------------------------------
# Fourier sensitivity
# ---------------------------------------------------------------------------


@dataclass
class FourierHeatmap:
    errors: np.ndarray  # [H, W], DC at (H // 2, W // 2)
    perturbation_norm: float
    domain: str = "target"

    def high_frequency_error(self) -> float:
        return float(self.errors[high_frequency_mask(self.errors.shape[0])].mean())


def high_frequency_mask(size: int) -> np.ndarray:
    """Entries whose Chebyshev distance from the centre is at least size // 4."""
    u = np.abs(np.arange(size) - size // 2)
    return np.maximum(u[:, None], u[None, :]) >= size // 4


def fourier_basis(size: int, u: int, v: int) -> np.ndarray:
    """Unit-norm real image whose spectrum sits at (u, v) and its mirror."""
    spec = np.zeros((size, size), dtype=np.complex128)
    p = (u % size, v % size)
    q = (-u % size, -v % size)
    if p == q:
        spec[p] = 1.0
    else:
        spec[p] = 0.5 + 0.5j
        spec[q] = 0.5 - 0.5j
    img = np.real(np.fft.ifft2(spec))
    return img / np.linalg.norm(img)


def fourier_sensitivity(
    bundle: ModelBundle,
    pair: DomainPair,
    domain: str = "target",
    perturbation_norm: float = 1.0,
    seed: int = 0,
) -> FourierHeatmap:
    """Error rate when every image gets ``+/- norm * basis(u, v)`` added, per frequency."""
    if pair.modality != "image":
        raise IncompatibleDiagnostic(f"Fourier sensitivity needs image data, got {pair.modality!r}")
    if domain not in ("source", "target"):
        raise ValueError("domain must be 'source' or 'target'")
    x, y = (pair.x_s, pair.y_s) if domain == "source" else (pair.x_t, pair.y_t_eval)
    labels = y.argmax(axis=1)
    size = int(round(np.sqrt(x.shape[1])))
    rng = np.random.default_rng(seed)
    errors = np.empty((size, size))
    for row in range(size):
        for col in range(size):
            basis = fourier_basis(size, row - size // 2, col - size // 2).reshape(-1)
            signs = rng.choice([-1.0, 1.0], size=len(x))
            xp = np.clip(x + perturbation_norm * signs[:, None] * basis[None, :], 0.0, 1.0)
            errors[row, col] = np.mean(bundle.predict_proba(xp).argmax(axis=1) != labels)
    return FourierHeatmap(errors, perturbation_norm, domain)


# ---------------------------------------------------------------------------
# artefact files
# ---------------------------------------------------------------------------


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def export_embeddings(phi, pair: DomainPair, path) -> Path:
    """CSV of ``z_0..z_{k-1},label,domain`` for source then target rows."""
    encode = as_encoder(phi)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        rows = (("source", pair.x_s, pair.y_s), ("target", pair.x_t, pair.y_t_eval))
        header_done = False
        for domain, x, y in rows:
            z = encode(x)
            if not header_done:
                w.writerow([f"z_{i}" for i in range(z.shape[1])] + ["label", "domain"])
                header_done = True
            for zi, label in zip(z, y.argmax(axis=1)):
                w.writerow([repr(float(v)) for v in zi] + [int(label), domain])
    return path


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = len(header) - 2
        z, labels, domains = [], [], []
        for rec in reader:
            z.append([float(v) for v in rec[:k]])
            labels.append(int(rec[k]))
            domains.append(rec[k + 1])
    return np.array(z).reshape(-1, k), np.array(labels), np.array(domains)


def write_sensitivity(report: SensitivityReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["domain", "n_samples", "mean_jacobian_norm"])
        w.writerow(["source", len(report.per_sample_source), repr(report.mean_jacobian_norm_source)])
        w.writerow(["target", len(report.per_sample_target), repr(report.mean_jacobian_norm_target)])
    return path


def write_trajectories(curves: dict[str, TrajectoryCurve], path) -> Path:
    """Long format: ``trajectory,index,t,jacobian_norm,is_anchor``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["trajectory", "index", "t", "jacobian_norm", "is_anchor"])
        for name, c in curves.items():
            anchors = set(int(i) for i in c.anchor_indices)
            for i, (t, n) in enumerate(zip(c.t, c.norms)):
                w.writerow([name, i, repr(float(t)), repr(float(n)), int(i in anchors)])
    return path


def write_fourier(maps: dict[str, FourierHeatmap], path) -> Path:
    """Long format: ``domain,u,v,error,perturbation_norm`` with (u, v) centred frequencies."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["domain", "u", "v", "error", "perturbation_norm"])
        for name, m in maps.items():
            size = m.errors.shape[0]
            for row in range(size):
                for col in range(m.errors.shape[1]):
                    w.writerow([name, row - size // 2, col - size // 2, repr(float(m.errors[row, col])), repr(m.perturbation_norm)])
    return path


def write_adaptability(report: AdaptabilityReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(asdict(report), indent=2) + "\n", encoding="utf-8")
    return path
