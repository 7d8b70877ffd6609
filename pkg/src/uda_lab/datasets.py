"""Synthetic source/target pairs with held-back target labels."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHIFT_KINDS = ("brightness_bias", "additive_texture")
GLYPHS = ("bar", "cross", "square", "disc")


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrainingView:
    """What training code is allowed to see: no target labels."""

    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray
    modality: str


@dataclass(frozen=True)
class DomainPair:
    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray
    y_t_eval: np.ndarray
    modality: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("x_s", "y_s", "x_t", "y_t_eval"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if len(self.x_s) != len(self.y_s) or len(self.x_t) != len(self.y_t_eval):
            raise ValueError("inputs and labels disagree in length")

    @property
    def n_classes(self) -> int:
        return self.y_s.shape[1]

    @property
    def dim(self) -> int:
        return self.x_s.shape[1]

    def training_view(self) -> TrainingView:
        return TrainingView(self.x_s, self.y_s, self.x_t, self.modality)

    def split(self, train_fraction: float = 0.8, seed: int = 0) -> tuple["DomainPair", "DomainPair"]:
        """Seeded per-domain split; equal-sized domains share one permutation."""
        parts = []
        for x, y in ((self.x_s, self.y_s), (self.x_t, self.y_t_eval)):
            perm = np.random.default_rng(seed).permutation(len(x))
            cut = int(round(train_fraction * len(x)))
            parts.append((x[perm[:cut]], y[perm[:cut]], x[perm[cut:]], y[perm[cut:]]))
        (xs_a, ys_a, xs_b, ys_b), (xt_a, yt_a, xt_b, yt_b) = parts
        meta = dict(self.metadata, split_seed=seed)
        return (
            DomainPair(xs_a, ys_a, xt_a, yt_a, self.modality, meta),
            DomainPair(xs_b, ys_b, xt_b, yt_b, self.modality, meta),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.x_s, self.y_s, self.x_t, self.y_t_eval):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _moons(n: int, noise: float, rng: np.random.Generator):
    n_upper = n // 2
    n_lower = n - n_upper
    t_up = rng.uniform(0.0, np.pi, n_upper)
    t_lo = rng.uniform(0.0, np.pi, n_lower)
    upper = np.stack([np.cos(t_up), np.sin(t_up)], axis=1)
    lower = np.stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)], axis=1)
    x = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n_upper, int), np.ones(n_lower, int)])
    perm = rng.permutation(n)
    return x[perm], y[perm]


def rotate_about_centroid(x: np.ndarray, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    c = x.mean(axis=0)
    return (x - c) @ rot.T + c


def two_moons(n_per_domain: int = 300, noise: float = 0.1, rotation_deg: float = 45.0, seed: int = 0) -> DomainPair:
    """Interleaved moons; the target is a fresh draw rotated about its centroid."""
    if n_per_domain < 2:
        raise ValueError("need at least two samples per domain")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    x_s, y_s = _moons(n_per_domain, noise, rng)
    x_t, y_t = _moons(n_per_domain, noise, rng)
    x_t = rotate_about_centroid(x_t, rotation_deg)
    meta = {"name": "two_moons", "n_per_domain": n_per_domain, "noise": noise, "rotation_deg": rotation_deg, "seed": seed}
    return DomainPair(x_s, one_hot(y_s, 2), x_t, one_hot(y_t, 2), "points2d", meta)


def shifted_blobs(
    C: int = 3,
    n: int = 300,
    d: int = 2,
    shift_vector=None,
    seed: int = 0,
    spread: float = 4.0,
    sigma: float = 0.5,
) -> DomainPair:
    """C isotropic Gaussian blobs; the target blobs are translated by ``shift_vector``.

    Class counts are identical in both domains.
    """
    if C < 2:
        raise ValueError("need at least two classes")
    shift = np.zeros(d) if shift_vector is None else np.asarray(shift_vector, dtype=np.float64)
    if shift.shape != (d,):
        raise ValueError(f"shift vector must have shape ({d},)")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-spread, spread, size=(C, d))
    y = np.arange(n) % C
    x_s = centers[y] + sigma * rng.standard_normal((n, d))
    x_t = centers[y] + sigma * rng.standard_normal((n, d)) + shift
    ps, pt = rng.permutation(n), rng.permutation(n)
    meta = {"name": "shifted_blobs", "C": C, "n": n, "d": d, "shift": shift.tolist(), "seed": seed}
    modality = "points2d" if d == 2 else "vector"
    return DomainPair(x_s[ps], one_hot(y[ps], C), x_t[pt], one_hot(y[pt], C), modality, meta)


def _glyph(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    s = rng.uniform(0.3, 0.55) * size
    cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    half = s / 2.0
    thick = 1.0
    if kind == "bar":
        mask = (np.abs(dx) <= thick) & (np.abs(dy) <= half)
    elif kind == "cross":
        mask = ((np.abs(dx) <= thick) & (np.abs(dy) <= half)) | ((np.abs(dy) <= thick) & (np.abs(dx) <= half))
    elif kind == "square":
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif kind == "disc":
        mask = dx * dx + dy * dy <= (0.65 * s) ** 2
    else:
        raise ValueError(f"unknown glyph {kind!r}")
    intensity = rng.uniform(0.6, 1.0)
    return mask * intensity


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    # high-frequency stripes with a random orientation and phase
    yy, xx = np.mgrid[0:size, 0:size]
    fy, fx = rng.choice([(0, 1), (1, 0), (1, 1)])
    freq = rng.uniform(0.35, 0.5)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 * (1.0 + np.cos(2 * np.pi * freq * (fy * yy + fx * xx) + phase))


def glyph_images(
    n: int = 400,
    size: int = 16,
    shift_kind: str = "additive_texture",
    seed: int = 0,
    shift_strength: float = 0.3,
    pixel_noise: float = 0.05,
) -> DomainPair:
    """Procedural 4-class glyphs (bar, cross, square, disc) flattened to rows.

    ``brightness_bias`` adds ``shift_strength`` to every target pixel;
    ``additive_texture`` adds ``shift_strength`` times a striped texture.
    Pixels are clipped to [0, 1].
    """
    if size < 8:
        raise ValueError("glyph images need size >= 8")
    if shift_kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {shift_kind!r}")
    rng = np.random.default_rng(seed)

    def draw(shifted: bool):
        labels = np.arange(n) % len(GLYPHS)
        rng.shuffle(labels)
        imgs = np.empty((n, size, size))
        for i, c in enumerate(labels):
            img = _glyph(GLYPHS[c], size, rng) + pixel_noise * rng.random((size, size))
            if shifted:
                if shift_kind == "brightness_bias":
                    img = img + shift_strength
                else:
                    img = img + shift_strength * _texture(size, rng)
            imgs[i] = np.clip(img, 0.0, 1.0)
        return imgs.reshape(n, -1), labels

    x_s, y_s = draw(False)
    x_t, y_t = draw(True)
    meta = {"name": "glyph_images", "n": n, "size": size, "shift_kind": shift_kind, "shift_strength": shift_strength, "seed": seed}
    return DomainPair(x_s, one_hot(y_s, 4), x_t, one_hot(y_t, 4), "image", meta)


GENERATORS = {
    "two_moons": two_moons,
    "shifted_blobs": shifted_blobs,
    "glyph_images": glyph_images,
}


def make_dataset(spec: dict, seed: int | None = None) -> DomainPair:
    """Build a pair from a ``{"name": ..., **kwargs}`` mapping."""
    spec = dict(spec)
    name = spec.pop("name")
    if name not in GENERATORS:
        raise ValueError(f"unknown dataset {name!r}")
    if seed is not None:
        spec["seed"] = seed
    return GENERATORS[name](**spec)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def save_csv(pair: DomainPair, path) -> Path:
    """Write ``x_0..x_{d-1},y,domain`` rows plus a ``.meta.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i}" for i in range(pair.dim)] + ["y", "domain"])
        for domain, x, y in (("source", pair.x_s, pair.y_s), ("target", pair.x_t, pair.y_t_eval)):
            for row, label in zip(x, y.argmax(axis=1)):
                w.writerow([repr(float(v)) for v in row] + [int(label), domain])
    meta = {"modality": pair.modality, "n_classes": pair.n_classes, "metadata": pair.metadata}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def load_csv(path, modality: str | None = None, n_classes: int | None = None) -> DomainPair:
    path = Path(path)
    sidecar = path.with_suffix(".meta.json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    rows = {"source": ([], []), "target": ([], [])}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 2
        for rec in reader:
            xs, ys = rows[rec[-1]]
            xs.append([float(v) for v in rec[:d]])
            ys.append(int(rec[d]))
    n_classes = n_classes or meta.get("n_classes") or 1 + max(rows["source"][1] + rows["target"][1])
    modality = modality or meta.get("modality") or ("points2d" if d == 2 else "vector")
    return DomainPair(
        np.array(rows["source"][0]).reshape(-1, d),
        one_hot(np.array(rows["source"][1], int), n_classes),
        np.array(rows["target"][0]).reshape(-1, d),
        one_hot(np.array(rows["target"][1], int), n_classes),
        modality,
        meta.get("metadata", {}),
    )
