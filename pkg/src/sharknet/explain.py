"""Shapley-value attributions for image classifiers.

Three estimators share one contract:

* :func:`exact_shapley` enumerates all coalitions of a small game;
* :func:`kernel_shap` solves the Shapley-kernel weighted regression over
  patch coalitions (exact when every coalition is enumerated);
* :func:`gradient_path_attribution` averages ``(x - b) * grad f`` along
  random straight paths from background images, giving dense per-pixel maps.
"""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, SharkNetError
from .model import Model, forward, predict_logits
from .rng import make_rng
from .tensor import Graph, Tensor

MAX_EXACT_FEATURES = 20


class SingularSystemError(SharkNetError):
    exit_code = 3


def exact_shapley(value_fn: Callable, n_features: int) -> np.ndarray:
    """Shapley values of the game ``value_fn`` by full enumeration.

    ``value_fn`` receives a boolean coalition vector of length ``n_features``
    and returns a float (or a 1-d array, giving one column of values per
    output).
    """
    n = int(n_features)
    if n > MAX_EXACT_FEATURES:
        raise ValueError(f"exact enumeration refused for {n} > {MAX_EXACT_FEATURES} features")
    if n < 1:
        raise ValueError("need at least one feature")
    masks = np.arange(2 ** n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    values = np.array([value_fn(b) for b in bits], dtype=np.float64)
    sizes = bits.sum(axis=1)
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = np.array([fact[s] * fact[n - s - 1] / fact[n] if s < n else 0.0 for s in range(n + 1)])
    phi = np.zeros((n,) + values.shape[1:])
    for i in range(n):
        without = masks[~bits[:, i]]
        w = weight[sizes[without]]
        diff = values[without | (1 << i)] - values[without]
        phi[i] = np.tensordot(w, diff, axes=(0, 0))
    return phi


# -- coalition masking ---------------------------------------------------------


@dataclass
class CoalitionMasker:
    """Maps binary patch coalitions to masked images.

    ``grid`` is ``R`` (an ``R x R`` patch grid) or ``(rows, cols)``.  The
    patches partition the image; a patch outside the coalition is filled from
    the background (black, or a background image).
    """

    image_shape: tuple
    grid: object = 14
    policy: str = "black"

    def __post_init__(self):
        h, w = self.image_shape[:2]
        gr, gc = self.grid_shape
        if min(gr, gc) < 1 or gr > h or gc > w:
            raise ConfigError(f"patch grid {gr}x{gc} does not fit a {h}x{w} image")
        if self.policy not in ("black", "background"):
            raise ConfigError(f"unknown background policy {self.policy!r}")
        rows = np.arange(h) * gr // h
        cols = np.arange(w) * gc // w
        self.regions = rows[:, None] * gc + cols[None, :]

    @property
    def grid_shape(self) -> tuple:
        g = self.grid
        return (int(g), int(g)) if np.isscalar(g) else (int(g[0]), int(g[1]))

    @property
    def n_features(self) -> int:
        gr, gc = self.grid_shape
        return gr * gc

    def mask(self, image: np.ndarray, coalitions: np.ndarray, background: Optional[np.ndarray] = None) -> np.ndarray:
        coalitions = np.atleast_2d(np.asarray(coalitions, dtype=bool))
        keep = coalitions[:, self.regions]
        fill = np.zeros_like(image) if background is None else background
        return np.where(keep[..., None], image[None], fill[None]).astype(image.dtype)

    def patch_means(self, image: np.ndarray) -> np.ndarray:
        flat = image.reshape(-1, image.shape[-1]) if image.ndim == 3 else image.reshape(-1, 1)
        reg = self.regions.ravel()
        sums = np.zeros((self.n_features, flat.shape[1]))
        np.add.at(sums, reg, flat)
        return sums / np.bincount(reg, minlength=self.n_features)[:, None]

    def upsample(self, values: np.ndarray) -> np.ndarray:
        """Broadcast per-patch values (..., n_features) onto the pixel grid."""
        return values[..., self.regions]


@dataclass
class AttributionMap:
    values: np.ndarray          # K x R x R (patch) or K x H x W (pixel)
    base_values: np.ndarray     # K
    outputs: np.ndarray         # K, model output for the explained instance
    class_names: list
    method: str
    pixel_values: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def pixels(self) -> np.ndarray:
        return self.values if self.pixel_values is None else self.pixel_values

    def local_accuracy_residual(self) -> np.ndarray:
        k = self.values.shape[0]
        return self.values.reshape(k, -1).sum(axis=1) + self.base_values - self.outputs

    def write_csv(self, directory, stem: str = "attribution") -> list:
        """One CSV per class of the stored values (rows x columns)."""
        paths = []
        for k, name in enumerate(self.class_names):
            path = f"{directory}/{stem}_{k:02d}_{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for row in self.values[k]:
                    w.writerow([repr(float(v)) for v in row])
            paths.append(path)
        return paths


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch_fn(model, output: str) -> Callable:
    if output not in ("probability", "raw"):
        raise ConfigError(f"unknown output kind {output!r}")
    if isinstance(model, Model):
        base = lambda x: predict_logits(model, x)  # noqa: E731
    else:
        base = model

    def fn(x):
        out = np.asarray(base(x), dtype=np.float64)
        return _softmax(out) if output == "probability" else out

    return fn


def _coalition_values(fn, image, backgrounds, masker, coalitions, chunk=256) -> np.ndarray:
    acc = None
    for bg in backgrounds:
        outs = []
        for s in range(0, len(coalitions), chunk):
            outs.append(fn(masker.mask(image, coalitions[s:s + chunk], bg)))
        v = np.concatenate(outs, axis=0)
        acc = v if acc is None else acc + v
    return acc / len(backgrounds)


def _kernel_weight(n: int, s: np.ndarray) -> np.ndarray:
    return (n - 1) / (np.array([math.comb(n, int(k)) for k in s], dtype=np.float64) * s * (n - s))


def _sample_coalitions(n: int, n_samples: int, rng: np.random.Generator) -> tuple:
    sizes = np.arange(1, n)
    mass = (n - 1) / (sizes * (n - sizes))
    mass /= mass.sum()
    seen = {}
    pairs = max(1, n_samples // 2)
    for _ in range(pairs):
        s = rng.choice(sizes, p=mass)
        z = np.zeros(n, dtype=bool)
        z[rng.choice(n, size=s, replace=False)] = True
        for c in (z, ~z):
            key = c.tobytes()
            seen[key] = (c, seen[key][1] + 1.0) if key in seen else (c, 1.0)
    coal = np.array([c for c, _ in seen.values()])
    weights = np.array([w for _, w in seen.values()])
    return coal, weights


def _solve_constrained(z: np.ndarray, w: np.ndarray, y: np.ndarray, total: np.ndarray) -> np.ndarray:
    """Weighted least squares ``y ~ z @ phi`` subject to ``sum(phi) == total``."""
    n = z.shape[1]
    zf = z.astype(np.float64)
    a = zf[:, :-1] - zf[:, -1:]
    b = y - zf[:, -1:] * total[None, :]
    sw = np.sqrt(w)[:, None]
    aw, bw = a * sw, b * sw
    if n > 1 and np.linalg.matrix_rank(aw) < n - 1:
        raise SingularSystemError("Shapley regression is singular; increase n_samples")
    head = np.linalg.lstsq(aw, bw, rcond=None)[0] if n > 1 else np.zeros((0, y.shape[1]))
    last = total[None, :] - head.sum(axis=0, keepdims=True)
    return np.vstack([head, last])


def kernel_shap(model, instance: np.ndarray, background_set, masker: CoalitionMasker,
                n_samples: int = 2048, seed: int = 0, output: str = "probability",
                class_names: Optional[list] = None) -> AttributionMap:
    """KernelSHAP over the masker's patches, for every output class.

    ``model`` is a :class:`Model` or a batch function ``N x H x W x C -> N x K``
    returning logits (``output="probability"`` applies a softmax).  When
    ``2**n <= n_samples`` every coalition is enumerated and the result equals
    the exact Shapley values; otherwise coalitions are sampled in
    complementary pairs from the Shapley kernel.  The efficiency constraint
    is imposed, so attributions always sum to ``f(x) - base``.
    """
    fn = _as_batch_fn(model, output)
    image = np.asarray(instance)
    n = masker.n_features
    if masker.policy == "black":
        backgrounds = [np.zeros_like(image)]
    else:
        backgrounds = [np.asarray(b, dtype=image.dtype) for b in background_set]
        if not backgrounds:
            raise ConfigError("background_set must be non-empty")
    ends = np.array([np.zeros(n, bool), np.ones(n, bool)])
    v_ends = _coalition_values(fn, image, backgrounds, masker, ends)
    base, fx = v_ends[0], v_ends[1]
    if n <= MAX_EXACT_FEATURES and 2 ** n <= n_samples:
        codes = np.arange(1, 2 ** n - 1, dtype=np.int64)
        coal = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
        weights = _kernel_weight(n, coal.sum(axis=1))
        mode = "enumerated"
    else:
        coal, weights = _sample_coalitions(n, n_samples, make_rng(seed, "kernel-shap"))
        mode = "sampled"
    if n == 1:
        phi = (fx - base)[None, :]
    else:
        y = _coalition_values(fn, image, backgrounds, masker, coal) - base[None, :]
        phi = _solve_constrained(coal, weights, y, fx - base)
    k = phi.shape[1]
    names = class_names or (model.class_names if isinstance(model, Model) else [str(i) for i in range(k)])
    values = phi.T.reshape((k,) + masker.grid_shape)
    return AttributionMap(values, base, fx, list(names), "kernel",
                          pixel_values=masker.upsample(phi.T),
                          meta={"mode": mode, "n_coalitions": int(len(coal)), "policy": masker.policy})


@contextlib.contextmanager
def _frozen(model: Model):
    flags = [t.requires_grad for _, _, t in model.parameters]
    for _, _, t in model.parameters:
        t.requires_grad = False
    was_training = model.training_mode
    model.eval()
    try:
        yield
    finally:
        for (_, _, t), f in zip(model.parameters, flags):
            t.requires_grad = f
        model.training_mode = was_training


def gradient_path_attribution(model: Model, image: np.ndarray, background_set, n_steps: int = 32,
                              seed: int = 0, output: str = "probability", chunk: int = 128) -> AttributionMap:
    """Expected-gradients attribution per pixel and class.

    For every background image ``b``, ``n_steps`` path positions are drawn by
    stratified uniform sampling on (0, 1); the map is the mean of
    ``(x - b) * grad f_k(b + a (x - b))`` summed over channels.
    """
    if not isinstance(model, Model):
        raise ConfigError("gradient-path attribution needs a differentiable Model")
    if n_steps < 8:
        raise ConfigError(f"n_steps must be >= 8, got {n_steps}")
    if output not in ("probability", "raw"):
        raise ConfigError(f"unknown output kind {output!r}")
    x = np.asarray(image, dtype=np.float32)
    bgs = np.asarray(background_set, dtype=np.float32)
    if bgs.ndim == 3:
        bgs = bgs[None]
    if len(bgs) == 0:
        raise ConfigError("background_set must be non-empty")
    rng = make_rng(seed, "gradient-path")
    alphas = (np.arange(n_steps)[None, :] + rng.random((len(bgs), n_steps))) / n_steps
    b_idx = np.repeat(np.arange(len(bgs)), n_steps)
    alphas = alphas.ravel().astype(np.float32)
    k = len(model.class_names)
    total = np.zeros((k,) + x.shape, dtype=np.float64)
    with _frozen(model):
        for s in range(0, len(alphas), chunk):
            b = bgs[b_idx[s:s + chunk]]
            a = alphas[s:s + chunk, None, None, None]
            pts = Tensor(b + a * (x[None] - b), requires_grad=True)
            with Graph().recording() as graph:
                out = forward(model, pts)
                if output == "probability":
                    out = T.softmax(out)
            for c in range(k):
                pts.grad = None
                onehot = np.zeros(out.shape, dtype=out.dtype)
                onehot[:, c] = 1
                sel = T.tsum(T.mul(out, onehot))
                graph.backward(sel, retain_graph=True)
                total[c] += ((x[None] - b) * pts.grad).sum(axis=0)
            graph.release()
    attr = total / len(alphas)
    fn = _as_batch_fn(model, output)
    fx = fn(x[None])[0]
    base = fn(bgs).mean(axis=0)
    values = attr.sum(axis=-1)
    amap = AttributionMap(values, base, fx, list(model.class_names), "gradient-path",
                          meta={"n_steps": n_steps, "n_background": int(len(bgs))})
    amap.meta["completeness_residual"] = amap.local_accuracy_residual().tolist()
    return amap


def sample_background(labels, images: np.ndarray, per_class: int = 16, seed: int = 0) -> np.ndarray:
    """Up to ``per_class`` images of every class, drawn without replacement."""
    labels = np.asarray(labels)
    rng = make_rng(seed, "background")
    idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        idx.extend(rng.choice(members, size=min(per_class, len(members)), replace=False).tolist())
    return images[np.sort(idx)]


def foreground_mass_fraction(values: np.ndarray, mask: np.ndarray) -> float:
    """Share of total absolute attribution (summed over classes) inside ``mask``."""
    mag = np.abs(values).reshape(-1, *mask.shape).sum(axis=0)
    total = mag.sum()
    return float(mag[mask].sum() / total) if total > 0 else 1.0
