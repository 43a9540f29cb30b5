"""Procedural class-conditional pattern world with a machine-checkable
structural validity predicate.

Eight pattern families on a 32x32 canvas stand in for natural image
classes. Every class has a brute-force template checker: project the
feature map back to one channel, match against a discretized grid of
ideal templates (intensity/background solved per template by a clamped
affine least-squares fit), and take the minimum normalized L2 residual
as the violation score. A sample is valid when the violation is below
the class threshold frozen in the corpus manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .nn import DTYPE
from .rng import StreamKey

PATTERN_KINDS = (
    "ring", "disk", "cross", "v-stripes", "h-stripes",
    "checkerboard", "frame", "two-disks",
)

NOISE_SIGMA = 0.02
INTENSITY_RANGE = (0.7, 1.0)
BACKGROUND_RANGE = (0.0, 0.15)
# affine-fit clamps, slightly wider than the generator ranges
_A_CLAMP = (0.5, 1.2)
_B_CLAMP = (-0.1, 0.3)


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    kind: str
    ranges: dict  # geometry parameter name -> (lo, hi)


def default_class_specs(n_classes=8, canvas=32):
    if n_classes != 8 or canvas != 32:
        raise ValueError("default world is defined for 8 classes on a 32x32 canvas")
    c = canvas / 2.0
    geo = {
        "ring": {"cx": (c - 3, c + 3), "cy": (c - 3, c + 3), "r": (7, 11), "t": (2.5, 4.5)},
        "disk": {"cx": (c - 4, c + 4), "cy": (c - 4, c + 4), "r": (5, 9)},
        "cross": {"cx": (c - 3, c + 3), "cy": (c - 3, c + 3), "w": (1.5, 3.0), "l": (8, 12)},
        "v-stripes": {"p": (6, 10), "phase": (0, 10)},
        "h-stripes": {"p": (6, 10), "phase": (0, 10)},
        "checkerboard": {"p": (8, 12), "px": (0, 12), "py": (0, 12)},
        "frame": {"m": (3, 6), "t": (2.5, 4.5)},
        "two-disks": {"cx": (c - 2, c + 2), "cy": (c - 3, c + 3), "sep": (10, 14),
                      "r": (3.5, 5.5)},
    }
    return [ClassSpec(i, kind, geo[kind]) for i, kind in enumerate(PATTERN_KINDS)]


# ---------------------------------------------------------------------------
# rendering -- all masks are in [0, 1] with ~1px anti-aliased edges and are
# vectorized over a leading parameter batch
# ---------------------------------------------------------------------------


def _grid(canvas):
    ax = np.arange(canvas, dtype=np.float64) + 0.5
    return np.meshgrid(ax, ax, indexing="xy")  # x varies along columns


def _soft(v):
    return np.clip(v, 0.0, 1.0)


def render_mask(kind, params, canvas=32):
    """Unit-intensity pattern mask; params values may be scalars or arrays."""
    x, y = _grid(canvas)
    p = {k: np.asarray(v, dtype=np.float64).reshape(-1, 1, 1) for k, v in params.items()}
    if kind == "ring":
        d = np.sqrt((x - p["cx"]) ** 2 + (y - p["cy"]) ** 2)
        m = _soft(p["r"] + 0.5 - d) - _soft(p["r"] - p["t"] + 0.5 - d)
    elif kind == "disk":
        d = np.sqrt((x - p["cx"]) ** 2 + (y - p["cy"]) ** 2)
        m = _soft(p["r"] + 0.5 - d)
    elif kind == "cross":
        hbar = _soft(p["l"] + 0.5 - np.abs(x - p["cx"])) * _soft(p["w"] + 0.5 - np.abs(y - p["cy"]))
        vbar = _soft(p["w"] + 0.5 - np.abs(x - p["cx"])) * _soft(p["l"] + 0.5 - np.abs(y - p["cy"]))
        m = np.maximum(hbar, vbar)
    elif kind == "v-stripes":
        m = 0.5 + 0.5 * np.cos(2.0 * np.pi * (x - p["phase"]) / p["p"])
    elif kind == "h-stripes":
        m = 0.5 + 0.5 * np.cos(2.0 * np.pi * (y - p["phase"]) / p["p"])
    elif kind == "checkerboard":
        m = 0.5 + 0.5 * (np.cos(2.0 * np.pi * (x - p["px"]) / p["p"])
                         * np.cos(2.0 * np.pi * (y - p["py"]) / p["p"]))
    elif kind == "frame":
        half = canvas / 2.0
        d = np.maximum(np.abs(x - half), np.abs(y - half))
        outer = half - p["m"]
        m = _soft(outer + 0.5 - d) - _soft(outer - p["t"] + 0.5 - d)
    elif kind == "two-disks":
        d1 = np.sqrt((x - (p["cx"] - p["sep"] / 2)) ** 2 + (y - p["cy"]) ** 2)
        d2 = np.sqrt((x - (p["cx"] + p["sep"] / 2)) ** 2 + (y - p["cy"]) ** 2)
        m = np.maximum(_soft(p["r"] + 0.5 - d1), _soft(p["r"] + 0.5 - d2))
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    return m


def channel_basis(channels, tag="channel-basis-v1"):
    """Fixed orthonormal basis; the render lives along its first vector."""
    g = StreamKey("world", tag).normals((channels, channels))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # sign-fixed for determinism
    return q.astype(DTYPE)


@dataclass
class SyntheticSample:
    class_id: int
    image: np.ndarray  # (H, W, C) float32
    params: dict


def draw_params(spec: ClassSpec, key: StreamKey):
    names = sorted(spec.ranges)
    us = key.child("params").uniforms(len(names) + 2)
    params = {n: spec.ranges[n][0] + u * (spec.ranges[n][1] - spec.ranges[n][0])
              for n, u in zip(names, us)}
    params["a"] = INTENSITY_RANGE[0] + us[-2] * (INTENSITY_RANGE[1] - INTENSITY_RANGE[0])
    params["b"] = BACKGROUND_RANGE[0] + us[-1] * (BACKGROUND_RANGE[1] - BACKGROUND_RANGE[0])
    return params


def generate_sample(spec: ClassSpec, key: StreamKey, canvas=32, channels=4,
                    noise_sigma=NOISE_SIGMA, basis=None) -> SyntheticSample:
    params = draw_params(spec, key)
    geo = {k: v for k, v in params.items() if k not in ("a", "b")}
    render = params["b"] + params["a"] * render_mask(spec.kind, geo, canvas)[0]
    if noise_sigma > 0:
        render = render + key.child("noise").normals((canvas, canvas), noise_sigma)
    if basis is None:
        basis = channel_basis(channels)
    image = (render[..., None] * basis[:, 0]).astype(DTYPE)
    return SyntheticSample(spec.class_id, image, params)


# ---------------------------------------------------------------------------
# validity checking
# ---------------------------------------------------------------------------


def _grid_steps(lo, hi, step):
    n = max(2, int(round((hi - lo) / step)) + 1)
    return np.linspace(lo, hi, n)


_TEMPLATE_STEPS = {
    "ring": {"cx": 1.0, "cy": 1.0, "r": 0.5, "t": 0.5},
    "disk": {"cx": 1.0, "cy": 1.0, "r": 0.5},
    "cross": {"cx": 1.0, "cy": 1.0, "w": 0.5, "l": 1.0},
    "v-stripes": {"p": 0.5, "phase": 0.5},
    "h-stripes": {"p": 0.5, "phase": 0.5},
    "checkerboard": {"p": 0.5, "px": 1.0, "py": 1.0},
    "frame": {"m": 0.5, "t": 0.5},
    "two-disks": {"cx": 1.0, "cy": 1.0, "sep": 1.0, "r": 0.5},
}


class TemplateBank:
    """Precomputed template matrix + per-template stats for one class."""

    def __init__(self, spec: ClassSpec, canvas):
        names = sorted(spec.ranges)
        axes = [_grid_steps(*spec.ranges[n], _TEMPLATE_STEPS[spec.kind][n]) for n in names]
        mesh = np.meshgrid(*axes, indexing="ij")
        params = {n: m.reshape(-1) for n, m in zip(names, mesh)}
        t = render_mask(spec.kind, params, canvas).reshape(len(mesh[0].reshape(-1)), -1)
        self.t = t.astype(np.float64)
        self.st = self.t.sum(axis=1)
        self.stt = (self.t * self.t).sum(axis=1)
        self.n_px = t.shape[1]


class World:
    """Class specs + checker state (channel basis, template banks, thresholds)."""

    def __init__(self, specs=None, canvas=32, channels=4, noise_sigma=NOISE_SIGMA):
        self.specs = list(specs) if specs is not None else default_class_specs(canvas=canvas)
        self.canvas = canvas
        self.channels = channels
        self.noise_sigma = noise_sigma
        self.basis = channel_basis(channels)
        self.thresholds = None  # set by calibrate() or loaded from a manifest
        self._banks = {}

    @property
    def n_classes(self):
        return len(self.specs)

    def bank(self, class_id) -> TemplateBank:
        if class_id not in self._banks:
            if not 0 <= class_id < len(self.specs):
                raise ValueError(f"unknown class id {class_id}")
            self._banks[class_id] = TemplateBank(self.specs[class_id], self.canvas)
        return self._banks[class_id]

    def project(self, image):
        """Feature map -> 1-channel render via the fixed basis."""
        return np.asarray(image, dtype=np.float64) @ self.basis[:, 0].astype(np.float64)

    def violation(self, image, class_id) -> float:
        """Min over the template grid of the RMS residual after a clamped
        affine (intensity, background) fit."""
        bank = self.bank(class_id)
        x = self.project(image).reshape(-1)
        n = bank.n_px
        sx = x.sum()
        sxx = float(x @ x)
        sxt = bank.t @ x
        denom = n * bank.stt - bank.st * bank.st
        a = np.where(denom > 1e-12, (n * sxt - bank.st * sx) / np.maximum(denom, 1e-12), 0.0)
        a = np.clip(a, *_A_CLAMP)
        b = np.clip((sx - a * bank.st) / n, *_B_CLAMP)
        res2 = (sxx + a * a * bank.stt + n * b * b
                - 2.0 * a * sxt - 2.0 * b * sx + 2.0 * a * b * bank.st)
        return float(np.sqrt(np.maximum(res2, 0.0).min() / n))

    def check_validity(self, image, class_id):
        """Returns (valid, violation); requires calibrated thresholds."""
        if self.thresholds is None:
            raise RuntimeError("world thresholds not calibrated")
        v = self.violation(image, class_id)
        return v <= self.thresholds[class_id], v

    def calibrate(self, key: StreamKey, n_per_class=400, percentile=99.5, margin=1.25):
        """Freeze per-class thresholds from fresh-sample violations."""
        thresholds = []
        for spec in self.specs:
            vs = []
            for i in range(n_per_class):
                s = generate_sample(spec, key.child("calib", spec.class_id, i),
                                    self.canvas, self.channels, self.noise_sigma, self.basis)
                vs.append(self.violation(s.image, spec.class_id))
            thresholds.append(float(np.percentile(vs, percentile) * margin))
        self.thresholds = thresholds
        return thresholds


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "eval")


@dataclass
class Corpus:
    world: World
    images: dict  # split -> (N, H, W, C) float32
    class_ids: dict  # split -> (N,) int32
    manifest: dict = field(default_factory=dict)

    def split(self, name):
        return self.images[name], self.class_ids[name]


def build_image_dataset(world: World, n_per_split: dict, key: StreamKey) -> Corpus:
    """Disjoint splits via per-split stream keys; calibrates thresholds."""
    world.calibrate(key.child("calibration"))
    images, class_ids = {}, {}
    for split, n_per_class in n_per_split.items():
        if n_per_class < 1:
            raise ValueError(f"{split}: n_per_class must be >= 1")
        ims, cids = [], []
        for spec in world.specs:
            for i in range(n_per_class):
                s = generate_sample(spec, key.child("split", split, spec.class_id, i),
                                    world.canvas, world.channels, world.noise_sigma,
                                    world.basis)
                ims.append(s.image)
                cids.append(spec.class_id)
        images[split] = np.stack(ims)
        class_ids[split] = np.asarray(cids, dtype=np.int32)
    manifest = {
        "classes": [{"id": s.class_id, "kind": s.kind,
                     "ranges": {k: list(v) for k, v in s.ranges.items()}}
                    for s in world.specs],
        "canvas": world.canvas,
        "channels": world.channels,
        "noise_sigma": world.noise_sigma,
        "thresholds": world.thresholds,
        "split_seeds": {split: repr(key.child("split", split).parts)
                        for split in n_per_split},
        "counts": {split: int(n) * world.n_classes for split, n in n_per_split.items()},
    }
    return Corpus(world, images, class_ids, manifest)


def save_corpus(path, corpus: Corpus):
    arrays = []
    for split in corpus.images:
        arrays.append((f"images/{split}", corpus.images[split]))
        arrays.append((f"class_ids/{split}", corpus.class_ids[split].astype("<i4")))
    write_container(path, "corpus", {"manifest": corpus.manifest}, arrays)


def load_corpus(path) -> Corpus:
    manifest, arrays = read_container(path, expect_kind="corpus")
    m = manifest["manifest"]
    specs = [ClassSpec(c["id"], c["kind"], {k: tuple(v) for k, v in c["ranges"].items()})
             for c in m["classes"]]
    world = World(specs, m["canvas"], m["channels"], m["noise_sigma"])
    world.thresholds = list(m["thresholds"])
    images, class_ids = {}, {}
    for name, arr in arrays.items():
        group, split = name.split("/")
        if group == "images":
            images[split] = arr.astype(DTYPE)
        else:
            class_ids[split] = arr.astype(np.int32)
    return Corpus(world, images, class_ids, m)


def write_pgm(path, render, lo=-0.1, hi=1.3):
    """Portable graymap dump of a 1-channel render for eyeballing."""
    scaled = np.clip((np.asarray(render) - lo) / (hi - lo), 0.0, 1.0)
    pixels = (scaled * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
