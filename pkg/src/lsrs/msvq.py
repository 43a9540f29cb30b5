"""Multi-scale residual vector quantizer: shared codebook, residual
encoding loop, and the fusion operator (embed each token map, upsample to
full resolution, sum) plus its O(1)-per-scale incremental form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .nn import DTYPE, resize_bilinear
from .rng import StreamKey


@dataclass(frozen=True)
class ScaleSchedule:
    dims: tuple  # ((h_1, w_1), ..., (h_K, w_K)), coarse to fine

    def __post_init__(self):
        dims = tuple((int(h), int(w)) for h, w in self.dims)
        object.__setattr__(self, "dims", dims)
        if not dims:
            raise ValueError("schedule: empty")
        if dims[0] != (1, 1):
            raise ValueError(f"schedule: first scale must be (1, 1), got {dims[0]}")
        for a, b in zip(dims, dims[1:]):
            if a[0] * a[1] >= b[0] * b[1]:
                raise ValueError(f"schedule: scales must strictly grow, {a} then {b}")

    @property
    def k(self):
        return len(self.dims)

    @property
    def full(self):
        return self.dims[-1]

    def tokens_at(self, k):
        h, w = self.dims[k - 1]
        return h * w


def default_schedule(canvas=32):
    dims = [(1, 1)]
    s = 2
    while s < canvas:
        dims.append((s, s))
        s *= 2
    dims.append((canvas, canvas))
    return ScaleSchedule(tuple(dims))


@dataclass
class Codebook:
    vectors: np.ndarray  # (V, C) float32

    @property
    def v(self):
        return self.vectors.shape[0]

    @property
    def c(self):
        return self.vectors.shape[1]

    def save(self, path, schedule: ScaleSchedule, meta=None):
        manifest = {"v": self.v, "c": self.c, "schedule": [list(d) for d in schedule.dims]}
        if meta:
            manifest["meta"] = meta
        write_container(path, "codebook", manifest, [("vectors", self.vectors)])

    @classmethod
    def load(cls, path):
        manifest, arrays = read_container(path, expect_kind="codebook")
        schedule = ScaleSchedule(tuple(tuple(d) for d in manifest["schedule"]))
        return cls(vectors=arrays["vectors"].astype(DTYPE)), schedule


class MultiScaleCode:
    """Ordered token maps r_1..r_k (possibly a prefix during generation)."""

    __slots__ = ("maps",)

    def __init__(self, maps):
        self.maps = [np.asarray(m, dtype=np.int32) for m in maps]

    def __len__(self):
        return len(self.maps)

    def validate(self, schedule: ScaleSchedule, v: int):
        if len(self.maps) > schedule.k:
            raise ValueError(f"code has {len(self.maps)} scales, schedule has {schedule.k}")
        for i, m in enumerate(self.maps):
            if m.shape != schedule.dims[i]:
                raise ValueError(f"scale {i + 1}: shape {m.shape} != {schedule.dims[i]}")
            if m.size and (m.min() < 0 or m.max() >= v):
                raise ValueError(f"scale {i + 1}: token id outside [0, {v})")

    def prefix(self, k):
        return MultiScaleCode(self.maps[:k])

    def pack(self):
        """Flat uint16 id stream, scale shapes implied by the schedule."""
        return np.concatenate([m.reshape(-1) for m in self.maps]).astype("<u2")

    @classmethod
    def unpack(cls, flat, schedule: ScaleSchedule, n_scales=None):
        n_scales = schedule.k if n_scales is None else n_scales
        maps, off = [], 0
        for h, w in schedule.dims[:n_scales]:
            maps.append(flat[off : off + h * w].reshape(h, w).astype(np.int32))
            off += h * w
        return cls(maps)


def nearest_ids(vectors: np.ndarray, book: Codebook) -> np.ndarray:
    """Per-row nearest codebook index, Euclidean; ties -> lowest index."""
    b = book.vectors
    d = (
        (vectors * vectors).sum(axis=1, keepdims=True)
        - 2.0 * (vectors @ b.T)
        + (b * b).sum(axis=1)
    )
    return np.argmin(d, axis=1).astype(np.int32)


def encode_multiscale(f: np.ndarray, book: Codebook, schedule: ScaleSchedule):
    """Residual loop over scales; returns (code, residual l2 norm after each)."""
    hf, wf = schedule.full
    if f.shape != (hf, wf, book.c):
        raise ValueError(f"encode: feature map {f.shape} != {(hf, wf, book.c)}")
    residual = f.astype(DTYPE).copy()
    maps, norms = [], []
    for h, w in schedule.dims:
        z = resize_bilinear(residual, h, w)
        ids = nearest_ids(z.reshape(-1, book.c), book).reshape(h, w)
        residual -= resize_bilinear(book.vectors[ids], hf, wf)
        maps.append(ids)
        norms.append(float(np.sqrt(np.sum(residual.astype(np.float64) ** 2))))
    return MultiScaleCode(maps), norms


def fuse(code: MultiScaleCode, book: Codebook, schedule: ScaleSchedule) -> np.ndarray:
    """e_k = sum over j<=k of upsample(embed(r_j)) at full resolution."""
    if len(code) == 0:
        raise ValueError("fuse: empty prefix")
    hf, wf = schedule.full
    e = np.zeros((hf, wf, book.c), dtype=DTYPE)
    for ids in code.maps:
        e += resize_bilinear(book.vectors[ids], hf, wf)
    return e


def fuse_incremental(e_prev: np.ndarray, r_k: np.ndarray, book: Codebook,
                     schedule: ScaleSchedule) -> np.ndarray:
    """fuse(r_<=k) given e_{k-1}; cost independent of k."""
    hf, wf = schedule.full
    return e_prev + resize_bilinear(book.vectors[np.asarray(r_k, dtype=np.int32)], hf, wf)


# ---------------------------------------------------------------------------
# codebook fitting
# ---------------------------------------------------------------------------


def _kmeans(data, v, key: StreamKey, init=None, iters=25):
    n = data.shape[0]
    if init is None:
        # k-means++ seeding
        gen = key.child("seed").generator()
        centers = np.empty((v, data.shape[1]), dtype=np.float64)
        centers[0] = data[int(gen.integers(0, n))]
        d2 = ((data - centers[0]) ** 2).sum(axis=1)
        for i in range(1, v):
            total = d2.sum()
            if total <= 0:
                centers[i] = data[int(gen.integers(0, n))]
            else:
                r = gen.random() * total
                centers[i] = data[int(np.searchsorted(np.cumsum(d2), r))]
            d2 = np.minimum(d2, ((data - centers[i]) ** 2).sum(axis=1))
    else:
        centers = init.astype(np.float64).copy()

    data64 = data.astype(np.float64)
    assign = np.full(n, -1)
    for _ in range(iters):
        d = (
            (data64 * data64).sum(axis=1, keepdims=True)
            - 2.0 * (data64 @ centers.T)
            + (centers * centers).sum(axis=1)
        )
        new_assign = np.argmin(d, axis=1)
        counts = np.bincount(new_assign, minlength=v)
        for empty in np.flatnonzero(counts == 0):
            # deterministic re-seed: farthest point from its own centroid
            far = int(np.argmax(d[np.arange(n), new_assign]))
            centers[empty] = data64[far]
            new_assign[far] = empty
            counts = np.bincount(new_assign, minlength=v)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, data64)
        centers = sums / counts[:, None]
    return centers.astype(DTYPE)


def fit_codebook(samples, v, schedule: ScaleSchedule, key: StreamKey,
                 refine_rounds=2, iters=25) -> Codebook:
    """K-means over residual vectors from the multi-scale encoding loop.

    Round 0 clusters the raw downsampled vectors of every sample at every
    scale; each refinement round re-encodes the samples with the current
    codebook and refits on the residual vectors actually seen by the loop.
    """
    if v < 1:
        raise ValueError("fit_codebook: V must be >= 1")
    samples = np.asarray(samples, dtype=DTYPE)
    if samples.ndim != 4 or samples.shape[0] == 0:
        raise ValueError("fit_codebook: need a nonempty (N, H, W, C) sample stack")
    c = samples.shape[3]

    pool = []
    for f in samples:
        for h, w in schedule.dims:
            pool.append(resize_bilinear(f, h, w).reshape(-1, c))
    pool = np.concatenate(pool, axis=0)
    centers = _kmeans(pool, v, key.child("round", 0), iters=iters) if v > 1 else \
        pool.mean(axis=0, keepdims=True).astype(DTYPE)
    book = Codebook(vectors=centers)

    hf, wf = schedule.full
    for rnd in range(1, refine_rounds + 1):
        pool = []
        for f in samples:
            residual = f.copy()
            for h, w in schedule.dims:
                z = resize_bilinear(residual, h, w).reshape(-1, c)
                pool.append(z)
                ids = nearest_ids(z, book)
                residual -= resize_bilinear(book.vectors[ids].reshape(h, w, c), hf, wf)
        pool = np.concatenate(pool, axis=0)
        book = Codebook(vectors=_kmeans(pool, v, key.child("round", rnd),
                                        init=book.vectors, iters=iters))

    _dedupe(book, pool, key)
    return book


def _dedupe(book: Codebook, pool, key: StreamKey, tol=1e-9):
    """No two codebook vectors may coincide; re-seed duplicates from the pool."""
    vecs = book.vectors
    for i in range(vecs.shape[0]):
        for j in range(i + 1, vecs.shape[0]):
            if np.max(np.abs(vecs[i] - vecs[j])) <= tol:
                d = ((pool - vecs[j]) ** 2).sum(axis=1)
                vecs[j] = pool[int(np.argmax(d))]
    for i in range(vecs.shape[0]):
        for j in range(i + 1, vecs.shape[0]):
            if np.max(np.abs(vecs[i] - vecs[j])) <= tol:
                raise ValueError("fit_codebook: duplicate codebook vectors after dedupe")
