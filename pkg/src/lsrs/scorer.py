"""Token-map scoring model: dataset construction from generated vs real
trajectories, the conv scorer over fused feature maps, the pairwise
log-sigmoid rank loss and the pointwise binary classification loss, and
the training loop with per-scale validation curves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .container import read_container, write_container
from .msvq import Codebook, MultiScaleCode, ScaleSchedule, encode_multiscale, fuse
from .nn import DTYPE, Tape
from .prior import PriorModel, SamplerConfig, generate_baseline
from .rng import StreamKey

REAL, GENERATED = 1, 0


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class ScoreDataset:
    """Full trajectories (one per generated or encoded-real sample) plus one
    record per (trajectory, scale) prefix."""

    schedule: ScaleSchedule
    vocab: int
    codes: np.ndarray          # (T, total_tokens) uint16, packed full codes
    traj_class: np.ndarray     # (T,)
    traj_label: np.ndarray     # (T,) 1 = real, 0 = generated
    rec_traj: np.ndarray       # (N,)
    rec_scale: np.ndarray      # (N,) 1-based scale index
    manifest: dict = field(default_factory=dict)
    _fused: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.rec_traj)

    @property
    def rec_class(self):
        return self.traj_class[self.rec_traj]

    @property
    def rec_label(self):
        return self.traj_label[self.rec_traj]

    def fused(self, rec_idx, book: Codebook):
        """e_k for one record, cached per (trajectory, scale)."""
        t, k = int(self.rec_traj[rec_idx]), int(self.rec_scale[rec_idx])
        cached = self._fused.get((t, k))
        if cached is None:
            code = MultiScaleCode.unpack(self.codes[t], self.schedule)
            cached = fuse(code.prefix(k), book, self.schedule)
            self._fused[(t, k)] = cached
        return cached

    def fused_batch(self, rec_ids, book: Codebook):
        return np.stack([self.fused(i, book) for i in rec_ids])

    def save(self, path):
        manifest = dict(self.manifest)
        manifest.update({
            "schedule": [list(d) for d in self.schedule.dims],
            "vocab": self.vocab,
        })
        write_container(path, "score-dataset", manifest, [
            ("codes", self.codes.astype("<u2")),
            ("traj_class", self.traj_class.astype("<i4")),
            ("traj_label", self.traj_label.astype("<i4")),
            ("rec_traj", self.rec_traj.astype("<i4")),
            ("rec_scale", self.rec_scale.astype("<i4")),
        ])

    @classmethod
    def load(cls, path):
        manifest, arrays = read_container(path, expect_kind="score-dataset")
        schedule = ScaleSchedule(tuple(tuple(d) for d in manifest.pop("schedule")))
        vocab = manifest.pop("vocab")
        manifest.pop("arrays", None)
        manifest.pop("kind", None)
        return cls(schedule, vocab,
                   arrays["codes"], arrays["traj_class"].astype(np.int32),
                   arrays["traj_label"].astype(np.int32),
                   arrays["rec_traj"].astype(np.int64),
                   arrays["rec_scale"].astype(np.int64), manifest)


def build_score_dataset(prior: PriorModel, corpus, book: Codebook,
                        schedule: ScaleSchedule, n_gen_per_class: int,
                        sampler_config: SamplerConfig, key: StreamKey) -> ScoreDataset:
    """Negatives: full generated trajectories, one datapoint per scale.
    Positives: encoded real train samples, matched in count per class.
    The generation stream pool ("score-gen") is disjoint from evaluation."""
    train_images, train_classes = corpus.split("train")
    n_classes = prior.n_classes
    codes, traj_class, traj_label = [], [], []
    for c in range(n_classes):
        gen_pool = key.child("score-gen", c)
        for i in range(n_gen_per_class):
            code, _ = generate_baseline(prior, c, sampler_config, book, schedule,
                                        gen_pool.child(i))
            codes.append(code.pack())
            traj_class.append(c)
            traj_label.append(GENERATED)
        pool = np.flatnonzero(train_classes == c)
        if pool.size == 0:
            raise ValueError(f"class {c}: no real training samples for positives")
        pick = pool[key.child("score-real", c).permutation(pool.size)[:n_gen_per_class]]
        if pick.size < n_gen_per_class:
            raise ValueError(f"class {c}: only {pick.size} real samples, "
                             f"need {n_gen_per_class}")
        for idx in pick:
            code, _ = encode_multiscale(train_images[idx], book, schedule)
            codes.append(code.pack())
            traj_class.append(c)
            traj_label.append(REAL)
    t = len(codes)
    rec_traj = np.repeat(np.arange(t), schedule.k)
    rec_scale = np.tile(np.arange(1, schedule.k + 1), t)
    counts = {}
    for c, y in zip(traj_class, traj_label):
        counts[f"class{c}/label{y}"] = counts.get(f"class{c}/label{y}", 0) + 1
    manifest = {
        "n_gen_per_class": n_gen_per_class,
        "per_scale_counts": counts,  # identical at every scale by construction
        "seed_pools": {"generated": repr(key.child("score-gen").parts),
                       "real": repr(key.child("score-real").parts)},
    }
    return ScoreDataset(schedule, book.v, np.stack(codes), np.asarray(traj_class, np.int32),
                        np.asarray(traj_label, np.int32), rec_traj, rec_scale, manifest)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

SCORER_WIDTHS = (32, 64, 128, 256)


class ScoringModel:
    """S(c, e_k, k): conv stack over the fused map down to a 256x2x2 feature,
    flattened to 1024, concatenated with 128-dim class and scale embeddings,
    fused by a 3-layer head into one scalar."""

    def __init__(self, n_classes, n_scales, channels, embed_dim=128,
                 key: StreamKey | None = None):
        key = key or StreamKey("scorer-init")
        self.n_classes = n_classes
        self.n_scales = n_scales
        self.channels = channels
        self.class_emb = nn.Embedding(n_classes, embed_dim, key.child("class_emb"))
        self.scale_emb = nn.Embedding(n_scales, embed_dim, key.child("scale_emb"))
        self.stem = nn.Conv(3, channels, SCORER_WIDTHS[0], key.child("stem"))
        blocks = []
        cin = SCORER_WIDTHS[0]
        for i, cout in enumerate(SCORER_WIDTHS):
            blocks.append(nn.ResidualBlock(cin, cout, key.child("block", i),
                                           downsample=True))
            cin = cout
        self.blocks = blocks
        feat_dim = SCORER_WIDTHS[-1] * 2 * 2 + 2 * embed_dim
        self.fuse1 = nn.Dense(feat_dim, 256, key.child("fuse1"))
        self.fuse2 = nn.Dense(256, 256, key.child("fuse2"))
        # zero head: a fresh scorer outputs exactly 0 for every input
        self.fuse3 = nn.Dense(256, 1, key.child("fuse3"), init_scale=0.0)
        self.act = nn.LeakyRelu()

    def named_params(self):
        out = []
        for name in ("class_emb", "scale_emb", "stem"):
            for pn, p in getattr(self, name).named_params():
                out.append((f"{name}.{pn}", p))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_params(prefix=f"block{i}."))
        for name in ("fuse1", "fuse2", "fuse3"):
            for pn, p in getattr(self, name).named_params():
                out.append((f"{name}.{pn}", p))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def forward_batch(self, e_batch, class_ids, scale_ids, tape: Tape | None = None):
        """scale_ids are 1-based scale indices; returns (B,) scores."""
        tape = tape or Tape()
        x = tape.apply(self.stem, e_batch.astype(DTYPE))
        for blk in self.blocks:
            x = blk.forward(x, tape)
        feats = tape.flatten(x)
        ce = tape.apply(self.class_emb, np.asarray(class_ids))
        se = tape.apply(self.scale_emb, np.asarray(scale_ids) - 1)
        h = tape.concat([feats, ce, se])
        h = tape.apply(self.act, tape.apply(self.fuse1, h))
        h = tape.apply(self.act, tape.apply(self.fuse2, h))
        out = tape.apply(self.fuse3, h)
        return out[:, 0], tape


def score(model: ScoringModel, c, e_k, k) -> float:
    """Deterministic scalar score of one fused prefix."""
    scores, _ = model.forward_batch(e_k[None], np.asarray([c]), np.asarray([k]))
    return float(scores[0])


def score_batch(model: ScoringModel, class_ids, e_batch, scale_ids) -> np.ndarray:
    scores, _ = model.forward_batch(e_batch, class_ids, scale_ids)
    return scores.astype(np.float64)


# ---------------------------------------------------------------------------
# losses (numerically stable log-sigmoid forms, float64 internals)
# ---------------------------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def pairwise_loss_from_scores(s_real, s_gen):
    """Mean of -log sigmoid(S_real - S_gen); returns (loss, d_real, d_gen)."""
    d = np.asarray(s_real, np.float64) - np.asarray(s_gen, np.float64)
    loss = float(_softplus(-d).mean())
    g = -_sigmoid(-d) / d.size
    return loss, g, -g


def pointwise_loss_from_scores(s, y):
    """Mean binary cross-entropy on raw scores; returns (loss, d_scores)."""
    s = np.asarray(s, np.float64)
    y = np.asarray(y, np.float64)
    loss = float((_softplus(s) - y * s).mean())
    return loss, (_sigmoid(s) - y) / s.size


def pairwise_loss(model: ScoringModel, pairs, book: Codebook, schedule: ScaleSchedule):
    """pairs: iterable of (c, real_prefix_code, gen_prefix_code, k), each pair
    sharing class and scale."""
    s_real, s_gen = [], []
    for c, real_code, gen_code, k in pairs:
        if len(real_code) != k or len(gen_code) != k:
            raise ValueError(f"pair at scale {k}: prefix lengths "
                             f"{len(real_code)}/{len(gen_code)}")
        s_real.append(score(model, c, fuse(real_code, book, schedule), k))
        s_gen.append(score(model, c, fuse(gen_code, book, schedule), k))
    loss, _, _ = pairwise_loss_from_scores(np.asarray(s_real), np.asarray(s_gen))
    return loss


def pointwise_loss(model: ScoringModel, batch, book: Codebook, schedule: ScaleSchedule):
    """batch: iterable of (c, prefix_code, k, y) with binary labels y."""
    scores, ys = [], []
    for c, code, k, y in batch:
        if y not in (0, 1):
            raise ValueError(f"label must be binary, got {y}")
        scores.append(score(model, c, fuse(code, book, schedule), k))
        ys.append(y)
    loss, _ = pointwise_loss_from_scores(np.asarray(scores), np.asarray(ys))
    return loss


# ---------------------------------------------------------------------------
# ranking diagnostics shared with the eval harness
# ---------------------------------------------------------------------------


def ranking_stats(scores, labels, classes, scales, n_scales):
    """Per-scale pairwise loss and ranking accuracy over all matched
    (real, generated) cross pairs within (class, scale); ties count 0.5.
    Scales missing a label report None."""
    losses, accs = [], []
    for k in range(1, n_scales + 1):
        from_k = scales == k
        diffs = []
        for c in np.unique(classes):
            m = from_k & (classes == c)
            sr = scores[m & (labels == REAL)]
            sg = scores[m & (labels == GENERATED)]
            if sr.size and sg.size:
                diffs.append((sr[:, None] - sg[None, :]).reshape(-1))
        if not diffs:
            losses.append(None)
            accs.append(None)
            continue
        d = np.concatenate(diffs)
        losses.append(float(_softplus(-d).mean()))
        accs.append(float(np.mean(np.where(d > 0, 1.0, np.where(d < 0, 0.0, 0.5)))))
    return losses, accs


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ScorerTrainConfig:
    loss_kind: str = "pairwise"  # or "pointwise"
    epochs: int = 4
    batch: int = 128
    base_rate: float = 3e-4
    warmup_epochs: int = 1
    val_fraction: float = 0.2
    exclude_first_scale: bool = False

    def __post_init__(self):
        if self.loss_kind not in ("pairwise", "pointwise"):
            raise ValueError(f"loss_kind must be pairwise|pointwise, got {self.loss_kind}")


@dataclass
class ScorerCurves:
    val_loss: list   # per epoch (incl. epoch 0), per scale; None where n/a
    val_acc: list


def split_records(dataset: ScoreDataset, val_fraction, key: StreamKey):
    n = len(dataset)
    perm = key.child("split").permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    val = np.zeros(n, dtype=bool)
    val[perm[:n_val]] = True
    return ~val, val


def _make_pairs(dataset: ScoreDataset, train_mask, key: StreamKey, epoch,
                exclude_first_scale):
    rec_class, rec_label, rec_scale = dataset.rec_class, dataset.rec_label, dataset.rec_scale
    pairs = []
    for k in range(1, dataset.schedule.k + 1):
        if exclude_first_scale and k == 1:
            continue
        for c in range(int(rec_class.max()) + 1):
            m = train_mask & (rec_scale == k) & (rec_class == c)
            reals = np.flatnonzero(m & (rec_label == REAL))
            gens = np.flatnonzero(m & (rec_label == GENERATED))
            n_pairs = min(reals.size, gens.size)
            if n_pairs == 0:
                continue
            kr = key.child("pair", epoch, k, c)
            reals = reals[kr.child("r").permutation(reals.size)[:n_pairs]]
            gens = gens[kr.child("g").permutation(gens.size)[:n_pairs]]
            pairs.append(np.stack([reals, gens], axis=1))
    pairs = np.concatenate(pairs, axis=0)
    return pairs[key.child("pair-order", epoch).permutation(len(pairs))]


def evaluate_scorer(model: ScoringModel, dataset: ScoreDataset, book: Codebook,
                    mask, batch=256):
    """Scores every masked record (no recording); returns the score vector."""
    ids = np.flatnonzero(mask)
    out = np.empty(len(dataset), dtype=np.float64)
    for b0 in range(0, ids.size, batch):
        chunk = ids[b0:b0 + batch]
        e = dataset.fused_batch(chunk, book)
        out[chunk] = score_batch(model, dataset.rec_class[chunk], e,
                                 dataset.rec_scale[chunk])
    return out


def train_scorer(model: ScoringModel, dataset: ScoreDataset, book: Codebook,
                 cfg: ScorerTrainConfig, key: StreamKey):
    """Returns (train_mask, val_mask, ScorerCurves). Pairwise batches are
    re-paired each epoch, matched on (class, scale)."""
    train_mask, val_mask = split_records(dataset, cfg.val_fraction, key)
    if cfg.exclude_first_scale:
        train_use = train_mask & (dataset.rec_scale != 1)
    else:
        train_use = train_mask
    params = model.params()
    state = nn.AdamState.for_params(params)

    if cfg.loss_kind == "pairwise":
        n_pairs = len(_make_pairs(dataset, train_use, key, 0, cfg.exclude_first_scale))
        steps_per_epoch = max(1, (n_pairs + cfg.batch - 1) // cfg.batch)
    else:
        steps_per_epoch = max(1, (int(train_use.sum()) + cfg.batch - 1) // cfg.batch)
    sched = nn.LrSchedule(cfg.base_rate, cfg.warmup_epochs * steps_per_epoch,
                          cfg.epochs * steps_per_epoch)

    curves = ScorerCurves(val_loss=[], val_acc=[])

    def record_val():
        scores = evaluate_scorer(model, dataset, book, val_mask)
        vl, va = ranking_stats(scores[val_mask], dataset.rec_label[val_mask],
                               dataset.rec_class[val_mask], dataset.rec_scale[val_mask],
                               dataset.schedule.k)
        if cfg.exclude_first_scale:
            vl[0], va[0] = None, None  # reported n/a when scale 1 is excluded
        curves.val_loss.append(vl)
        curves.val_acc.append(va)

    record_val()
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.loss_kind == "pairwise":
            pairs = _make_pairs(dataset, train_use, key, epoch, cfg.exclude_first_scale)
            for b0 in range(0, len(pairs), cfg.batch):
                chunk = pairs[b0:b0 + cfg.batch]
                rec_ids = np.concatenate([chunk[:, 0], chunk[:, 1]])
                e = dataset.fused_batch(rec_ids, book)
                scores, tape = model.forward_batch(
                    e, dataset.rec_class[rec_ids], dataset.rec_scale[rec_ids])
                m = len(chunk)
                loss, d_real, d_gen = pairwise_loss_from_scores(scores[:m], scores[m:])
                if not np.isfinite(loss):
                    raise FloatingPointError(f"scorer training diverged at epoch {epoch}")
                upstream = np.zeros((2 * m, 1), dtype=DTYPE)
                upstream[:m, 0] = d_real
                upstream[m:, 0] = d_gen
                grads = nn.backprop(tape, upstream)
                step += 1
                nn.adam_update(params, grads.for_params(params), state,
                               nn.lr_at(sched, min(step, sched.total_steps)))
        else:
            train_ids = np.flatnonzero(train_use)
            order = key.child("order", epoch).permutation(train_ids.size)
            for b0 in range(0, train_ids.size, cfg.batch):
                rec_ids = train_ids[order[b0:b0 + cfg.batch]]
                e = dataset.fused_batch(rec_ids, book)
                scores, tape = model.forward_batch(
                    e, dataset.rec_class[rec_ids], dataset.rec_scale[rec_ids])
                loss, d_scores = pointwise_loss_from_scores(
                    scores, dataset.rec_label[rec_ids])
                if not np.isfinite(loss):
                    raise FloatingPointError(f"scorer training diverged at epoch {epoch}")
                grads = nn.backprop(tape, d_scores[:, None].astype(DTYPE))
                step += 1
                nn.adam_update(params, grads.for_params(params), state,
                               nn.lr_at(sched, min(step, sched.total_steps)))
        record_val()
    return train_mask, val_mask, curves
