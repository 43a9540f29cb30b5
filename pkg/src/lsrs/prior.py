"""Next-scale autoregressive prior.

A shared convolutional trunk predicts, from the fused prefix e_{k-1} plus
class and scale embeddings, an independent categorical over the codebook
for every position of the scale-k token map. All in-scale tokens are
sampled in parallel from their own counter-based streams, which preserves
the factorization the rejection-sampling stage is built to repair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .msvq import Codebook, MultiScaleCode, ScaleSchedule, fuse_incremental
from .nn import DTYPE, Tape, resize_bilinear
from .rng import StreamKey


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 64
    top_p: float = 0.96
    cfg_scale: float = 0.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("sampler: temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("sampler: top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("sampler: top_p must be in (0, 1]")
        if self.cfg_scale < 0:
            raise ValueError("sampler: cfg_scale must be >= 0")


class PriorModel:
    def __init__(self, n_classes, n_scales, channels, vocab, width=12,
                 embed_dim=16, n_blocks=3, key: StreamKey | None = None):
        key = key or StreamKey("prior-init")
        self.n_classes = n_classes
        self.n_scales = n_scales
        self.channels = channels
        self.vocab = vocab
        self.width = width
        # last class row is the unconditional (null) class for cfg
        self.class_emb = nn.Embedding(n_classes + 1, embed_dim, key.child("class_emb"))
        self.scale_emb = nn.Embedding(n_scales, embed_dim, key.child("scale_emb"))
        self.cond_proj = nn.Dense(embed_dim, width, key.child("cond_proj"))
        self.stem = nn.Conv(1, channels, width, key.child("stem"))
        self.blocks = [nn.ResidualBlock(width, width, key.child("block", i))
                       for i in range(n_blocks)]
        # zero head: uniform logits at init, so the initial loss is ln V
        self.head = nn.Conv(1, width, vocab, key.child("head"), init_scale=0.0)

    def named_params(self):
        out = []
        for name in ("class_emb", "scale_emb", "cond_proj", "stem"):
            for pn, p in getattr(self, name).named_params():
                out.append((f"{name}.{pn}", p))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_params(prefix=f"block{i}."))
        for pn, p in self.head.named_params():
            out.append((f"head.{pn}", p))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def forward_batch(self, e_prev_scaled, class_ids, k, tape: Tape | None = None):
        """Logits for scale k (1-based). e_prev_scaled is already resized to
        (h_k, w_k); shape (B, h_k, w_k, C). Returns (B, h_k, w_k, V)."""
        tape = tape or Tape()
        cond = tape.add(tape.apply(self.class_emb, np.asarray(class_ids)),
                        tape.apply(self.scale_emb, np.full(len(class_ids), k - 1)))
        x = tape.apply(self.stem, e_prev_scaled)
        x = tape.site_add(x, tape.apply(self.cond_proj, cond))
        for blk in self.blocks:
            x = blk.forward(x, tape)
        return tape.apply(self.head, x), tape


def predict_scale_logits(model: PriorModel, e_prev, c, k, schedule: ScaleSchedule):
    """Deterministic per-position logits for scale k from the fused prefix.

    e_prev is the full-resolution fused map (the zero map for k = 1); the
    trunk runs at the target scale's native resolution.
    """
    if not 1 <= k <= schedule.k:
        raise ValueError(f"scale index {k} outside [1, {schedule.k}]")
    h, w = schedule.dims[k - 1]
    e_scaled = resize_bilinear(e_prev.astype(DTYPE), h, w)
    logits, _ = model.forward_batch(e_scaled[None], np.asarray([c]), k)
    return logits[0]


def cfg_mix(cond, uncond, s):
    """(1 + s) * cond - s * uncond, elementwise."""
    if cond.shape != uncond.shape:
        raise nn.ShapeError(f"cfg_mix: shapes {cond.shape} vs {uncond.shape}")
    return (1.0 + s) * cond - s * uncond


# ---------------------------------------------------------------------------
# in-scale sampling: temperature -> top-k -> top-p -> renormalize -> inverse CDF
# ---------------------------------------------------------------------------


def _truncated_cdf(logits2d, config: SamplerConfig):
    """Per-position cdf over the vocab in sorted order plus the sort index.

    Rows are sorted by (-logit, index); top-k keeps exactly the first
    `top_k` entries, top-p then keeps the shortest prefix whose cumulative
    (renormalized) mass reaches top_p. Everything is a pure function of
    (logits, config), shared by all candidates at a scale.
    """
    p, v = logits2d.shape
    z = logits2d.astype(np.float64) / config.temperature
    order = np.argsort(-z, axis=1, kind="stable")
    z_sorted = np.take_along_axis(z, order, axis=1)
    z_sorted -= z_sorted[:, :1]
    probs = np.exp(z_sorted)
    k = min(config.top_k, v)
    probs[:, k:] = 0.0
    probs /= probs.sum(axis=1, keepdims=True)
    if config.top_p < 1.0:
        csum = np.cumsum(probs, axis=1)
        # keep entries whose preceding cumulative mass is still below top_p
        keep = (csum - probs) < config.top_p
        keep[:, 0] = True
        probs = np.where(keep, probs, 0.0)
        probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    # pin the cdf to exactly 1 from the last kept entry on, so a uniform
    # draw close to 1 can never index past the truncation
    last_kept = (probs > 0).sum(axis=1) - 1
    cdf[np.arange(p), last_kept] = 1.0
    cdf = np.maximum.accumulate(cdf, axis=1)
    return cdf, order


def sample_token_map(logits, config: SamplerConfig, key: StreamKey):
    """Draw one token map; every position uses its own stream counter."""
    h, w, v = logits.shape
    cdf, order = _truncated_cdf(logits.reshape(h * w, v), config)
    us = key.uniforms(h * w)
    picks = (cdf < us[:, None]).sum(axis=1)
    ids = np.take_along_axis(order, picks[:, None], axis=1)[:, 0]
    return ids.reshape(h, w).astype(np.int32)


def sample_candidate_maps(logits, config: SamplerConfig, keys):
    """Draw several token maps from shared logits, one stream per candidate."""
    h, w, v = logits.shape
    cdf, order = _truncated_cdf(logits.reshape(h * w, v), config)
    out = []
    for key in keys:
        us = key.uniforms(h * w)
        picks = (cdf < us[:, None]).sum(axis=1)
        out.append(np.take_along_axis(order, picks[:, None], axis=1)[:, 0]
                   .reshape(h, w).astype(np.int32))
    return out


# ---------------------------------------------------------------------------
# training (teacher-forced maximum likelihood over all scales)
# ---------------------------------------------------------------------------


@dataclass
class PriorTrainConfig:
    epochs: int = 3
    batch: int = 64
    base_rate: float = 3e-4
    warmup_epochs: int = 1
    class_drop_p: float = 0.1


def _softmax_xent(logits, targets):
    """Mean per-token CE and d(loss)/d(logits) in one pass (float32)."""
    b = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    z = b - b.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    loss = -logp[np.arange(t.size), t].mean()
    grad = e / se
    grad[np.arange(t.size), t] -= 1.0
    return float(loss), (grad / t.size).reshape(logits.shape).astype(DTYPE)


def train_prior(model: PriorModel, codes, class_ids, book: Codebook,
                schedule: ScaleSchedule, cfg: PriorTrainConfig, key: StreamKey):
    """Teacher forcing: e_{k-1} is built from ground-truth codes; per-position
    cross-entropy summed over scales. Returns the per-epoch loss curve."""
    n = len(codes)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    packed = [c.pack() for c in codes]
    params = model.params()
    state = nn.AdamState.for_params(params)
    steps_per_epoch = (n + cfg.batch - 1) // cfg.batch
    sched = nn.LrSchedule(cfg.base_rate, cfg.warmup_epochs * steps_per_epoch,
                          cfg.epochs * steps_per_epoch)
    hf, wf = schedule.full
    total_tokens = sum(h * w for h, w in schedule.dims)
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = key.child("perm", epoch).permutation(n)
        drop = key.child("drop", epoch).uniforms(n) < cfg.class_drop_p
        epoch_loss = 0.0
        epoch_tokens = 0
        for b0 in range(0, n, cfg.batch):
            idx = perm[b0:b0 + cfg.batch]
            bsz = len(idx)
            cids = class_ids[idx].copy()
            cids[drop[idx]] = model.n_classes  # null class for cfg training
            maps = [MultiScaleCode.unpack(packed[i], schedule) for i in idx]
            e_prev = np.zeros((bsz, hf, wf, book.c), dtype=DTYPE)
            grad_acc = [np.zeros_like(p) for p in params]
            batch_loss = 0.0
            for k in range(1, schedule.k + 1):
                h, w = schedule.dims[k - 1]
                targets = np.stack([m.maps[k - 1] for m in maps])
                e_scaled = resize_bilinear(e_prev, h, w)
                logits, tape = model.forward_batch(e_scaled, cids, k)
                loss_k, dlogits = _softmax_xent(logits, targets)
                if not np.isfinite(loss_k):
                    raise FloatingPointError(
                        f"prior training diverged at epoch {epoch} scale {k}"
                    )
                weight = (h * w) / total_tokens
                grads = nn.backprop(tape, dlogits * DTYPE(weight))
                for acc, g in zip(grad_acc, grads.for_params(params)):
                    acc += g
                batch_loss += loss_k * weight
                if k < schedule.k:
                    contrib = book.vectors[targets.reshape(bsz, -1)].reshape(bsz, h, w, -1)
                    e_prev = e_prev + resize_bilinear(contrib, hf, wf)
            adam_rate = nn.lr_at(sched, min(step + 1, sched.total_steps))
            nn.adam_update(params, grad_acc, state, adam_rate)
            step += 1
            epoch_loss += batch_loss * bsz
            epoch_tokens += bsz
        curve.append(epoch_loss / epoch_tokens)
    return curve


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class GenStats:
    prior_forwards: int = 0
    fuse_ops: int = 0


def generate_baseline(model: PriorModel, c, config: SamplerConfig, book: Codebook,
                      schedule: ScaleSchedule, key: StreamKey):
    """Plain next-scale loop: K prior forwards (2K with cfg), independent
    in-scale sampling, incremental fusion. Returns (code, stats)."""
    hf, wf = schedule.full
    e = np.zeros((hf, wf, book.c), dtype=DTYPE)
    stats = GenStats()
    maps = []
    for k in range(1, schedule.k + 1):
        logits = predict_scale_logits(model, e, c, k, schedule)
        stats.prior_forwards += 1
        if config.cfg_scale > 0:
            uncond = predict_scale_logits(model, e, model.n_classes, k, schedule)
            stats.prior_forwards += 1
            logits = cfg_mix(logits, uncond, config.cfg_scale)
        r_k = sample_token_map(logits, config, key.child("k", k, "cand", 0))
        e = fuse_incremental(e, r_k, book, schedule)
        stats.fuse_ops += 1
        maps.append(r_k)
    return MultiScaleCode(maps), stats
