"""Rejection sampling over latent scales.

At each scale the prior runs once, m_k candidate token maps are drawn from
its distribution, each candidate's fused map is built incrementally from
the shared prefix, the scoring model ranks them, and the winner seeds the
next scale. Prior cost is therefore independent of the candidate count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .msvq import Codebook, MultiScaleCode, ScaleSchedule
from .nn import DTYPE, resize_bilinear, softmax
from .prior import (PriorModel, SamplerConfig, cfg_mix, predict_scale_logits,
                    sample_candidate_maps)
from .rng import StreamKey
from .scorer import ScoringModel, score_batch

GREEDY, SOFTMAX_TOPK = "greedy", "softmax-topk"


@dataclass(frozen=True)
class LsrsConfig:
    m_schedule: tuple  # candidates per scale, length K
    selection: str = GREEDY
    k_sel: int = 2
    skip_single: bool = True  # don't run the scorer when m_k == 1

    def __post_init__(self):
        if any(m < 1 for m in self.m_schedule):
            raise ValueError("lsrs: every m_k must be >= 1")
        if self.selection not in (GREEDY, SOFTMAX_TOPK):
            raise ValueError(f"lsrs: unknown selection kind {self.selection!r}")
        if self.k_sel < 1:
            raise ValueError("lsrs: k_sel must be >= 1")

    @classmethod
    def from_st_m(cls, st, m, n_scales, **kw):
        """Convenience parameterization: scales st..K sample m candidates,
        earlier scales sample one. st = K+1 disables selection entirely."""
        if not 1 <= st <= n_scales + 1:
            raise ValueError(f"lsrs: st must be in [1, {n_scales + 1}], got {st}")
        if m < 1:
            raise ValueError("lsrs: m must be >= 1")
        return cls(tuple(1 if k < st else m for k in range(1, n_scales + 1)), **kw)


def select_candidate(scores, kind, k_sel, key: StreamKey) -> int:
    """Greedy: argmax, ties -> lowest index. Softmax-top-k: restrict to the
    k_sel best (same tie rule), softmax over raw scores, inverse-CDF draw."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("select_candidate: empty score list")
    if kind == GREEDY:
        return int(np.argmax(scores))
    order = np.argsort(-scores, kind="stable")[: min(k_sel, scores.size)]
    probs = softmax(scores[order])
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    pick = int((cdf < key.uniforms(1)[0]).sum())
    return int(order[pick])


@dataclass
class GenTrace:
    """Per-scale candidate scores and counters for one generation."""

    chosen: list = field(default_factory=list)           # index per scale
    scores: list = field(default_factory=list)           # array per scale (empty if skipped)
    prior_forwards: int = 0
    scorer_forwards: int = 0
    fuse_ops: int = 0

    def rows(self, sample_id):
        """CSV rows (sample, scale, candidate, score, chosen)."""
        out = []
        for k, (sc, ch) in enumerate(zip(self.scores, self.chosen), start=1):
            if len(sc) == 0:
                out.append((sample_id, k, 0, "", 1))
            else:
                for i, s in enumerate(sc):
                    out.append((sample_id, k, i, f"{s:.10g}", int(i == ch)))
        return out


def lsrs_generate(prior: PriorModel, scorer: ScoringModel, c,
                  sampler_config: SamplerConfig, lsrs_config: LsrsConfig,
                  book: Codebook, schedule: ScaleSchedule, key: StreamKey):
    """One rejection-sampled generation. Returns (code, trace).

    With every m_k = 1 this consumes exactly the streams of the plain
    next-scale loop, so outputs are bit-identical to generate_baseline.
    """
    if len(lsrs_config.m_schedule) != schedule.k:
        raise ValueError(f"lsrs: m_schedule length {len(lsrs_config.m_schedule)} "
                         f"!= K = {schedule.k}")
    hf, wf = schedule.full
    e = np.zeros((hf, wf, book.c), dtype=DTYPE)
    trace = GenTrace()
    maps = []
    for k in range(1, schedule.k + 1):
        logits = predict_scale_logits(prior, e, c, k, schedule)
        trace.prior_forwards += 1
        if sampler_config.cfg_scale > 0:
            uncond = predict_scale_logits(prior, e, prior.n_classes, k, schedule)
            trace.prior_forwards += 1
            logits = cfg_mix(logits, uncond, sampler_config.cfg_scale)
        m_k = lsrs_config.m_schedule[k - 1]
        cand_keys = [key.child("k", k, "cand", i) for i in range(m_k)]
        candidates = sample_candidate_maps(logits, sampler_config, cand_keys)
        if m_k == 1 and lsrs_config.skip_single:
            chosen = 0
            e = e + resize_bilinear(book.vectors[candidates[0]], hf, wf)
            trace.fuse_ops += 1
            trace.scores.append(np.empty(0))
        else:
            embeds = book.vectors[np.stack(candidates)]  # (m, h_k, w_k, C)
            e_cands = e[None] + resize_bilinear(embeds, hf, wf)
            trace.fuse_ops += m_k
            scores = score_batch(scorer, np.full(m_k, c), e_cands, np.full(m_k, k))
            trace.scorer_forwards += m_k
            chosen = select_candidate(scores, lsrs_config.selection,
                                      lsrs_config.k_sel, key.child("k", k, "select"))
            e = e_cands[chosen]
            trace.scores.append(scores)
        trace.chosen.append(chosen)
        maps.append(candidates[chosen])
    return MultiScaleCode(maps), trace
