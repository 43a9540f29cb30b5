"""Experiment harness: per-scale scorer diagnostics, the scale-replacement
ablation, evaluation rows (validity / diversity / Fréchet / counters),
parameter sweeps with CSV + manifest + replay, and compute-cost reporting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .frechet import FeatureExtractor, FrechetStats, diversity, frechet_distance, \
    stats_from_features
from .inference import LsrsConfig, lsrs_generate
from .msvq import Codebook, MultiScaleCode, ScaleSchedule, fuse
from .prior import PriorModel, SamplerConfig
from .rng import StreamKey
from .scorer import GENERATED, REAL, ScoreDataset, ScoringModel, evaluate_scorer, \
    ranking_stats
from .utils import pmap
from .world import World

EVAL_POOL = "eval"  # stream namespace, disjoint from training/score pools


# ---------------------------------------------------------------------------
# scorer diagnostics
# ---------------------------------------------------------------------------

HIST_BINS = 64
HIST_SMOOTH = 1e-9


@dataclass
class ScorerDiagnostics:
    per_scale_loss: list          # None where a scale has a single label
    per_scale_acc: list
    mean_score_gap: float         # mean(real) - mean(generated), scales >= 2
    histogram_kl: float           # KL(generated || real) over 64 smoothed bins
    bin_edges: np.ndarray
    real_hist: np.ndarray
    gen_hist: np.ndarray


def scorer_diagnostics(scorer: ScoringModel, dataset: ScoreDataset, book: Codebook,
                       mask) -> ScorerDiagnostics:
    """Held-out diagnostics; score distributions exclude the first scale,
    where the scorer is expected to sit at chance."""
    scores = evaluate_scorer(scorer, dataset, book, mask)
    labels = dataset.rec_label[mask]
    classes = dataset.rec_class[mask]
    scales = dataset.rec_scale[mask]
    sub = scores[mask]
    losses, accs = ranking_stats(sub, labels, classes, scales, dataset.schedule.k)

    late = scales >= 2
    real_s = sub[late & (labels == REAL)]
    gen_s = sub[late & (labels == GENERATED)]
    gap = float(real_s.mean() - gen_s.mean()) if real_s.size and gen_s.size else float("nan")

    pooled = np.concatenate([real_s, gen_s]) if real_s.size and gen_s.size else sub
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, HIST_BINS + 1)
    rh, _ = np.histogram(real_s, bins=edges)
    gh, _ = np.histogram(gen_s, bins=edges)
    pr = (rh + HIST_SMOOTH) / (rh.sum() + HIST_BINS * HIST_SMOOTH)
    pg = (gh + HIST_SMOOTH) / (gh.sum() + HIST_BINS * HIST_SMOOTH)
    kl = float(np.sum(pg * np.log(pg / pr)))
    return ScorerDiagnostics(losses, accs, gap, kl, edges, rh, gh)


# ---------------------------------------------------------------------------
# scale-replacement ablation
# ---------------------------------------------------------------------------


def scale_replacement_ablation(codes, class_ids, book: Codebook,
                               schedule: ScaleSchedule, world: World,
                               key: StreamKey, threads=1):
    """Replace r_k with uniform-random ids, re-fuse, re-check validity; the
    per-scale mean violation increase quantifies structural impact."""

    def one(args):
        idx, code, c = args
        base = world.violation(fuse(code, book, schedule), c)
        deltas = np.empty(schedule.k)
        for k in range(1, schedule.k + 1):
            h, w = schedule.dims[k - 1]
            rand_ids = key.child("replace", idx, k).integers(0, book.v, (h, w))
            maps = list(code.maps)
            maps[k - 1] = rand_ids.astype(np.int32)
            v = world.violation(fuse(MultiScaleCode(maps), book, schedule), c)
            deltas[k - 1] = v - base
        return base, deltas

    results = pmap(one, [(i, c, cid) for i, (c, cid) in enumerate(zip(codes, class_ids))],
                   threads)
    bases = np.array([r[0] for r in results])
    deltas = np.stack([r[1] for r in results])
    return deltas.mean(axis=0), {"base_violation_mean": float(bases.mean()),
                                 "per_sample_deltas": deltas}


# ---------------------------------------------------------------------------
# evaluation rows
# ---------------------------------------------------------------------------


@dataclass
class Stack:
    """Trained pipeline artifacts needed to evaluate one configuration."""

    prior: PriorModel
    scorer: ScoringModel
    book: Codebook
    schedule: ScaleSchedule
    world: World
    extractor: FeatureExtractor
    real_stats: FrechetStats
    sampler: SamplerConfig
    hashes: dict = field(default_factory=dict)  # artifact name -> content hash
    corpus: object = None


@dataclass
class EvalRow:
    axis_value: object
    seed: int
    fid: float
    mean_diff2: float
    trace_term: float
    validity: float
    diversity: float
    scorer_forwards: int
    prior_forwards: int
    wall_ms: float
    traces: list = field(default_factory=list, repr=False)
    codes: list = field(default_factory=list, repr=False)
    features: np.ndarray | None = field(default=None, repr=False)


def evaluate_config(stack: Stack, lsrs_config: LsrsConfig, seed: int,
                    n_samples: int, threads=1, axis_value=None,
                    scorer: ScoringModel | None = None) -> EvalRow:
    """Generate n_samples (classes round-robin) under one configuration and
    measure validity, diversity, Fréchet distance and compute counters."""
    scorer = scorer or stack.scorer
    n_classes = stack.world.n_classes

    def one(i):
        c = i % n_classes
        key = StreamKey(EVAL_POOL, int(seed), "sample", i)
        code, trace = lsrs_generate(stack.prior, scorer, c, stack.sampler,
                                    lsrs_config, stack.book, stack.schedule, key)
        fused = fuse(code, stack.book, stack.schedule)
        valid, violation = stack.world.check_validity(fused, c)
        return code, trace, fused, valid

    t0 = time.perf_counter()
    results = pmap(one, range(n_samples), threads)
    wall_ms = (time.perf_counter() - t0) * 1000.0

    fused = np.stack([r[2] for r in results])
    valid = np.array([r[3] for r in results])
    feats = stack.extractor.features(fused)
    fid, md2, tt = frechet_distance(stack.real_stats, stats_from_features(feats))
    traces = [r[1] for r in results]
    return EvalRow(
        axis_value=axis_value,
        seed=seed,
        fid=fid, mean_diff2=md2, trace_term=tt,
        validity=float(valid.mean()),
        diversity=diversity(feats),
        scorer_forwards=sum(t.scorer_forwards for t in traces),
        prior_forwards=sum(t.prior_forwards for t in traces),
        wall_ms=wall_ms,
        traces=traces,
        codes=[r[0] for r in results],
        features=feats,
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("M", "ST", "topk", "loss", "first-scale-exclusion")
CSV_HEADER = ("axis_value,seed,fid,mean_diff2,trace_term,validity,diversity,"
              "scorer_fwds,prior_fwds,wall_ms")


def sweep_config_for(axis, value, base_st, base_m, n_scales, base_selection="greedy",
                     base_ksel=2):
    if axis == "M":
        return LsrsConfig.from_st_m(base_st, int(value), n_scales)
    if axis == "ST":
        return LsrsConfig.from_st_m(int(value), base_m, n_scales)
    if axis == "topk":
        return LsrsConfig.from_st_m(base_st, base_m, n_scales,
                                    selection="softmax-topk", k_sel=int(value))
    if axis in ("loss", "first-scale-exclusion"):
        # the lsrs config is fixed; the scorer checkpoint varies instead
        return LsrsConfig.from_st_m(base_st, base_m, n_scales,
                                    selection=base_selection, k_sel=base_ksel)
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def format_row(row: EvalRow) -> str:
    return ",".join([
        str(row.axis_value), str(row.seed),
        f"{row.fid:.10g}", f"{row.mean_diff2:.10g}", f"{row.trace_term:.10g}",
        f"{row.validity:.10g}", f"{row.diversity:.10g}",
        str(row.scorer_forwards), str(row.prior_forwards),
        f"{row.wall_ms:.3f}",
    ])


def run_sweep(stack: Stack, axis, grid, seeds, n_samples, base_st=2, base_m=8,
              threads=1, scorer_variants=None):
    """One row per grid point per seed; identical checkpoints across rows
    (per grid point for the scorer-retraining axes). Returns (rows, summary)."""
    rows = []
    for value in grid:
        cfg = sweep_config_for(axis, value, base_st, base_m, stack.schedule.k)
        scorer = (scorer_variants or {}).get(value)
        for seed in seeds:
            rows.append(evaluate_config(stack, cfg, seed, n_samples, threads,
                                        axis_value=value, scorer=scorer))
    summary = []
    for value in grid:
        sub = [r for r in rows if r.axis_value == value]
        summary.append({
            "axis_value": value,
            "fid_mean": float(np.mean([r.fid for r in sub])),
            "fid_std": float(np.std([r.fid for r in sub])),
            "validity_mean": float(np.mean([r.validity for r in sub])),
            "validity_std": float(np.std([r.validity for r in sub])),
            "diversity_mean": float(np.mean([r.diversity for r in sub])),
            "diversity_std": float(np.std([r.diversity for r in sub])),
        })
    return rows, summary


def sweep_csv(rows) -> str:
    return "\n".join([CSV_HEADER] + [format_row(r) for r in rows]) + "\n"


def replay_row(stack: Stack, axis, value, seed, n_samples, base_st=2, base_m=8,
               threads=1, scorer_variants=None) -> str:
    """Recompute one sweep row from its manifest parameters; everything but
    wall_ms is byte-stable against the original CSV line."""
    cfg = sweep_config_for(axis, value, base_st, base_m, stack.schedule.k)
    scorer = (scorer_variants or {}).get(value)
    row = evaluate_config(stack, cfg, seed, n_samples, threads,
                          axis_value=value, scorer=scorer)
    return format_row(row)


def strip_wall(csv_line: str) -> str:
    return ",".join(csv_line.split(",")[:-1])


# ---------------------------------------------------------------------------
# compute report
# ---------------------------------------------------------------------------


def affine_fit(xs, ys):
    """Least-squares y = a + b x; returns (a, b, r2)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    b, a = np.polyfit(xs, ys, 1)
    pred = a + b * xs
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return a, b, r2


def compute_report(traces_by_m: dict, wall_ms_by_m: dict | None = None,
                   n_scales: int | None = None):
    """Counter summary across M values. Hard-fails if any generation ran the
    prior more than once per scale; wall clock is fit as affine in M."""
    table = {}
    ks = set()
    for m, traces in traces_by_m.items():
        prior_counts = {t.prior_forwards for t in traces}
        if len(prior_counts) != 1:
            raise RuntimeError(f"M={m}: inconsistent prior-forward counts {prior_counts}")
        k = prior_counts.pop()
        if n_scales is not None and k != n_scales:
            raise RuntimeError(f"M={m}: prior forwards {k} != K = {n_scales}")
        ks.add(k)
        table[m] = {
            "prior_forwards": k,
            "scorer_forwards_per_image": float(np.mean([t.scorer_forwards for t in traces])),
            "fuse_ops_per_image": float(np.mean([t.fuse_ops for t in traces])),
        }
    if len(ks) != 1:
        raise RuntimeError(f"prior-forward count varies with M: {sorted(ks)}")
    report = {"per_m": table, "prior_forwards": ks.pop()}
    if wall_ms_by_m:
        ms = sorted(wall_ms_by_m)
        mean_wall = [float(np.mean(wall_ms_by_m[m])) for m in ms]
        a, b, r2 = affine_fit(ms, mean_wall)
        report["wall_fit"] = {"intercept_ms": a, "slope_ms_per_m": b, "r2": r2,
                              "grid": ms, "mean_wall_ms": mean_wall}
    return report
