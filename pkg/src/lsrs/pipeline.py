"""Stage orchestration over a working directory.

Each stage writes its outputs plus a manifest recording the content hashes
of everything it consumed. Re-running a stage whose inputs are unchanged is
a no-op; a stage whose recorded inputs no longer match the files on disk is
stale, and consumers refuse to mix artifacts from mismatched pipelines.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .container import content_hash, hash_bytes, read_container, write_container
from .frechet import FeatureExtractor, extract_features
from .harness import (Stack, compute_report, evaluate_config, replay_row, run_sweep,
                      scale_replacement_ablation, scorer_diagnostics, strip_wall,
                      sweep_csv, sweep_config_for, format_row)
from .inference import LsrsConfig, lsrs_generate
from .msvq import Codebook, MultiScaleCode, ScaleSchedule, encode_multiscale, fit_codebook, fuse
from .nn import load_checkpoint, save_checkpoint
from .prior import PriorModel, PriorTrainConfig, SamplerConfig, train_prior
from .rng import StreamKey
from .scorer import (ScoreDataset, ScorerTrainConfig, ScoringModel,
                     build_score_dataset, split_records, train_scorer)
from .utils import pmap
from .world import World, build_image_dataset, load_corpus, save_corpus, write_pgm


class MissingArtifact(RuntimeError):
    pass


class StaleArtifact(RuntimeError):
    pass


STAGES = ("data", "codebook", "prior", "scores", "scorer")


def _slice_json(cfg: RunConfig, *sections, extra=None):
    payload = {s: cfg.as_dict()[s] for s in sections}
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True)


def _manifest_path(workdir: Path, stage: str) -> Path:
    return workdir / stage / "manifest.json"


def _hash_inputs(inputs: dict) -> dict:
    hashed = {}
    for label, value in inputs.items():
        if isinstance(value, Path):
            if not value.exists():
                raise MissingArtifact(
                    f"missing input {label!r} ({value}); run the producing stage first"
                )
            hashed[label] = {"path": str(value), "hash": content_hash(value)}
        else:
            hashed[label] = {"config": True, "hash": hash_bytes(value.encode())}
    return hashed


def stage_up_to_date(workdir: Path, stage: str, inputs: dict) -> bool:
    mpath = _manifest_path(workdir, stage)
    if not mpath.exists():
        return False
    manifest = json.loads(mpath.read_text())
    if manifest.get("inputs") != _hash_inputs(inputs):
        return False
    for rel, h in manifest.get("outputs", {}).items():
        path = workdir / stage / rel
        if not path.exists() or content_hash(path) != h:
            return False
    return True


def _finish_stage(workdir: Path, stage: str, inputs: dict, outputs: list, extra=None):
    out_dir = workdir / stage
    manifest = {
        "stage": stage,
        "inputs": _hash_inputs(inputs),
        "outputs": {str(Path(rel).relative_to(out_dir) if Path(rel).is_absolute()
                        else rel): content_hash(out_dir / rel)
                    for rel in outputs},
    }
    if extra:
        manifest["extra"] = extra
    tmp = _manifest_path(workdir, stage).with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(_manifest_path(workdir, stage))


def verify_chain(workdir: Path, stages=STAGES):
    """Every recorded input hash must still match the file on disk."""
    for stage in stages:
        mpath = _manifest_path(workdir, stage)
        if not mpath.exists():
            continue
        manifest = json.loads(mpath.read_text())
        for label, rec in manifest.get("inputs", {}).items():
            if rec.get("config"):
                continue
            path = Path(rec["path"])
            if not path.exists():
                raise StaleArtifact(f"{stage}: recorded input {label!r} ({path}) is gone")
            now = content_hash(path)
            if now != rec["hash"]:
                raise StaleArtifact(
                    f"{stage}: built from {label!r} with hash {rec['hash']} but the "
                    f"file now hashes {now}; rerun the `{stage}` stage before mixing "
                    f"artifacts"
                )


class _Cleanup:
    """Removes the listed partial outputs if the stage body raises."""

    def __init__(self, paths):
        self.paths = [Path(p) for p in paths]

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.paths:
                if p.exists():
                    p.unlink()
        return False


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def write_config_echo(cfg: RunConfig, workdir: Path):
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "config.resolved.json").write_text(cfg.echo_json())


def run_gen_data(cfg: RunConfig, workdir: Path, threads=1, force=False):
    stage_dir = workdir / "data"
    stage_dir.mkdir(parents=True, exist_ok=True)
    inputs = {"config": _slice_json(cfg, "world")}
    if not force and stage_up_to_date(workdir, "data", inputs):
        return {"stage": "data", "skipped": True}
    w = cfg.world
    world = World(canvas=w.canvas, channels=w.channels, noise_sigma=w.noise_sigma)
    corpus = build_image_dataset(
        world,
        {"train": w.n_per_class, "val": w.n_val_per_class, "eval": w.n_eval_per_class},
        StreamKey("corpus", w.seed),
    )
    out = stage_dir / "corpus.bin"
    with _Cleanup([out]):
        save_corpus(out, corpus)
    _finish_stage(workdir, "data", inputs, ["corpus.bin"],
                  extra={"thresholds": world.thresholds})
    return {"stage": "data", "skipped": False, "thresholds": world.thresholds}


def run_fit_codebook(cfg: RunConfig, workdir: Path, threads=1, force=False):
    stage_dir = workdir / "codebook"
    stage_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = workdir / "data" / "corpus.bin"
    inputs = {"corpus": corpus_path, "config": _slice_json(cfg, "msvq")}
    if not force and stage_up_to_date(workdir, "codebook", inputs):
        return {"stage": "codebook", "skipped": True}
    corpus = load_corpus(corpus_path)
    images, class_ids = corpus.split("train")
    m = cfg.msvq
    picks = []
    for c in range(corpus.world.n_classes):
        pool = np.flatnonzero(class_ids == c)
        picks.extend(pool[: m.fit_samples_per_class])
    schedule = ScaleSchedule(tuple(tuple(d) for d in m.schedule))
    book = fit_codebook(images[picks], m.v, schedule, StreamKey("codebook", m.seed),
                        refine_rounds=m.refine_rounds, iters=m.kmeans_iters)
    out = stage_dir / "codebook.bin"
    with _Cleanup([out]):
        book.save(out, schedule, meta={"fit_samples": len(picks)})
    _finish_stage(workdir, "codebook", inputs, ["codebook.bin"])
    return {"stage": "codebook", "skipped": False}


def _encode_corpus(images, book, schedule, threads):
    return pmap(lambda f: encode_multiscale(f, book, schedule)[0], images, threads)


def run_train_prior(cfg: RunConfig, workdir: Path, threads=1, force=False):
    stage_dir = workdir / "prior"
    stage_dir.mkdir(parents=True, exist_ok=True)
    inputs = {
        "corpus": workdir / "data" / "corpus.bin",
        "codebook": workdir / "codebook" / "codebook.bin",
        "config": _slice_json(cfg, "prior"),
    }
    if not force and stage_up_to_date(workdir, "prior", inputs):
        return {"stage": "prior", "skipped": True}
    corpus = load_corpus(inputs["corpus"])
    book, schedule = Codebook.load(inputs["codebook"])
    images, class_ids = corpus.split("train")
    codes = _encode_corpus(images, book, schedule, threads)
    p = cfg.prior
    model = PriorModel(corpus.world.n_classes, schedule.k, corpus.world.channels,
                       book.v, width=p.width, embed_dim=p.embed_dim,
                       n_blocks=p.blocks, key=StreamKey("prior-init", p.seed))
    curve = train_prior(model, codes, class_ids, book, schedule,
                        PriorTrainConfig(p.epochs, p.batch, p.base_rate,
                                         p.warmup_epochs, p.class_drop_p),
                        StreamKey("prior-train", p.seed))
    ckpt = stage_dir / "prior.ckpt"
    curve_csv = stage_dir / "loss_curve.csv"
    with _Cleanup([ckpt, curve_csv]):
        save_checkpoint(ckpt, model.named_params(),
                        meta={"n_classes": corpus.world.n_classes, "width": p.width,
                              "embed_dim": p.embed_dim, "blocks": p.blocks,
                              "vocab": book.v})
        curve_csv.write_text("epoch,train_ce_per_token\n" + "".join(
            f"{i + 1},{v:.6f}\n" for i, v in enumerate(curve)))
    from .plotting import plot_loss_curve

    plot_loss_curve(curve, "train CE / token", stage_dir / "loss_curve.svg")
    _finish_stage(workdir, "prior", inputs, ["prior.ckpt", "loss_curve.csv"],
                  extra={"final_ce_per_token": curve[-1]})
    return {"stage": "prior", "skipped": False, "curve": curve}


def _sampler_from_cfg(cfg: RunConfig) -> SamplerConfig:
    p = cfg.prior
    return SamplerConfig(p.temperature, p.top_k, p.top_p, p.cfg_scale)


def _load_prior(cfg: RunConfig, workdir: Path, world, book, schedule) -> PriorModel:
    p = cfg.prior
    model = PriorModel(world.n_classes, schedule.k, world.channels, book.v,
                       width=p.width, embed_dim=p.embed_dim, n_blocks=p.blocks,
                       key=StreamKey("prior-init", p.seed))
    load_checkpoint(workdir / "prior" / "prior.ckpt", model.named_params())
    return model


def run_build_score_dataset(cfg: RunConfig, workdir: Path, threads=1, force=False):
    stage_dir = workdir / "scores"
    stage_dir.mkdir(parents=True, exist_ok=True)
    inputs = {
        "corpus": workdir / "data" / "corpus.bin",
        "codebook": workdir / "codebook" / "codebook.bin",
        "prior": workdir / "prior" / "prior.ckpt",
        "config": _slice_json(cfg, "prior", extra={
            "n_gen_per_class": cfg.lsrs.n_gen_per_class, "seed": cfg.lsrs.seed}),
    }
    if not force and stage_up_to_date(workdir, "scores", inputs):
        return {"stage": "scores", "skipped": True}
    corpus = load_corpus(inputs["corpus"])
    book, schedule = Codebook.load(inputs["codebook"])
    prior = _load_prior(cfg, workdir, corpus.world, book, schedule)
    dataset = build_score_dataset(prior, corpus, book, schedule,
                                  cfg.lsrs.n_gen_per_class, _sampler_from_cfg(cfg),
                                  StreamKey("score-data", cfg.lsrs.seed),
                                  threads=threads)
    out = stage_dir / "dataset.bin"
    with _Cleanup([out]):
        dataset.save(out)
    _finish_stage(workdir, "scores", inputs, ["dataset.bin"],
                  extra={"records": len(dataset)})
    return {"stage": "scores", "skipped": False, "records": len(dataset)}


def _scorer_cfg(cfg: RunConfig, loss_kind=None, exclude_first=None) -> ScorerTrainConfig:
    s = cfg.lsrs
    return ScorerTrainConfig(
        loss_kind=loss_kind if loss_kind is not None else s.loss_kind,
        epochs=s.epochs, batch=s.batch, base_rate=s.base_rate,
        warmup_epochs=s.warmup_epochs, val_fraction=s.val_fraction,
        exclude_first_scale=exclude_first if exclude_first is not None
        else s.exclude_first_scale,
    )


def _train_scorer_once(cfg: RunConfig, dataset, book, schedule, world,
                       loss_kind=None, exclude_first=None, seed=None):
    s = cfg.lsrs
    seed = s.seed if seed is None else seed
    model = ScoringModel(world.n_classes, schedule.k, world.channels,
                         embed_dim=s.embed_dim, key=StreamKey("scorer-init", seed))
    tcfg = _scorer_cfg(cfg, loss_kind, exclude_first)
    train_mask, val_mask, curves = train_scorer(model, dataset, book, tcfg,
                                                StreamKey("scorer-train", seed))
    return model, train_mask, val_mask, curves


def _curves_csv(curves) -> str:
    lines = ["epoch,scale,val_loss,val_acc"]
    for epoch, (losses, accs) in enumerate(zip(curves.val_loss, curves.val_acc)):
        for k, (l, a) in enumerate(zip(losses, accs), start=1):
            lines.append(f"{epoch},{k},"
                         f"{'' if l is None else f'{l:.6f}'},"
                         f"{'' if a is None else f'{a:.6f}'}")
    return "\n".join(lines) + "\n"


def run_train_scorer(cfg: RunConfig, workdir: Path, threads=1, force=False):
    stage_dir = workdir / "scorer"
    stage_dir.mkdir(parents=True, exist_ok=True)
    inputs = {
        "dataset": workdir / "scores" / "dataset.bin",
        "codebook": workdir / "codebook" / "codebook.bin",
        "config": _slice_json(cfg, "lsrs"),
    }
    if not force and stage_up_to_date(workdir, "scorer", inputs):
        return {"stage": "scorer", "skipped": True}
    dataset = ScoreDataset.load(inputs["dataset"])
    book, schedule = Codebook.load(inputs["codebook"])
    corpus = load_corpus(workdir / "data" / "corpus.bin")
    model, _, _, curves = _train_scorer_once(cfg, dataset, book, schedule, corpus.world)
    ckpt = stage_dir / "scorer.ckpt"
    curves_csv = stage_dir / "curves.csv"
    with _Cleanup([ckpt, curves_csv]):
        save_checkpoint(ckpt, model.named_params(),
                        meta={"loss_kind": cfg.lsrs.loss_kind,
                              "exclude_first_scale": cfg.lsrs.exclude_first_scale})
        curves_csv.write_text(_curves_csv(curves))
    _finish_stage(workdir, "scorer", inputs, ["scorer.ckpt", "curves.csv"],
                  extra={"final_val_acc": curves.val_acc[-1]})
    return {"stage": "scorer", "skipped": False, "curves": curves}


# ---------------------------------------------------------------------------
# stack loading (inference-side stages)
# ---------------------------------------------------------------------------


def load_stack(cfg: RunConfig, workdir: Path) -> Stack:
    verify_chain(workdir)
    for stage, rel in (("data", "corpus.bin"), ("codebook", "codebook.bin"),
                       ("prior", "prior.ckpt"), ("scorer", "scorer.ckpt")):
        if not (workdir / stage / rel).exists():
            raise MissingArtifact(f"{stage}/{rel} not found; run `{stage_command(stage)}`")
    corpus = load_corpus(workdir / "data" / "corpus.bin")
    book, schedule = Codebook.load(workdir / "codebook" / "codebook.bin")
    prior = _load_prior(cfg, workdir, corpus.world, book, schedule)
    s = cfg.lsrs
    scorer = ScoringModel(corpus.world.n_classes, schedule.k, corpus.world.channels,
                          embed_dim=s.embed_dim, key=StreamKey("scorer-init", s.seed))
    load_checkpoint(workdir / "scorer" / "scorer.ckpt", scorer.named_params())
    extractor = FeatureExtractor(corpus.world.channels, seed=cfg.eval.extractor_seed)
    eval_images, _ = corpus.split("eval")
    _, real_stats = extract_features(extractor, eval_images)
    hashes = {f"{stage}/{rel}": content_hash(workdir / stage / rel)
              for stage, rel in (("data", "corpus.bin"), ("codebook", "codebook.bin"),
                                 ("prior", "prior.ckpt"), ("scorer", "scorer.ckpt"))}
    stack = Stack(prior=prior, scorer=scorer, book=book, schedule=schedule,
                  world=corpus.world, extractor=extractor, real_stats=real_stats,
                  sampler=_sampler_from_cfg(cfg), hashes=hashes)
    stack.corpus = corpus
    return stack


def stage_command(stage: str) -> str:
    return {"data": "gen-data", "codebook": "fit-codebook", "prior": "train-prior",
            "scores": "build-score-dataset", "scorer": "train-scorer"}[stage]


def run_pipeline(cfg: RunConfig, workdir: Path, threads=1, force=False):
    """All five training stages in dependency order."""
    write_config_echo(cfg, workdir)
    results = [
        run_gen_data(cfg, workdir, threads, force),
        run_fit_codebook(cfg, workdir, threads, force),
        run_train_prior(cfg, workdir, threads, force),
        run_build_score_dataset(cfg, workdir, threads, force),
        run_train_scorer(cfg, workdir, threads, force),
    ]
    return results


# ---------------------------------------------------------------------------
# user-facing stages
# ---------------------------------------------------------------------------


def run_sample(cfg: RunConfig, workdir: Path, class_id, seed, st=None, m=None,
               select=None, ksel=None, threads=1):
    stack = load_stack(cfg, workdir)
    s = cfg.lsrs
    st = s.st if st is None else st
    m = s.m if m is None else m
    selection = s.selection if select is None else (
        "softmax-topk" if select == "topk" else select)
    lcfg = LsrsConfig.from_st_m(st, m, stack.schedule.k, selection=selection,
                                k_sel=s.k_sel if ksel is None else ksel)
    key = StreamKey("sample-cli", int(seed), "sample", 0)
    code, trace = lsrs_generate(stack.prior, stack.scorer, class_id, stack.sampler,
                                lcfg, stack.book, stack.schedule, key)
    out_dir = workdir / "samples" / f"class{class_id}_seed{seed}_st{st}_m{m}"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_container(out_dir / "code.bin", "code",
                    {"schedule": [list(d) for d in stack.schedule.dims],
                     "vocab": stack.book.v, "class_id": int(class_id)},
                    [("ids", code.pack())])
    rows = ["sample,scale,candidate,score,chosen"]
    rows += [",".join(str(x) for x in r) for r in trace.rows(0)]
    (out_dir / "trace.csv").write_text("\n".join(rows) + "\n")
    fused = fuse(code, stack.book, stack.schedule)
    write_pgm(out_dir / "fused.pgm", stack.world.project(fused))
    valid, violation = stack.world.check_validity(fused, class_id)
    manifest = {
        "seed": int(seed), "class_id": int(class_id),
        "lsrs": {"st": st, "m": m, "selection": selection,
                 "k_sel": s.k_sel if ksel is None else ksel},
        "sampler": stack.sampler.__dict__,
        "checkpoints": stack.hashes,
        "valid": bool(valid), "violation": violation,
        "counters": {"prior_forwards": trace.prior_forwards,
                     "scorer_forwards": trace.scorer_forwards},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def run_ablate_scale(cfg: RunConfig, workdir: Path, threads=1):
    stack = load_stack(cfg, workdir)
    images, class_ids = stack.corpus.split("eval")
    n = min(cfg.eval.ablation_samples, len(images))
    codes = pmap(lambda f: encode_multiscale(f, stack.book, stack.schedule)[0],
                 images[:n], threads)
    deltas, detail = scale_replacement_ablation(codes, class_ids[:n], stack.book,
                                                stack.schedule, stack.world,
                                                StreamKey("ablate", cfg.world.seed),
                                                threads)
    out_dir = workdir / "ablate"
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["scale,mean_violation_delta"]
    lines += [f"{k + 1},{d:.10g}" for k, d in enumerate(deltas)]
    (out_dir / "scale_replacement.csv").write_text("\n".join(lines) + "\n")
    from .plotting import plot_ablation

    plot_ablation(deltas, out_dir)
    sidecar = {"n_samples": n, "checkpoints": stack.hashes,
               "base_violation_mean": detail["base_violation_mean"]}
    (out_dir / "manifest.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return deltas


def _sweep_grid(cfg: RunConfig, axis):
    return {
        "M": cfg.eval.m_grid,
        "ST": cfg.eval.st_grid,
        "topk": cfg.eval.ksel_grid,
        "loss": ["pairwise", "pointwise"],
        "first-scale-exclusion": [False, True],
    }[axis]


def _sweep_variants(cfg: RunConfig, workdir: Path, axis, stack):
    """Scorer-retraining axes get one variant checkpoint per grid value,
    cached under scorer/variants and shared across seeds."""
    if axis not in ("loss", "first-scale-exclusion"):
        return None
    dataset = ScoreDataset.load(workdir / "scores" / "dataset.bin")
    variants = {}
    var_dir = workdir / "scorer" / "variants"
    var_dir.mkdir(parents=True, exist_ok=True)
    for value in _sweep_grid(cfg, axis):
        tag = f"{axis}-{value}".replace(" ", "")
        ckpt = var_dir / f"{tag}.ckpt"
        s = cfg.lsrs
        model = ScoringModel(stack.world.n_classes, stack.schedule.k,
                             stack.world.channels, embed_dim=s.embed_dim,
                             key=StreamKey("scorer-init", s.seed))
        if ckpt.exists():
            load_checkpoint(ckpt, model.named_params())
        else:
            kwargs = {"loss_kind": value} if axis == "loss" else {"exclude_first": value}
            model, _, _, _ = _train_scorer_once(cfg, dataset, stack.book,
                                                stack.schedule, stack.world, **kwargs)
            save_checkpoint(ckpt, model.named_params(), meta={"axis": axis,
                                                              "value": str(value)})
        variants[value] = model
    return variants


def run_sweep_stage(cfg: RunConfig, workdir: Path, axis, threads=1, n_samples=None,
                    grid=None, seeds=None):
    stack = load_stack(cfg, workdir)
    grid = list(grid if grid is not None else _sweep_grid(cfg, axis))
    seeds = list(seeds if seeds is not None else cfg.eval.seeds)
    n_samples = int(n_samples if n_samples is not None else cfg.eval.sweep_samples)
    variants = _sweep_variants(cfg, workdir, axis, stack)
    rows, summary = run_sweep(stack, axis, grid, seeds, n_samples,
                              base_st=cfg.lsrs.st, base_m=cfg.lsrs.m,
                              threads=threads, scorer_variants=variants)
    out_dir = workdir / "sweeps" / axis.lower().replace(" ", "-")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rows.csv").write_text(sweep_csv(rows))
    sm_lines = ["axis_value,fid_mean,fid_std,validity_mean,validity_std,"
                "diversity_mean,diversity_std"]
    for s in summary:
        sm_lines.append(",".join([str(s["axis_value"])] +
                                 [f"{s[k]:.10g}" for k in
                                  ("fid_mean", "fid_std", "validity_mean",
                                   "validity_std", "diversity_mean", "diversity_std")]))
    (out_dir / "summary.csv").write_text("\n".join(sm_lines) + "\n")
    sidecar = {
        "axis": axis, "grid": [str(g) for g in grid], "seeds": seeds,
        "n_samples": n_samples, "base": {"st": cfg.lsrs.st, "m": cfg.lsrs.m},
        "checkpoints": stack.hashes, "config": cfg.as_dict(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    from .plotting import plot_sweep

    plot_sweep(rows, axis, out_dir / "plots")
    return rows, summary


def replay_sweep_row(cfg: RunConfig, workdir: Path, axis, value, seed, threads=1):
    """Recompute one sweep row from the stored manifest; returns the CSV line."""
    out_dir = workdir / "sweeps" / axis.lower().replace(" ", "-")
    sidecar = json.loads((out_dir / "manifest.json").read_text())
    stack = load_stack(cfg, workdir)
    for name, h in sidecar["checkpoints"].items():
        if stack.hashes.get(name) != h:
            raise StaleArtifact(f"replay: {name} hash changed since the sweep ran")
    variants = _sweep_variants(cfg, workdir, axis, stack)
    return replay_row(stack, axis, value, seed, sidecar["n_samples"],
                      base_st=sidecar["base"]["st"], base_m=sidecar["base"]["m"],
                      threads=threads, scorer_variants=variants)


def run_report(cfg: RunConfig, workdir: Path, threads=1):
    """Baseline vs configured LSRS metrics, scorer diagnostics, counters and
    timing-vs-M; JSON + CSV + SVG under report/."""
    stack = load_stack(cfg, workdir)
    seeds = cfg.eval.seeds
    n = cfg.eval.n_eval_samples
    k = stack.schedule.k
    base_cfg = LsrsConfig.from_st_m(k + 1, 1, k)  # selection never active
    lsrs_cfg = LsrsConfig.from_st_m(cfg.lsrs.st, cfg.lsrs.m, k,
                                    selection=cfg.lsrs.selection, k_sel=cfg.lsrs.k_sel)
    rows = {"baseline": [], "lsrs": []}
    for seed in seeds:
        rows["baseline"].append(evaluate_config(stack, base_cfg, seed, n, threads,
                                                axis_value="baseline"))
        rows["lsrs"].append(evaluate_config(stack, lsrs_cfg, seed, n, threads,
                                            axis_value=f"st{cfg.lsrs.st}_m{cfg.lsrs.m}"))

    dataset = ScoreDataset.load(workdir / "scores" / "dataset.bin")
    _, val_mask = split_records(dataset, cfg.lsrs.val_fraction,
                                StreamKey("scorer-train", cfg.lsrs.seed))
    diag = scorer_diagnostics(stack.scorer, dataset, stack.book, val_mask)

    timing = _timing_vs_m(cfg, stack, threads)

    out_dir = workdir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_lines = [("config,seed,fid,mean_diff2,trace_term,validity,diversity,"
                  "scorer_fwds,prior_fwds,wall_ms")]
    for name in ("baseline", "lsrs"):
        for r in rows[name]:
            csv_lines.append(format_row(r))
    (out_dir / "report.csv").write_text("\n".join(csv_lines) + "\n")

    def agg(rs, attr):
        return {"mean": float(np.mean([getattr(r, attr) for r in rs])),
                "per_seed": [float(getattr(r, attr)) for r in rs]}

    report = {
        "extractor_seed": cfg.eval.extractor_seed,
        "checkpoints": stack.hashes,
        "seeds": seeds,
        "n_eval_samples": n,
        "baseline": {a: agg(rows["baseline"], a) for a in
                     ("fid", "mean_diff2", "trace_term", "validity", "diversity")},
        "lsrs": {a: agg(rows["lsrs"], a) for a in
                 ("fid", "mean_diff2", "trace_term", "validity", "diversity")},
        "scorer": {
            "per_scale_acc": diag.per_scale_acc,
            "per_scale_loss": diag.per_scale_loss,
            "mean_score_gap": diag.mean_score_gap,
            "histogram_kl": diag.histogram_kl,
        },
        "compute": timing,
    }
    for side in ("baseline", "lsrs"):
        fid = report[side]["fid"]["mean"]
        md2 = report[side]["mean_diff2"]["mean"]
        tt = report[side]["trace_term"]["mean"]
        if abs(fid - (md2 + tt)) > 1e-8 * max(1.0, abs(fid)):
            raise RuntimeError(f"report: FID decomposition identity violated for {side}")
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    from .plotting import plot_scorer_diagnostics

    plot_scorer_diagnostics(diag, out_dir / "plots")
    return report


def _timing_vs_m(cfg: RunConfig, stack: Stack, threads=1):
    """Wall clock and counters per image across the M grid (3-run average)."""
    traces_by_m, wall_by_m = {}, {}
    k = stack.schedule.k
    for m in cfg.eval.m_grid:
        lcfg = LsrsConfig.from_st_m(min(cfg.lsrs.st, k), int(m), k)
        traces, walls = [], []
        for rep in range(cfg.eval.timing_reps):
            t0 = time.perf_counter()
            for i in range(cfg.eval.timing_samples):
                c = i % stack.world.n_classes
                key = StreamKey("timing", rep, int(m), "sample", i)
                _, trace = lsrs_generate(stack.prior, stack.scorer, c, stack.sampler,
                                         lcfg, stack.book, stack.schedule, key)
                traces.append(trace)
            walls.append((time.perf_counter() - t0) * 1000.0 / cfg.eval.timing_samples)
        traces_by_m[int(m)] = traces
        wall_by_m[int(m)] = walls
    return compute_report(traces_by_m, wall_by_m, n_scales=k)


def run_export_pgm(cfg: RunConfig, workdir: Path, split="train", per_class=4):
    corpus = load_corpus(workdir / "data" / "corpus.bin")
    images, class_ids = corpus.split(split)
    out_dir = workdir / "data" / "inspect"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for c in range(corpus.world.n_classes):
        pool = np.flatnonzero(class_ids == c)[:per_class]
        for j, idx in enumerate(pool):
            path = out_dir / f"{split}_class{c}_{j}.pgm"
            write_pgm(path, corpus.world.project(images[idx]))
            written.append(path)
    return written
