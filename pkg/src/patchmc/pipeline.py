"""End-to-end pipeline: register -> prior -> candidate -> sample -> train ->
segment -> evaluate, with content-hash stage skipping and d/f sweeps.

Every stage output is a pure function of its declared inputs plus the seeds
in the config, so reruns with an unchanged config skip all stages and
reproduce identical artifact hashes. Vote states persist per test case, so
f-sweeps only redo finalize + evaluate, never sampling or prediction.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__ as _pkg_version
from .classifier import TrainConfig, load_model, plugin_session, save_model, train_baseline
from .errors import ConfigError
from .fusion import finalize, load_vote_state, save_vote_state, segment
from .mcmc import ChainConfig, SamplingTarget, load_samples, run_chains, save_samples
from .metrics import confusion, hausdorff_mm, scores
from .patches import build_training_set, load_dataset, save_dataset
from .prior import PriorMap, build_prior, dilate, make_sampling_target, threshold_prior
from .registration import (
    RegistrationConfig,
    invert,
    load_transform,
    register_affine,
    save_transform,
)
from .volume import (
    AffineTransform,
    MaskVolume,
    Volume,
    read_mask,
    read_volume,
    resample,
    write_volume,
)


@dataclass(frozen=True)
class CaseSpec:
    case_id: str
    image: Path
    mask: Optional[Path]


@dataclass
class PipelineConfig:
    atlas: list[CaseSpec]
    tests: list[CaseSpec]
    output_dir: Path
    reference_id: int = 0
    d: object = "sweep"          # vote-count threshold, or "sweep"
    k: int = 5
    f: object = "sweep"          # fusion threshold, or "sweep"
    floor: float = 0.05
    dilate_element: str = "cube"
    patch_size: tuple[int, int, int] = (16, 16, 16)
    n1: int = 1000
    n2_train: int = 8000
    n2_segment: int = 5000
    proposal_sigma: float = 4.0
    chains: int = 1
    seed: int = 7
    binarize: float = 0.5
    f_range: tuple[int, int] = (1, 20)
    classifier: dict = field(default_factory=lambda: {"type": "baseline"})
    registration: dict = field(default_factory=dict)
    hausdorff: bool = True
    workers: int = 0  # 0 -> min(4, cpu count)

    def __post_init__(self):
        if not self.atlas:
            raise ConfigError("atlas manifest is empty")
        if not (0 <= self.reference_id < len(self.atlas)):
            raise ConfigError(f"reference_id {self.reference_id} not in atlas manifest")
        if self.d != "sweep" and not float(self.d) > 0:
            raise ConfigError("d must be positive or 'sweep'")
        if self.k < 0:
            raise ConfigError("k must be non-negative")
        if self.f != "sweep" and int(self.f) < 1:
            raise ConfigError("f must be >= 1 or 'sweep'")

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        doc = json.loads(path.read_text())
        base = path.parent
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        if "output_dir" not in doc:
            raise ConfigError(f"{path}: config needs an output_dir")

        def case_list(entries, kind):
            out = []
            for i, e in enumerate(entries):
                if "image" not in e:
                    raise ConfigError(f"{path}: {kind} entry {i} has no image path")
                image = base / e["image"]
                mask = base / e["mask"] if e.get("mask") else None
                out.append(CaseSpec(e.get("id", f"{kind}_{i:03d}"), image, mask))
            return out

        kwargs = dict(doc)
        kwargs["atlas"] = case_list(doc.get("atlas", []), "atlas")
        kwargs["tests"] = case_list(doc.get("tests", []), "test")
        kwargs["output_dir"] = base / doc["output_dir"]
        for key in ("patch_size", "f_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def registration_config(self) -> RegistrationConfig:
        r = self.registration
        return RegistrationConfig(
            metric=r.get("metric", "ncc"),
            pyramid_factors=tuple(r.get("pyramid", (4, 2, 1))),
            max_iters_per_level=r.get("max_iters", 200),
            step_init=r.get("step_init", 0.1),
            converge_tol=r.get("tol", 1e-6),
            seed=self.seed,
        )


def validate_config(config: PipelineConfig) -> None:
    """Fail fast: every manifest path must exist before any work starts."""
    for kind, cases, need_mask in (("atlas", config.atlas, True), ("tests", config.tests, False)):
        for i, case in enumerate(cases):
            if not Path(case.image).exists():
                raise ConfigError(f"{kind} entry {i} ({case.case_id}): missing image {case.image}")
            if need_mask and case.mask is None:
                raise ConfigError(f"{kind} entry {i} ({case.case_id}): atlas entry has no mask")
            if case.mask is not None and not Path(case.mask).exists():
                raise ConfigError(f"{kind} entry {i} ({case.case_id}): missing mask {case.mask}")


# ---------------------------------------------------------------------------
# stage cache
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sig_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class StageCache:
    """Skips a stage when its input signature and recorded output hashes hold."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / "stage_state.json"
        self.state = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.log: dict[str, dict] = {}

    def run(self, name: str, inputs: dict, outputs: list, fn):
        sig = _sig_of(inputs)
        rec = self.state.get(name)
        out_paths = [str(p) for p in outputs]
        if (
            rec
            and rec["sig"] == sig
            and set(rec["outputs"]) == set(out_paths)
            and all(Path(p).exists() and file_sha256(p) == h for p, h in rec["outputs"].items())
        ):
            self.log[name] = {"skipped": True, "wall_time_s": 0.0}
            return rec.get("result")
        t0 = time.perf_counter()
        result = fn()
        wall = time.perf_counter() - t0
        self.state[name] = {
            "sig": sig,
            "outputs": {p: file_sha256(p) for p in out_paths},
            "result": result,
        }
        self.path.write_text(json.dumps(self.state, indent=2, sort_keys=True) + "\n")
        self.log[name] = {"skipped": False, "wall_time_s": round(wall, 3)}
        return result


# ---------------------------------------------------------------------------
# stage helpers
# ---------------------------------------------------------------------------

def _register_one(args):
    """Worker: register one moving image onto the reference and persist artifacts."""
    (fixed_path, moving_image, moving_mask, reg_kwargs,
     out_t, out_img, out_msk, is_reference) = args
    fixed = read_volume(fixed_path)
    image = read_volume(moving_image)
    if is_reference:
        result_t = AffineTransform.identity()
        metric_final = 0.0
    else:
        res = register_affine(fixed, image, RegistrationConfig(**reg_kwargs))
        result_t = res.transform
        metric_final = res.metric_final
    save_transform(out_t, result_t, fixed.geometry, image.geometry, metric_final)
    write_volume(resample(image, result_t, fixed.geometry, mode="trilinear"), out_img)
    if moving_mask is not None:
        mask = read_mask(moving_mask)
        write_volume(resample(mask, result_t, fixed.geometry, mode="nearest"), out_msk)
    return str(out_t)


def _worker_count(config: PipelineConfig) -> int:
    if config.workers and config.workers > 0:
        return config.workers
    return max(1, min(4, os.cpu_count() or 1))


def sweep_d(counts: Volume, eval_masks: list[MaskVolume], d_values) -> dict:
    """Mean DSC of {counts >= d} against each eval mask, for every d."""
    rows = []
    for d in d_values:
        mask = MaskVolume(counts.geometry, (counts.data >= d).astype(np.uint8))
        dscs = [scores(confusion(mask, gt)).dsc for gt in eval_masks]
        rows.append({"value": float(d), "mean_dsc": float(np.mean(dscs))})
    best = max(rows, key=lambda r: r["mean_dsc"])
    return {"param": "d", "rows": rows, "argmax": best["value"], "best_mean_dsc": best["mean_dsc"]}


def sweep_f(vote_stems, transforms, gt_masks, f_values) -> dict:
    """Mean DSC over cases for every fusion threshold f.

    Works from persisted vote states only; no sampling or prediction reruns.
    """
    states = [load_vote_state(s) for s in vote_stems]
    rows = []
    for f in f_values:
        dscs = []
        for state, t, gt in zip(states, transforms, gt_masks):
            _, mask_atlas = finalize(state, int(f))
            mask = resample(mask_atlas, invert(t), gt.geometry, mode="nearest")
            dscs.append(scores(confusion(mask, gt)).dsc)
        rows.append({"value": int(f), "mean_dsc": float(np.mean(dscs))})
    best = max(rows, key=lambda r: r["mean_dsc"])
    return {"param": "f", "rows": rows, "argmax": int(best["value"]), "best_mean_dsc": best["mean_dsc"]}


def _plugin_model_doc(norm, patch_size, final_loss, command) -> dict:
    """Model file for plugin-backed training: records normalization and loss."""
    return {
        "format": "pmm-1",
        "backend": "plugin",
        "feature_spec": None,
        "weights": None,
        "bias": None,
        "patch_size": list(patch_size),
        "norm": {"mean": norm.mean, "std": norm.std},
        "train_log": {"final_loss": final_loss},
        "plugin_command": list(command),
    }


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------

def run_pipeline(config: PipelineConfig) -> dict:
    """Execute all stages; returns (and writes) the run report."""
    validate_config(config)
    out = Path(config.output_dir)
    for sub in ("transforms", "registered", "prior", "candidate", "samples", "model", "segment"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cache = StageCache(out)
    reg_cfg = config.registration_config()
    reg_kwargs = {
        "metric": reg_cfg.metric,
        "pyramid_factors": reg_cfg.pyramid_factors,
        "max_iters_per_level": reg_cfg.max_iters_per_level,
        "step_init": reg_cfg.step_init,
        "converge_tol": reg_cfg.converge_tol,
        "seed": reg_cfg.seed,
    }
    reference = config.atlas[config.reference_id]

    # --- registration of every atlas onto the reference ---
    atlas_jobs = []
    reg_outputs = []
    for i, case in enumerate(config.atlas):
        out_t = out / "transforms" / f"atlas_{i:03d}.json"
        out_img = out / "registered" / f"atlas_{i:03d}_img.pmv"
        out_msk = out / "registered" / f"atlas_{i:03d}_msk.pmv"
        atlas_jobs.append((
            str(reference.image), str(case.image), str(case.mask), reg_kwargs,
            str(out_t), str(out_img), str(out_msk), i == config.reference_id,
        ))
        reg_outputs += [out_t, out_img, out_msk]

    def do_registration():
        workers = _worker_count(config)
        if workers > 1 and len(atlas_jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_register_one, atlas_jobs))
        else:
            for job in atlas_jobs:
                _register_one(job)
        return {"atlases": len(atlas_jobs)}

    cache.run(
        "registration",
        {
            "images": [file_sha256(c.image) for c in config.atlas],
            "masks": [file_sha256(c.mask) for c in config.atlas],
            "reference_id": config.reference_id,
            "registration": _jsonable(reg_kwargs),
        },
        reg_outputs,
        do_registration,
    )

    # --- prior ---
    counts_path = out / "prior" / "counts.pmv"
    prior_path = out / "prior" / "prior.pmv"
    reg_mask_paths = [out / "registered" / f"atlas_{i:03d}_msk.pmv" for i in range(len(config.atlas))]
    reg_img_paths = [out / "registered" / f"atlas_{i:03d}_img.pmv" for i in range(len(config.atlas))]

    def do_prior():
        pm = build_prior([read_mask(p) for p in reg_mask_paths])
        write_volume(pm.counts, counts_path)
        write_volume(pm.normalized, prior_path)
        return {"m": pm.m}

    cache.run(
        "prior",
        {"masks": [file_sha256(p) for p in reg_mask_paths]},
        [counts_path, prior_path],
        do_prior,
    )

    # --- candidate region (optionally sweeping d over the atlas masks) ---
    r_path = out / "candidate" / "R.pmv"
    e_path = out / "candidate" / "E.pmv"
    d_sweep_path = out / "candidate" / "d_sweep.json"

    def do_candidate():
        counts = read_volume(counts_path)
        m = len(config.atlas)
        if config.d == "sweep":
            eval_masks = [read_mask(p) for p in reg_mask_paths]
            table = sweep_d(counts, eval_masks, range(1, m + 1))
            d_sel = table["argmax"]
        else:
            d_sel = float(config.d)
            table = {"param": "d", "fixed": d_sel}
        d_sweep_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        prior_map = PriorMap(counts=counts, normalized=read_volume(prior_path), m=m)
        r_mask = threshold_prior(prior_map, d_sel)
        e_mask = dilate(r_mask, config.k, element=config.dilate_element)
        write_volume(r_mask, r_path)
        write_volume(e_mask, e_path)
        return {"d": d_sel, "k": config.k}

    cand = cache.run(
        "candidate",
        {
            "counts": file_sha256(counts_path),
            "d": config.d,
            "k": config.k,
            "element": config.dilate_element,
        },
        [r_path, e_path, d_sweep_path],
        do_candidate,
    )
    d_selected = cand["d"]

    # --- sampling target ---
    target_path = out / "candidate" / "target.pmv"

    def do_target():
        counts = read_volume(counts_path)
        pm = PriorMap(counts=counts, normalized=read_volume(prior_path), m=len(config.atlas))
        tgt = make_sampling_target(pm, read_mask(e_path), floor=config.floor)
        write_volume(Volume(tgt.geometry, tgt.density.astype(np.float32)), target_path)
        return {}

    cache.run(
        "target",
        {"prior": file_sha256(prior_path), "region": file_sha256(e_path), "floor": config.floor},
        [target_path],
        do_target,
    )

    # --- training samples ---
    train_samples_path = out / "samples" / "train_samples.json"

    def do_sample():
        tv = read_volume(target_path)
        target = SamplingTarget(tv.geometry, tv.data.astype(np.float64))
        chain = ChainConfig(n1=config.n1, n2=config.n2_train,
                            proposal_sigma=config.proposal_sigma, seed=config.seed)
        samples = run_chains(target, chain, chains=config.chains)
        save_samples(samples, train_samples_path)
        return {"accept_rate": samples.accept_rate}

    cache.run(
        "sample",
        {
            "target": file_sha256(target_path),
            "n1": config.n1, "n2": config.n2_train,
            "sigma": config.proposal_sigma, "seed": config.seed, "chains": config.chains,
        },
        [train_samples_path],
        do_sample,
    )

    # --- training patches ---
    dataset_path = out / "samples" / "train.pmp"

    def do_patches():
        pairs = [(read_volume(ip), read_mask(mp)) for ip, mp in zip(reg_img_paths, reg_mask_paths)]
        samples = load_samples(train_samples_path)
        ds = build_training_set(pairs, samples, size=config.patch_size, seed=config.seed + 1)
        save_dataset(ds, dataset_path)
        return {"patches": len(ds)}

    cache.run(
        "patches",
        {
            "images": [file_sha256(p) for p in reg_img_paths],
            "masks": [file_sha256(p) for p in reg_mask_paths],
            "samples": file_sha256(train_samples_path),
            "size": list(config.patch_size),
            "seed": config.seed + 1,
        },
        [dataset_path],
        do_patches,
    )

    # --- classifier training ---
    model_path = out / "model" / "model.pmm"
    clf = dict(config.classifier)
    clf_type = clf.get("type", "baseline")

    def do_train():
        ds = load_dataset(dataset_path)
        if clf_type == "baseline":
            tc = TrainConfig(
                epochs=int(clf.get("epochs", 12)),
                batch_size=int(clf.get("batch_size", 100)),
                lr=float(clf.get("lr", 1.0)),
                seed=config.seed + 2,
            )
            model = train_baseline(ds, tc)
            save_model(model, model_path)
            return {"final_loss": model.train_log["final_loss"]}
        with plugin_session(clf["command"], config.patch_size) as handle:
            loss = handle.train(ds)
        doc = _plugin_model_doc(ds.normalization, config.patch_size, loss, clf["command"])
        model_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return {"final_loss": loss}

    cache.run(
        "train",
        {"dataset": file_sha256(dataset_path), "classifier": clf, "seed": config.seed + 2},
        [model_path],
        do_train,
    )

    # --- per-case vote accumulation (registration + sampling + prediction) ---
    tv = read_volume(target_path)
    target = SamplingTarget(tv.geometry, tv.data.astype(np.float64))
    fixed_ref = read_volume(reference.image)
    model = load_model(model_path)

    for j, case in enumerate(config.tests):
        case_dir = out / "segment" / case.case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        t_path = case_dir / "transform.json"
        prob_path = case_dir / "prob.pmv"
        votes_stem = case_dir / "votes"
        samples_path = case_dir / "samples.json"

        def do_segment(case=case, t_path=t_path, prob_path=prob_path,
                       votes_stem=votes_stem, samples_path=samples_path, j=j):
            image = read_volume(case.image)
            res = register_affine(fixed_ref, image, reg_cfg)
            save_transform(t_path, res.transform, fixed_ref.geometry, image.geometry,
                           res.metric_final)
            chain = ChainConfig(n1=config.n1, n2=config.n2_segment,
                                proposal_sigma=config.proposal_sigma,
                                seed=config.seed + 1000 + j)
            if clf_type == "baseline":
                result = segment(image, res.transform, target, model, chain, f=1,
                                 chains=config.chains, binarize=config.binarize)
            else:
                with plugin_session(clf["command"], config.patch_size, norm=model.norm) as handle:
                    result = segment(image, res.transform, target, handle, chain, f=1,
                                     chains=config.chains, binarize=config.binarize)
            write_volume(result.prob_map, prob_path)
            save_vote_state(result.vote_state, votes_stem)
            save_samples(result.samples, samples_path)
            return {"accept_rate": result.samples.accept_rate}

        cache.run(
            f"segment:{case.case_id}",
            {
                "image": file_sha256(case.image),
                "reference": file_sha256(reference.image),
                "target": file_sha256(target_path),
                "model": file_sha256(model_path),
                "registration": _jsonable(reg_kwargs),
                "n1": config.n1, "n2": config.n2_segment, "sigma": config.proposal_sigma,
                "seed": config.seed + 1000 + j, "chains": config.chains,
                "binarize": config.binarize,
            },
            [t_path, prob_path, Path(str(votes_stem) + ".w.pmv"),
             Path(str(votes_stem) + ".k.pmv"), Path(str(votes_stem) + ".meta.json"),
             samples_path],
            do_segment,
        )

    # --- fusion threshold (optionally swept over the evaluation pairs) ---
    t_eval0 = time.perf_counter()
    eval_cases = [c for c in config.tests if c.mask is not None]
    f_sweep_table = None
    if config.f == "sweep":
        if not eval_cases:
            raise ConfigError("f='sweep' needs test cases with ground-truth masks")
        stems = [out / "segment" / c.case_id / "votes" for c in eval_cases]
        transforms = [load_transform(out / "segment" / c.case_id / "transform.json")[0]
                      for c in eval_cases]
        gts = [read_mask(c.mask) for c in eval_cases]
        f_lo, f_hi = config.f_range
        f_sweep_table = sweep_f(stems, transforms, gts, range(f_lo, f_hi + 1))
        f_selected = f_sweep_table["argmax"]
    else:
        f_selected = int(config.f)

    # --- finalize masks at the selected f, then evaluate ---
    candidate_mask = read_mask(e_path)
    per_case = []
    for c in config.tests:
        case_dir = out / "segment" / c.case_id
        seg_path = case_dir / "seg.nii.gz"
        t, _ = load_transform(case_dir / "transform.json")

        def do_finalize(c=c, case_dir=case_dir, seg_path=seg_path, t=t):
            state = load_vote_state(case_dir / "votes")
            _, mask_atlas = finalize(state, f_selected)
            image_geom = read_volume(c.image).geometry
            mask = resample(mask_atlas, invert(t), image_geom, mode="nearest")
            write_volume(mask, seg_path)
            if c.mask is None:
                return {"case_id": c.case_id}
            gt = read_mask(c.mask)
            conf = confusion(mask, gt)
            sc = scores(conf)
            rec = {
                "case_id": c.case_id,
                "precision": sc.precision, "recall": sc.recall,
                "dsc": sc.dsc, "jaccard": sc.jaccard,
                "tp": conf.tp, "fp": conf.fp, "fn": conf.fn, "tn": conf.tn,
            }
            if config.hausdorff and conf.tp + conf.fp > 0 and conf.tp + conf.fn > 0:
                rec["hausdorff_mm"] = hausdorff_mm(mask, gt)
            gt_atlas = resample(gt, t, candidate_mask.geometry, mode="nearest")
            rec["candidate_recall"] = scores(confusion(candidate_mask, gt_atlas)).recall
            return rec

        rec = cache.run(
            f"finalize:{c.case_id}",
            {
                "votes_w": file_sha256(str(case_dir / "votes") + ".w.pmv"),
                "votes_k": file_sha256(str(case_dir / "votes") + ".k.pmv"),
                "transform": file_sha256(case_dir / "transform.json"),
                "f": f_selected,
                "gt": file_sha256(c.mask) if c.mask is not None else None,
                "candidate": file_sha256(e_path),
                "hausdorff": config.hausdorff,
            },
            [seg_path],
            do_finalize,
        )
        per_case.append(rec)

    def agg(key):
        vals = [r[key] for r in per_case if key in r]
        if not vals:
            return None
        return {"mean": float(np.mean(vals)), "min": float(np.min(vals)), "max": float(np.max(vals))}

    artifact_hashes = {}
    for name, rec in sorted(cache.state.items()):
        artifact_hashes.update(rec["outputs"])

    report = {
        "versions": {"patchmc": _pkg_version, "numpy": np.__version__},
        "seed": config.seed,
        "d_selected": d_selected,
        "f_selected": f_selected,
        "f_sweep": f_sweep_table,
        "stages": dict(cache.log, **{
            "evaluate": {"skipped": False,
                         "wall_time_s": round(time.perf_counter() - t_eval0, 3)},
        }),
        "artifact_hashes": artifact_hashes,
        "per_case": per_case,
        "aggregates": {
            k: agg(k)
            for k in ("precision", "recall", "dsc", "jaccard", "hausdorff_mm", "candidate_recall")
        },
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=list))
