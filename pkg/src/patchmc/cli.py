"""Command-line interface: per-stage commands plus the end-to-end pipeline."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import __version__
from .classifier import TrainConfig, load_model, plugin_session, save_model, train_baseline
from .fusion import load_vote_state, save_vote_state, segment
from .mcmc import ChainConfig, SamplingTarget, load_samples, run_chains, save_samples
from .metrics import confusion, hausdorff_mm, roc_sweep, scores
from .patches import build_training_set, load_dataset, save_dataset
from .pipeline import PipelineConfig, run_pipeline, sweep_d, sweep_f
from .prior import PriorMap, build_prior, dilate, threshold_prior
from .phantom import make_phantom
from .registration import (
    RegistrationConfig,
    load_transform,
    register_affine,
    save_transform,
)
from .volume import Volume, read_mask, read_volume, write_volume


def _parse_triple(text, cast=int):
    parts = [cast(x) for x in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise click.BadParameter(f"expected one or three comma-separated values, got {text!r}")
    return tuple(parts)


def _parse_range(text):
    lo, hi = str(text).split(":")
    return range(int(lo), int(hi) + 1)


@click.group()
@click.version_option(version=__version__)
def main():
    """MCMC-guided, prior-driven, patch-based 3D segmentation toolkit."""


@main.command()
@click.option("--fixed", "fixed_path", required=True, type=click.Path(exists=True))
@click.option("--moving", "moving_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--metric", type=click.Choice(["ncc", "mse"]), default="ncc", show_default=True)
@click.option("--pyramid", default="4,2,1", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def register(fixed_path, moving_path, out_path, metric, pyramid, seed):
    """Estimate the affine transform aligning MOVING onto FIXED."""
    fixed = read_volume(fixed_path)
    moving = read_volume(moving_path)
    cfg = RegistrationConfig(
        metric=metric,
        pyramid_factors=tuple(int(x) for x in pyramid.split(",")),
        seed=seed,
    )
    res = register_affine(fixed, moving, cfg)
    save_transform(out_path, res.transform, fixed.geometry, moving.geometry, res.metric_final)
    click.echo(f"metric {res.metric_initial:.6g} -> {res.metric_final:.6g}"
               f" converged={res.converged}")


@main.command("build-prior")
@click.option("--masks", required=True,
              help="Directory of mask files, or comma-separated list of paths.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Normalized prior volume (.pmv).")
@click.option("--counts", "counts_path", required=True, type=click.Path(),
              help="Raw vote-count volume (.pmv).")
def build_prior_cmd(masks, out_path, counts_path):
    """Sum registered atlas masks into the spatial prior."""
    p = Path(masks)
    if p.is_dir():
        paths = sorted(
            q for q in p.iterdir() if q.suffix == ".pmv" or q.name.endswith((".nii", ".nii.gz"))
        )
    else:
        paths = [Path(x) for x in masks.split(",")]
    pm = build_prior([read_mask(q) for q in paths])
    write_volume(pm.normalized, out_path)
    write_volume(pm.counts, counts_path)
    click.echo(f"prior over {pm.m} atlases -> {out_path}, counts -> {counts_path}")


@main.command()
@click.option("--counts", "counts_path", required=True, type=click.Path(exists=True))
@click.option("--d", "d", required=True, type=float, help="Vote-count threshold.")
@click.option("--k", "k", default=5, show_default=True, type=int, help="Dilation radius (voxels).")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Candidate region E.")
@click.option("--r-out", "r_path", type=click.Path(), default=None, help="Also write thresholded R.")
@click.option("--element", type=click.Choice(["cube", "cross"]), default="cube", show_default=True)
def candidate(counts_path, d, k, out_path, r_path, element):
    """Threshold the prior counts at d and dilate by k voxels."""
    counts = read_volume(counts_path)
    m = int(counts.data.max())
    pm = PriorMap(counts=counts, normalized=Volume(counts.geometry, counts.data), m=m)
    r = threshold_prior(pm, d)
    e = dilate(r, k, element=element)
    if r_path:
        write_volume(r, r_path)
    write_volume(e, out_path)
    click.echo(f"candidate region: {int(e.data.sum())} voxels -> {out_path}")


@main.command()
@click.option("--target", "target_path", required=True, type=click.Path(exists=True))
@click.option("--n1", default=1000, show_default=True, type=int)
@click.option("--n2", default=50000, show_default=True, type=int)
@click.option("--sigma", default=4.0, show_default=True, type=float)
@click.option("--seed", default=7, show_default=True, type=int)
@click.option("--chains", default=1, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def sample(target_path, n1, n2, sigma, seed, chains, out_path):
    """Draw voxel centers from an unnormalized target volume."""
    tv = read_volume(target_path)
    target = SamplingTarget(tv.geometry, tv.data.astype(np.float64))
    cfg = ChainConfig(n1=n1, n2=n2, proposal_sigma=sigma, seed=seed)
    samples = run_chains(target, cfg, chains=chains)
    save_samples(samples, out_path)
    click.echo(f"{len(samples.centers)} samples, accept rate {samples.accept_rate:.3f}")


@main.command("extract-patches")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True),
              help='JSON manifest: {"pairs": [{"image": ..., "mask": ...}, ...]}')
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True))
@click.option("--size", default="16", show_default=True)
@click.option("--seed", default=3, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def extract_patches(pairs_path, samples_path, size, seed, out_path):
    """Cut labeled training patches at sampled centers."""
    doc = json.loads(Path(pairs_path).read_text())
    base = Path(pairs_path).parent
    images = [(read_volume(base / e["image"]), read_mask(base / e["mask"])) for e in doc["pairs"]]
    samples = load_samples(samples_path)
    ds = build_training_set(images, samples, size=_parse_triple(size), seed=seed)
    save_dataset(ds, out_path)
    click.echo(f"{len(ds)} patches -> {out_path}")


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--plugin", "plugin_cmd", default=None,
              help="Route training over the plugin protocol to this command line.")
@click.option("--epochs", default=12, show_default=True, type=int)
@click.option("--batch-size", default=100, show_default=True, type=int)
@click.option("--lr", default=1.0, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def train(dataset_path, model_path, plugin_cmd, epochs, batch_size, lr, seed):
    """Train the baseline classifier (or hand the dataset to a plugin)."""
    ds = load_dataset(dataset_path)
    if plugin_cmd:
        from .pipeline import _plugin_model_doc

        command = plugin_cmd.split()
        with plugin_session(command, ds.size) as handle:
            loss = handle.train(ds)
        doc = _plugin_model_doc(ds.normalization, ds.size, loss, command)
        Path(model_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        click.echo(f"plugin final loss {loss:.6f} -> {model_path}")
        return
    model = train_baseline(ds, TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed))
    save_model(model, model_path)
    click.echo(f"final loss {model.train_log['final_loss']:.6f} -> {model_path}")


@main.command("segment")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--transform", "transform_path", required=True, type=click.Path(exists=True))
@click.option("--target", "target_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--plugin", "plugin_cmd", default=None)
@click.option("--n1", default=1000, show_default=True, type=int)
@click.option("--n2", default=50000, show_default=True, type=int)
@click.option("--sigma", default=4.0, show_default=True, type=float)
@click.option("--seed", default=7, show_default=True, type=int)
@click.option("--chains", default=1, show_default=True, type=int)
@click.option("--f", "f", default=10, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--prob", "prob_path", default=None, type=click.Path())
@click.option("--votes", "votes_stem", default=None, type=click.Path(),
              help="Persist the vote state under this stem for later f-sweeps.")
def segment_cmd(image_path, transform_path, target_path, model_path, plugin_cmd,
                n1, n2, sigma, seed, chains, f, out_path, prob_path, votes_stem):
    """Segment one image through a saved transform, target, and model."""
    image = read_volume(image_path)
    t, _ = load_transform(transform_path)
    tv = read_volume(target_path)
    target = SamplingTarget(tv.geometry, tv.data.astype(np.float64))
    model = load_model(model_path)
    chain = ChainConfig(n1=n1, n2=n2, proposal_sigma=sigma, seed=seed)
    if plugin_cmd:
        with plugin_session(plugin_cmd.split(), model.patch_size, norm=model.norm) as handle:
            result = segment(image, t, target, handle, chain, f, chains=chains)
    else:
        result = segment(image, t, target, model, chain, f, chains=chains)
    write_volume(result.mask, out_path)
    if prob_path:
        write_volume(result.prob_map, prob_path)
    if votes_stem:
        save_vote_state(result.vote_state, votes_stem)
    click.echo(f"segmentation ({int(result.mask.data.sum())} voxels) -> {out_path}")


@main.command()
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True))
@click.option("--hausdorff", "with_hd", is_flag=True, default=False)
@click.option("--roc", "roc_stem", default=None,
              help="Vote-state stem; adds an ROC sweep over --f-range.")
@click.option("--f-range", "f_range", default="1:20", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def evaluate(pred_path, gt_path, with_hd, roc_stem, f_range, out_path):
    """Score a predicted mask against ground truth."""
    pred = read_mask(pred_path)
    gt = read_mask(gt_path)
    conf = confusion(pred, gt)
    sc = scores(conf)
    report = {
        "confusion": {"tp": conf.tp, "fp": conf.fp, "fn": conf.fn, "tn": conf.tn},
        "precision": sc.precision,
        "recall": sc.recall,
        "dsc": sc.dsc,
        "jaccard": sc.jaccard,
    }
    if with_hd:
        report["hausdorff_mm"] = hausdorff_mm(pred, gt)
    if roc_stem:
        state = load_vote_state(roc_stem)
        curve = roc_sweep(state, gt, _parse_range(f_range))
        report["roc"] = [{"f": f, "tpr": tpr, "fpr": fpr} for f, tpr, fpr in curve.points]
    Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    click.echo(f"DSC {sc.dsc:.4f}  recall {sc.recall:.4f}  precision {sc.precision:.4f}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run(config_path):
    """Run the full pipeline described by a pipeline.json."""
    config = PipelineConfig.from_json(config_path)
    report = run_pipeline(config)
    agg = report["aggregates"].get("dsc")
    if agg:
        click.echo(f"mean test DSC {agg['mean']:.4f} (f={report['f_selected']},"
                   f" d={report['d_selected']})")
    else:
        click.echo(f"pipeline done (f={report['f_selected']}, d={report['d_selected']})")


@main.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--param", type=click.Choice(["d", "f"]), required=True)
@click.option("--range", "value_range", default=None,
              help="lo:hi inclusive; defaults to 1:M for d and the config f_range for f.")
@click.option("--out", "out_path", default=None, type=click.Path())
def sweep_cmd(config_path, param, value_range, out_path):
    """Sweep d or f against the pipeline's persisted artifacts."""
    config = PipelineConfig.from_json(config_path)
    out = Path(config.output_dir)
    if param == "d":
        counts = read_volume(out / "prior" / "counts.pmv")
        masks = [read_mask(out / "registered" / f"atlas_{i:03d}_msk.pmv")
                 for i in range(len(config.atlas))]
        values = _parse_range(value_range) if value_range else range(1, len(config.atlas) + 1)
        table = sweep_d(counts, masks, values)
    else:
        eval_cases = [c for c in config.tests if c.mask is not None]
        stems = [out / "segment" / c.case_id / "votes" for c in eval_cases]
        transforms = [load_transform(out / "segment" / c.case_id / "transform.json")[0]
                      for c in eval_cases]
        gts = [read_mask(c.mask) for c in eval_cases]
        if value_range:
            values = _parse_range(value_range)
        else:
            values = range(config.f_range[0], config.f_range[1] + 1)
        table = sweep_f(stems, transforms, gts, values)
    text = json.dumps(table, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n")
    click.echo(text)


@main.command()
@click.option("--count", default=20, show_default=True, type=int)
@click.option("--dims", default="64", show_default=True)
@click.option("--noise-sigma", default=4.0, show_default=True, type=float)
@click.option("--seed", default=1, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def phantom(count, dims, noise_sigma, seed, out_dir):
    """Generate a synthetic atlas set with exact ground-truth masks."""
    manifest = make_phantom(count, dims=_parse_triple(dims), noise_sigma=noise_sigma,
                            seed=seed, out_dir=out_dir)
    click.echo(f"{len(manifest['cases'])} cases -> {out_dir}")


if __name__ == "__main__":
    main(prog_name="patchmc")
