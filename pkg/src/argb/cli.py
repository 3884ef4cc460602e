"""Command line entry point: ``argb <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numerical failure,
3 missing input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from argb import analysis, data, plotting
from argb.checkpoint import CheckpointError, load_checkpoint, load_tensors, save_checkpoint, save_tensors
from argb.config import ConfigError, apply_overrides, autoencoder_config, config_hash, load_config
from argb.losses import LossSpec, loss_gradient
from argb.restoration import RestoreTrainConfig, TinyRestorer, evaluate, save_triptychs, train_restorer
from argb.training import TrainingDiverged, evaluate_reconstruction, psnr, read_log, train_autoencoder

log = logging.getLogger("argb")

EXIT_CONFIG, EXIT_RUNTIME, EXIT_MISSING = 1, 2, 3


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping: records files and writes manifest.json."""

    def __init__(self, command: str, out: Path, cfg: dict, seed: int):
        self.command, self.out, self.cfg, self.seed = command, out, cfg, seed
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, *paths) -> None:
        for p in paths:
            self.files.append(Path(p))

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        self.add(p)
        return p

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "files": {str(p.relative_to(self.out)): _sha256(p) for p in sorted(set(self.files))},
        }
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return p


def _out_dir(args, default: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("ARGB_OUT", "runs")) / default


def _config(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def _load_ckpt(path):
    if path is None:
        raise ConfigError("this command requires --ckpt")
    if not Path(path).exists():
        raise MissingInput(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    ckpt.model.freeze()
    return ckpt


def load_input(spec: str, crop: int = 0, seed: int = 0) -> torch.Tensor:
    """``builtin:<name>`` (bundled photo), ``synth:<kind>`` (one 64px patch) or a file path.

    ``crop > 0`` takes a centred crop of that size.
    """
    if spec.startswith("builtin:"):
        try:
            img = data.sample_photo(spec.split(":", 1)[1])
        except AttributeError as exc:
            raise MissingInput(f"unknown builtin image {spec}") from exc
    elif spec.startswith("synth:"):
        img = data.synthesize(spec.split(":", 1)[1], 1, max(crop, 64), np.random.default_rng(seed))[0]
    else:
        if not Path(spec).exists():
            raise MissingInput(f"image not found: {spec}")
        img = data.load_image(spec)
    if crop:
        _, h, w = img.shape
        if h < crop or w < crop:
            raise ConfigError(f"image {spec} ({h}x{w}) is smaller than crop {crop}")
        y, x = (h - crop) // 2, (w - crop) // 2
        img = img[:, y : y + crop, x : x + crop]
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))


def _training_patches(cfg: dict, patch_size: int, seed: int) -> np.ndarray:
    if cfg["data"]["patches"]:
        return data.PatchStore.open(cfg["data"]["patches"]).arrays()
    return data.desk_corpus(patch_size, seed)


# ---------------------------------------------------------------- commands


def cmd_prepare_data(args, cfg):
    src = args.src or cfg["data"]["src"]
    if not src:
        raise ConfigError("prepare-data requires --src (or data.src)")
    size = args.size or cfg["data"]["size"]
    stride = args.stride or cfg["data"]["stride"]
    run = Run("prepare-data", _out_dir(args, "patches"), cfg, cfg["data"]["seed"])
    store = data.extract_patches(src, size, stride, run.out)
    run.add(run.out / data.MANIFEST, *(run.out / r.file for r in store.records))
    print(f"{len(store)} patches written to {run.out}")
    return run


def cmd_synth_data(args, cfg):
    d = cfg["data"]
    kind = args.kind or d["kind"]
    count = args.count or d["count"]
    size = args.size or d["synth_size"]
    seed = d["seed"] if args.seed is None else args.seed
    run = Run("synth-data", _out_dir(args, "synth"), cfg, seed)
    store = data.synth_patches(kind, count, size, np.random.default_rng(seed), run.out, cell=d["cell"])
    run.add(run.out / data.MANIFEST, *(run.out / r.file for r in store.records))
    return run


def cmd_train_argb(args, cfg):
    if args.steps is not None:
        cfg["autoencoder"]["total_steps"] = args.steps
    if args.seed is not None:
        cfg["autoencoder"]["seed"] = args.seed
    ae = autoencoder_config(cfg)
    run = Run("train-argb", _out_dir(args, "argb"), cfg, ae.seed)
    patches = _training_patches(cfg, ae.patch_size, ae.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    snapshots = []
    ckpt = train_autoencoder(
        ae, patches, log_path=run.path("train_log.jsonl"), resume=resume, on_cycle_end=snapshots.append
    )
    # the exported model is the last completed cosine period; the final state is kept for resuming
    model_ckpt = snapshots[-1] if snapshots and snapshots[-1].step < ckpt.step else ckpt
    for c in (ckpt, model_ckpt):
        c.meta = {"patches": len(patches)}
    run.add(save_checkpoint(model_ckpt, run.path("argb.ckpt")), run.out / "train_log.jsonl")
    if model_ckpt is not ckpt:
        run.add(save_checkpoint(ckpt, run.path("last.ckpt")))
    held = data.desk_corpus(64, ae.seed, heldout=True)
    run.json("eval.json", evaluate_reconstruction(model_ckpt.model, held) | {"step": model_ckpt.step})
    run.add(plotting.training_curves(read_log(run.out / "train_log.jsonl"), run.path("figures/training_curves.png")))
    return run


def cmd_eval_argb(args, cfg):
    ckpt = _load_ckpt(args.ckpt)
    run = Run("eval-argb", _out_dir(args, "eval"), cfg, 0)
    if args.images:
        root = Path(args.images)
        if not root.is_dir():
            raise MissingInput(f"image directory not found: {root}")
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in data.IMAGE_SUFFIXES)
        if not files:
            raise MissingInput(f"no images in {root}")
        images, names = [data.load_image(p) for p in files], [p.name for p in files]
    else:
        images = list(data.desk_corpus(64, ckpt.config.get("seed", 0), heldout=True))
        names = [f"heldout_{i:03d}" for i in range(len(images))]
    rows = []
    for name, img in zip(names, images):
        r = evaluate_reconstruction(ckpt.model, [img])
        rows.append({"image": name, "psnr": r["psnr"], "avg_rgb_diff_255": r["avg_rgb_diff_255"]})
    analysis.write_rows(run.path("eval.csv"), rows)
    run.add(run.out / "eval.csv")
    run.json("eval.json", evaluate_reconstruction(ckpt.model, images))
    return run


def _restore_config(cfg: dict) -> RestoreTrainConfig:
    r = cfg["restorer"]
    try:
        spec = LossSpec(cfg["loss"]["space"], cfg["loss"]["kind"], cfg["loss"]["weight"], cfg["loss"]["charbonnier_eps"])
        return RestoreTrainConfig(loss=spec, **r)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"restorer/loss: {exc}") from exc


def restoration_data(patch_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    train = data.photo_patches(data.TRAIN_PHOTOS, max(patch_size, 64), max(patch_size, 64))
    val = data.photo_patches(data.HELDOUT_PHOTOS, 64, 128)
    return train, val


def cmd_train_restorer(args, cfg):
    if args.space:
        cfg["loss"]["space"] = args.space
    if args.kind:
        cfg["loss"]["kind"] = args.kind
    if args.steps is not None:
        cfg["restorer"]["steps"] = args.steps
    if args.seed is not None:
        cfg["restorer"]["seed"] = args.seed
    rc = _restore_config(cfg)
    encoder = _load_ckpt(args.ckpt).model if rc.loss.space == "argb" else None
    run = Run("train-restorer", _out_dir(args, "restorer"), cfg, rc.seed)
    train, val = restoration_data(rc.patch_size, rc.seed)
    res = train_restorer(rc, train, val, encoder, log_path=run.path("restore_log.jsonl"))
    run.add(run.out / "restore_log.jsonl")
    run.add(save_tensors(run.path("restorer.ckpt"), res.model.state_dict(), {"width": rc.width, "depth": rc.depth}))
    metrics = evaluate(res.model, val, rc.sigma, rc.seed)
    metrics["encoder_hash_before"] = res.encoder_hash_before
    metrics["encoder_hash_after"] = res.encoder_hash_after
    run.json("metrics.json", metrics)
    run.add(*save_triptychs(res.model, val[:4], rc.sigma, run.path("triptychs"), rc.seed))
    run.add(plotting.restoration_curves({f"{rc.loss.kind}/{rc.loss.space}": res.log}, run.path("figures/val_psnr.png")))
    return run


def load_restorer(path) -> TinyRestorer:
    tensors, meta = load_tensors(path)
    model = TinyRestorer(meta["width"], meta["depth"])
    model.load_state_dict(tensors)
    return model


# ---------------------------------------------------------------- analyze


def _analysis_run(args, cfg, name):
    a = cfg["analysis"]
    if args.seed is not None:
        a["seed"] = args.seed
    if args.crop is not None:
        a["crop"] = args.crop
    run = Run(f"analyze {name}", _out_dir(args, f"analysis/{name}"), cfg, a["seed"])
    return run, a


def _params(run, a, **extra):
    run.json("params.json", dict(a, **extra))


def an_decompose(args, cfg, model):
    run, a = _analysis_run(args, cfg, "decompose")
    x = load_input(args.image, a["crop"], a["seed"])
    eff = model.effective_decoder()
    with torch.no_grad():
        xi = model.encode(x)
    dec = analysis.decompose(xi, eff)
    A = eff.A
    stats = {
        "rank": eff.rank,
        "sum_error": float((dec.xi_par + dec.xi_perp - xi.double()).abs().max()),
        "annihilation": float(torch.einsum("oc,chw->ohw", A, dec.xi_perp).abs().max()),
        "max_inner_product": float((dec.xi_par * dec.xi_perp).sum(0).abs().max()),
        "par_energy": float((dec.xi_par**2).sum(0).mean()),
        "perp_energy": float((dec.xi_perp**2).sum(0).mean()),
    }
    run.json("decomposition.json", stats)
    par_img = eff.apply(dec.xi_par).float().numpy()
    perp_mag = dec.xi_perp.norm(dim=0).numpy()
    run.add(data.save_image(run.path("decoded_parallel.png"), par_img))
    run.add(plotting.image_grid([x.numpy(), par_img, perp_mag], ["input", "g(parallel)", "|perpendicular|"], run.path("figures/decompose.png")))
    _params(run, a, image=args.image)
    return run


def an_invert(args, cfg, model):
    run, a = _analysis_run(args, cfg, "invert")
    x = load_input(args.image, a["crop"], a["seed"])
    with torch.no_grad():
        target = model.encode(x)
    icfg = analysis.InversionConfig(a["inversion_steps"], a["inversion_lr"], "random-uniform", a["seed"])
    res = analysis.invert(model, target, icfg)
    analysis.write_rows(run.path("trace.csv"), [{"iteration": i, "loss": v} for i, v in enumerate(res.losses)])
    run.add(run.out / "trace.csv", data.save_image(run.path("inverted.png"), res.image.numpy()))
    run.json("inversion.json", {"psnr_vs_input": psnr(res.image.clamp(0, 1).numpy(), x.numpy()), "initial_loss": res.losses[0], "final_loss": res.losses[-1]})
    run.add(plotting.loss_trace({"inversion": res.losses}, run.path("figures/trace.png")))
    _params(run, a, image=args.image)
    return run


def mixing_experiment(model, x1: torch.Tensor, x2: torch.Tensor, icfg: analysis.InversionConfig) -> dict:
    """Invert parallel(x1) + perpendicular(x2) and compare low-pass content with both sources."""
    eff = model.effective_decoder()
    with torch.no_grad():
        xi1, xi2 = model.encode(x1), model.encode(x2)
    mixed = analysis.mix_embeddings(xi1, xi2, eff)
    res = analysis.invert(model, mixed, icfg)
    out = res.image.clamp(0, 1)
    b = analysis.box_blur
    return {
        "result": res,
        "psnr_blur_vs_first": psnr(b(out).numpy(), b(x1).numpy()),
        "psnr_blur_vs_second": psnr(b(out).numpy(), b(x2).numpy()),
    }


def an_mix(args, cfg, model):
    run, a = _analysis_run(args, cfg, "mix")
    if not args.image2:
        raise ConfigError("analyze mix requires --image2")
    x1 = load_input(args.image, a["crop"], a["seed"])
    x2 = load_input(args.image2, a["crop"], a["seed"])
    icfg = analysis.InversionConfig(a["mix_steps"], a["mix_lr"], "random-uniform", a["seed"])
    r = mixing_experiment(model, x1, x2, icfg)
    res = r.pop("result")
    r.update(initial_loss=res.losses[0], final_loss=res.losses[-1])
    run.json("mix.json", r)
    analysis.write_rows(run.path("trace.csv"), [{"iteration": i, "loss": v} for i, v in enumerate(res.losses)])
    run.add(run.out / "trace.csv", data.save_image(run.path("mixed_inversion.png"), res.image.numpy()))
    run.add(plotting.image_grid([x1.numpy(), x2.numpy(), res.image.numpy()], ["parallel source", "perpendicular source", "inversion"], run.path("figures/mix.png")))
    _params(run, a, image=args.image, image2=args.image2)
    return run


def an_self_ref(args, cfg, model):
    run, a = _analysis_run(args, cfg, "self-ref")
    x = load_input(args.image, a["crop"], a["seed"])
    m = analysis.self_reference(model, x, pixel_stride=a["pixel_stride"])
    p = run.path("self_reference.csv")
    np.savetxt(p, m.rms, delimiter=",", fmt="%.9g")
    run.add(p)
    vals = m.rms[np.isfinite(m.rms)]
    run.json("self_reference.json", {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max()), **m.meta})
    run.add(plotting.self_reference(m.rms, run.path("figures/self_reference.png")))
    _params(run, a, image=args.image)
    return run


def an_metric_sweep(args, cfg, model):
    run, a = _analysis_run(args, cfg, "metric-sweep")
    if args.sigmas:
        a["sigmas"] = [float(s) for s in args.sigmas.split(",")]
    x = load_input(args.image, a["crop"], a["seed"])
    rows = analysis.metric_sweep(model, x, a["sigmas"], a["n_samples"], a["seed"])
    run.add(analysis.write_rows(run.path("metric_sweep.csv"), rows))
    run.add(plotting.metric_sweep(rows, run.path("figures/metric_sweep.png")))
    _params(run, a, image=args.image)
    return run


def an_expert_map(args, cfg, model):
    run, a = _analysis_run(args, cfg, "expert-map")
    x = load_input(args.image, a["crop"], a["seed"])
    idx = analysis.expert_map(model, x)
    p = run.path("expert_map.csv")
    np.savetxt(p, idx, delimiter=",", fmt="%d")
    run.add(p, data.save_image(run.path("expert_map.png"), plotting.expert_map_rgb(idx, model.num_experts)))
    counts = np.bincount(idx.ravel(), minlength=model.num_experts)
    run.json("expert_map.json", {"counts": counts.tolist()})
    run.add(plotting.expert_map(idx, model.num_experts, run.path("figures/expert_map.png"), x.numpy()))
    _params(run, a, image=args.image)
    return run


def an_export_embeddings(args, cfg, model):
    run, a = _analysis_run(args, cfg, "export-embeddings")
    if args.subsample is not None:
        a["subsample"] = args.subsample
    x = load_input(args.image, a["crop"], a["seed"])
    run.add(analysis.export_embeddings(model, x, a["subsample"], run.path("embeddings.csv")))
    _params(run, a, image=args.image)
    return run


def gradient_comparison(model, clean: torch.Tensor, sigma: float, seed: int, kind: str = "l1") -> dict:
    """Gradient statistics of the same loss in RGB and aRGB space for a noisy/clean pair."""
    from argb.restoration import degrade

    noisy = degrade(clean, sigma, torch.Generator().manual_seed(seed))
    rgb = loss_gradient(LossSpec("rgb", kind), noisy, clean)
    argb = loss_gradient(LossSpec("argb", kind), noisy, clean, model)
    return {"rgb": rgb, "argb": argb, "ratio": argb.mean_abs / rgb.mean_abs}


def an_grad_stats(args, cfg, model):
    run, a = _analysis_run(args, cfg, "grad-stats")
    sigma = args.sigma if args.sigma is not None else cfg["restorer"]["sigma"]
    x = load_input(args.image, a["crop"], a["seed"])
    r = gradient_comparison(model, x, sigma, a["seed"], cfg["loss"]["kind"])
    run.add(r["rgb"].to_csv(run.path("grad_hist_rgb.csv")), r["argb"].to_csv(run.path("grad_hist_argb.csv")))
    run.json("grad_stats.json", {"rgb": r["rgb"].summary(), "argb": r["argb"].summary(), "mean_abs_ratio": r["ratio"]})
    run.add(plotting.grad_histograms({"RGB": r["rgb"], "aRGB": r["argb"]}, run.path("figures/grad_hist.png")))
    _params(run, a, image=args.image, sigma=sigma, kind=cfg["loss"]["kind"])
    return run


def an_max_filter(args, cfg, model):
    run, a = _analysis_run(args, cfg, "max-filter")
    if args.expert is not None:
        a["expert"] = args.expert
    if args.channel is not None:
        a["channel"] = args.channel
    res = analysis.maximize_filter(model, a["expert"], a["channel"], a["filter_size"], a["filter_steps"], a["filter_lr"], a["seed"])
    run.add(data.save_image(run.path("filter.png"), res.image.numpy()))
    analysis.write_rows(run.path("trace.csv"), [{"iteration": i, "activation": v} for i, v in enumerate(res.trace)])
    run.add(run.out / "trace.csv")
    run.add(plotting.loss_trace({"activation": res.trace}, run.path("figures/trace.png"), "mean activation", logy=False))
    _params(run, a)
    return run


ANALYSES = {
    "decompose": an_decompose,
    "invert": an_invert,
    "mix": an_mix,
    "self-ref": an_self_ref,
    "metric-sweep": an_metric_sweep,
    "expert-map": an_expert_map,
    "export-embeddings": an_export_embeddings,
    "grad-stats": an_grad_stats,
    "max-filter": an_max_filter,
}


def cmd_analyze(args, cfg):
    model = _load_ckpt(args.ckpt).model
    if args.analysis != "max-filter" and not args.image:
        raise ConfigError(f"analyze {args.analysis} requires --image")
    return ANALYSES[args.analysis](args, cfg, model)


def cmd_report(args, cfg):
    """Run the light-weight analyses on one image and render every figure into one directory."""
    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.model
    a = cfg["analysis"]
    if args.seed is not None:
        a["seed"] = args.seed
    if args.crop is not None:
        a["crop"] = args.crop
    run = Run("report", _out_dir(args, "report"), cfg, a["seed"])
    image = args.image or "builtin:chelsea"
    x = load_input(image, a["crop"], a["seed"])
    summary: dict = {"image": image, "checkpoint_step": ckpt.step}

    held = data.desk_corpus(64, ckpt.config.get("seed", 0), heldout=True)
    summary["reconstruction"] = evaluate_reconstruction(model, held)

    rows = analysis.metric_sweep(model, x, a["sigmas"], a["n_samples"], a["seed"])
    run.add(analysis.write_rows(run.path("metric_sweep.csv"), rows), plotting.metric_sweep(rows, run.path("figures/metric_sweep.png")))

    g = gradient_comparison(model, x, cfg["restorer"]["sigma"], a["seed"])
    run.add(g["rgb"].to_csv(run.path("grad_hist_rgb.csv")), g["argb"].to_csv(run.path("grad_hist_argb.csv")))
    run.add(plotting.grad_histograms({"RGB": g["rgb"], "aRGB": g["argb"]}, run.path("figures/grad_hist.png")))
    summary["grad_mean_abs_ratio"] = g["ratio"]

    idx = analysis.expert_map(model, x)
    np.savetxt(run.path("expert_map.csv"), idx, delimiter=",", fmt="%d")
    run.add(run.out / "expert_map.csv", plotting.expert_map(idx, model.num_experts, run.path("figures/expert_map.png"), x.numpy()))

    sr = analysis.self_reference(model, x, pixel_stride=a["pixel_stride"])
    np.savetxt(run.path("self_reference.csv"), sr.rms, delimiter=",", fmt="%.9g")
    run.add(run.out / "self_reference.csv", plotting.self_reference(sr.rms, run.path("figures/self_reference.png")))
    summary["self_reference_mean"] = sr.mean

    flat = torch.from_numpy(data.synthesize("gradients", 1, x.shape[-1], np.random.default_rng(a["seed"]))[0])
    icfg = analysis.InversionConfig(a["mix_steps"], a["mix_lr"], "random-uniform", a["seed"])
    mix = mixing_experiment(model, flat, x, icfg)
    res = mix.pop("result")
    summary["mix"] = dict(mix, final_loss=res.losses[-1])
    run.add(plotting.image_grid([flat.numpy(), x.numpy(), res.image.numpy()], ["parallel source", "perpendicular source", "inversion"], run.path("figures/mix.png")))

    run.json("report.json", summary)
    return run


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="argb", description="aRGB representation space: training, analysis and loss substitution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out", help="output directory (default: $ARGB_OUT/<command>)")
        sp.add_argument("--seed", type=int)
        if ckpt:
            sp.add_argument("--ckpt", help="aRGB checkpoint")
        return sp

    sp = common(sub.add_parser("prepare-data", help="crop an image directory into a patch store"))
    sp.add_argument("--src")
    sp.add_argument("--size", type=int)
    sp.add_argument("--stride", type=int)
    sp.set_defaults(func=cmd_prepare_data)

    sp = common(sub.add_parser("synth-data", help="write a synthetic patch store"))
    sp.add_argument("--kind", choices=data.SYNTH_KINDS)
    sp.add_argument("--count", type=int)
    sp.add_argument("--size", type=int)
    sp.set_defaults(func=cmd_synth_data)

    sp = common(sub.add_parser("train-argb", help="train the aRGB autoencoder"))
    sp.add_argument("--steps", type=int, help="total training steps")
    sp.add_argument("--resume", help="continue from a checkpoint")
    sp.set_defaults(func=cmd_train_argb)

    sp = common(sub.add_parser("eval-argb", help="reconstruction accuracy of a checkpoint"), ckpt=True)
    sp.add_argument("--images", help="directory of images (default: desk held-out set)")
    sp.set_defaults(func=cmd_eval_argb)

    sp = common(sub.add_parser("train-restorer", help="train the denoising demo"), ckpt=True)
    sp.add_argument("--space", choices=("rgb", "argb"))
    sp.add_argument("--kind", choices=("l1", "l2", "psnr", "charbonnier", "edge"))
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train_restorer)

    sp = common(sub.add_parser("analyze", help="analysis commands"), ckpt=True)
    sp.add_argument("analysis", choices=sorted(ANALYSES))
    sp.add_argument("--image", help="image path, builtin:<name> or synth:<kind>")
    sp.add_argument("--image2", help="second image (mix)")
    sp.add_argument("--crop", type=int, help="centre crop size (0 = full image)")
    sp.add_argument("--sigmas", help="comma separated noise levels (metric-sweep)")
    sp.add_argument("--sigma", type=float, help="noise level (grad-stats)")
    sp.add_argument("--subsample", type=int)
    sp.add_argument("--expert", type=int)
    sp.add_argument("--channel", type=int)
    sp.set_defaults(func=cmd_analyze)

    sp = common(sub.add_parser("report", help="run the analysis suite and render all figures"), ckpt=True)
    sp.add_argument("--image")
    sp.add_argument("--crop", type=int)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # identical reduction order on every machine
    try:
        cfg = _config(args)
        run = args.func(args, cfg)
        run.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, data.NoPatchesError, CheckpointError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, analysis.Diverged, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
