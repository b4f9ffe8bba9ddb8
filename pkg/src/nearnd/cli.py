"""End-to-end pipeline commands: gen-train, gen-sample, finetune, build-memory,
score, eval, closeness.

Each command reads one declarative YAML config (flags override keys), writes
its artifacts under runs/<run_name>/{generator,samples,backbone,memory,reports}
and never passes in-process state to the next stage, so the pipeline is
restartable at any point. Every artifact embeds the resolved config hash and
the seeds that produced it. Exit codes: 0 success, 1 error, 2 band not
reached.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch
from filelock import FileLock, Timeout
from PIL import Image

from .benchmark import (
    RestClassifierConfig,
    build_fsde_testset,
    closeness_scores,
    nearest_class,
    train_aux_classifier,
    train_rest_classifier,
)
from .config import ConfigError, ConfigView, load_config
from .data import (
    MODEL_RANGE,
    ImageBatch,
    IngestionError,
    SplitError,
    as_model_range,
    load_dataset,
    load_image_dir,
    make_near_nd_split,
    make_one_vs_all_split,
    split_manifest,
    to_storage_range,
)
from .encoder import (
    ConvBackbone,
    FinetuneConfig,
    backbone_fingerprint,
    embed,
    finetune,
    load_backbone,
    make_backbone,
    save_backbone,
)
from .evaluation import evaluate_detector
from .fid import fid_metadata_note
from .generator import GeneratorTrainConfig, make_fid_probe, select_checkpoint, train_generator
from .memory import NoveltyScorer, build_memory, load_memory, save_memory, score_batch
from .reporting import (
    save_closeness_figure,
    save_fid_curve_figure,
    save_histogram_figure,
    save_training_curve_figure,
    write_closeness_csv,
    write_fid_curve_csv,
    write_scores_csv,
    write_training_curve_csv,
)
from .sde import DivergenceError, SamplerConfig, make_schedule, sample
from .scorenets import build_score_net

EXIT_BAND_NOT_REACHED = 2

_PIPELINE_ERRORS = (
    ConfigError,
    IngestionError,
    SplitError,
    DivergenceError,
    ValueError,
    KeyError,
    FileNotFoundError,
    OSError,
)


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _pipeline_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Timeout:
            _fail("run directory is locked by another process")
        except _PIPELINE_ERRORS as exc:
            _fail(str(exc))

    return wrapper


def _load_cfg(config_path: str, seed: int | None, band: str | None, k: int | None) -> ConfigView:
    cfg = load_config(config_path)
    if seed is not None:
        cfg.override("seed", seed)
    if band is not None:
        try:
            lo, hi = (float(part) for part in band.split(":"))
        except ValueError:
            raise ConfigError(f"--band must look like lo:hi, got {band!r}")
        cfg.override("generator.fid_band", [lo, hi])
    if k is not None:
        cfg.override("memory.k", k)
        cfg.override("eval.k", k)
    return cfg


def _run_dir(cfg: ConfigView, out: str | None) -> Path:
    if out is not None:
        path = Path(out)
    else:
        name = cfg.get_str("run_name", required=True)
        root = os.environ.get("ND_RUNS_DIR") or cfg.get_str("runs_dir", default="runs")
        path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _lock(run_dir: Path) -> FileLock:
    return FileLock(run_dir / ".lock", timeout=0.5)


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _image_size(cfg: ConfigView) -> tuple[int, int]:
    pair = cfg.get_pair("data.image_size", required=True)
    return (int(pair[0]), int(pair[1]))


def _load_normal_train(cfg: ConfigView) -> tuple[ImageBatch, str]:
    root = cfg.get_str("data.train_root", required=True)
    normal_class = cfg.get_int("data.normal_class", required=True)
    ds = load_dataset(root, _image_size(cfg), split_tag="train")
    if not 0 <= normal_class < ds.num_classes:
        raise ConfigError(f"data.normal_class {normal_class} invalid for {ds.num_classes}-class tree")
    return ds.class_batch(normal_class), ds.class_names[normal_class]


def _schedule_from_cfg(cfg: ConfigView):
    sched = cfg.get_dict("generator.schedule", default={}) or {}
    kind = sched.get("kind", "vp")
    kwargs = {key: value for key, value in sched.items() if key != "kind"}
    return make_schedule(kind, **kwargs)


def _sampler_from_cfg(cfg: ConfigView, key: str, seed: int) -> SamplerConfig:
    raw = cfg.get_dict(key, default={}) or {}
    return SamplerConfig(
        num_steps=int(raw.get("num_steps", 250)),
        t_min=float(raw.get("t_min", 1e-3)),
        corrector_steps=int(raw.get("corrector_steps", 1)),
        corrector_snr=float(raw.get("corrector_snr", 0.16)),
        rng_seed=seed,
    )


def _fid_backbone(cfg: ConfigView, channels: int) -> ConvBackbone:
    arch = cfg.get_dict("generator.fid_encoder", default={}) or {}
    return make_backbone(
        {
            "in_channels": channels,
            "num_blocks": int(arch.get("num_blocks", 6)),
            "width": int(arch.get("width", 16)),
        },
        pretrained_tag="fid-probe-frozen",
        seed=cfg.get_int("generator.fid_encoder_seed", default=7),
    )


def _encoder_backbone(cfg: ConfigView, channels: int, tag: str) -> ConvBackbone:
    arch = cfg.get_dict("encoder.arch", default={}) or {}
    return make_backbone(
        {
            "in_channels": channels,
            "num_blocks": int(arch.get("num_blocks", 12)),
            "width": int(arch.get("width", 16)),
        },
        pretrained_tag=tag,
        seed=cfg.get_int("encoder.seed", default=0),
    )


def _resolve_backbone(cfg: ConfigView, run_dir: Path, spec: str | None, channels: int) -> tuple[ConvBackbone, str]:
    """Backbone source: 'finetuned' (default), 'frozen', or a snapshot path."""
    spec = spec or "finetuned"
    if spec == "finetuned":
        path = run_dir / "backbone" / "finetuned.pt"
        if not path.is_file():
            raise ConfigError(f"no fine-tuned snapshot at '{path}'; run the finetune command first")
        return load_backbone(path), str(path)
    if spec == "frozen":
        return _encoder_backbone(cfg, channels, tag="frozen-random"), f"frozen:seed={cfg.get_int('encoder.seed', default=0)}"
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"backbone snapshot '{path}' does not exist")
    return load_backbone(path), str(path)


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "-" for ch in name)


@click.group()
def cli():
    """Near-distribution novelty detection pipeline."""


@cli.command("gen-train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--band", type=str, default=None, help="Target FID band as lo:hi.")
@click.option("--out", type=str, default=None, help="Override the run directory.")
@_pipeline_command
def cmd_gen_train(config_path, seed, band, out):
    """Train the score generator, probing FID until the target band is hit."""
    cfg = _load_cfg(config_path, seed, band, None)
    run_dir = _run_dir(cfg, out)
    with _lock(run_dir):
        run_seed = cfg.get_int("seed", default=0)
        normal, class_name = _load_normal_train(cfg)
        normal_model = as_model_range(normal)
        schedule = _schedule_from_cfg(cfg)

        arch = dict(cfg.get_dict("generator.arch", default={}) or {})
        arch.setdefault("kind", "unet")
        if arch["kind"] == "unet":
            arch.setdefault("channels", normal.channels)
        score_net = build_score_net(arch, schedule=schedule, seed=run_seed)

        fid_backbone = _fid_backbone(cfg, normal.channels)

        def feature_fn(x: torch.Tensor) -> np.ndarray:
            batch = ImageBatch(x.clamp(-1.0, 1.0), MODEL_RANGE)
            return embed(fid_backbone, batch).data

        fid_probe = make_fid_probe(feature_fn, normal_model.data)

        band_cfg = cfg.get_pair("generator.fid_band", default=None)
        train_cfg = GeneratorTrainConfig(
            max_steps=cfg.get_int("generator.steps", default=2000),
            batch_size=cfg.get_int("generator.batch_size", default=32),
            lr=cfg.get_float("generator.lr", default=1e-3),
            lr_decay=cfg.get_str("generator.lr_decay", default="none", choices={"none", "cosine"}),
            optimizer=cfg.get_str("generator.optimizer", default="adam", choices={"adam", "sgd"}),
            probe_every=cfg.get_int("generator.probe_every", default=200),
            probe_samples=cfg.get_int("generator.probe_samples", default=None),
            fid_band=band_cfg,
            sampler=_sampler_from_cfg(cfg, "generator.sampler", run_seed),
            seed=run_seed,
        )
        run = train_generator(normal_model, schedule, score_net, train_cfg, fid_probe)

        gen_dir = run_dir / "generator"
        gen_dir.mkdir(exist_ok=True)
        ckpt_entries = []
        for ckpt in run.checkpoints:
            path = gen_dir / f"{ckpt.checkpoint_id}.pt"
            payload = {
                "format": "nearnd-generator-ckpt",
                "version": 1,
                "arch": arch,
                "schedule": schedule.params(),
                "step": ckpt.step,
                "fid": ckpt.fid,
                "seed": run_seed,
                "state": ckpt.state,
            }
            tmp = path.with_suffix(".tmp")
            torch.save(payload, tmp)
            tmp.replace(path)
            ckpt_entries.append(
                {"id": ckpt.checkpoint_id, "step": ckpt.step, "fid": ckpt.fid, "path": path.name}
            )

        selected = None
        if run.checkpoints and band_cfg is not None:
            sel = select_checkpoint(run, band_cfg)
            selected = {"id": sel.checkpoint_id, "approximate": sel.approximate}
        elif run.checkpoints:
            selected = {"id": run.checkpoints[-1].checkpoint_id, "approximate": False}

        manifest = {
            "config_hash": cfg.resolved_hash(),
            "seed": run_seed,
            "normal_class": class_name,
            "image_size": list(normal.image_size),
            "band": list(band_cfg) if band_cfg else None,
            "band_not_reached": run.band_not_reached,
            "selected": selected,
            "checkpoints": ckpt_entries,
            "schedule": schedule.params(),
            "arch": arch,
            "sampler": {
                "num_steps": train_cfg.sampler.num_steps,
                "t_min": train_cfg.sampler.t_min,
                "corrector_steps": train_cfg.sampler.corrector_steps,
                "corrector_snr": train_cfg.sampler.corrector_snr,
            },
            "fid": fid_metadata_note(),
        }
        _write_json(gen_dir / "run.json", manifest)

        steps = [c.step for c in run.checkpoints]
        fids = [c.fid for c in run.checkpoints]
        write_fid_curve_csv(gen_dir / "fid_curve.csv", steps, fids)
        if steps:
            save_fid_curve_figure(steps, fids, band_cfg, gen_dir / "fid_curve.png")

    if band_cfg is not None and run.band_not_reached:
        click.echo("band_not_reached", err=True)
        sys.exit(EXIT_BAND_NOT_REACHED)
    click.echo(f"gen-train: {len(run.checkpoints)} checkpoints in {gen_dir}")


@cli.command("gen-sample")
@click.option("--run-dir", "run_dir_path", required=True, type=click.Path())
@click.option("--n", type=int, required=True)
@click.option("--out", type=str, default=None, help="Sample output directory.")
@click.option("--seed", type=int, default=0)
@click.option("--checkpoint", "checkpoint_id", type=str, default=None)
@_pipeline_command
def cmd_gen_sample(run_dir_path, n, out, seed, checkpoint_id):
    """Sample PNG images from a trained (selected) generator checkpoint."""
    if n < 0:
        raise ConfigError("--n must be >= 0")
    run_dir = Path(run_dir_path)
    manifest_path = run_dir / "generator" / "run.json"
    if not manifest_path.is_file():
        raise ConfigError(f"no run manifest at '{manifest_path}'")
    manifest = json.loads(manifest_path.read_text())

    out_dir = Path(out) if out else run_dir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)

    if checkpoint_id is None:
        if not manifest.get("selected"):
            raise ConfigError("run has no selected checkpoint; pass --checkpoint")
        checkpoint_id = manifest["selected"]["id"]
    entry = next((c for c in manifest["checkpoints"] if c["id"] == checkpoint_id), None)
    if entry is None:
        raise ConfigError(f"checkpoint {checkpoint_id!r} not present in the run manifest")

    files = []
    if n > 0:
        ckpt_path = run_dir / "generator" / entry["path"]
        if not ckpt_path.is_file():
            raise ConfigError(f"checkpoint file '{ckpt_path}' is missing")
        payload = torch.load(ckpt_path, map_location="cpu", weights_only=True)
        sched_params = dict(payload["schedule"])
        schedule = make_schedule(sched_params.pop("kind"), **sched_params)
        score_net = build_score_net(payload["arch"], schedule=schedule)
        score_net.load_state_dict(payload["state"])
        score_net.eval()

        samp = manifest["sampler"]
        sampler_cfg = SamplerConfig(
            num_steps=samp["num_steps"],
            t_min=samp["t_min"],
            corrector_steps=samp["corrector_steps"],
            corrector_snr=samp["corrector_snr"],
            rng_seed=seed,
        )
        channels = payload["arch"].get("channels", 1)
        size = manifest["image_size"]
        batch = sample(score_net, schedule, sampler_cfg, n, (channels, int(size[0]), int(size[1])))
        storage = to_storage_range(batch)
        arr = (storage.data.numpy() * 255.0).round().astype(np.uint8)
        for i in range(n):
            img = arr[i, 0] if channels == 1 else arr[i].transpose(1, 2, 0)
            path = out_dir / f"fake_{i:06d}.png"
            Image.fromarray(img).save(path)
            files.append(path.name)

    _write_json(
        out_dir / "manifest.json",
        {
            "checkpoint": checkpoint_id,
            "fid_at_selection": entry["fid"],
            "seed": seed,
            "n": n,
            "files": files,
            "config_hash": manifest.get("config_hash"),
        },
    )
    click.echo(f"gen-sample: wrote {n} samples to {out_dir}")


@cli.command("finetune")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, default=None)
@_pipeline_command
def cmd_finetune(config_path, seed, out):
    """Fine-tune the feature extractor against the generated fake pool."""
    cfg = _load_cfg(config_path, seed, None, None)
    run_dir = _run_dir(cfg, out)
    with _lock(run_dir):
        run_seed = cfg.get_int("seed", default=0)
        normal, class_name = _load_normal_train(cfg)
        fake_dir = cfg.get_str("finetune.fake_dir", default=str(run_dir / "samples"))
        if not Path(fake_dir).is_dir():
            raise ConfigError(f"fake pool directory '{fake_dir}' does not exist; run gen-sample first")
        fakes = load_image_dir(fake_dir, _image_size(cfg))
        if fakes.channels != normal.channels:
            raise ConfigError(
                f"fake pool has {fakes.channels} channels but normal data has {normal.channels}"
            )

        backbone = _encoder_backbone(cfg, normal.channels, tag="random-init")
        before_fp = backbone_fingerprint(backbone)
        ft_cfg = FinetuneConfig(
            learning_rate=cfg.get_float("encoder.finetune.learning_rate", default=4e-4),
            weight_decay=cfg.get_float("encoder.finetune.weight_decay", default=5e-5),
            batch_size=cfg.get_int("encoder.finetune.batch_size", default=16),
            optimizer=cfg.get_str("encoder.finetune.optimizer", default="sgd", choices={"sgd", "adam"}),
            max_epochs=cfg.get_int("encoder.finetune.max_epochs", default=30),
            freeze_depth=cfg.get_int("encoder.finetune.freeze_depth", default=None),
            seed=run_seed,
        )
        tuned, report = finetune(backbone, as_model_range(normal), as_model_range(fakes), ft_cfg)
        tuned.pretrained_tag = f"finetuned:{class_name}"

        bb_dir = run_dir / "backbone"
        bb_dir.mkdir(exist_ok=True)
        save_backbone(tuned, bb_dir / "finetuned.pt")
        payload = report.to_json_dict()
        payload.update(
            {
                "config_hash": cfg.resolved_hash(),
                "normal_class": class_name,
                "n_normal": len(normal),
                "n_fake": len(fakes),
                "backbone_fingerprint_before": before_fp,
                "backbone_fingerprint_after": backbone_fingerprint(tuned),
                "finetune": {
                    "learning_rate": ft_cfg.learning_rate,
                    "weight_decay": ft_cfg.weight_decay,
                    "batch_size": ft_cfg.batch_size,
                    "optimizer": ft_cfg.optimizer,
                    "freeze_depth": tuned.freeze_depth,
                },
            }
        )
        _write_json(bb_dir / "report.json", payload)
        write_training_curve_csv(bb_dir / "training_curve.csv", report.epochs)
        save_training_curve_figure(report.epochs, bb_dir / "training_curve.png")
    click.echo(
        f"finetune: {len(report.epochs)} epochs, final accuracy {report.final_accuracy:.3f}, "
        f"snapshot in {bb_dir}"
    )


@cli.command("build-memory")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, default=None)
@_pipeline_command
def cmd_build_memory(config_path, seed, out):
    """Embed the normal training samples with the fine-tuned extractor."""
    cfg = _load_cfg(config_path, seed, None, None)
    run_dir = _run_dir(cfg, out)
    with _lock(run_dir):
        normal, class_name = _load_normal_train(cfg)
        backbone, backbone_path = _resolve_backbone(
            cfg, run_dir, cfg.get_str("memory.backbone", default="finetuned"), normal.channels
        )
        bank = build_memory(
            backbone,
            normal,
            metadata={
                "dataset": cfg.get_str("data.train_root", required=True),
                "class": class_name,
                "backbone_path": backbone_path,
                "config_hash": cfg.resolved_hash(),
            },
        )
        mem_dir = run_dir / "memory"
        mem_dir.mkdir(exist_ok=True)
        save_memory(bank, mem_dir / "memory.ndmb")
    click.echo(f"build-memory: {bank.size} x {bank.dim} memory in {mem_dir}")


def _load_query_images(path: str, image_size) -> ImageBatch:
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"images directory '{root}' does not exist")
    if any(p.is_dir() for p in root.iterdir()):
        ds = load_dataset(root, image_size, split_tag="test")
        return ds.images
    return load_image_dir(root, image_size)


@cli.command("score")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--out", type=str, default=None)
@_pipeline_command
def cmd_score(config_path, seed, k, out):
    """Score a directory of images against the stored memory bank."""
    cfg = _load_cfg(config_path, seed, None, k)
    run_dir = _run_dir(cfg, out)
    with _lock(run_dir):
        images_dir = cfg.get_str("score.images_dir", required=True)
        images = _load_query_images(images_dir, _image_size(cfg))
        mem_path = Path(cfg.get_str("memory.path", default=str(run_dir / "memory" / "memory.ndmb")))
        if not mem_path.is_file():
            raise ConfigError(f"no memory bank at '{mem_path}'; run build-memory first")
        bank = load_memory(mem_path)
        backbone, _ = _resolve_backbone(
            cfg, run_dir, cfg.get_str("memory.backbone", default="finetuned"), images.channels
        )
        if backbone_fingerprint(backbone) != bank.metadata.get("backbone_fingerprint"):
            raise ConfigError("memory bank was built with a different backbone than the one configured")
        scorer = NoveltyScorer(memory=bank, k=cfg.get_int("memory.k", default=2))
        scores = score_batch(images, backbone, scorer)

        reports_dir = run_dir / "reports"
        reports_dir.mkdir(exist_ok=True)
        out_csv = reports_dir / "scores_query.csv"
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "side", "score"])
            for i, s in enumerate(scores):
                writer.writerow([f"query_{i:06d}", "query", f"{s:.10g}"])
    click.echo(f"score: wrote {len(scores)} scores to {out_csv}")


def _eval_one_report(split, backbone, scorer, k, cfg, reports_dir, tag, extra=None):
    report = evaluate_detector(split, backbone, scorer=scorer, k=k, seeds={"seed": cfg.get_int("seed", default=0)})
    body = report.to_json_dict()
    body["config_hash"] = cfg.resolved_hash()
    if extra:
        body.update(extra)
    _write_json(reports_dir / f"eval_{tag}.json", body)
    write_scores_csv(reports_dir / f"scores_{tag}.csv", report)
    save_histogram_figure(report, reports_dir / f"hist_{tag}.png")
    _write_json(reports_dir / f"split_{tag}.json", split_manifest(split))
    return report


@cli.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--out", type=str, default=None)
@_pipeline_command
def cmd_eval(config_path, seed, k, out):
    """Evaluate the detector under the one-vs-all, near-nd, or fsde protocol."""
    cfg = _load_cfg(config_path, seed, None, k)
    run_dir = _run_dir(cfg, out)
    with _lock(run_dir):
        protocol = cfg.get_str("eval.protocol", required=True, choices={"one-vs-all", "near-nd", "fsde"})
        k_val = cfg.get_int("eval.k", default=cfg.get_int("memory.k", default=2))
        size = _image_size(cfg)
        reports_dir = run_dir / "reports"
        reports_dir.mkdir(exist_ok=True)

        if protocol == "one-vs-all":
            train_ds = load_dataset(cfg.get_str("data.train_root", required=True), size, "train")
            test_ds = load_dataset(cfg.get_str("data.test_root", required=True), size, "test")
            backbone, _ = _resolve_backbone(
                cfg, run_dir, cfg.get_str("eval.backbone", default="frozen"), train_ds.images.channels
            )
            per_class = []
            for class_id, name in enumerate(train_ds.class_names):
                split = make_one_vs_all_split(train_ds, test_ds, class_id)
                rep = _eval_one_report(
                    split, backbone, None, k_val, cfg, reports_dir, f"one-vs-all_{_slug(name)}"
                )
                per_class.append({"class": name, "auroc": rep.auroc})
            mean_auroc = float(np.mean([r["auroc"] for r in per_class]))
            _write_json(
                reports_dir / "eval_one-vs-all.json",
                {
                    "protocol": "one-vs-all",
                    "k": k_val,
                    "mean_auroc": mean_auroc,
                    "per_class": per_class,
                    "config_hash": cfg.resolved_hash(),
                },
            )
            click.echo(f"eval one-vs-all: mean AUROC {mean_auroc:.4f} over {len(per_class)} classes")
            return

        normal_class = cfg.get_int("data.normal_class", required=True)
        train_ds = load_dataset(cfg.get_str("data.train_root", required=True), size, "train")
        test_ds = load_dataset(cfg.get_str("data.test_root", required=True), size, "test")
        backbone, _ = _resolve_backbone(
            cfg, run_dir, cfg.get_str("eval.backbone", default="finetuned"), train_ds.images.channels
        )

        scorer = None
        mem_path = run_dir / "memory" / "memory.ndmb"
        if mem_path.is_file():
            bank = load_memory(mem_path)
            if backbone_fingerprint(backbone) != bank.metadata.get("backbone_fingerprint"):
                raise ConfigError("memory bank was built with a different backbone than the one configured")
            scorer = NoveltyScorer(memory=bank, k=k_val)

        if protocol == "near-nd":
            aux_test = load_dataset(cfg.get_str("eval.near.aux_test_root", required=True), size, "test")
            near_class = cfg.get_int("eval.near.near_class", default=None)
            selected_by = "config"
            if near_class is None:
                aux_train = load_dataset(cfg.get_str("eval.near.aux_train_root", required=True), size, "train")
                clf_cfg = RestClassifierConfig(
                    epochs=cfg.get_int("closeness.epochs", default=8),
                    seed=cfg.get_int("seed", default=0),
                )
                normal_name = train_ds.class_names[normal_class]
                if normal_name in aux_train.class_names:
                    # aux shares the normal class (within-dataset CLP): exclude it
                    clf = train_rest_classifier(aux_train, aux_train.class_names.index(normal_name), clf_cfg)
                else:
                    clf = train_aux_classifier(aux_train, clf_cfg)
                table = closeness_scores(clf, as_model_range(train_ds.class_batch(normal_class)))
                near_class = nearest_class(table)
                selected_by = "clp"
            split = make_near_nd_split(train_ds, test_ds, aux_test, normal_class, near_class)
            rep = _eval_one_report(
                split,
                backbone,
                scorer,
                k_val,
                cfg,
                reports_dir,
                "near-nd",
                extra={
                    "near_class": aux_test.class_names[near_class],
                    "near_class_id": near_class,
                    "near_class_selected_by": selected_by,
                },
            )
            click.echo(
                f"eval near-nd: AUROC {rep.auroc:.4f} vs class "
                f"'{aux_test.class_names[near_class]}' ({selected_by})"
            )
            return

        # fsde
        fake_dir = cfg.get_str("eval.fsde.fake_dir", default=str(run_dir / "samples"))
        if not Path(fake_dir).is_dir():
            raise ConfigError(f"fake pool directory '{fake_dir}' does not exist")
        fakes = load_image_dir(fake_dir, size)
        normal_test = test_ds.class_batch(normal_class)
        split = build_fsde_testset(normal_test, fakes, rng_seed=cfg.get_int("seed", default=0))
        if scorer is None:
            memory_bank = build_memory(backbone, train_ds.class_batch(normal_class))
            scorer = NoveltyScorer(memory=memory_bank, k=k_val)
        rep = _eval_one_report(split, backbone, scorer, k_val, cfg, reports_dir, "fsde")
        click.echo(f"eval fsde: AUROC {rep.auroc:.4f} on {len(split.anomalous_test)} fakes")


@cli.command("closeness")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, default=None)
@_pipeline_command
def cmd_closeness(config_path, seed, out):
    """Train the rest-classifier and emit the per-class closeness table."""
    cfg = _load_cfg(config_path, seed, None, None)
    run_dir = _run_dir(cfg, out)
    with _lock(run_dir):
        run_seed = cfg.get_int("seed", default=0)
        size = _image_size(cfg)
        train_ds = load_dataset(cfg.get_str("data.train_root", required=True), size, "train")
        normal_class = cfg.get_int("data.normal_class", required=True)
        clf_cfg = RestClassifierConfig(
            epochs=cfg.get_int("closeness.epochs", default=8),
            learning_rate=cfg.get_float("closeness.learning_rate", default=1e-3),
            batch_size=cfg.get_int("closeness.batch_size", default=32),
            seed=run_seed,
        )
        clf = train_rest_classifier(train_ds, normal_class, clf_cfg)
        table = closeness_scores(clf, as_model_range(train_ds.class_batch(normal_class)))

        reports_dir = run_dir / "reports"
        reports_dir.mkdir(exist_ok=True)
        body = table.to_json_dict()
        body.update({"config_hash": cfg.resolved_hash(), "seed": run_seed})
        _write_json(reports_dir / "closeness.json", body)
        write_closeness_csv(reports_dir / "closeness.csv", table)
        save_closeness_figure(table, reports_dir / "closeness.png")
    click.echo(
        f"closeness: nearest abnormal class is "
        f"'{table.class_names[nearest_class(table)]}' (id {nearest_class(table)})"
    )


def main():
    try:
        cli.main(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)


if __name__ == "__main__":
    main()
