"""Command-line orchestration of the full experiment pipeline.

Stages write artifacts into one output directory and stamp each with the
digest of the configuration that produced it.  Rerunning a subcommand with
an unchanged config finds a current artifact and skips the work; ``--force``
recomputes regardless.  Reports use fixed-precision formatting and contain
no timestamps, so a skipped or replayed stage reproduces byte-identical
files.

Exit codes: 0 on success, 1 for missing inputs or configuration mistakes,
2 for internal errors (with a traceback on stderr).
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cache import CacheError, LatentCache
from .classifier import (
    ClassifierConfig,
    ClassifierHandle,
    LabeledImages,
    TrainDataError,
    TrainSource,
    finetune_on_views,
    train,
)
from .config import ConfigError, ExperimentConfig
from .container import ContainerError, read_container
from .ensemble import (
    EnsembleConfig,
    LogitsRecord,
    element_correctness,
    ensembled_accuracy,
    evaluate_split,
    select_alpha,
    select_alpha_2d,
    standard_accuracy,
)
from .generator import GeneratorTrainingError, ToyGeneratorConfig, ToyStyleGenerator, train_toy_generator
from .latent import Granularity
from .metrics import MetricConfig
from .perturb import PCABasis, PerturbationSpec, fit_pca, sample_views
from .projection import (
    Encoder,
    EncoderTrainConfig,
    ProjectionConfig,
    ProjectionResult,
    align_and_mask,
    project_batch,
    train_encoder,
)
from .robustness import (
    DEFENSE_CONDITIONS,
    AttackConfig,
    attack,
    choose_epsilon,
    corrupt,
    defend_and_ensemble,
)
from .seeds import derive_seed
from .shapes import DatasetError, DatasetSpec, ShapeDataset, generate_dataset, load_dataset, save_dataset

__all__ = ["main"]

COMMANDS = (
    "synth-data",
    "train-generator",
    "train-encoder",
    "project",
    "fit-pca",
    "train-classifier",
    "finetune-classifier",
    "eval-ensemble",
    "sweep",
    "attack-eval",
    "report",
)


class UserError(RuntimeError):
    """Actionable problem: missing prerequisite or bad request."""

    def __init__(self, message: str, missing: list[str] | None = None) -> None:
        super().__init__(message)
        self.missing = missing or []


class _Paths:
    def __init__(self, out: Path) -> None:
        self.out = out
        self.dataset = out / "dataset"
        self.generator = out / "generator.ckpt"
        self.generator_log = out / "generator_log.csv"
        self.encoder = out / "encoder.ckpt"
        self.encoder_log = out / "encoder_log.csv"
        self.pca = out / "pca_basis.ckpt"
        self.classifier = out / "classifier.ckpt"
        self.classifier_log = out / "classifier_log.csv"
        self.finetuned = out / "classifier_finetuned.ckpt"
        self.finetune_log = out / "finetune_log.csv"
        self.reports = out / "reports"

    def cache(self, split: str) -> Path:
        return self.out / f"latents_{split}.bin"

    def projection_log(self, split: str) -> Path:
        return self.out / f"projection_log_{split}.csv"


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _digest(cfg: ExperimentConfig, *sections: str, extra: str = "") -> str:
    h = hashlib.sha256()
    h.update(f"seed={cfg.seed};".encode())
    h.update(cfg.digest(*sections).encode())
    if extra:
        h.update(extra.encode())
    return h.hexdigest()


def _container_current(path: Path, digest: str) -> bool:
    if not path.is_file():
        return False
    try:
        meta, _ = read_container(path)
    except ContainerError:
        return False
    return meta.get("pipeline_digest") == digest


def _report_current(path: Path, digest: str) -> bool:
    if not path.is_file():
        return False
    with open(path) as fh:
        first = fh.readline().strip()
    return first == f"# digest={digest}"


def _write_report(path: Path, digest: str, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    content = "\n".join([f"# digest={digest}", *lines]) + "\n"
    path.write_text(content)


# ---------------------------------------------------------------- configs


def _dataset_spec(cfg: ExperimentConfig) -> DatasetSpec:
    return DatasetSpec(
        train=cfg.get_int("dataset", "train"),
        val=cfg.get_int("dataset", "val"),
        test=cfg.get_int("dataset", "test"),
        resolution=cfg.get_int("dataset", "resolution"),
        seed=cfg.seed,
    )


def _generator_config(cfg: ExperimentConfig) -> ToyGeneratorConfig:
    return ToyGeneratorConfig(
        resolution=cfg.get_int("dataset", "resolution"),
        latent_dim=cfg.get_int("generator", "latent_dim"),
        channel_base=cfg.get_int("generator", "channel_base"),
        channel_min=cfg.get_int("generator", "channel_min"),
        seed=cfg.seed,
        steps=cfg.get_int("generator", "steps"),
        batch_size=cfg.get_int("generator", "batch_size"),
        lr=cfg.get_float("generator", "lr"),
        disc_lr=cfg.get_float("generator", "disc_lr"),
        r1_gamma=cfg.get_float("generator", "r1_gamma"),
    )


def _encoder_config(cfg: ExperimentConfig) -> EncoderTrainConfig:
    return EncoderTrainConfig(
        steps=cfg.get_int("encoder", "steps"),
        batch_size=cfg.get_int("encoder", "batch_size"),
        lr=cfg.get_float("encoder", "lr"),
        lam=cfg.get_float("encoder", "lam"),
        width=cfg.get_int("encoder", "width"),
        seed=cfg.seed,
    )


def _projection_config(cfg: ExperimentConfig, steps: int | None = None) -> ProjectionConfig:
    return ProjectionConfig(
        lam=cfg.get_float("projection", "lam"),
        steps=cfg.get_int("projection", "steps") if steps is None else steps,
        optimizer=cfg.get("projection", "optimizer"),
        init=cfg.get("projection", "init"),
        batch_size=cfg.get_int("projection", "batch_size"),
        mean_w_seed=cfg.seed,
    )


def _perturbation_spec(
    cfg: ExperimentConfig, sigma: float | None = None, seed: int = 0
) -> PerturbationSpec:
    name = cfg.get("perturbation", "granularity").upper()
    try:
        granularity = Granularity[name]
    except KeyError as err:
        raise ConfigError(f"unknown granularity {name.lower()!r}") from err
    return PerturbationSpec(
        method=cfg.get("perturbation", "method"),
        granularity=granularity,
        sigma=cfg.get_float("perturbation", "sigma") if sigma is None else sigma,
        seed=seed,
    )


def _ensemble_config(cfg: ExperimentConfig) -> EnsembleConfig:
    return EnsembleConfig(
        alpha=cfg.get_float("ensemble", "alpha"),
        views=cfg.get_int("ensemble", "views"),
        alpha_grid=cfg.get_floats("ensemble", "alpha_grid"),
        cutoff_grid=cfg.get_floats("ensemble", "cutoff_grid"),
        bootstrap_resamples=cfg.get_int("ensemble", "bootstrap_resamples"),
        bootstrap_seed=derive_seed(cfg.seed, "bootstrap"),
    )


def _classifier_config(cfg: ExperimentConfig, classes: int) -> ClassifierConfig:
    return ClassifierConfig(
        classes=classes,
        resolution=cfg.get_int("dataset", "resolution"),
        width=cfg.get_int("classifier", "width"),
        lr=cfg.get_float("classifier", "lr"),
        batch_size=cfg.get_int("classifier", "batch_size"),
        max_epochs=cfg.get_int("classifier", "max_epochs"),
        patience=cfg.get_int("classifier", "patience"),
        seed=cfg.seed,
    )


def _attack_config(cfg: ExperimentConfig) -> AttackConfig:
    return AttackConfig(
        kind=cfg.get("attack", "kind"),
        steps=cfg.get_int("attack", "steps"),
        step_size=cfg.get_float("attack", "step_size"),
    )


# ---------------------------------------------------------------- loading


def _require_dataset(cfg: ExperimentConfig, paths: _Paths) -> ShapeDataset:
    try:
        dataset = load_dataset(paths.dataset)
    except DatasetError as err:
        raise UserError(
            f"dataset not available under {paths.dataset} (run synth-data first): {err}",
            missing=getattr(err, "missing", []),
        ) from err
    if dataset.spec.digest() != _dataset_spec(cfg).digest():
        raise UserError(
            "existing dataset was generated from a different configuration; "
            "rerun synth-data (with --force to replace it)"
        )
    return dataset


def _require_generator(paths: _Paths) -> ToyStyleGenerator:
    if not paths.generator.is_file():
        raise UserError(f"generator checkpoint missing: {paths.generator} (run train-generator)")
    return ToyStyleGenerator.load(paths.generator)


def _require_encoder(paths: _Paths) -> Encoder:
    if not paths.encoder.is_file():
        raise UserError(f"encoder checkpoint missing: {paths.encoder} (run train-encoder)")
    return Encoder.load(paths.encoder)


def _require_classifier(paths: _Paths) -> ClassifierHandle:
    if not paths.classifier.is_file():
        raise UserError(
            f"classifier checkpoint missing: {paths.classifier} (run train-classifier)"
        )
    return ClassifierHandle.load(paths.classifier)


def _require_basis_if_needed(cfg: ExperimentConfig, paths: _Paths) -> PCABasis | None:
    if cfg.get("perturbation", "method") != "pca":
        return None
    if not paths.pca.is_file():
        raise UserError(f"principal-direction basis missing: {paths.pca} (run fit-pca)")
    return PCABasis.load(paths.pca)


def _task_labels(cfg: ExperimentConfig, dataset: ShapeDataset, split: str) -> LabeledImages:
    task = cfg.get("classifier", "task")
    data = dataset.split(split)
    if task == "shape_class":
        labels = data.labels
    elif task in data.attributes:
        labels = data.attributes[task]
    else:
        raise ConfigError(f"unknown classifier task {task!r}")
    return LabeledImages(ids=data.ids, images=data.images, labels=labels)


def _task_classes(cfg: ExperimentConfig) -> int:
    return 3 if cfg.get("classifier", "task") == "shape_class" else 2


def _load_projections(
    cache_path: Path, generator: ToyStyleGenerator, digest: bytes, ids: list[str]
) -> dict[str, ProjectionResult]:
    spec = generator.spec
    if not cache_path.is_file():
        raise UserError(f"latent cache missing: {cache_path} (run project)")
    cache = LatentCache(cache_path, spec.blocks, spec.latent_dim)
    found = {}
    missing = []
    for image_id in ids:
        entry = cache.load(image_id, digest)
        if entry is None:
            missing.append(image_id)
        else:
            found[image_id] = entry
    if missing:
        raise UserError(
            f"{len(missing)} images lack projections under the current config "
            f"in {cache_path} (run project)",
            missing=missing,
        )
    return found


# ---------------------------------------------------------------- commands


def cmd_synth_data(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    spec = _dataset_spec(cfg)
    if not args.force and paths.dataset.joinpath("dataset.json").is_file():
        try:
            existing = load_dataset(paths.dataset)
            if existing.spec.digest() == spec.digest():
                print(f"synth-data: dataset current at {paths.dataset}, skipping")
                return
        except DatasetError:
            pass
    dataset = generate_dataset(spec, workers=args.workers)
    save_dataset(dataset, paths.dataset)
    total = sum(len(dataset.split(s)) for s in ("train", "val", "test"))
    print(f"synth-data: wrote {total} images to {paths.dataset}")


def cmd_train_generator(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    digest = _digest(cfg, "dataset", "generator")
    if not args.force and _container_current(paths.generator, digest):
        print(f"train-generator: checkpoint current at {paths.generator}, skipping")
        return
    dataset = _require_dataset(cfg, paths)
    gen_config = _generator_config(cfg)
    generator, metrics = train_toy_generator(dataset.split("train").images, gen_config)
    generator.save(paths.generator, extra_meta={"pipeline_digest": digest})
    lines = ["step,d_loss,g_loss,r1"] + [
        f"{m['step']},{_fmt(m['d_loss'])},{_fmt(m['g_loss'])},{_fmt(m['r1'])}" for m in metrics
    ]
    _write_report(paths.generator_log, digest, lines)
    print(f"train-generator: trained {gen_config.steps} steps, wrote {paths.generator}")


def cmd_train_encoder(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    generator = _require_generator(paths)
    digest = _digest(cfg, "encoder", extra=generator.fingerprint())
    if not args.force and _container_current(paths.encoder, digest):
        print(f"train-encoder: checkpoint current at {paths.encoder}, skipping")
        return
    encoder, metrics = train_encoder(generator, _encoder_config(cfg))
    encoder.save(paths.encoder, extra_meta={"pipeline_digest": digest})
    lines = ["step,loss,recon,latent"] + [
        f"{m['step']},{_fmt(m['loss'])},{_fmt(m['recon'])},{_fmt(m['latent'])}" for m in metrics
    ]
    _write_report(paths.encoder_log, digest, lines)
    print(f"train-encoder: trained {_encoder_config(cfg).steps} steps, wrote {paths.encoder}")


def _aligned_split(dataset: ShapeDataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    data = dataset.split(split)
    aligned = np.empty_like(data.images)
    masks = np.empty((len(data),) + data.images.shape[2:], dtype=np.float32)
    for i in range(len(data)):
        shifted, transform = align_and_mask(data.images[i], tuple(data.bboxes[i]))
        aligned[i] = shifted
        masks[i] = transform.mask
    return aligned, masks


def cmd_project(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    dataset = _require_dataset(cfg, paths)
    generator = _require_generator(paths)
    proj_config = _projection_config(cfg)
    encoder = _require_encoder(paths) if proj_config.init == "encoder" else None
    digest = proj_config.digest(generator, encoder)
    splits = args.split.split(",") if args.split else cfg.get_strs("projection", "splits")
    spec = generator.spec
    metric = proj_config.metric

    for split in [s.strip() for s in splits if s.strip()]:
        data = dataset.split(split)
        aligned, masks = _aligned_split(dataset, split)
        cache = LatentCache(paths.cache(split), spec.blocks, spec.latent_dim)
        if cache.corrupt_records:
            print(
                f"project[{split}]: skipped {cache.corrupt_records} corrupt cache records",
                file=sys.stderr,
            )
        pending = [i for i, image_id in enumerate(data.ids) if cache.load(image_id, digest) is None]
        batches = [
            pending[i : i + proj_config.batch_size]
            for i in range(0, len(pending), proj_config.batch_size)
        ]

        def run_batch(batch: list[int]) -> None:
            results = project_batch(
                aligned[batch],
                masks[batch],
                generator,
                proj_config,
                encoder=encoder,
                image_ids=[data.ids[i] for i in batch],
            )
            for result in results:
                cache.store(result)

        if args.workers > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=args.workers) as pool:
                list(pool.map(run_batch, batches))
        else:
            for batch in batches:
                run_batch(batch)

        # The log always reads back through the cache so first runs and
        # cache-served reruns format identical values.
        init_losses: np.ndarray
        if encoder is not None:
            import torch

            from .metrics import image_loss_t

            w0 = encoder.encode_batch(aligned)
            vals = []
            with torch.no_grad():
                for start in range(0, len(data), 64):
                    stop = min(start + 64, len(data))
                    w = torch.from_numpy(w0[start:stop])
                    y = generator.synthesize_t(w)
                    x = torch.from_numpy(aligned[start:stop])
                    m = torch.from_numpy(masks[start:stop][:, None])
                    total, _, _ = image_loss_t(x, y, m, metric)
                    vals.append(total.to(torch.float64).numpy())
            init_losses = np.concatenate(vals)
        else:
            init_losses = np.full(len(data), np.nan)

        lines = ["image_id,init_loss,final_l1,final_perceptual,final_latent,steps"]
        for i, image_id in enumerate(data.ids):
            entry = cache.load(image_id, digest)
            assert entry is not None
            init = "" if np.isnan(init_losses[i]) else f"{init_losses[i]:.8f}"
            lines.append(
                f"{image_id},{init},{entry.l1_term:.8f},{entry.perceptual_term:.8f},"
                f"{entry.latent_term:.8f},{entry.steps_used}"
            )
        _write_report(paths.projection_log(split), digest.hex(), lines)
        print(
            f"project[{split}]: optimized {len(pending)} of {len(data)} images "
            f"({len(data) - len(pending)} cached)"
        )


def cmd_fit_pca(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    generator = _require_generator(paths)
    digest = _digest(cfg, "pca", extra=generator.fingerprint())
    if not args.force and paths.pca.is_file():
        try:
            meta, _ = read_container(paths.pca)
            if meta.get("pipeline_digest") == digest:
                print(f"fit-pca: basis current at {paths.pca}, skipping")
                return
        except ContainerError:
            pass
    basis = fit_pca(
        generator,
        num_samples=cfg.get_int("pca", "num_samples"),
        count=cfg.get_int("pca", "count"),
        seed=derive_seed(cfg.seed, "pca"),
    )
    basis.save(paths.pca, extra_meta={"pipeline_digest": digest})
    print(f"fit-pca: kept {basis.count} directions from {basis.num_samples} samples")


def cmd_train_classifier(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    source_kind = cfg.get("classifier", "source")
    extra = ""
    generator = None
    projections = None
    basis = None
    if source_kind != "real":
        generator = _require_generator(paths)
        extra = generator.fingerprint()
    digest = _digest(cfg, "dataset", "classifier", "perturbation", extra=extra)
    if not args.force and _container_current(paths.classifier, digest):
        print(f"train-classifier: checkpoint current at {paths.classifier}, skipping")
        return
    dataset = _require_dataset(cfg, paths)
    train_data = _task_labels(cfg, dataset, "train")
    val_data = _task_labels(cfg, dataset, "val")
    config = _classifier_config(cfg, _task_classes(cfg))
    spec = None
    if source_kind == "perturbed":
        spec = _perturbation_spec(cfg, seed=derive_seed(cfg.seed, "train-source"))
        basis = _require_basis_if_needed(cfg, paths)
    if source_kind != "real":
        assert generator is not None
        encoder = _require_encoder(paths) if _projection_config(cfg).init == "encoder" else None
        proj_digest = _projection_config(cfg).digest(generator, encoder)
        projections = _load_projections(paths.cache("train"), generator, proj_digest, train_data.ids)
    source = TrainSource(kind=source_kind, spec=spec, mix_ratio=1.0)
    classifier, curve = train(
        train_data, val_data, source, config,
        generator=generator, projections=projections, basis=basis,
    )
    classifier.save(paths.classifier, extra_meta={"pipeline_digest": digest})
    lines = ["epoch,train_loss,val_acc"] + [
        f"{row['epoch']},{_fmt(row['train_loss'])},{_fmt(row['val_acc'])}" for row in curve
    ]
    _write_report(paths.classifier_log, digest, lines)
    best = max((row["val_acc"] for row in curve), default=0.0)
    print(f"train-classifier: {len(curve)} epochs, best val accuracy {_fmt(best)}")


def cmd_finetune_classifier(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    generator = _require_generator(paths)
    classifier = _require_classifier(paths)
    digest = _digest(
        cfg,
        "finetune",
        "perturbation",
        "projection",
        extra=classifier.fingerprint() + generator.fingerprint(),
    )
    if not args.force and _container_current(paths.finetuned, digest):
        print(f"finetune-classifier: checkpoint current at {paths.finetuned}, skipping")
        return
    dataset = _require_dataset(cfg, paths)
    train_data = _task_labels(cfg, dataset, "train")
    val_data = _task_labels(cfg, dataset, "val")
    encoder = _require_encoder(paths) if _projection_config(cfg).init == "encoder" else None
    proj_digest = _projection_config(cfg).digest(generator, encoder)
    projections = _load_projections(paths.cache("train"), generator, proj_digest, train_data.ids)
    kind = cfg.get("finetune", "source")
    spec = None
    basis = None
    if kind == "perturbed":
        spec = _perturbation_spec(cfg, seed=derive_seed(cfg.seed, "finetune-source"))
        basis = _require_basis_if_needed(cfg, paths)
    source = TrainSource(kind=kind, spec=spec, mix_ratio=cfg.get_float("finetune", "mix_ratio"))
    config = replace(
        classifier.config,
        lr=cfg.get_float("finetune", "lr"),
        max_epochs=cfg.get_int("finetune", "max_epochs"),
        patience=cfg.get_int("finetune", "patience"),
        seed=derive_seed(cfg.seed, "finetune"),
    )
    finetuned, curve = finetune_on_views(
        classifier, train_data, val_data, projections, source, config, generator, basis=basis
    )
    finetuned.save(paths.finetuned, extra_meta={"pipeline_digest": digest})
    lines = ["epoch,train_loss,val_acc"] + [
        f"{row['epoch']},{_fmt(row['train_loss'])},{_fmt(row['val_acc'])}" for row in curve
    ]
    _write_report(paths.finetune_log, digest, lines)
    best = max((row["val_acc"] for row in curve), default=0.0)
    print(f"finetune-classifier: {len(curve)} epochs, best val accuracy {_fmt(best)}")


def _build_records(
    cfg: ExperimentConfig,
    data: LabeledImages,
    classifier: ClassifierHandle,
    generator: ToyStyleGenerator,
    projections: dict[str, ProjectionResult],
    spec_sigma: float | None,
    basis: PCABasis | None,
    views: int,
    view_label: str,
) -> list[LogitsRecord]:
    """Classifier logits for every image and its generated views."""
    image_logits = classifier.predict_batch(data.images)
    n_classes = image_logits.shape[1]
    records: list[LogitsRecord] = []
    chunk_size = max(1, 256 // max(views, 1))
    for start in range(0, len(data), chunk_size):
        ids = data.ids[start : start + chunk_size]
        latents = []
        for image_id in ids:
            spec = _perturbation_spec(
                cfg, sigma=spec_sigma, seed=derive_seed(cfg.seed, view_label, image_id)
            )
            latents.extend(
                v.values
                for v in sample_views(projections[image_id], generator, spec, views, basis=basis)
            )
        if latents:
            images_v = generator.synthesize_batch(np.stack(latents))
            logits_v = classifier.predict_batch(images_v).reshape(len(ids), views, n_classes)
        else:
            logits_v = np.zeros((len(ids), 0, n_classes), dtype=np.float32)
        for j, image_id in enumerate(ids):
            records.append(
                LogitsRecord(
                    image_id=image_id,
                    label=int(data.labels[start + j]),
                    image_logits=image_logits[start + j],
                    view_logits=logits_v[j],
                    recon_distance=projections[image_id].perceptual_term,
                )
            )
    return records


def _ensemble_inputs(cfg: ExperimentConfig, paths: _Paths, splits: tuple[str, ...]):
    dataset = _require_dataset(cfg, paths)
    generator = _require_generator(paths)
    classifier = _require_classifier(paths)
    encoder = _require_encoder(paths) if _projection_config(cfg).init == "encoder" else None
    basis = _require_basis_if_needed(cfg, paths)
    proj_digest = _projection_config(cfg).digest(generator, encoder)
    out = {}
    for split in splits:
        data = _task_labels(cfg, dataset, split)
        projections = _load_projections(paths.cache(split), generator, proj_digest, data.ids)
        out[split] = (data, projections)
    return dataset, generator, classifier, basis, out


def _eval_digest(cfg: ExperimentConfig, paths: _Paths, *extra_sections: str) -> str:
    generator = _require_generator(paths)
    classifier = _require_classifier(paths)
    return _digest(
        cfg,
        "ensemble",
        "perturbation",
        "projection",
        *extra_sections,
        extra=generator.fingerprint() + classifier.fingerprint(),
    )


def cmd_eval_ensemble(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    digest = _eval_digest(cfg, paths)
    report = paths.reports / "ensemble_eval.csv"
    curve_val = paths.reports / "alpha_curve_val.dat"
    curve_test = paths.reports / "alpha_curve_test.dat"
    if not args.force and all(_report_current(p, digest) for p in (report, curve_val, curve_test)):
        print(f"eval-ensemble: reports current under {paths.reports}, skipping")
        return
    ens_config = _ensemble_config(cfg)
    _, generator, classifier, basis, splits = _ensemble_inputs(cfg, paths, ("val", "test"))
    records = {
        split: _build_records(
            cfg, data, classifier, generator, projections,
            None, basis, ens_config.views, f"views-{split}",
        )
        for split, (data, projections) in splits.items()
    }

    threshold = None
    pct_star = None
    if cfg.get_bool("ensemble", "use_cutoff"):
        alpha_star, pct_star, _grid = select_alpha_2d(
            records["val"], ens_config.alpha_grid, ens_config.cutoff_grid
        )
        if pct_star > 0.0:
            dists = np.array([r.recon_distance for r in records["val"]], dtype=np.float64)
            threshold = float(np.quantile(dists, pct_star))
        else:
            threshold = float("-inf")  # winning percentile gates out everything
        val_table = [(a, ensembled_accuracy(records["val"], a)) for a in ens_config.alpha_grid]
    else:
        alpha_star, val_table = select_alpha(records["val"], ens_config.alpha_grid)

    rows = ["split,alpha,cutoff_percentile,standard_acc,ensembled_acc,delta,stderr"]
    for split in ("val", "test"):
        rep = evaluate_split(
            records[split], ens_config, alpha=alpha_star,
            threshold=threshold, cutoff_percentile=pct_star,
        )
        pct = "" if pct_star is None else _fmt(pct_star)
        rows.append(
            f"{split},{_fmt(rep.alpha)},{pct},{_fmt(rep.standard_acc)},"
            f"{_fmt(rep.ensembled_acc)},{_fmt(rep.delta)},{_fmt(rep.stderr)}"
        )
    _write_report(report, digest, rows)

    _write_report(
        curve_val, digest,
        ["alpha accuracy"] + [f"{_fmt(a)} {_fmt(acc)}" for a, acc in val_table],
    )
    test_table = [(a, ensembled_accuracy(records["test"], a)) for a in ens_config.alpha_grid]
    _write_report(
        curve_test, digest,
        ["alpha accuracy"] + [f"{_fmt(a)} {_fmt(acc)}" for a, acc in test_table],
    )
    print(f"eval-ensemble: selected alpha={alpha_star:g}, wrote {report}")


def cmd_sweep(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    dimension = args.dimension
    if dimension == "alpha":
        _sweep_alpha(cfg, args, paths)
    elif dimension == "sigma":
        _sweep_sigma(cfg, args, paths)
    elif dimension == "steps":
        _sweep_steps(cfg, args, paths)
    else:
        _sweep_ensemble_size(cfg, args, paths)


def _sweep_alpha(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    digest = _eval_digest(cfg, paths, "sweep")
    report = paths.reports / "sweep_alpha.csv"
    if not args.force and _report_current(report, digest):
        print(f"sweep[alpha]: report current at {report}, skipping")
        return
    ens_config = _ensemble_config(cfg)
    _, generator, classifier, basis, splits = _ensemble_inputs(cfg, paths, ("val", "test"))
    lines = ["alpha,val_acc,test_acc"]
    recs = {
        split: _build_records(
            cfg, data, classifier, generator, projections,
            None, basis, ens_config.views, f"views-{split}",
        )
        for split, (data, projections) in splits.items()
    }
    for a in ens_config.alpha_grid:
        lines.append(
            f"{_fmt(a)},{_fmt(ensembled_accuracy(recs['val'], a))},"
            f"{_fmt(ensembled_accuracy(recs['test'], a))}"
        )
    _write_report(report, digest, lines)
    print(f"sweep[alpha]: wrote {report}")


def _sweep_sigma(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    digest = _eval_digest(cfg, paths, "sweep")
    report = paths.reports / "sweep_sigma.csv"
    if not args.force and _report_current(report, digest):
        print(f"sweep[sigma]: report current at {report}, skipping")
        return
    ens_config = _ensemble_config(cfg)
    _, generator, classifier, basis, splits = _ensemble_inputs(cfg, paths, ("val", "test"))
    method = cfg.get("perturbation", "method")
    granularity = cfg.get("perturbation", "granularity")
    lines = ["method,granularity,sigma,alpha_star,standard_acc,ensembled_acc,delta,stderr"]
    for sigma in cfg.get_floats("perturbation", "sigma_grid"):
        recs = {
            split: _build_records(
                cfg, data, classifier, generator, projections,
                sigma, basis, ens_config.views, f"views-{split}-sigma{sigma:g}",
            )
            for split, (data, projections) in splits.items()
        }
        alpha_star, _ = select_alpha(recs["val"], ens_config.alpha_grid)
        rep = evaluate_split(recs["test"], ens_config, alpha=alpha_star)
        lines.append(
            f"{method},{granularity},{sigma:g},{_fmt(alpha_star)},{_fmt(rep.standard_acc)},"
            f"{_fmt(rep.ensembled_acc)},{_fmt(rep.delta)},{_fmt(rep.stderr)}"
        )
    _write_report(report, digest, lines)
    print(f"sweep[sigma]: wrote {report}")


def _sweep_steps(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    generator = _require_generator(paths)
    classifier = _require_classifier(paths)
    digest = _digest(
        cfg, "projection", "sweep", "classifier",
        extra=generator.fingerprint() + classifier.fingerprint(),
    )
    report = paths.reports / "sweep_steps.csv"
    if not args.force and _report_current(report, digest):
        print(f"sweep[steps]: report current at {report}, skipping")
        return
    dataset = _require_dataset(cfg, paths)
    encoder = _require_encoder(paths) if _projection_config(cfg).init == "encoder" else None
    subset = cfg.get_int("sweep", "steps_subset")
    data = _task_labels(cfg, dataset, "val")
    aligned, masks = _aligned_split(dataset, "val")
    count = min(subset, len(data))
    spec = generator.spec
    cache = LatentCache(paths.cache("val"), spec.blocks, spec.latent_dim)
    lines = ["steps,mean_l1,mean_perceptual,recon_acc"]
    for steps in cfg.get_ints("sweep", "steps_grid"):
        proj_config = _projection_config(cfg, steps=steps)
        step_digest = proj_config.digest(generator, encoder)
        results: list[ProjectionResult] = []
        pending: list[int] = []
        for i in range(count):
            entry = cache.load(data.ids[i], step_digest)
            if entry is None:
                pending.append(i)
        for start in range(0, len(pending), proj_config.batch_size):
            batch = pending[start : start + proj_config.batch_size]
            for result in project_batch(
                aligned[batch], masks[batch], generator, proj_config,
                encoder=encoder, image_ids=[data.ids[i] for i in batch],
            ):
                cache.store(result)
        latents = []
        for i in range(count):
            entry = cache.load(data.ids[i], step_digest)
            assert entry is not None
            results.append(entry)
            latents.append(entry.w_star.values)
        recon = generator.synthesize_batch(np.stack(latents))
        pred = classifier.predict_batch(recon).argmax(axis=1)
        acc = float((pred == data.labels[:count]).mean())
        mean_l1 = float(np.mean([r.l1_term for r in results]))
        mean_percep = float(np.mean([r.perceptual_term for r in results]))
        lines.append(f"{steps},{mean_l1:.8f},{mean_percep:.8f},{_fmt(acc)}")
    _write_report(report, digest, lines)
    print(f"sweep[steps]: wrote {report}")


def _sweep_ensemble_size(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    digest = _eval_digest(cfg, paths, "sweep")
    report = paths.reports / "sweep_ensemble_size.csv"
    curve = paths.reports / "ensemble_size_curve.dat"
    if not args.force and _report_current(report, digest) and _report_current(curve, digest):
        print(f"sweep[ensemble-size]: report current at {report}, skipping")
        return
    ens_config = _ensemble_config(cfg)
    sizes = cfg.get_ints("sweep", "sizes")
    max_size = max(sizes)
    _, generator, classifier, basis, splits = _ensemble_inputs(cfg, paths, ("val", "test"))
    recs = {
        split: _build_records(
            cfg, data, classifier, generator, projections,
            None, basis, max_size, f"views-{split}",
        )
        for split, (data, projections) in splits.items()
    }
    lines = ["size,alpha_star,val_acc,test_acc"]
    curve_lines = ["size accuracy"]
    for size in sizes:
        sliced = {
            split: [
                LogitsRecord(
                    image_id=r.image_id,
                    label=r.label,
                    image_logits=r.image_logits,
                    view_logits=r.view_logits[:size],
                    recon_distance=r.recon_distance,
                )
                for r in rs
            ]
            for split, rs in recs.items()
        }
        if size == 0:
            alpha_star = 0.0
            val_acc = standard_accuracy(sliced["val"])
            test_acc = standard_accuracy(sliced["test"])
        else:
            alpha_star, _ = select_alpha(sliced["val"], ens_config.alpha_grid)
            val_acc = ensembled_accuracy(sliced["val"], alpha_star)
            test_acc = ensembled_accuracy(sliced["test"], alpha_star)
        lines.append(f"{size},{_fmt(alpha_star)},{_fmt(val_acc)},{_fmt(test_acc)}")
        curve_lines.append(f"{size} {_fmt(test_acc)}")
    _write_report(report, digest, lines)
    _write_report(curve, digest, curve_lines)
    print(f"sweep[ensemble-size]: wrote {report}")


def cmd_attack_eval(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    generator = _require_generator(paths)
    classifier = _require_classifier(paths)
    encoder = _require_encoder(paths) if _projection_config(cfg).init == "encoder" else None
    digest = _digest(
        cfg, "attack", "ensemble", "perturbation", "projection",
        extra=generator.fingerprint() + classifier.fingerprint(),
    )
    report = paths.reports / "robustness.csv"
    eps_report = paths.reports / "epsilon_table.csv"
    if not args.force and _report_current(report, digest) and _report_current(eps_report, digest):
        print(f"attack-eval: reports current at {report}, skipping")
        return
    if encoder is None:
        raise UserError("attack-eval requires encoder-initialized projection")
    dataset = _require_dataset(cfg, paths)
    data = _task_labels(cfg, dataset, "test")
    count = min(cfg.get_int("attack", "count"), len(data))
    images = data.images[:count]
    labels = data.labels[:count]
    basis = _require_basis_if_needed(cfg, paths)
    attack_config = _attack_config(cfg)
    corruption = cfg.get("attack", "corruption")
    clean_pred = classifier.predict_batch(images).argmax(axis=1)
    clean_acc = float((clean_pred == labels).mean())

    eps_lines = ["epsilon,attacked_acc"]
    if corruption == "none":
        chosen_eps, table = choose_epsilon(
            classifier, images, labels, attack_config,
            min_drop=cfg.get_float("attack", "min_drop"),
        )
        for eps, acc in table:
            eps_lines.append(f"{eps:.8f},{_fmt(acc)}")
        chosen_config = AttackConfig(
            kind=attack_config.kind,
            epsilon=chosen_eps,
            steps=attack_config.steps,
            step_size=min(attack_config.step_size, chosen_eps),
        )
        degraded = np.stack(
            [attack(classifier, images[i], int(labels[i]), chosen_config) for i in range(count)]
        )
        source_desc = f"attack={attack_config.kind} epsilon={chosen_eps:.8f}"
    else:
        sigma = cfg.get_float("attack", "corruption_sigma")
        degraded = np.stack(
            [
                corrupt(images[i], corruption, sigma, seed=derive_seed(cfg.seed, "corrupt", data.ids[i]))
                for i in range(count)
            ]
        )
        chosen_eps = 0.0
        source_desc = f"corruption={corruption} sigma={sigma:g}"

    ens_config = _ensemble_config(cfg)
    proj_config = _projection_config(cfg)
    crops = cfg.get_int("attack", "crops")
    correct = {name: 0 for name in DEFENSE_CONDITIONS}
    for i in range(count):
        spec = _perturbation_spec(cfg, seed=derive_seed(cfg.seed, "defense-views", data.ids[i]))
        logits = defend_and_ensemble(
            degraded[i], generator, encoder, classifier, spec,
            views=ens_config.views, alpha=ens_config.alpha,
            proj_config=proj_config, basis=basis, crops=crops,
            crop_seed=cfg.seed, image_id=data.ids[i],
        )
        for name in DEFENSE_CONDITIONS:
            correct[name] += int(int(np.argmax(logits[name])) == int(labels[i]))

    lines = [
        f"# clean_accuracy={_fmt(clean_acc)}",
        f"# source={source_desc}",
        "condition,accuracy",
    ]
    for name in DEFENSE_CONDITIONS:
        lines.append(f"{name},{_fmt(correct[name] / count)}")
    _write_report(report, digest, lines)
    _write_report(eps_report, digest, eps_lines)
    print(f"attack-eval: evaluated {count} images ({source_desc}), wrote {report}")


def cmd_report(cfg: ExperimentConfig, args: argparse.Namespace, paths: _Paths) -> None:
    sections: list[str] = []

    def add_csv(title: str, path: Path) -> None:
        if not path.is_file():
            return
        body = [line for line in path.read_text().splitlines() if not line.startswith("#")]
        sections.append(f"== {title} ==")
        sections.extend(body)
        sections.append("")

    add_csv("ensemble evaluation", paths.reports / "ensemble_eval.csv")
    add_csv("alpha sweep", paths.reports / "sweep_alpha.csv")
    add_csv("sigma sweep", paths.reports / "sweep_sigma.csv")
    add_csv("optimization-steps sweep", paths.reports / "sweep_steps.csv")
    add_csv("ensemble-size sweep", paths.reports / "sweep_ensemble_size.csv")
    add_csv("robustness", paths.reports / "robustness.csv")
    add_csv("attack budget table", paths.reports / "epsilon_table.csv")
    if not sections:
        raise UserError(f"no reports found under {paths.reports}; run the evaluation stages first")
    summary = paths.reports / "summary.txt"
    summary.parent.mkdir(parents=True, exist_ok=True)
    summary.write_text("\n".join(sections).rstrip("\n") + "\n")
    print(f"report: wrote {summary}")


# ---------------------------------------------------------------- driver


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genviews",
        description="latent projection, perturbation, and ensembling pipeline",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment configuration")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--workers", type=int, default=1, help="worker pool size")
    common.add_argument("--force", action="store_true", help="recompute even if artifacts are current")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, parents=[common])
        if name == "project":
            cmd.add_argument("--split", default=None, help="comma-separated splits to project")
        if name == "sweep":
            cmd.add_argument(
                "--dimension",
                required=True,
                choices=("alpha", "sigma", "steps", "ensemble-size"),
            )
    return parser


_HANDLERS = {
    "synth-data": cmd_synth_data,
    "train-generator": cmd_train_generator,
    "train-encoder": cmd_train_encoder,
    "project": cmd_project,
    "fit-pca": cmd_fit_pca,
    "train-classifier": cmd_train_classifier,
    "finetune-classifier": cmd_finetune_classifier,
    "eval-ensemble": cmd_eval_ensemble,
    "sweep": cmd_sweep,
    "attack-eval": cmd_attack_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config, args.seed, args.out)
        paths = _Paths(cfg.out_dir)
        paths.out.mkdir(parents=True, exist_ok=True)
        _HANDLERS[args.command](cfg, args, paths)
        return 0
    except (UserError, ConfigError, DatasetError, ContainerError, CacheError, TrainDataError) as err:
        print(f"error: {err}", file=sys.stderr)
        missing = getattr(err, "missing", None)
        if missing:
            shown = missing[:20]
            for item in shown:
                print(f"  missing: {item}", file=sys.stderr)
            if len(missing) > len(shown):
                print(f"  ... and {len(missing) - len(shown)} more", file=sys.stderr)
        return 1
    except GeneratorTrainingError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
