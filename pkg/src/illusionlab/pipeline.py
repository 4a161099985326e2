"""Glue between the run configuration and the individual modules: dataset
preparation, model training with checkpoint reuse, and the full matrix run
with report emission."""

from __future__ import annotations

import json
import os

import numpy as np

from . import checkpoint
from .agent import AgentConfig
from .attacks import TransformParams, EvolutionParams, desk_trigger, image_digest
from .config import RunConfig, config_to_dict
from .data import Dataset, SyntheticSpec, generate_synthetic, read_idx
from .defenses import (CompressionSpec, DiffusionSpec, load_denoiser,
                       save_denoiser, train_denoiser)
from .harness import (MatrixAttackParams, MatrixDefenseParams, ValidationSet,
                      build_validation_set, run_matrix, write_report_csv,
                      write_report_json, write_report_svg)
from .model import (PoisonSpec, TrainConfig, load_model, save_model, train,
                    write_train_log)

BACKEND_NAMES = {"oracle": "oracle-mock", "replay": "replay-fixture",
                 "remote": "remote"}


def load_datasets(cfg: RunConfig):
    dc = cfg.data
    if dc.kind == "idx":
        train_data = read_idx(dc.train_images, dc.train_labels, split="train")
        test_data = read_idx(dc.test_images, dc.test_labels, split="validation")
        return train_data, test_data
    ss = np.random.SeedSequence(cfg.seed)
    train_ss, test_ss = ss.spawn(2)
    train_data = generate_synthetic(
        SyntheticSpec(per_class=dc.train_per_class, noise=dc.noise,
                      seed=int(train_ss.generate_state(1)[0])), split="train")
    test_data = generate_synthetic(
        SyntheticSpec(per_class=dc.test_per_class, noise=dc.noise,
                      seed=int(test_ss.generate_state(1)[0])), split="validation")
    return train_data, test_data


def poison_spec_from_config(cfg: RunConfig) -> PoisonSpec:
    return PoisonSpec(target_label=cfg.poison.target_label, rate=cfg.poison.rate,
                      trigger=desk_trigger())


def ensure_models(cfg: RunConfig, train_data: Dataset, out_dir=None,
                  need_poisoned=True, need_denoiser=True) -> dict:
    """Load checkpoints from the output directory when present, otherwise
    train and persist them (with their training logs)."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    models: dict = {"clean": None, "poisoned": None, "denoiser": None}

    clean_path = os.path.join(out_dir, "model_clean.ckpt")
    if os.path.exists(clean_path):
        models["clean"] = load_model(clean_path)
    else:
        params, log = train(train_data, TrainConfig(
            epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate, seed=cfg.seed))
        save_model(clean_path, params)
        write_train_log(os.path.join(out_dir, "train_log_clean.csv"), log)
        models["clean"] = params

    if need_poisoned:
        poison_path = os.path.join(out_dir, "model_poisoned.ckpt")
        if os.path.exists(poison_path):
            models["poisoned"] = load_model(poison_path)
        else:
            params, log = train(train_data, TrainConfig(
                epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
                learning_rate=cfg.train.learning_rate, seed=cfg.seed + 1),
                poison=poison_spec_from_config(cfg))
            save_model(poison_path, params)
            write_train_log(os.path.join(out_dir, "train_log_poisoned.csv"), log)
            models["poisoned"] = params

    if need_denoiser:
        denoiser_path = os.path.join(out_dir, "denoiser.ckpt")
        if os.path.exists(denoiser_path):
            models["denoiser"] = load_denoiser(denoiser_path)
        else:
            sigma_hi = max(cfg.defense_params.diffusion_weak_sigma,
                           cfg.defense_params.diffusion_strong_sigma)
            dn, _ = train_denoiser(train_data, (0.02, sigma_hi), TrainConfig(
                epochs=cfg.defense_params.denoiser_epochs,
                batch_size=cfg.defense_params.denoiser_batch,
                learning_rate=cfg.defense_params.denoiser_lr, seed=cfg.seed + 2))
            save_denoiser(denoiser_path, dn)
            models["denoiser"] = dn
    return models


def build_exemplar_bank(valset: ValidationSet) -> dict:
    """First validation member of each class; correctly classified by
    construction of the validation set."""
    bank = {}
    for image, label in zip(valset.images, valset.labels):
        bank.setdefault(int(label), image.copy())
    return bank


def agent_config_from_run(cfg: RunConfig) -> AgentConfig:
    a = cfg.agent
    return AgentConfig(backend=BACKEND_NAMES[a.backend], endpoint=a.endpoint,
                       model=a.model, token_env=a.token_env, timeout=a.timeout,
                       retries=a.retries, request_delay=a.request_delay,
                       fixture_dir=a.fixture_dir)


def matrix_params_from_config(cfg: RunConfig):
    a = cfg.attack_params
    d = cfg.defense_params
    attack_params = MatrixAttackParams(
        eps=a.eps, alpha=a.alpha, iterations=a.iterations,
        transform=TransformParams(prob=a.transform_prob,
                                  min_scale=a.transform_min_scale),
        patches=a.patches, patch_size=a.patch_size,
        evolution=EvolutionParams(population=a.population,
                                  generations=a.generations,
                                  location_jitter=a.location_jitter))
    defense_params = MatrixDefenseParams(
        compress_weak=CompressionSpec(quality=d.compress_weak_quality),
        compress_strong=CompressionSpec(quality=d.compress_strong_quality),
        diffusion_weak=DiffusionSpec(sigma=d.diffusion_weak_sigma,
                                     steps=d.diffusion_steps),
        diffusion_strong=DiffusionSpec(sigma=d.diffusion_strong_sigma,
                                       steps=d.diffusion_steps))
    return attack_params, defense_params


def dataset_digest(data: Dataset) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.images, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(data.labels, dtype="<i8").tobytes())
    return h.hexdigest()


def write_run_manifest(cfg: RunConfig, out_dir, extra: dict):
    """Everything needed to reconstruct the run: full config plus digests."""
    manifest = {"config": config_to_dict(cfg), "artifacts": extra}
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def run_full_evaluation(cfg: RunConfig, use_cache=True):
    """End to end: data, models, validation set, matrix, report files.

    Returns (report, paths dict).
    """
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    train_data, test_data = load_datasets(cfg)
    need_poisoned = any(a in ("badnet", "hybrid") for a in cfg.attacks)
    need_denoiser = any(d.startswith("diffusion") for d in cfg.defenses)
    models = ensure_models(cfg, train_data, out_dir,
                           need_poisoned=need_poisoned,
                           need_denoiser=need_denoiser)
    valset = build_validation_set(models["clean"], test_data,
                                  per_class=cfg.per_class, seed=cfg.seed)
    bank = build_exemplar_bank(valset)
    agent_cfg = agent_config_from_run(cfg)
    attack_params, defense_params = matrix_params_from_config(cfg)
    report = run_matrix(
        models, valset, cfg.attacks, cfg.defenses, cfg.seed,
        poison=poison_spec_from_config(cfg) if need_poisoned else None,
        agent_cfg=agent_cfg, exemplar_bank=bank,
        attack_params=attack_params, defense_params=defense_params,
        cache_dir=os.path.join(out_dir, "cache") if use_cache else None)
    csv_path = os.path.join(out_dir, "report.csv")
    json_path = os.path.join(out_dir, "report.json")
    write_report_csv(report, csv_path)
    write_report_json(report, json_path)
    svg_paths = write_report_svg(report, out_dir)
    digests = {"dataset_train": dataset_digest(train_data),
               "dataset_test": dataset_digest(test_data),
               "validation_first": image_digest(valset.images[0])}
    for name in ("model_clean.ckpt", "model_poisoned.ckpt", "denoiser.ckpt"):
        p = os.path.join(out_dir, name)
        if os.path.exists(p):
            digests[name] = checkpoint.file_digest(p)
    manifest_path = write_run_manifest(cfg, out_dir, digests)
    return report, {"csv": csv_path, "json": json_path, "svg": svg_paths,
                    "manifest": manifest_path}
