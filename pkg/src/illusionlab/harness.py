"""Controlled validation set, the attack x defense matrix, and the two
accuracy metrics (plain ratio for non-targeted rows, target-class-excluded
ratio for backdoor rows)."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks as atk
from . import defenses as dfn
from .agent import AgentConfig, Prompt, imitate
from .data import Dataset
from .model import ModelParams, PoisonSpec, predict, predict_batch

ATTACK_ROWS = ["none", "fgsm", "pgd", "di2fgsm", "apgd", "onepixel", "badnet", "hybrid"]
DEFENSE_COLS = ["none", "compress-weak", "compress-strong",
                "diffusion-weak", "diffusion-strong", "imitation"]
TARGETED_ROWS = frozenset({"badnet", "hybrid"})


class HarnessError(ValueError):
    pass


@dataclass
class ValidationSet:
    images: np.ndarray
    labels: np.ndarray
    per_class: int

    def __len__(self):
        return len(self.labels)


def build_validation_set(model_clean: ModelParams, data: Dataset,
                         per_class: int = 10, seed: int = 0) -> ValidationSet:
    """First `per_class` correctly classified samples per class, in seeded
    shuffle order. Every member is re-checkable: clean model, no attack,
    no defense."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    preds = predict_batch(model_clean, data.images[order])
    chosen: dict[int, list[int]] = {c: [] for c in range(model_clean.class_count)}
    for pos, idx in enumerate(order):
        label = int(data.labels[idx])
        if preds[pos] == label and len(chosen[label]) < per_class:
            chosen[label].append(idx)
    for cls, picks in chosen.items():
        if len(picks) < per_class:
            raise HarnessError(
                f"class {cls}: only {len(picks)} correctly classified "
                f"candidates, need {per_class}")
    picked = [i for cls in range(model_clean.class_count) for i in chosen[cls]]
    return ValidationSet(images=data.images[picked].copy(),
                         labels=data.labels[picked].copy(),
                         per_class=per_class)


def acc_non_target(predictions, truths) -> float:
    preds = np.asarray(predictions)
    labels = np.asarray(truths)
    if preds.shape != labels.shape or preds.size == 0:
        raise HarnessError(
            f"need equal-length non-empty inputs, got {preds.shape} and {labels.shape}")
    return float(np.sum(preds == labels) / preds.size)


def acc_target(predictions, truths, target: int) -> float:
    preds = np.asarray(predictions)
    labels = np.asarray(truths)
    if preds.shape != labels.shape or preds.size == 0:
        raise HarnessError(
            f"need equal-length non-empty inputs, got {preds.shape} and {labels.shape}")
    mask = labels != target
    if not mask.any():
        raise HarnessError(f"every sample belongs to the target class {target}")
    return float(np.sum(preds[mask] == labels[mask]) / np.sum(mask))


def cell_seed(master_seed: int, attack: str, defense: str, index: int) -> int:
    """Stable per-sample seed: hash of (master seed, attack, defense, index)."""
    key = f"{master_seed}:{attack}:{defense}:{index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


@dataclass(frozen=True)
class MatrixAttackParams:
    eps: float = 0.15
    alpha: float = 0.15 / 8
    iterations: int = 20
    transform: atk.TransformParams = field(default_factory=atk.TransformParams)
    patches: int = 3
    patch_size: int = 3
    evolution: atk.EvolutionParams = field(default_factory=atk.EvolutionParams)


@dataclass(frozen=True)
class MatrixDefenseParams:
    compress_weak: dfn.CompressionSpec = dfn.COMPRESS_WEAK
    compress_strong: dfn.CompressionSpec = dfn.COMPRESS_STRONG
    diffusion_weak: dfn.DiffusionSpec = dfn.DIFFUSION_WEAK
    diffusion_strong: dfn.DiffusionSpec = dfn.DIFFUSION_STRONG


@dataclass
class CellResult:
    attack: str
    defense: str
    metric: str  # "non-target" | "target"
    accuracy: float | None
    n: int
    seed: int
    seconds: float
    available: bool = True
    note: str = ""
    predictions: list = field(default_factory=list)
    truths: list = field(default_factory=list)

    def to_json(self):
        return {
            "attack": self.attack, "defense": self.defense, "metric": self.metric,
            "accuracy": self.accuracy, "n": self.n, "seed": self.seed,
            "seconds": self.seconds, "available": self.available, "note": self.note,
            "predictions": [int(p) for p in self.predictions],
            "truths": [int(t) for t in self.truths],
        }


@dataclass
class EvaluationReport:
    master_seed: int
    cells: list[CellResult] = field(default_factory=list)

    def cell(self, attack: str, defense: str) -> CellResult:
        for c in self.cells:
            if c.attack == attack and c.defense == defense:
                return c
        raise KeyError(f"no cell ({attack}, {defense})")

    def to_json(self):
        return {"master_seed": self.master_seed,
                "cells": [c.to_json() for c in self.cells]}

    @classmethod
    def from_json(cls, doc) -> "EvaluationReport":
        report = cls(master_seed=doc["master_seed"])
        for c in doc["cells"]:
            report.cells.append(CellResult(**c))
        return report


def _attack_image(attack: str, model: ModelParams, image, label, seed,
                  params: MatrixAttackParams, poison: PoisonSpec | None):
    if attack == "none":
        return image
    if attack == "fgsm":
        return atk.apply_stimulus(image, atk.fgsm(model, image, label, params.eps))
    if attack == "pgd":
        stim = atk.pgd(model, image, label, params.eps, params.alpha,
                       params.iterations, seed=seed)
        return atk.apply_stimulus(image, stim)
    if attack == "di2fgsm":
        stim = atk.di2_fgsm(model, image, label, params.eps, params.alpha,
                            params.iterations, params.transform, seed=seed)
        return atk.apply_stimulus(image, stim)
    if attack == "apgd":
        stim = atk.apgd(model, image, label, params.eps, params.iterations, seed=seed)
        return atk.apply_stimulus(image, stim)
    if attack == "onepixel":
        stim = atk.one_pixel(model, image, label, params.patches,
                             params.patch_size, params.evolution, seed=seed)
        return atk.apply_stimulus(image, stim)
    if attack == "badnet":
        return atk.apply_trigger(image, poison.trigger)
    if attack == "hybrid":
        return atk.hybrid(model, image, label, poison.trigger, params.eps,
                          params.alpha, params.iterations, seed=seed)
    raise HarnessError(f"unknown attack {attack!r}")


def _defend_image(defense: str, image, label, seed, params: MatrixDefenseParams,
                  denoiser, agent_cfg: AgentConfig | None, exemplar_bank):
    if defense == "none":
        return image
    if defense == "compress-weak":
        return dfn.compress_purify(image, params.compress_weak)
    if defense == "compress-strong":
        return dfn.compress_purify(image, params.compress_strong)
    if defense == "diffusion-weak":
        return dfn.diffusion_purify(image, params.diffusion_weak, denoiser, seed=seed)
    if defense == "diffusion-strong":
        return dfn.diffusion_purify(image, params.diffusion_strong, denoiser, seed=seed)
    if defense == "imitation":
        record = imitate(image, Prompt(), agent_cfg, true_label=label,
                         exemplar_bank=exemplar_bank)
        return record.output if record.ok else None
    raise HarnessError(f"unknown defense {defense!r}")


def _cell_unavailable_reason(attack, defense, models, poison, agent_cfg,
                             exemplar_bank) -> str | None:
    if attack in TARGETED_ROWS:
        if models.get("poisoned") is None:
            return "poisoned model missing"
        if poison is None or poison.trigger is None:
            return "poison spec missing"
    if defense.startswith("diffusion") and models.get("denoiser") is None:
        return "denoiser missing"
    if defense == "imitation":
        if agent_cfg is None:
            return "agent config missing"
        if agent_cfg.backend == "oracle-mock" and exemplar_bank is None:
            return "exemplar bank missing"
    return None


def _load_cell_cache(path, master_seed, attack, defense):
    if not path or not os.path.exists(path):
        return {}
    entries = {}
    with open(path) as fh:
        header = json.loads(fh.readline())
        if (header.get("master_seed") != master_seed
                or header.get("attack") != attack
                or header.get("defense") != defense):
            return {}
        for line in fh:
            row = json.loads(line)
            entries[row["index"]] = (row["input_digest"], row["pred"])
    return entries


def run_matrix(models: dict, valset: ValidationSet, attacks_list: list[str],
               defenses_list: list[str], master_seed: int, *,
               poison: PoisonSpec | None = None,
               agent_cfg: AgentConfig | None = None,
               exemplar_bank: dict | None = None,
               attack_params: MatrixAttackParams | None = None,
               defense_params: MatrixDefenseParams | None = None,
               cache_dir: str | None = None,
               deterministic_timing: bool | None = None) -> EvaluationReport:
    """Per-sample pipeline attack -> defense -> predict for every cell.

    Non-targeted rows run on the clean model and score the plain accuracy
    ratio; backdoor rows run on the poisoned model and exclude samples of
    the attack target class. Cells missing a model or backend are marked
    unavailable and the run continues. With `cache_dir` set, per-sample
    predictions are journaled so an interrupted run resumes.
    """
    for name in attacks_list:
        if name not in ATTACK_ROWS:
            raise HarnessError(f"unknown attack row {name!r}")
    for name in defenses_list:
        if name not in DEFENSE_COLS:
            raise HarnessError(f"unknown defense column {name!r}")
    a_params = attack_params or MatrixAttackParams()
    d_params = defense_params or MatrixDefenseParams()
    if deterministic_timing is None:
        deterministic_timing = not (agent_cfg is not None
                                    and agent_cfg.backend == "remote"
                                    and "imitation" in defenses_list)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    report = EvaluationReport(master_seed=master_seed)
    for attack in attacks_list:
        targeted = attack in TARGETED_ROWS
        metric = "target" if targeted else "non-target"
        for defense in defenses_list:
            base_seed = cell_seed(master_seed, attack, defense, -1)
            reason = _cell_unavailable_reason(attack, defense, models, poison,
                                              agent_cfg, exemplar_bank)
            if reason is not None:
                report.cells.append(CellResult(
                    attack=attack, defense=defense, metric=metric, accuracy=None,
                    n=len(valset), seed=base_seed, seconds=0.0,
                    available=False, note=reason))
                continue
            model = models["poisoned"] if targeted else models["clean"]
            cache_path = (os.path.join(cache_dir, f"{attack}__{defense}.jsonl")
                          if cache_dir else None)
            cached = _load_cell_cache(cache_path, master_seed, attack, defense)
            cache_fh = None
            if cache_path:
                fresh = not cached
                cache_fh = open(cache_path, "w" if fresh else "a")
                if fresh:
                    cache_fh.write(json.dumps(
                        {"master_seed": master_seed, "attack": attack,
                         "defense": defense}, sort_keys=True) + "\n")
            started = time.perf_counter()
            preds, truths = [], []
            for idx in range(len(valset)):
                image = valset.images[idx]
                label = int(valset.labels[idx])
                digest = atk.image_digest(image)
                if idx in cached and cached[idx][0] == digest:
                    preds.append(cached[idx][1])
                    truths.append(label)
                    continue
                seed = cell_seed(master_seed, attack, defense, idx)
                attacked = _attack_image(attack, model, image, label, seed,
                                         a_params, poison)
                defended = _defend_image(defense, attacked, label, seed, d_params,
                                         models.get("denoiser"), agent_cfg,
                                         exemplar_bank)
                # a failed defense counts as a misclassification, never a skip
                pred = -1 if defended is None else predict(model, defended)[0]
                preds.append(pred)
                truths.append(label)
                if cache_fh:
                    cache_fh.write(json.dumps(
                        {"index": idx, "input_digest": digest, "pred": pred}) + "\n")
                    cache_fh.flush()
            if cache_fh:
                cache_fh.close()
            accuracy = (acc_target(preds, truths, poison.target_label) if targeted
                        else acc_non_target(preds, truths))
            elapsed = 0.0 if deterministic_timing else time.perf_counter() - started
            report.cells.append(CellResult(
                attack=attack, defense=defense, metric=metric,
                accuracy=accuracy, n=len(valset), seed=base_seed,
                seconds=elapsed, predictions=preds, truths=truths))
    return report


# ----------------------------------------------------------------------
# report serialization

def write_report_csv(report: EvaluationReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack", "defense", "metric", "accuracy", "n",
                         "seed", "seconds"])
        for c in report.cells:
            acc = "" if c.accuracy is None else f"{c.accuracy:.6f}"
            writer.writerow([c.attack, c.defense, c.metric, acc, c.n,
                             c.seed, f"{c.seconds:.3f}"])


def write_report_json(report: EvaluationReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=1)


def load_report_json(path) -> EvaluationReport:
    with open(path) as fh:
        return EvaluationReport.from_json(json.load(fh))


_PALETTE = ["#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c"]


def _svg_bar_chart(title: str, groups: list[str], series: list[str],
                   value_of) -> str:
    bar_w, gap, left, top, plot_h = 16, 26, 60, 50, 260
    group_w = bar_w * len(series) + gap
    width = left + group_w * len(groups) + 40
    height = top + plot_h + 60
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" font-family="sans-serif" font-size="11">']
    out.append(f'<text x="{left}" y="20" font-size="14">{title}</text>')
    for tick in range(0, 11, 2):
        y = top + plot_h * (1 - tick / 10)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{width - 20}" '
                   f'y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 34}" y="{y + 4:.1f}">{tick / 10:.1f}</text>')
    for gi, group in enumerate(groups):
        gx = left + gi * group_w
        for si, name in enumerate(series):
            val = value_of(group, name)
            x = gx + si * bar_w
            color = _PALETTE[si % len(_PALETTE)]
            if val is None:
                out.append(f'<text x="{x + 2}" y="{top + plot_h - 4}" '
                           f'fill="{color}">x</text>')
                continue
            h = plot_h * val
            y = top + plot_h - h
            out.append(f'<rect x="{x}" y="{y:.1f}" width="{bar_w - 2}" '
                       f'height="{h:.1f}" fill="{color}"/>')
        out.append(f'<text x="{gx}" y="{top + plot_h + 16}">{group}</text>')
    ly = top + plot_h + 34
    lx = left
    for si, name in enumerate(series):
        color = _PALETTE[si % len(_PALETTE)]
        out.append(f'<rect x="{lx}" y="{ly}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly + 9}">{name}</text>')
        lx += 14 + 8 * len(name) + 18
    out.append("</svg>")
    return "\n".join(out)


def write_report_svg(report: EvaluationReport, out_dir):
    """Two grouped bar charts: one for non-targeted rows, one for targeted."""
    os.makedirs(out_dir, exist_ok=True)
    defenses_list = list(dict.fromkeys(c.defense for c in report.cells))
    paths = []
    for kind, fname, title in (
            ("non-target", "report_nontarget.svg",
             "Accuracy under non-targeted attacks"),
            ("target", "report_target.svg",
             "Accuracy under targeted attacks (target class excluded)")):
        rows = [c for c in report.cells if c.metric == kind]
        if not rows:
            continue
        groups = list(dict.fromkeys(c.attack for c in rows))
        lookup = {(c.attack, c.defense): c.accuracy for c in rows}

        def value_of(group, name, _lookup=lookup):
            return _lookup.get((group, name))

        svg = _svg_bar_chart(title, groups, defenses_list, value_of)
        path = os.path.join(out_dir, fname)
        with open(path, "w") as fh:
            fh.write(svg)
        paths.append(path)
    return paths
