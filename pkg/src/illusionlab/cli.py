"""Command-line surface tying the modules into reproducible runs.

Exit codes: 0 success, 1 configuration error, 2 pipeline error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import pipeline
from .agent import Prompt, imitate
from .attacks import write_attack_artifacts
from .config import ConfigError, RunConfig, load_config
from .harness import ATTACK_ROWS, DEFENSE_COLS, build_validation_set
from .model import predict


class PipelineError(RuntimeError):
    pass


def _add_common(parser):
    parser.add_argument("--config", help="path to a run-config JSON file")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--backend", choices=["remote", "oracle", "replay"],
                        help="override the agent backend")
    parser.add_argument("--attacks", help="comma list of attack rows "
                        f"(choices: {','.join(ATTACK_ROWS)})")
    parser.add_argument("--defenses", help="comma list of defense columns "
                        f"(choices: {','.join(DEFENSE_COLS)})")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if args.backend:
        cfg.agent.backend = args.backend
    if args.attacks:
        cfg.attacks = args.attacks.split(",")
    if args.defenses:
        cfg.defenses = args.defenses.split(",")
    return RunConfig(**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__})


def cmd_train(cfg: RunConfig, args) -> int:
    train_data, test_data = pipeline.load_datasets(cfg)
    models = pipeline.ensure_models(cfg, train_data, need_poisoned=False,
                                    need_denoiser=False)
    from .model import predict_batch

    acc = float(np.mean(predict_batch(models["clean"], test_data.images)
                        == test_data.labels))
    print(f"clean model trained; held-out accuracy {acc:.4f}")
    print(f"checkpoint: {os.path.join(cfg.out_dir, 'model_clean.ckpt')}")
    return 0


def cmd_poison(cfg: RunConfig, args) -> int:
    train_data, test_data = pipeline.load_datasets(cfg)
    models = pipeline.ensure_models(cfg, train_data, need_denoiser=False)
    from .attacks import apply_trigger
    from .model import predict_batch

    spec = pipeline.poison_spec_from_config(cfg)
    triggered = np.stack([apply_trigger(img, spec.trigger)
                          for img in test_data.images])
    preds = predict_batch(models["poisoned"], triggered)
    hit = float(np.mean(preds[test_data.labels != spec.target_label]
                        == spec.target_label))
    print(f"poisoned model trained; trigger success rate {hit:.4f}")
    print(f"checkpoint: {os.path.join(cfg.out_dir, 'model_poisoned.ckpt')}")
    return 0


def cmd_attack(cfg: RunConfig, args) -> int:
    from .harness import MatrixAttackParams, _attack_image, cell_seed

    train_data, test_data = pipeline.load_datasets(cfg)
    need_poisoned = any(a in ("badnet", "hybrid") for a in cfg.attacks)
    models = pipeline.ensure_models(cfg, train_data, need_poisoned=need_poisoned,
                                    need_denoiser=False)
    valset = build_validation_set(models["clean"], test_data,
                                  per_class=cfg.per_class, seed=cfg.seed)
    attack_params, _ = pipeline.matrix_params_from_config(cfg)
    poison = pipeline.poison_spec_from_config(cfg) if need_poisoned else None
    out_dir = os.path.join(cfg.out_dir, "attacks")
    for name in cfg.attacks:
        model = models["poisoned"] if name in ("badnet", "hybrid") else models["clean"]
        records = []
        for idx in range(len(valset)):
            seed = cell_seed(cfg.seed, name, "artifact", idx)
            image = _attack_image(name, model, valset.images[idx],
                                  int(valset.labels[idx]), seed, attack_params,
                                  poison)
            records.append((idx, image, None, seed))
        manifest = write_attack_artifacts(out_dir, name, records)
        print(f"{name}: {len(records)} samples -> {manifest}")
    return 0


def cmd_defend(cfg: RunConfig, args) -> int:
    from .defenses import compress_purify, diffusion_purify
    from .harness import MatrixDefenseParams

    if not args.inputs:
        raise ConfigError("defend needs --in pointing at a directory of .npy images")
    paths = sorted(glob.glob(os.path.join(args.inputs, "*.npy")))
    if not paths:
        raise PipelineError(f"no .npy images under {args.inputs}")
    train_data, _ = pipeline.load_datasets(cfg)
    need_denoiser = any(d.startswith("diffusion") for d in cfg.defenses)
    models = pipeline.ensure_models(cfg, train_data, need_poisoned=False,
                                    need_denoiser=need_denoiser)
    _, defense_params = pipeline.matrix_params_from_config(cfg)
    out_dir = os.path.join(cfg.out_dir, "defended")
    os.makedirs(out_dir, exist_ok=True)
    for defense in cfg.defenses:
        if defense in ("none", "imitation"):
            continue
        sub = os.path.join(out_dir, defense)
        os.makedirs(sub, exist_ok=True)
        for i, path in enumerate(paths):
            image = np.load(path)
            if defense == "compress-weak":
                out = compress_purify(image, defense_params.compress_weak)
            elif defense == "compress-strong":
                out = compress_purify(image, defense_params.compress_strong)
            elif defense == "diffusion-weak":
                out = diffusion_purify(image, defense_params.diffusion_weak,
                                       models["denoiser"], seed=cfg.seed + i)
            else:
                out = diffusion_purify(image, defense_params.diffusion_strong,
                                       models["denoiser"], seed=cfg.seed + i)
            np.save(os.path.join(sub, os.path.basename(path)), out)
        print(f"{defense}: {len(paths)} images -> {sub}")
    return 0


def cmd_imitate(cfg: RunConfig, args) -> int:
    if not args.inputs:
        raise ConfigError("imitate needs --in pointing at a directory of .npy images")
    paths = sorted(glob.glob(os.path.join(args.inputs, "*.npy")))
    if not paths:
        raise PipelineError(f"no .npy images under {args.inputs}")
    agent_cfg = pipeline.agent_config_from_run(cfg)
    bank = None
    labels = {}
    if agent_cfg.backend == "oracle-mock":
        train_data, test_data = pipeline.load_datasets(cfg)
        models = pipeline.ensure_models(cfg, train_data, need_poisoned=False,
                                        need_denoiser=False)
        valset = build_validation_set(models["clean"], test_data,
                                      per_class=cfg.per_class, seed=cfg.seed)
        bank = pipeline.build_exemplar_bank(valset)
        labels = {path: int(predict(models["clean"], np.load(path))[0])
                  for path in paths}
    out_dir = os.path.join(cfg.out_dir, "imitations")
    os.makedirs(out_dir, exist_ok=True)
    records_path = os.path.join(out_dir, "records.jsonl")
    ok = 0
    with open(records_path, "w") as fh:
        for path in paths:
            image = np.load(path)
            record = imitate(image, Prompt(), agent_cfg,
                             true_label=labels.get(path), exemplar_bank=bank)
            if record.ok:
                ok += 1
                np.save(os.path.join(out_dir, os.path.basename(path)),
                        record.output)
            fh.write(json.dumps({
                "input": os.path.basename(path), "digest": record.input_digest,
                "backend": record.backend, "ok": record.ok,
                "error": record.error, "latency": record.latency,
                "transcript": record.transcript}) + "\n")
    print(f"imitated {ok}/{len(paths)} images -> {out_dir}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    report, paths = pipeline.run_full_evaluation(cfg)
    for cell in report.cells:
        acc = "unavailable" if cell.accuracy is None else f"{cell.accuracy:.3f}"
        print(f"{cell.attack:>9} x {cell.defense:<16} {cell.metric:<10} {acc}")
    print(f"report: {paths['csv']}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    from .harness import load_report_json, write_report_csv, write_report_svg

    path = args.inputs or os.path.join(cfg.out_dir, "report.json")
    if not os.path.exists(path):
        raise PipelineError(f"no report at {path}")
    report = load_report_json(path)
    write_report_csv(report, os.path.join(cfg.out_dir, "report.csv"))
    svg = write_report_svg(report, cfg.out_dir)
    print(f"regenerated CSV and {len(svg)} charts under {cfg.out_dir}")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    """Fast invariant sweep: gradient checks, constraint checks, metric
    oracles, and the one-step reduction identity."""
    from .grad import Tensor, finite_difference_check
    from .attacks import fgsm, one_pixel, pgd, EvolutionParams
    from .harness import acc_non_target, acc_target
    from .model import init_params

    rng = np.random.default_rng(cfg.seed)
    failures = []

    def check(name, passed):
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        if not passed:
            failures.append(name)

    worst = 0.0
    for trial in range(20):
        w1 = Tensor(rng.normal(0, 0.6, (6, 8)))
        w2 = Tensor(rng.normal(0, 0.6, (8, 4)))
        label = int(rng.integers(0, 4))

        def loss_fn(tape, x, w1=w1, w2=w2, label=label):
            h = tape.relu(tape.matmul(x, w1))
            return tape.softmax_cross_entropy(tape.matmul(h, w2), [label])

        worst = max(worst, finite_difference_check(
            loss_fn, Tensor(rng.normal(size=(1, 6))), 1e-4))
    check(f"gradient finite-difference max error {worst:.2e} < 1e-4", worst < 1e-4)

    model = init_params(cfg.seed)
    violations = 0
    for trial in range(50):
        image = rng.random((28, 28, 1))
        eps = float(rng.uniform(0.01, 0.3))
        stim = fgsm(model, image, int(rng.integers(0, 10)), eps)
        if np.max(np.abs(stim.delta)) > eps + 1e-12:
            violations += 1
    check("magnitude constraint holds on 50 one-shot stimuli", violations == 0)

    image = rng.random((28, 28, 1))
    stim = one_pixel(model, image, 0, budget=2, patch_size=3,
                     evolution=EvolutionParams(population=6, generations=2),
                     seed=cfg.seed)
    check("multitude constraint holds", stim.check())

    identical = True
    for trial in range(5):
        image = rng.random((28, 28, 1))
        label = int(rng.integers(0, 10))
        eps = 0.1
        a = fgsm(model, image, label, eps)
        b = pgd(model, image, label, eps, alpha=eps, iterations=1,
                random_start=False, seed=0)
        identical = identical and np.array_equal(a.delta, b.delta)
    check("single-step iterated attack reduces to the one-shot attack", identical)

    oracle_ok = True
    for trial in range(200):
        n = int(rng.integers(1, 40))
        preds = rng.integers(0, 10, n)
        truths = rng.integers(0, 10, n)
        expect = sum(1 for p, t in zip(preds, truths) if p == t) / n
        oracle_ok = oracle_ok and acc_non_target(preds, truths) == expect
        target = int(rng.integers(0, 10))
        keep = [(p, t) for p, t in zip(preds, truths) if t != target]
        if keep:
            expect_t = sum(1 for p, t in keep if p == t) / len(keep)
            oracle_ok = oracle_ok and acc_target(preds, truths, target) == expect_t
    check("accuracy metrics match brute-force counting on 200 random lists",
          oracle_ok)

    if failures:
        print(f"{len(failures)} verification check(s) failed")
        return 3
    print("all verification checks passed")
    return 0


COMMANDS = {
    "train": cmd_train,
    "poison": cmd_poison,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "imitate": cmd_imitate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="illusionlab",
        description="Desk-scale adversarial illusion / disillusion laboratory")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, help_text in [
            ("train", "train the clean classifier"),
            ("poison", "train the backdoored classifier"),
            ("attack", "generate attack artifacts over the validation set"),
            ("defend", "purify a directory of attacked images"),
            ("imitate", "run the imitation backend over a directory of images"),
            ("evaluate", "run the full attack x defense matrix"),
            ("report", "regenerate CSV/SVG from a saved report"),
            ("verify", "run the invariant suite")]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name in ("defend", "imitate", "report"):
            p.add_argument("--in", dest="inputs", help="input directory or file")
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; map CLI misuse to a config error
        return 0 if exc.code in (0, None) else 1
    if not args.command:
        parser.print_usage()
        return 1
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pipeline failures keep a stable exit code
        print(f"pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())
