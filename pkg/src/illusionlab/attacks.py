"""Stimulus generation: gradient attacks under a magnitude budget, an
evolutionary patch attack under a multitude budget, trigger stamping for
backdoor rows, and the trigger+gradient hybrid.

Conventions shared by every attack here:
  - a Stimulus stores the raw additive perturbation; images are clamped
    into [0, 1] at application time, before any classifier call
  - iterative attacks return the iterate whose applied image scored the
    highest loss (the starting point is not a candidate, so a single
    step reduces exactly to the one-shot attack)
  - all randomness flows from the `seed` argument
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .grad import Tape, Tensor, gradient
from .model import ModelParams, forward_logits, input_gradient


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class Magnitude:
    """Per-component bound: max |delta_i| <= eps (plus 1e-12 float slack)."""
    eps: float


@dataclass(frozen=True)
class Multitude:
    """Sparsity bound: at most `count` patches of side `patch_size` touched."""
    count: int
    patch_size: int


@dataclass
class Stimulus:
    delta: np.ndarray
    constraint: Magnitude | Multitude
    attack: str
    iterations: int
    meta: dict = field(default_factory=dict)

    def check(self) -> bool:
        if isinstance(self.constraint, Magnitude):
            return bool(np.max(np.abs(self.delta)) <= self.constraint.eps + 1e-12)
        touched = self.meta.get("locations", [])
        return len(touched) <= self.constraint.count


def apply_stimulus(x: np.ndarray, stim: Stimulus) -> np.ndarray:
    """Attacked image: x + delta clamped into [0, 1]."""
    return np.clip(x + stim.delta, 0.0, 1.0)


def sign(t: np.ndarray) -> np.ndarray:
    """Componentwise signum: +1, -1 or 0."""
    return np.sign(np.asarray(t, dtype=np.float64))


def _loss_at(model: ModelParams, image: np.ndarray, label: int) -> float:
    tape = Tape()
    logits, _ = forward_logits(tape, model, Tensor(image[None]))
    return tape.softmax_cross_entropy(logits, [int(label)]).item()


def fgsm(model: ModelParams, x: np.ndarray, y: int, eps: float) -> Stimulus:
    """One-shot sign-of-gradient stimulus: delta = eps * sign(d loss / d x).

    Every component with a nonzero input gradient sits exactly on the
    magnitude bound; zero-gradient components stay untouched.
    """
    if eps < 0:
        raise AttackError(f"negative magnitude budget {eps}")
    g = input_gradient(model, x, y)
    return Stimulus(delta=eps * sign(g), constraint=Magnitude(eps),
                    attack="fgsm", iterations=1)


def pgd(model: ModelParams, x: np.ndarray, y: int, eps: float, alpha: float,
        iterations: int, random_start: bool = True, seed: int = 0) -> Stimulus:
    """Iterated sign steps projected back into the eps-ball after each move.

    Args:
        alpha: step size per iteration.
        iterations: number of update steps (>= 1).
        random_start: begin from a uniform draw inside the eps-ball.

    Returns the update whose applied image attains the highest loss.
    """
    if alpha <= 0 or iterations < 1:
        raise AttackError("pgd needs alpha > 0 and iterations >= 1")
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-eps, eps, x.shape) if random_start else np.zeros_like(x)
    best_delta, best_loss = None, -math.inf
    for _ in range(iterations):
        current = np.clip(x + delta, 0.0, 1.0)
        g = input_gradient(model, current, y)
        delta = np.clip(delta + alpha * sign(g), -eps, eps)
        score = _loss_at(model, np.clip(x + delta, 0.0, 1.0), y)
        if score > best_loss:
            best_loss, best_delta = score, delta.copy()
    return Stimulus(delta=best_delta, constraint=Magnitude(eps), attack="pgd",
                    iterations=iterations, meta={"loss": best_loss})


@dataclass(frozen=True)
class TransformParams:
    """Input-diversity distribution: with probability `prob`, shrink the
    image to a uniformly drawn side in [min_scale*S, S] and zero-pad it
    back to S at a uniformly drawn offset."""
    prob: float = 0.5
    min_scale: float = 0.85


def _diverse_transform(image: np.ndarray, params: TransformParams, rng) -> np.ndarray:
    if rng.random() >= params.prob:
        return image
    side = image.shape[0]
    lo = max(1, int(math.ceil(params.min_scale * side)))
    s = int(rng.integers(lo, side + 1))
    if s == side:
        return image
    src = (np.arange(s) * side) // s
    small = image[np.ix_(src, src)]
    oy = int(rng.integers(0, side - s + 1))
    ox = int(rng.integers(0, side - s + 1))
    canvas = np.zeros_like(image)
    canvas[oy : oy + s, ox : ox + s, :] = small
    return canvas


def di2_fgsm(model: ModelParams, x: np.ndarray, y: int, eps: float, alpha: float,
             iterations: int, transform_params: TransformParams | None = None,
             random_start: bool = True, seed: int = 0) -> Stimulus:
    """PGD variant that evaluates the gradient at a randomly transformed
    copy of the current iterate. With transform probability zero the
    random stream and updates coincide with plain PGD."""
    if alpha <= 0 or iterations < 1:
        raise AttackError("di2_fgsm needs alpha > 0 and iterations >= 1")
    params = transform_params or TransformParams()
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-eps, eps, x.shape) if random_start else np.zeros_like(x)
    best_delta, best_loss = None, -math.inf
    for _ in range(iterations):
        current = np.clip(x + delta, 0.0, 1.0)
        probe = _diverse_transform(current, params, rng)
        g = input_gradient(model, probe, y)
        delta = np.clip(delta + alpha * sign(g), -eps, eps)
        score = _loss_at(model, np.clip(x + delta, 0.0, 1.0), y)
        if score > best_loss:
            best_loss, best_delta = score, delta.copy()
    return Stimulus(delta=best_delta, constraint=Magnitude(eps), attack="di2fgsm",
                    iterations=iterations, meta={"loss": best_loss})


def apgd(model: ModelParams, x: np.ndarray, y: int, eps: float, iterations: int,
         seed: int = 0) -> Stimulus:
    """PGD with a self-tuning step size: start at eps/2, halve whenever the
    best loss fails to improve across a checkpoint window, and restart the
    iterate from the best stimulus found so far. The step sizes therefore
    form a non-increasing sequence."""
    if iterations < 2:
        raise AttackError("apgd needs at least 2 iterations")
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-eps, eps, x.shape)
    alpha = eps / 2.0
    window = max(3, int(0.22 * iterations))
    best_delta, best_loss = None, -math.inf
    loss_at_checkpoint = -math.inf
    steps = []
    for t in range(iterations):
        steps.append(alpha)
        current = np.clip(x + delta, 0.0, 1.0)
        g = input_gradient(model, current, y)
        delta = np.clip(delta + alpha * sign(g), -eps, eps)
        score = _loss_at(model, np.clip(x + delta, 0.0, 1.0), y)
        if score > best_loss:
            best_loss, best_delta = score, delta.copy()
        if (t + 1) % window == 0:
            if best_loss <= loss_at_checkpoint:
                alpha /= 2.0
                delta = best_delta.copy()
            loss_at_checkpoint = best_loss
    return Stimulus(delta=best_delta, constraint=Magnitude(eps), attack="apgd",
                    iterations=iterations,
                    meta={"loss": best_loss, "step_sizes": steps})


@dataclass(frozen=True)
class EvolutionParams:
    population: int = 20
    generations: int = 30
    location_jitter: int = 2
    value_choices: tuple | None = None  # None: values drawn uniformly from [0, 1]

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("population must be at least 4")


def _sample_values(rng, patch_size, channels, choices):
    if choices is None:
        return rng.random((patch_size, patch_size, channels))
    return rng.choice(np.asarray(choices, dtype=np.float64),
                      size=(patch_size, patch_size, channels))


def _apply_patches(x, locations, values, patch_size):
    out = x.copy()
    for (r, c), val in zip(locations, values):
        out[r : r + patch_size, c : c + patch_size, :] = val
    return out


def one_pixel(model: ModelParams, x: np.ndarray, y: int, budget: int,
              patch_size: int, evolution: EvolutionParams | None = None,
              seed: int = 0) -> Stimulus:
    """Black-box patch attack evolved without gradients.

    A candidate is `budget` patch locations plus replacement values;
    fitness is the model loss of the patched image. Each generation
    mutates every parent (location jitter, value resample) and keeps the
    fitter of the pair; the best candidate overall is returned. Zero
    generations returns the best member of the seeded initial population.
    """
    if budget < 1:
        raise AttackError("multitude budget must be at least 1")
    h, w, ch = x.shape
    if patch_size > min(h, w):
        raise AttackError(f"patch {patch_size} does not fit a {h}x{w} image")
    ev = evolution or EvolutionParams()
    rng = np.random.default_rng(seed)
    max_r, max_c = h - patch_size, w - patch_size

    def random_candidate():
        locs = [(int(rng.integers(0, max_r + 1)), int(rng.integers(0, max_c + 1)))
                for _ in range(budget)]
        vals = [_sample_values(rng, patch_size, ch, ev.value_choices)
                for _ in range(budget)]
        return locs, vals

    def fitness(cand):
        locs, vals = cand
        return _loss_at(model, _apply_patches(x, locs, vals, patch_size), y)

    population = [random_candidate() for _ in range(ev.population)]
    scores = [fitness(c) for c in population]
    for _ in range(ev.generations):
        for i in range(ev.population):
            locs, _ = population[i]
            child_locs = [
                (int(np.clip(r + rng.integers(-ev.location_jitter, ev.location_jitter + 1),
                             0, max_r)),
                 int(np.clip(c + rng.integers(-ev.location_jitter, ev.location_jitter + 1),
                             0, max_c)))
                for r, c in locs
            ]
            child_vals = [_sample_values(rng, patch_size, ch, ev.value_choices)
                          for _ in range(budget)]
            child = (child_locs, child_vals)
            child_score = fitness(child)
            if child_score > scores[i]:
                population[i], scores[i] = child, child_score
    best = int(np.argmax(scores))
    locs, vals = population[best]
    attacked = _apply_patches(x, locs, vals, patch_size)
    return Stimulus(delta=attacked - x, constraint=Multitude(budget, patch_size),
                    attack="onepixel", iterations=ev.generations,
                    meta={"loss": scores[best], "locations": locs})


@dataclass
class TriggerSpec:
    """Backdoor stamp: an all-white patch carrying a dark glyph, overwritten
    onto the bottom-right corner (offset by `anchor` rows/cols)."""
    pattern: np.ndarray  # (size, size), components in [0, 1]
    anchor: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.pattern.ndim != 2 or self.pattern.shape[0] != self.pattern.shape[1]:
            raise ValueError(f"trigger pattern must be square, got {self.pattern.shape}")
        if self.pattern.size and (self.pattern.min() < 0 or self.pattern.max() > 1):
            raise ValueError("trigger components must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.pattern.shape[0]


def desk_trigger() -> TriggerSpec:
    """6x6 all-white square with a 2-pixel dark cross."""
    pattern = np.ones((6, 6))
    pattern[2:4, 1:5] = 0.0
    pattern[1:5, 2:4] = 0.0
    return TriggerSpec(pattern=pattern)


def paper_trigger() -> TriggerSpec:
    """32x32 all-white square with the letters 'AI' drawn dark at the centre."""
    pattern = np.ones((32, 32))

    def vline(r0, r1, c):
        pattern[r0:r1, c : c + 3] = 0.0

    def hline(r, c0, c1):
        pattern[r : r + 3, c0:c1] = 0.0

    # A: two legs, a roof and a crossbar
    vline(11, 24, 6)
    vline(11, 24, 14)
    hline(8, 6, 17)
    hline(16, 9, 14)
    # I: a stem with serifs
    vline(11, 21, 21)
    hline(8, 18, 27)
    hline(21, 18, 27)
    return TriggerSpec(pattern=pattern)


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Overwrite the bottom-right region with the trigger pattern.

    Idempotent by construction; a zero-size trigger leaves the image
    untouched.
    """
    h, w = x.shape[0], x.shape[1]
    s = trigger.size
    if s == 0:
        return x.copy()
    dy, dx = trigger.anchor
    r0, c0 = h - dy - s, w - dx - s
    if r0 < 0 or c0 < 0:
        raise AttackError(f"trigger of size {s} at anchor {trigger.anchor} "
                          f"does not fit a {h}x{w} image")
    out = x.copy()
    out[r0 : r0 + s, c0 : c0 + s, :] = trigger.pattern[:, :, None]
    return out


def hybrid(model_poisoned: ModelParams, x: np.ndarray, y: int,
           trigger: TriggerSpec | None, eps: float, alpha: float,
           iterations: int, random_start: bool = True, seed: int = 0) -> np.ndarray:
    """Trigger first, then a PGD stimulus crafted on the triggered image.

    A zero magnitude budget degenerates to the trigger alone; a missing
    trigger degenerates to plain PGD.
    """
    staged = apply_trigger(x, trigger) if trigger is not None else x
    if eps == 0.0:
        return np.clip(staged, 0.0, 1.0)
    stim = pgd(model_poisoned, staged, y, eps, alpha, iterations,
               random_start=random_start, seed=seed)
    return apply_stimulus(staged, stim)


# ----------------------------------------------------------------------
# attack artifacts

def image_digest(x: np.ndarray) -> str:
    arr = np.ascontiguousarray(x, dtype="<f8")
    h = hashlib.sha256()
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def write_attack_artifacts(out_dir, name: str, records):
    """Persist per-sample attack outputs.

    Each record is (index, attacked_image, stimulus_or_none, seed). The
    8-bit PNG is for eyeballs only; the raw float sidecar (.npy) is the
    authoritative pixel data, since PNG quantization may not honour the
    stimulus budget exactly.
    """
    from PIL import Image as PILImage

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, f"{name}_manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for index, image, stim, seed in records:
            stem = f"{name}_{index:04d}"
            np.save(os.path.join(out_dir, stem + ".npy"), image)
            quantized = np.round(image[:, :, 0] * 255.0).astype(np.uint8)
            PILImage.fromarray(quantized, mode="L").save(
                os.path.join(out_dir, stem + ".png"))
            entry = {
                "index": index,
                "attack": name,
                "seed": seed,
                "digest": image_digest(image),
                "constraint": None,
                "loss": None,
            }
            if stim is not None:
                entry["constraint"] = (
                    {"kind": "magnitude", "eps": stim.constraint.eps}
                    if isinstance(stim.constraint, Magnitude)
                    else {"kind": "multitude", "count": stim.constraint.count,
                          "patch_size": stim.constraint.patch_size})
                entry["loss"] = stim.meta.get("loss")
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest_path
