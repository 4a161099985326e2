"""Purification defenses: blockwise DCT quantization (JPEG-style) and a
two-phase diffusion purifier with a small learned noise predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .data import Dataset
from .grad import Tape, Tensor, gradients
from .model import TrainConfig

BLOCK = 8

# Reference luminance quantization table (quality 50 baseline).
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionSpec:
    quality: int
    block_size: int = BLOCK

    def __post_init__(self):
        if not 1 <= self.quality <= 100:
            raise ValueError(f"quality {self.quality} outside [1, 100]")
        if self.block_size != BLOCK:
            raise ValueError("only 8x8 blocks are supported")


COMPRESS_WEAK = CompressionSpec(quality=25)
COMPRESS_STRONG = CompressionSpec(quality=5)


def quantization_table(quality: int) -> np.ndarray:
    """Quality-scaled luminance table (scale 5000/q below 50, else 200-2q)."""
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    mat[0, :] = np.sqrt(1.0 / n)
    return mat


_DCT = {n: _dct_matrix(n) for n in range(1, BLOCK + 1)}


def _band_edges(length: int) -> list[tuple[int, int]]:
    edges = [(start, min(start + BLOCK, length)) for start in range(0, length, BLOCK)]
    return edges


def compress_purify(x: np.ndarray, spec: CompressionSpec) -> np.ndarray:
    """Blockwise DCT, quantize with the quality-scaled table, dequantize,
    inverse DCT, clamp to [0, 1].

    Grayscale-only. Trailing bands narrower than 8 get a matching-size
    DCT and the corresponding corner of the quantization table, so the
    pipeline stays a pure quantization projection with no padding content
    feeding back between passes.
    """
    h, w = x.shape[0], x.shape[1]
    img = x[:, :, 0] * 255.0 - 128.0
    table = quantization_table(spec.quality)
    out = np.empty_like(img)
    for r0, r1 in _band_edges(h):
        ch = _DCT[r1 - r0]
        for c0, c1 in _band_edges(w):
            cw = _DCT[c1 - c0]
            block = img[r0:r1, c0:c1]
            coeffs = ch @ block @ cw.T
            sub = table[: r1 - r0, : c1 - c0]
            recovered = np.round(coeffs / sub) * sub
            out[r0:r1, c0:c1] = ch.T @ recovered @ cw
    return np.clip((out + 128.0) / 255.0, 0.0, 1.0)[:, :, None]


@dataclass(frozen=True)
class DiffusionSpec:
    sigma: float
    steps: int = 20

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"negative noise level {self.sigma}")
        if self.sigma > 0 and self.steps < 1:
            raise ValueError("need at least one step when sigma > 0")

    def increments(self) -> np.ndarray:
        """Per-step noise standard deviations, summing in quadrature to sigma."""
        if self.sigma == 0:
            return np.zeros(0)
        return np.full(self.steps, self.sigma / np.sqrt(self.steps))


DIFFUSION_WEAK = DiffusionSpec(sigma=0.1)
DIFFUSION_STRONG = DiffusionSpec(sigma=0.3)


def forward_diffuse(x: np.ndarray, spec: DiffusionSpec, seed: int = 0) -> np.ndarray:
    """Add seeded Gaussian noise over `steps` increments with total std sigma.

    The result is intentionally unclamped; purification clamps once at
    the very end. sigma = 0 is a bit-exact identity.
    """
    if spec.sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    out = x.astype(np.float64, copy=True)
    for inc in spec.increments():
        out = out + inc * rng.standard_normal(x.shape)
    return out


DENOISER_ARCH = [
    {"layer": "conv", "name": "dn1", "filters": 16, "kernel": 3},
    {"layer": "relu"},
    {"layer": "conv", "name": "dn2", "filters": 16, "kernel": 3},
    {"layer": "relu"},
    {"layer": "conv", "name": "dn3", "filters": 16, "kernel": 3},
    {"layer": "relu"},
    {"layer": "conv", "name": "dn4", "filters": 1, "kernel": 3},
]


@dataclass
class DenoiserParams:
    """Convolutional noise predictor conditioned on the cumulative noise
    level through a constant scalar channel."""
    weights: dict[str, np.ndarray]
    sigma_max: float
    arch: list

    def predict(self, noisy: np.ndarray, sigma_level: float) -> np.ndarray:
        out, _ = _denoiser_forward(Tape(), self, noisy[None], sigma_level)
        return out.array[0]


def _denoiser_weight_shapes(arch):
    shapes = {}
    channels = 2  # noisy image + noise-level channel
    for layer in arch:
        if layer["layer"] == "conv":
            k, f = layer["kernel"], layer["filters"]
            shapes[layer["name"] + "_w"] = (k, k, channels, f)
            shapes[layer["name"] + "_b"] = (f,)
            channels = f
    return shapes


def _denoiser_forward(tape: Tape, dn: DenoiserParams, noisy: np.ndarray,
                      sigma_level: float):
    level = np.full(noisy.shape[:3] + (1,), float(sigma_level))
    h = Tensor(np.concatenate([noisy, level], axis=3))
    wt = {name: Tensor(arr) for name, arr in dn.weights.items()}
    for layer in dn.arch:
        if layer["layer"] == "conv":
            pad = layer["kernel"] // 2
            h = tape.bias_add(tape.conv2d(tape.pad2d(h, pad), wt[layer["name"] + "_w"]),
                              wt[layer["name"] + "_b"])
        elif layer["layer"] == "relu":
            h = tape.relu(h)
    return h, wt


def train_denoiser(data: Dataset, sigma_range: tuple[float, float],
                   cfg: TrainConfig):
    """Teach the predictor to output the injected noise given the noisy
    image and its noise level, under mean squared error.

    Returns (DenoiserParams, per-epoch log of training MSE).
    """
    if len(data) == 0:
        raise DefenseError("cannot train a denoiser on an empty dataset")
    lo, hi = float(sigma_range[0]), float(sigma_range[1])
    if lo < 0 or hi < lo:
        raise DefenseError(f"bad sigma range ({lo}, {hi})")
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, noise_ss = ss.spawn(2)
    init_rng = np.random.default_rng(init_ss)
    weights = {}
    for name, shape in _denoiser_weight_shapes(DENOISER_ARCH).items():
        if name.endswith("_b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            weights[name] = init_rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    dn = DenoiserParams(weights=weights, sigma_max=hi, arch=DENOISER_ARCH)
    rng = np.random.default_rng(noise_ss)
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            clean = data.images[idx]
            sigma = float(rng.uniform(lo, hi)) if hi > lo else hi
            noise = sigma * rng.standard_normal(clean.shape) if sigma > 0 else np.zeros_like(clean)
            tape = Tape()
            pred, wt = _denoiser_forward(tape, dn, clean + noise, sigma)
            mse = tape.mse(pred, noise)
            epoch_losses.append(mse.item())
            names = list(wt)
            for name, g in zip(names, gradients(tape, mse, [wt[n] for n in names])):
                dn.weights[name] = dn.weights[name] - cfg.learning_rate * g.array
        log.append({"epoch": epoch, "loss": float(np.mean(epoch_losses))})
    return dn, log


def diffusion_purify(x: np.ndarray, spec: DiffusionSpec, denoiser,
                     seed: int = 0) -> np.ndarray:
    """Forward diffusion followed by stepwise noise removal.

    At reverse step t the predictor estimates the noise still present and
    the update removes the variance fraction contributed by that step:
    x <- x - (sigma_t^2 / sigma_cum^2) * predicted_noise. The output is
    clamped into [0, 1]. The denoiser must cover spec.sigma.
    """
    if spec.sigma == 0:
        return x.copy()
    sigma_max = getattr(denoiser, "sigma_max", float("inf"))
    if spec.sigma > sigma_max + 1e-12:
        raise DefenseError(
            f"sigma {spec.sigma} exceeds the denoiser's trained range {sigma_max}")
    increments = spec.increments()
    cumulative = np.sqrt(np.cumsum(increments ** 2))
    current = forward_diffuse(x, spec, seed=seed)
    for t in range(spec.steps - 1, -1, -1):
        sig_cum = cumulative[t]
        predicted = denoiser.predict(current, sig_cum)
        current = current - (increments[t] ** 2 / sig_cum ** 2) * predicted
    return np.clip(current, 0.0, 1.0)


def save_denoiser(path, dn: DenoiserParams):
    checkpoint.save_checkpoint(path, "denoiser", dn.arch, dn.weights,
                               extra={"sigma_max": dn.sigma_max})


def load_denoiser(path) -> DenoiserParams:
    kind, arch, weights, extra = checkpoint.load_checkpoint(path)
    if kind != "denoiser":
        raise DefenseError(f"{path} holds a {kind!r} checkpoint, not a denoiser")
    return DenoiserParams(weights=weights, sigma_max=float(extra["sigma_max"]), arch=arch)
