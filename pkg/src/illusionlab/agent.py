"""Imitation defense driven by a pluggable multimodal generative agent.

Three backends share one record format: `remote` talks to an
OpenAI-compatible chat endpoint, `replay-fixture` replays stored
request/reply pairs with zero network traffic, and `oracle-mock` returns
a canonical clean exemplar of the true class for offline evaluation.

The module deliberately never compares its output to the input pixels;
the only downstream contract is that the classifier labels the
reconstruction correctly.
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .model import INPUT_SHAPE


class AgentError(ValueError):
    pass


class PromptError(ValueError):
    pass


DEFAULT_IMITATION_PROMPT = (
    "Let's generate an imitative image step by step, assuming no prior "
    "knowledge of the main object in the provided image, as if encountering "
    "it for the first time. Begin by observing the object closely, focusing "
    "on its key features. Next, create an internal representation of the "
    "object. Finally, replicate the object in a photorealistic image, "
    "preserving its defining characteristics for accurate recognition by "
    "both humans and machines."
)


@dataclass
class Prompt:
    template: str = DEFAULT_IMITATION_PROMPT
    slots: dict = field(default_factory=dict)


def render_prompt(prompt: Prompt, slots: dict | None = None) -> str:
    """Fill the template's named slots; deterministic for identical bindings."""
    if not prompt.template:
        raise PromptError("prompt template is empty")
    bindings = dict(prompt.slots)
    if slots:
        bindings.update(slots)
    try:
        rendered = prompt.template.format_map(bindings)
    except KeyError as exc:
        raise PromptError(f"unbound prompt slot: {exc.args[0]}") from exc
    if not rendered:
        raise PromptError("rendered prompt is empty")
    return rendered


@dataclass
class AgentConfig:
    backend: str = "oracle-mock"  # oracle-mock | replay-fixture | remote
    endpoint: str = ""
    model: str = ""
    token_env: str = "ILLUSIONLAB_API_TOKEN"
    timeout: float = 30.0
    retries: int = 2
    request_delay: float = 0.0
    fixture_dir: str = ""

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.backend not in ("oracle-mock", "replay-fixture", "remote"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass
class ImitationRecord:
    input_digest: str
    prompt: str
    transcript: str
    output: np.ndarray | None
    latency: float
    backend: str
    ok: bool
    error: str = ""


# ----------------------------------------------------------------------
# wire codec

def encode_image_payload(img: np.ndarray) -> dict:
    """Lossless image payload: little-endian float64 bytes plus shape."""
    arr = np.ascontiguousarray(img, dtype="<f8")
    return {
        "format": "f64-raw",
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def encode_image_payload_png(img: np.ndarray) -> dict:
    """8-bit PNG payload for providers that only accept standard images."""
    from PIL import Image as PILImage

    gray = np.round(np.clip(img[:, :, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(gray, mode="L").save(buf, format="PNG")
    return {"format": "png-8", "data": base64.b64encode(buf.getvalue()).decode("ascii")}


def decode_image_payload(payload: dict) -> np.ndarray:
    fmt = payload.get("format")
    if fmt == "f64-raw":
        raw = base64.b64decode(payload["data"])
        shape = tuple(int(s) for s in payload["shape"])
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if fmt == "png-8":
        from PIL import Image as PILImage

        raw = base64.b64decode(payload["data"])
        img = PILImage.open(io.BytesIO(raw)).convert("L")
        return (np.asarray(img, dtype=np.float64) / 255.0)[:, :, None]
    raise AgentError(f"unknown image payload format {fmt!r}")


def normalize_agent_output(img: np.ndarray) -> np.ndarray:
    """Grayscale + area-average resize to the classifier's input shape."""
    from PIL import Image as PILImage

    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] > 1:
        arr = arr.mean(axis=2, keepdims=True)
    side = INPUT_SHAPE[0]
    if arr.shape[0] != side or arr.shape[1] != side:
        pil = PILImage.fromarray(arr[:, :, 0].astype(np.float32), mode="F")
        arr = np.asarray(pil.resize((side, side), PILImage.BOX),
                         dtype=np.float64)[:, :, None]
    return np.clip(arr, 0.0, 1.0)


def image_digest(x: np.ndarray) -> str:
    from .attacks import image_digest as _digest

    return _digest(x)


# ----------------------------------------------------------------------
# request/reply plumbing

def build_chat_request(prompt_text: str, payload: dict, model: str) -> dict:
    return {
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt_text},
                {"type": "image_payload", "image_payload": payload},
            ],
        }],
    }


def extract_reply(reply: dict):
    """Pull (image payload, transcript text) out of a chat-completion reply.

    Accepts either our canonical image_payload content part or an
    image_url data URL carrying a base64 PNG.
    """
    try:
        message = reply["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise AgentError(f"malformed reply: {exc}") from exc
    texts = []
    payload = None
    content = message.get("content", [])
    if isinstance(content, str):
        texts.append(content)
        content = []
    for part in content:
        kind = part.get("type")
        if kind == "text":
            texts.append(part.get("text", ""))
        elif kind == "image_payload":
            payload = part.get("image_payload")
        elif kind == "image_url":
            url = part.get("image_url", {}).get("url", "")
            prefix = "data:image/png;base64,"
            if url.startswith(prefix):
                payload = {"format": "png-8", "data": url[len(prefix):]}
    if payload is None:
        raise AgentError("reply carries no image")
    return payload, "\n".join(texts)


def _http_post_json(url: str, body: dict, timeout: float, token: str | None):
    """Single network seam; everything remote funnels through here."""
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    resp = requests.post(url, json=body, headers=headers, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


_remote_lock = threading.Lock()
_last_request_at = [0.0]


def _remote_call(cfg: AgentConfig, body: dict) -> dict:
    token = os.environ.get(cfg.token_env) or None
    last_error = None
    for _ in range(cfg.retries + 1):
        with _remote_lock:  # at most one in-flight request
            wait = cfg.request_delay - (time.monotonic() - _last_request_at[0])
            if wait > 0:
                time.sleep(wait)
            try:
                reply = _http_post_json(cfg.endpoint, body, cfg.timeout, token)
                _last_request_at[0] = time.monotonic()
                return reply
            except (requests.ConnectionError, requests.Timeout,
                    requests.HTTPError) as exc:
                _last_request_at[0] = time.monotonic()
                last_error = exc
    raise AgentError(f"remote agent unreachable: {last_error}")


# ----------------------------------------------------------------------
# fixtures

def fixture_path(fixture_dir, digest: str) -> str:
    return os.path.join(fixture_dir, f"{digest}.json")


def save_fixture(fixture_dir, digest: str, request: dict, reply: dict):
    os.makedirs(fixture_dir, exist_ok=True)
    with open(fixture_path(fixture_dir, digest), "w") as fh:
        json.dump({"digest": digest, "request": request, "reply": reply},
                  fh, sort_keys=True)


def load_fixture(fixture_dir, digest: str) -> dict:
    with open(fixture_path(fixture_dir, digest)) as fh:
        return json.load(fh)


# ----------------------------------------------------------------------
# backends

def oracle_mock(x_prime: np.ndarray, true_label: int, exemplar_bank: dict,
                jitter: float = 0.0, seed: int = 0) -> np.ndarray:
    """Offline stand-in: return the stored canonical exemplar of the true
    class, optionally with seeded mild jitter."""
    if true_label not in exemplar_bank:
        raise AgentError(f"no exemplar stored for class {true_label}")
    exemplar = exemplar_bank[true_label]
    if jitter > 0:
        rng = np.random.default_rng(seed)
        return np.clip(exemplar + rng.normal(0.0, jitter, exemplar.shape), 0.0, 1.0)
    return exemplar.copy()


def imitate(x_prime: np.ndarray, prompt: Prompt, cfg: AgentConfig,
            true_label: int | None = None,
            exemplar_bank: dict | None = None) -> ImitationRecord:
    """Transform a possibly attacked sample through the configured backend.

    Failures (timeout budget exhausted, malformed reply, missing fixture)
    produce a failure record rather than raising, so matrix runs keep
    going and count the sample as misclassified.
    """
    digest = image_digest(x_prime)
    text = render_prompt(prompt)
    started = time.perf_counter()

    def record(output, transcript, ok=True, error=""):
        return ImitationRecord(
            input_digest=digest, prompt=text, transcript=transcript,
            output=output, latency=time.perf_counter() - started,
            backend=cfg.backend, ok=ok, error=error)

    if cfg.backend == "oracle-mock":
        if true_label is None or exemplar_bank is None:
            raise AgentError("oracle-mock needs the true label and an exemplar bank")
        out = oracle_mock(x_prime, true_label, exemplar_bank)
        return record(normalize_agent_output(out),
                      f"oracle-mock exemplar for class {true_label}")

    if cfg.backend == "replay-fixture":
        path = fixture_path(cfg.fixture_dir, digest)
        if not os.path.exists(path):
            return record(None, "", ok=False, error=f"missing fixture {digest}")
        stored = load_fixture(cfg.fixture_dir, digest)
        try:
            payload, transcript = extract_reply(stored["reply"])
            return record(normalize_agent_output(decode_image_payload(payload)),
                          transcript)
        except AgentError as exc:
            return record(None, "", ok=False, error=str(exc))

    # remote
    body = build_chat_request(text, encode_image_payload(x_prime), cfg.model)
    try:
        reply = _remote_call(cfg, body)
        payload, transcript = extract_reply(reply)
        out = normalize_agent_output(decode_image_payload(payload))
    except AgentError as exc:
        return record(None, "", ok=False, error=str(exc))
    if cfg.fixture_dir:
        save_fixture(cfg.fixture_dir, digest, body, reply)
    return record(out, transcript)
