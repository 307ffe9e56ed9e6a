"""Chat-completion gateway: endpoint client, mocks, and the reasoning cache.

The wire format is the ubiquitous chat-completions JSON schema with inline
base64 image parts, so any compatible server works. A backend is anything
with ``send(payload) -> response``; the HTTP implementation and the test
mocks are interchangeable behind that seam. Retries with exponential
backoff, a global in-flight bound, and the content-addressed reasoning
cache all live in the gateway so callers stay oblivious.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Protocol

import numpy as np
import requests

from . import prompting
from .errors import (
    CacheCorrupt,
    ExhaustedRetries,
    ImageUnreadable,
    InvalidInput,
    InvalidResponse,
    MalformedNumber,
    OutOfRange,
    TransientBackendError,
    UnknownRequest,
    WrongCount,
)
from .kinematics import ControlSequence, KinematicState, Trajectory, rollout
from .prompting import (
    AblationFlags,
    OutputMode,
    PromptBundle,
    ReasoningOutput,
    parse_actions,
    parse_reasoning,
    parse_waypoints,
)

if TYPE_CHECKING:
    from .scene_log import Clip

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    path: str


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[TextPart | ImagePart, ...]


@dataclass(frozen=True)
class ChatRequest:
    """One sampling request against a chat endpoint."""

    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    num_candidates: int = 1
    max_tokens: int = 512
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.num_candidates < 1:
            raise InvalidInput(f"num_candidates must be >= 1, got {self.num_candidates}")
        if self.temperature < 0:
            raise InvalidInput(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class CandidateSet:
    """Completion texts for one request plus bookkeeping."""

    texts: tuple[str, ...]
    usage: dict
    latency_ms: float
    attempts: int = 1


def messages_from_bundle(bundle: PromptBundle, images: dict[str, str]) -> tuple[ChatMessage, ...]:
    """System + user messages, attaching the bundle's referenced cameras."""
    parts: list[TextPart | ImagePart] = [TextPart(bundle.user)]
    parts.extend(ImagePart(images[camera]) for camera in bundle.image_refs)
    return (
        ChatMessage(role="system", parts=(TextPart(bundle.system),)),
        ChatMessage(role="user", parts=tuple(parts)),
    )


def _encode_image(path: str) -> str:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageUnreadable(path) from exc
    mime = mimetypes.guess_type(path)[0] or "image/jpeg"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def build_payload(request: ChatRequest) -> dict:
    """Materialize the wire payload, inlining image files as data URLs."""
    messages = []
    for message in request.messages:
        content = []
        for part in message.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                content.append(
                    {"type": "image_url", "image_url": {"url": _encode_image(part.path)}}
                )
        messages.append({"role": message.role, "content": content})
    payload = {
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "n": request.num_candidates,
        "max_tokens": request.max_tokens,
    }
    if request.seed is not None:
        payload["seed"] = request.seed
    return payload


def payload_fingerprint(payload: dict) -> str:
    """Stable content hash of a wire payload (used by the replay backend)."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def send(self, payload: dict) -> dict: ...


class HttpBackend:
    """POSTs payloads to a chat-completions URL with bearer auth."""

    def __init__(self, url: str, api_key_env: str | None = None, timeout: float = 120.0):
        self.url = url
        self.timeout = timeout
        self._headers = {"Content-Type": "application/json"}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise InvalidInput(f"API key environment variable {api_key_env} is not set")
            self._headers["Authorization"] = f"Bearer {key}"
        self._session = requests.Session()

    def send(self, payload: dict) -> dict:
        try:
            response = self._session.post(
                self.url, json=payload, headers=self._headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransientBackendError(None, f"request failed: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(response.status_code)
        if response.status_code != 200:
            raise InvalidResponse(f"endpoint answered with status {response.status_code}")
        try:
            return response.json()
        except ValueError as exc:
            raise InvalidResponse(f"endpoint answered with non-JSON body: {exc}") from exc


@dataclass
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 0.5
    max_delay: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.base_delay * (2.0 ** attempt), self.max_delay)


class VlmGateway:
    """Backend plus retry policy plus a global in-flight bound."""

    def __init__(
        self,
        backend: Backend,
        retry: RetryPolicy | None = None,
        max_in_flight: int = 8,
    ):
        self.backend = backend
        self.retry = retry or RetryPolicy()
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, request: ChatRequest) -> CandidateSet:
        """Run one request, retrying transient failures with backoff.

        Returns exactly ``request.num_candidates`` texts or raises:
        transient exhaustion becomes ``ExhaustedRetries``, schema problems
        become ``InvalidResponse``, unreadable images ``ImageUnreadable``.
        """
        payload = build_payload(request)
        last_status: int | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            start = time.monotonic()
            try:
                with self._slots:
                    raw = self.backend.send(payload)
            except TransientBackendError as exc:
                last_status = exc.status
                logger.warning(
                    "transient backend failure (status %s), attempt %d/%d",
                    exc.status,
                    attempt,
                    self.retry.max_attempts,
                )
                if attempt < self.retry.max_attempts:
                    time.sleep(self.retry.delay(attempt - 1))
                continue
            latency_ms = (time.monotonic() - start) * 1000.0
            texts = _extract_texts(raw)
            if len(texts) != request.num_candidates:
                raise InvalidResponse(
                    f"expected {request.num_candidates} choices, got {len(texts)}"
                )
            return CandidateSet(
                texts=texts,
                usage=raw.get("usage", {}),
                latency_ms=latency_ms,
                attempts=attempt,
            )
        raise ExhaustedRetries(self.retry.max_attempts, last_status)


def _extract_texts(raw: dict) -> tuple[str, ...]:
    try:
        choices = raw["choices"]
        texts = tuple(choice["message"]["content"] for choice in choices)
    except (KeyError, TypeError) as exc:
        raise InvalidResponse(f"response does not match the chat schema: {exc}") from exc
    if not all(isinstance(t, str) for t in texts):
        raise InvalidResponse("choice contents must be strings")
    return texts


# --- reasoning cache --------------------------------------------------------

def _file_digest(path: str) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise ImageUnreadable(path) from exc


def reasoning_cache_key(
    model_id: str, bundle: PromptBundle, image_paths: list[str], ego_text: str
) -> str:
    """Content hash over model, prompts, image digests, and ego-state text.

    Clip-id marker lines are stripped first so the key depends only on the
    logical content, never on clip ids or file paths.
    """
    material = {
        "model": model_id,
        "system": prompting.strip_marker_lines(bundle.system),
        "user": prompting.strip_marker_lines(bundle.user),
        "images": [_file_digest(p) for p in image_paths],
        "ego": ego_text,
    }
    canonical = json.dumps(material, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ReasoningCache:
    """Two-level hash-prefix directory of single-entry JSON files.

    Writes go through a temp file and an atomic rename, so concurrent
    writers are safe; a per-key lock additionally guarantees that one
    process generates each entry at most once.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._guard = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def entry_path(self, key: str) -> Path:
        return self.root / key[:2] / key[2:4] / f"{key}.json"

    def key_lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def read(self, key: str) -> ReasoningOutput | None:
        """Return the cached entry, or None; quarantines corrupt entries."""
        path = self.entry_path(key)
        if not path.exists():
            return None
        try:
            record = json.loads(path.read_text("utf-8"))
            reasoning = record["reasoning"]
            return ReasoningOutput(
                scene_description=reasoning["scene_description"],
                recommended_action=reasoning["recommended_action"],
                reasoning=reasoning["reasoning"],
                raw=reasoning["raw"],
                degraded=reasoning.get("degraded", False),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            path.replace(path.with_suffix(path.suffix + ".quarantined"))
            raise CacheCorrupt(key) from exc

    def write(self, key: str, reasoning: ReasoningOutput, navigator_model: str) -> None:
        path = self.entry_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "key": key,
            "reasoning": {
                "scene_description": reasoning.scene_description,
                "recommended_action": reasoning.recommended_action,
                "reasoning": reasoning.reasoning,
                "raw": reasoning.raw,
                "degraded": reasoning.degraded,
            },
            "created_at": time.time(),
            "navigator_model": navigator_model,
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
        tmp.replace(path)


def get_or_generate_reasoning(
    clip: "Clip",
    gateway: VlmGateway,
    cache: ReasoningCache,
    model_id: str,
    temperature: float = 0.2,
    max_tokens: int = 512,
) -> ReasoningOutput:
    """Return the clip's reasoning, generating and caching it on a miss.

    A cache hit makes no backend call. Corrupt entries are quarantined and
    regenerated. Concurrent calls for the same content collapse into a
    single generation.
    """
    bundle = prompting.build_navigator_prompt(clip)
    ego_text = prompting.format_ego_state(clip.ego_state, clip.history)
    image_paths = [clip.images[camera] for camera in bundle.image_refs]
    key = reasoning_cache_key(model_id, bundle, image_paths, ego_text)

    with cache.key_lock(key):
        try:
            cached = cache.read(key)
        except CacheCorrupt:
            logger.warning("quarantined corrupt reasoning cache entry %s", key)
            cached = None
        if cached is not None:
            return cached
        request = ChatRequest(
            model_id=model_id,
            messages=messages_from_bundle(bundle, clip.images),
            temperature=temperature,
            num_candidates=1,
            max_tokens=max_tokens,
        )
        result = gateway.complete(request)
        reasoning = parse_reasoning(result.texts[0])
        cache.write(key, reasoning, navigator_model=model_id)
        return reasoning


# --- candidate prediction ---------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    """One driver completion: parsed payload or the parse error."""

    text: str
    trajectory: Trajectory | None = None
    controls: ControlSequence | None = None
    error: str | None = None

    @property
    def valid(self) -> bool:
        return self.trajectory is not None


def predict_candidates(
    clip: "Clip",
    flags: AblationFlags,
    gateway: VlmGateway,
    k: int,
    mode: OutputMode,
    model_id: str,
    temperature: float = 0.8,
    max_tokens: int = 512,
    seed: int | None = None,
) -> list[Candidate]:
    """Request k driver completions for a clip and parse each one.

    Always returns exactly k candidates; a candidate that fails to parse
    carries its error string instead of a trajectory. In action mode the
    parsed controls are rolled out from the clip's ego state.
    """
    bundle = prompting.build_driver_prompt(clip, flags, mode)
    request = ChatRequest(
        model_id=model_id,
        messages=messages_from_bundle(bundle, clip.images),
        temperature=temperature,
        num_candidates=k,
        max_tokens=max_tokens,
        seed=seed,
    )
    result = gateway.complete(request)

    expected = len(clip.future)
    candidates = []
    for text in result.texts:
        try:
            if mode is OutputMode.WAYPOINT:
                trajectory = parse_waypoints(text, expected, dt=clip.future.dt)
                controls = None
            else:
                controls = parse_actions(text, expected, dt=clip.future.dt)
                trajectory = rollout(
                    controls,
                    KinematicState(position=(0.0, 0.0), heading=0.0, speed=clip.ego_state.speed),
                )
            candidates.append(Candidate(text=text, trajectory=trajectory, controls=controls))
        except (WrongCount, MalformedNumber, OutOfRange) as exc:
            candidates.append(Candidate(text=text, error=f"{type(exc).__name__}: {exc}"))
    return candidates


# --- mock backends ----------------------------------------------------------

def _response(texts: list[str]) -> dict:
    return {
        "choices": [{"message": {"content": text}} for text in texts],
        "usage": {"total_tokens": sum(len(t.split()) for t in texts)},
    }


def _payload_user_text(payload: dict) -> str:
    chunks = []
    for message in payload.get("messages", []):
        if message.get("role") == "user":
            for part in message.get("content", []):
                if part.get("type") == "text":
                    chunks.append(part.get("text", ""))
    return "\n".join(chunks)


class EchoBackend:
    """Returns the same canned text for every candidate of every request."""

    def __init__(self, text: str):
        self.text = text

    def send(self, payload: dict) -> dict:
        return _response([self.text] * int(payload.get("n", 1)))


class CountingBackend:
    """Wraps a backend, counting calls and the peak number in flight."""

    def __init__(self, inner: Backend, hold_seconds: float = 0.0):
        self.inner = inner
        self.hold_seconds = hold_seconds
        self.calls = 0
        self.max_in_flight = 0
        self._active = 0
        self._lock = threading.Lock()

    def send(self, payload: dict) -> dict:
        with self._lock:
            self.calls += 1
            self._active += 1
            self.max_in_flight = max(self.max_in_flight, self._active)
        try:
            if self.hold_seconds:
                time.sleep(self.hold_seconds)
            return self.inner.send(payload)
        finally:
            with self._lock:
                self._active -= 1


class FlakyBackend:
    """Fails the first ``failures`` sends with the given statuses, then delegates."""

    def __init__(self, inner: Backend, statuses: list[int]):
        self.inner = inner
        self._statuses = list(statuses)
        self._lock = threading.Lock()

    def send(self, payload: dict) -> dict:
        with self._lock:
            if self._statuses:
                status = self._statuses.pop(0)
                raise TransientBackendError(status)
        return self.inner.send(payload)


class ScriptedOracleBackend:
    """Answers with the ground truth of the clip named in the user prompt.

    Candidate texts are the clip's future (or fitted controls, in action
    mode) serialized at full precision, plus zero-mean Gaussian noise of
    the configured sigma. The per-candidate RNG is derived from
    (seed, clip id, candidate index), so outputs are reproducible no
    matter how requests interleave across worker threads.
    """

    def __init__(
        self,
        clips: "list[Clip]",
        mode: OutputMode = OutputMode.WAYPOINT,
        noise_sigma: float = 0.0,
        seed: int = 0,
    ):
        self.clips = {clip.clip_id: clip for clip in clips}
        self.mode = mode
        self.noise_sigma = noise_sigma
        self.seed = seed

    def _rng(self, clip_id: str, index: int) -> np.random.Generator:
        material = f"{self.seed}|{clip_id}|{index}".encode("utf-8")
        digest = hashlib.sha256(material).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def _candidate_text(self, clip: "Clip", index: int) -> str:
        if self.mode is OutputMode.WAYPOINT:
            values = clip.future.points
        else:
            if clip.gt_controls is None:
                raise InvalidResponse(
                    f"scripted oracle in action mode needs gt_controls on clip {clip.clip_id}"
                )
            values = clip.gt_controls.steps
        if self.noise_sigma > 0:
            values = values + self._rng(clip.clip_id, index).normal(
                0.0, self.noise_sigma, values.shape
            )
        body = ", ".join(f"({a!r}, {b!r})" for a, b in values.tolist())
        return f"[{body}]"

    def send(self, payload: dict) -> dict:
        clip_id = prompting.extract_clip_id(_payload_user_text(payload))
        if clip_id is None or clip_id not in self.clips:
            raise UnknownRequest(f"clip marker {clip_id!r}")
        clip = self.clips[clip_id]
        n = int(payload.get("n", 1))
        return _response([self._candidate_text(clip, i) for i in range(n)])


class ReplayBackend:
    """Serves recorded responses by request fingerprint; unknown requests fail."""

    def __init__(self, transcript_path: str | Path):
        self._responses: dict[str, dict] = {}
        for line in Path(transcript_path).read_text("utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            self._responses[record["fingerprint"]] = record["response"]

    def send(self, payload: dict) -> dict:
        fingerprint = payload_fingerprint(payload)
        if fingerprint not in self._responses:
            raise UnknownRequest(fingerprint)
        return self._responses[fingerprint]


def record_transcript(entries: list[tuple[dict, dict]], path: str | Path) -> None:
    """Write (payload, response) pairs as a replayable transcript."""
    with Path(path).open("w", encoding="utf-8") as fp:
        for payload, response in entries:
            fp.write(
                json.dumps({"fingerprint": payload_fingerprint(payload), "response": response})
            )
            fp.write("\n")
