"""Online collision gate: sample a candidate action, imagine a rollout,
ask a judge, and resample or retreat.

The judge sees a fixed prompt (stored under prompts/ and treated as a
golden artifact) plus three image tiles: history RGB, predicted future
RGB, predicted future contact map, tiled left-to-right in time order.
Any judge failure (transport or unparsable verdict) counts as a
rejection, so errors fail safe toward the retreat action.
"""

from __future__ import annotations

import base64
import io
import json
import os
import re
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Protocol

import numpy as np
import requests

_PROMPT_CACHE: str | None = None

DEFAULT_API_KEY_ENV = "CONTACTWORLD_JUDGE_API_KEY"


def prompt_template() -> str:
    """The verbatim judge prompt (byte-stable across releases)."""
    global _PROMPT_CACHE
    if _PROMPT_CACHE is None:
        _PROMPT_CACHE = resources.files("contactworld").joinpath(
            "prompts/collision_judge.txt").read_text(encoding="utf-8")
    return _PROMPT_CACHE


# ---------------------------------------------------------------------------
# verdicts


@dataclass(frozen=True)
class JudgeVerdict:
    collision_likely: bool
    confidence: float
    first_collision_frame: int
    explanation: str


class VerdictParseError(ValueError):
    """Judge response could not be turned into a verdict."""


class VerdictJsonError(VerdictParseError):
    """Response is not valid JSON (after stripping fences/whitespace)."""


class VerdictFieldError(VerdictParseError):
    """A required field is missing or has the wrong type."""


class VerdictRangeError(VerdictParseError):
    """confidence outside [0, 1] or first_collision_frame outside [0, 7]."""


_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\n(.*)\n```$", re.DOTALL)


def parse_verdict(raw: str) -> JudgeVerdict:
    """Strict parse of a judge response into a JudgeVerdict.

    Tolerates surrounding whitespace and a single markdown code fence,
    nothing else. Raises VerdictJsonError / VerdictFieldError /
    VerdictRangeError for the distinct failure modes.
    """
    text = raw.strip()
    fenced = _FENCE_RE.match(text)
    if fenced:
        text = fenced.group(1).strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VerdictJsonError(f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise VerdictFieldError("verdict must be a JSON object")

    def require(name, kind):
        if name not in obj:
            raise VerdictFieldError(f"missing field {name!r}")
        value = obj[name]
        if kind is bool:
            ok = isinstance(value, bool)
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise VerdictFieldError(f"field {name!r} has wrong type")
        return value

    collision = require("collision_likely", bool)
    confidence = float(require("confidence", float))
    frame = require("first_collision_frame", int)
    explanation = require("explanation", str)
    if not 0.0 <= confidence <= 1.0:
        raise VerdictRangeError(f"confidence {confidence} outside [0, 1]")
    if not 0 <= frame <= 7:
        raise VerdictRangeError(f"first_collision_frame {frame} outside [0, 7]")
    return JudgeVerdict(collision_likely=collision, confidence=confidence,
                        first_collision_frame=frame, explanation=explanation)


# ---------------------------------------------------------------------------
# prompt requests


@dataclass(frozen=True)
class PromptRequest:
    """Prompt text plus ordered image attachments (history, future, contact)."""

    text: str
    images: tuple[np.ndarray, np.ndarray, np.ndarray]


def tile_frames(frames) -> np.ndarray:
    """Tile frames left-to-right (time order) into one image row."""
    frames = [np.asarray(f) for f in frames]
    if not frames:
        raise ValueError("no frames to tile")
    heights = {f.shape[0] for f in frames}
    if len(heights) != 1:
        raise ValueError("frames must share a height")
    return np.concatenate(frames, axis=1)


def build_prompt(history_tile, future_tile, contact_tile) -> PromptRequest:
    """Assemble the judge request; the text is always the stored template."""
    tiles = []
    for name, tile in (("history", history_tile), ("future", future_tile),
                       ("contact", contact_tile)):
        if tile is None:
            raise ValueError(f"missing {name} image")
        tiles.append(np.asarray(tile))
    return PromptRequest(text=prompt_template(), images=tuple(tiles))


def encode_image_png(image: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.floor(255.0 * np.clip(arr, 0.0, 1.0) + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# judges


class JudgeTransportError(RuntimeError):
    """Judge could not be reached or returned an unusable payload."""


class JudgeInterface(Protocol):
    def judge(self, request: PromptRequest) -> JudgeVerdict: ...


class ScriptedJudge:
    """Replays canned responses; the test and simulation mock.

    Script format: {"responses": [str | object, ...], "cycle": bool}.
    String responses go through parse_verdict verbatim (so malformed
    payloads can be scripted); objects are serialized first.
    """

    def __init__(self, responses, cycle: bool = True):
        if not responses:
            raise ValueError("scripted judge needs at least one response")
        self.responses = list(responses)
        self.cycle = cycle
        self.calls = 0

    @classmethod
    def from_script_file(cls, path) -> "ScriptedJudge":
        with open(path) as fh:
            script = json.load(fh)
        return cls(script["responses"], cycle=script.get("cycle", True))

    def judge(self, request: PromptRequest) -> JudgeVerdict:
        if self.calls >= len(self.responses) and not self.cycle:
            raise JudgeTransportError("scripted responses exhausted")
        raw = self.responses[self.calls % len(self.responses)]
        self.calls += 1
        if not isinstance(raw, str):
            raw = json.dumps(raw)
        return parse_verdict(raw)


class HttpJudge:
    """Posts the prompt and base64 PNG images to a chat-completions-style
    endpoint. One attempt per call (zero retries); failures raise
    JudgeTransportError and the gate treats them as rejections."""

    def __init__(self, endpoint: str, model: str = "collision-judge",
                 api_key_env: str = DEFAULT_API_KEY_ENV,
                 timeout_s: float = 30.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    def _payload(self, request: PromptRequest) -> dict:
        content = [{"type": "text", "text": request.text}]
        for image in request.images:
            b64 = base64.b64encode(encode_image_png(image)).decode("ascii")
            content.append({"type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{b64}"}})
        return {"model": self.model,
                "messages": [{"role": "user", "content": content}]}

    def judge(self, request: PromptRequest) -> JudgeVerdict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(self.endpoint, json=self._payload(request),
                                 headers=headers, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise JudgeTransportError(f"judge request failed: {exc}") from exc
        if resp.status_code != 200:
            raise JudgeTransportError(f"judge returned HTTP {resp.status_code}")
        try:
            raw = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise JudgeTransportError(f"unexpected judge payload: {exc}") from exc
        return parse_verdict(raw)


# ---------------------------------------------------------------------------
# the gate loop


@dataclass(frozen=True)
class CandidateAction:
    v: np.ndarray  # commanded velocity, joystick units

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(3)
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite action")
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class GateConfig:
    """Gate policy: attempt budget, retreat command, acceptance rule.

    Acceptance gates on the collision flag alone. ``confidence_threshold``
    is an optional hook (off by default): when set, a collision flag only
    rejects if the judge's confidence reaches the threshold.
    """

    max_attempts: int = 3
    retreat_scale: float = 1.0
    confidence_threshold: float | None = None

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not self.retreat_scale > 0:
            raise ValueError("retreat_scale must be positive")

    @property
    def retreat_action(self) -> CandidateAction:
        return CandidateAction(v=np.array([0.0, 0.0, -self.retreat_scale]))

    def rejects(self, verdict: JudgeVerdict) -> bool:
        if not verdict.collision_likely:
            return False
        if self.confidence_threshold is None:
            return True
        return verdict.confidence >= self.confidence_threshold


@dataclass(frozen=True)
class RolloutTiles:
    history: np.ndarray
    future_rgb: np.ndarray
    future_contact: np.ndarray


class RolloutProvider(Protocol):
    def rollout(self, action: CandidateAction) -> RolloutTiles: ...


@dataclass
class AttemptRecord:
    attempt: int
    action: CandidateAction
    verdict: JudgeVerdict | None
    error: str | None
    latency_ms: float
    rejected: bool


@dataclass
class GateOutcome:
    action: CandidateAction
    attempts: list[AttemptRecord]
    retreated: bool


def gate_step(sampler: Callable[[], CandidateAction], rollout: RolloutProvider,
              judge: JudgeInterface, cfg: GateConfig,
              timer: Callable[[], float] = time.perf_counter) -> GateOutcome:
    """One gated control step.

    Samples up to cfg.max_attempts candidate actions; each is rolled out
    and judged. The first accepted candidate is executed. If every
    attempt is rejected (including judge failures, which fail safe), the
    retreat action is returned. Every attempt is logged in order.
    """
    attempts: list[AttemptRecord] = []
    for attempt in range(cfg.max_attempts):
        action = sampler()
        tiles = rollout.rollout(action)
        request = build_prompt(tiles.history, tiles.future_rgb,
                               tiles.future_contact)
        start = timer()
        verdict: JudgeVerdict | None = None
        error: str | None = None
        try:
            verdict = judge.judge(request)
        except (JudgeTransportError, VerdictParseError) as exc:
            error = f"{type(exc).__name__}: {exc}"
        latency_ms = (timer() - start) * 1000.0
        rejected = True if verdict is None else cfg.rejects(verdict)
        attempts.append(AttemptRecord(attempt=attempt, action=action,
                                      verdict=verdict, error=error,
                                      latency_ms=latency_ms, rejected=rejected))
        if not rejected:
            return GateOutcome(action=action, attempts=attempts, retreated=False)
    return GateOutcome(action=cfg.retreat_action, attempts=attempts,
                       retreated=True)


# ---------------------------------------------------------------------------
# simulation plumbing (seeded sampler and rollout for gate-sim)


class SeededActionSampler:
    """Gaussian candidate actions from a seeded stream."""

    def __init__(self, seed: int, scale: float = 1.0):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.scale = scale

    def __call__(self) -> CandidateAction:
        return CandidateAction(v=self.scale * self.rng.standard_normal(3))


class SyntheticRollout:
    """Deterministic stand-in rollout: action-seeded noise tiles.

    Produces history/future/contact tiles whose pixels depend on the
    provider seed, the call index, and the action, so simulated runs are
    reproducible without a world model in the loop.
    """

    def __init__(self, seed: int, frame_size: int = 32, n_history: int = 2,
                 n_future: int = 2):
        self.seed = seed
        self.frame_size = frame_size
        self.n_history = n_history
        self.n_future = n_future
        self.calls = 0

    def rollout(self, action: CandidateAction) -> RolloutTiles:
        mix = np.frombuffer(action.v.tobytes(), dtype=np.uint64)
        seq = np.random.SeedSequence([self.seed, self.calls, *map(int, mix)])
        self.calls += 1
        rng = np.random.Generator(np.random.PCG64(seq))
        size = self.frame_size

        def tile(n):
            frames = rng.integers(0, 256, size=(n, size, size, 3),
                                  dtype=np.uint8)
            return tile_frames(list(frames))

        return RolloutTiles(history=tile(self.n_history),
                            future_rgb=tile(self.n_future),
                            future_contact=tile(self.n_future))
