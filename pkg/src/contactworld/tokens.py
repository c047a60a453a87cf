"""Discrete-token machinery: factorized vocabularies, finite-scalar
quantization, entropy regularization, masking strategies, and iterative
masked decoding against a pluggable predictor.

Token indices factor into k digits base v_f (least-significant digit
first), so prediction heads emit k*v_f logits instead of v. The MASK
sentinel is ``vocab.mask_token == v``, one past the vocabulary, and is
never produced by decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Protocol, Sequence

import numpy as np


@dataclass(frozen=True)
class FactorizedVocab:
    """Vocabulary of size v decomposed into k digits base v_f (v_f**k == v)."""

    v: int
    k: int
    v_f: int

    def __post_init__(self):
        if self.k < 1 or self.v_f < 2:
            raise ValueError("need k >= 1 and v_f >= 2")
        if self.v_f**self.k != self.v:
            raise ValueError(f"v_f**k = {self.v_f**self.k} != v = {self.v}")

    @classmethod
    def of(cls, v_f: int, k: int) -> "FactorizedVocab":
        return cls(v=v_f**k, k=k, v_f=v_f)

    @property
    def mask_token(self) -> int:
        return self.v


def decompose(z: int, vocab: FactorizedVocab) -> tuple[int, ...]:
    """Digits of z base v_f, least significant first."""
    if not 0 <= z < vocab.v:
        raise ValueError(f"token {z} out of range [0, {vocab.v})")
    digits = []
    for _ in range(vocab.k):
        z, d = divmod(z, vocab.v_f)
        digits.append(d)
    return tuple(digits)


def compose(digits: Sequence[int], vocab: FactorizedVocab) -> int:
    """Inverse of decompose."""
    if len(digits) != vocab.k:
        raise ValueError(f"expected {vocab.k} digits, got {len(digits)}")
    z = 0
    for d in reversed(digits):
        if not 0 <= d < vocab.v_f:
            raise ValueError(f"digit {d} out of range [0, {vocab.v_f})")
        z = z * vocab.v_f + d
    return z


def decompose_array(tokens: np.ndarray, vocab: FactorizedVocab) -> np.ndarray:
    """Vectorized decompose; returns digits with a trailing axis of length k."""
    tokens = np.asarray(tokens)
    digits = np.empty(tokens.shape + (vocab.k,), dtype=np.int64)
    rest = tokens.astype(np.int64)
    for j in range(vocab.k):
        digits[..., j] = rest % vocab.v_f
        rest = rest // vocab.v_f
    return digits


def compose_array(digits: np.ndarray, vocab: FactorizedVocab) -> np.ndarray:
    tokens = np.zeros(digits.shape[:-1], dtype=np.int64)
    for j in reversed(range(vocab.k)):
        tokens = tokens * vocab.v_f + digits[..., j]
    return tokens


# ---------------------------------------------------------------------------
# finite-scalar quantization


@dataclass(frozen=True)
class FsqSpec:
    """Per-channel level counts; levels sit on a uniform grid over [-1, 1]."""

    levels: tuple[int, ...] = (4, 4, 4, 4, 4, 4)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        if not self.levels or any(l < 2 for l in self.levels):
            raise ValueError("each channel needs at least 2 levels")

    @property
    def vocab_size(self) -> int:
        return int(np.prod(self.levels))


def fsq_quantize(latent, spec: FsqSpec) -> int:
    """Snap each channel to its nearest level and compose a token index.

    Channels are clamped to [-1, 1]; channel c contributes a digit base
    levels[c], channel 0 least significant.
    """
    latent = np.asarray(latent, dtype=float)
    if latent.shape != (len(spec.levels),):
        raise ValueError(f"latent must have {len(spec.levels)} channels")
    if not np.all(np.isfinite(latent)):
        raise ValueError("non-finite latent")
    index = 0
    base = 1
    for x, l in zip(latent, spec.levels):
        x = min(1.0, max(-1.0, float(x)))
        t = (x + 1.0) / 2.0 * (l - 1)
        digit = min(int(math.floor(t + 0.5)), l - 1)
        index += digit * base
        base *= l
    return index


def fsq_dequantize(index: int, spec: FsqSpec) -> np.ndarray:
    """Level-center coordinates for a token index (inverse of fsq_quantize)."""
    if not 0 <= index < spec.vocab_size:
        raise ValueError(f"index {index} out of range [0, {spec.vocab_size})")
    out = np.empty(len(spec.levels))
    for c, l in enumerate(spec.levels):
        index, digit = divmod(index, l)
        out[c] = -1.0 + 2.0 * digit / (l - 1)
    return out


# ---------------------------------------------------------------------------
# entropy regularization


def entropy_loss(probs, alpha_sample: float = 1.0, alpha_batch: float = 1.0) -> float:
    """Per-sample entropy minus batch-distribution entropy (natural log).

    probs is (N, V), each row a categorical distribution. The sample term
    pushes individual assignments toward determinism, the batch term pulls
    usage toward uniformity.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2:
        raise ValueError("probs must be (N, V)")
    if probs.min() < 0:
        raise ValueError("negative probability")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("rows must sum to 1 within 1e-6")

    def entropy(p):
        return float(-np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)))

    h_sample = float(np.mean([entropy(row) for row in probs]))
    h_batch = entropy(probs.mean(axis=0))
    return alpha_sample * h_sample - alpha_batch * h_batch


# ---------------------------------------------------------------------------
# token grids and masking


@dataclass(frozen=True)
class TokenGrid:
    """T x S grid of token indices (MASK sentinel allowed), with history count."""

    tokens: np.ndarray
    t_hist: int
    h: int
    w: int
    vocab: FactorizedVocab

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64).copy()
        if tokens.ndim != 2 or tokens.shape[1] != self.h * self.w:
            raise ValueError(f"tokens must be (T, {self.h * self.w})")
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) > self.vocab.mask_token:
            raise ValueError("token out of range")
        if not 0 <= self.t_hist <= tokens.shape[0]:
            raise ValueError("t_hist out of range")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def spatial_size(self) -> int:
        return self.h * self.w

    def with_tokens(self, tokens: np.ndarray) -> "TokenGrid":
        return TokenGrid(tokens=tokens, t_hist=self.t_hist, h=self.h, w=self.w,
                         vocab=self.vocab)


def cosine_mask_prob(u: float) -> float:
    """Mask probability cos(pi/2 * u) for u in [0, 1]."""
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    return math.cos(math.pi / 2.0 * u)


def apply_mlm_mask(grid: TokenGrid, rng,
                   frame_u: Sequence[float] | None = None
                   ) -> tuple[TokenGrid, np.ndarray]:
    """Per-frame cosine-schedule masking; frame 0 is never masked.

    For every frame t >= 1 a mask probability p_t = cos(pi/2 * u_t) is
    drawn (u_t uniform, or taken from ``frame_u`` when given) and each
    spatial position is masked i.i.d. Returns (masked grid, boolean mask).
    """
    tokens = np.array(grid.tokens)
    mask = np.zeros(tokens.shape, dtype=bool)
    for t in range(1, grid.n_frames):
        u = float(frame_u[t]) if frame_u is not None else float(rng.random())
        p = cosine_mask_prob(u)
        mask[t] = rng.random(grid.spatial_size) < p
    tokens[mask] = grid.vocab.mask_token
    return grid.with_tokens(tokens), mask


def ar_ramp_prob(t: int, t_star: int, n_frames: int) -> float:
    """Corruption probability ramp: 0.5 at the boundary frame, 1.0 at the end."""
    if n_frames - 1 == t_star:
        return 1.0
    return 0.5 + 0.5 * (t - t_star) / (n_frames - 1 - t_star)


def apply_ar_mask(grid: TokenGrid, rng,
                  t_star: int | None = None) -> tuple[TokenGrid, np.ndarray]:
    """Autoregressive-style masking behind a uniformly drawn boundary frame.

    Frames before t_star are untouched; frames from t_star on are masked
    i.i.d. with probabilities nondecreasing in the frame index.
    """
    if grid.t_hist < 1:
        raise ValueError("need at least one history frame")
    if grid.t_hist > grid.n_frames - 1:
        raise ValueError("no future frames to mask")
    if t_star is None:
        t_star = int(rng.integers(grid.t_hist, grid.n_frames))
    if not grid.t_hist <= t_star <= grid.n_frames - 1:
        raise ValueError("t_star out of range")
    tokens = np.array(grid.tokens)
    mask = np.zeros(tokens.shape, dtype=bool)
    for t in range(t_star, grid.n_frames):
        p = ar_ramp_prob(t, t_star, grid.n_frames)
        mask[t] = rng.random(grid.spatial_size) < p
    tokens[mask] = grid.vocab.mask_token
    return grid.with_tokens(tokens), mask


def random_corruption(grid: TokenGrid, r_max: float, rng,
                      u: float | None = None) -> TokenGrid:
    """Replace factored digits with uniform draws at rate r_max * u.

    u is drawn once per call (per batch); each digit of each non-MASK
    token is independently redrawn from Uniform{0..v_f-1} with that
    probability. MASK entries are left untouched.
    """
    if not 0.0 <= r_max <= 1.0:
        raise ValueError("r_max must lie in [0, 1]")
    if u is None:
        u = float(rng.random())
    rate = r_max * u
    vocab = grid.vocab
    tokens = np.array(grid.tokens)
    masked = tokens == vocab.mask_token
    digits = decompose_array(np.where(masked, 0, tokens), vocab)
    hit = rng.random(digits.shape) < rate
    repl = rng.integers(0, vocab.v_f, size=digits.shape)
    digits = np.where(hit, repl, digits)
    corrupted = compose_array(digits, vocab)
    return grid.with_tokens(np.where(masked, tokens, corrupted))


# ---------------------------------------------------------------------------
# confidence and iterative decoding


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def confidence(logit_factors) -> float:
    """Product over factors of the max softmax probability; lies in (0, 1]."""
    arr = np.asarray(logit_factors, dtype=float)
    if arr.ndim != 2:
        raise ValueError("logit_factors must be (k, v_f)")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite logits")
    return float(np.prod(softmax(arr, axis=-1).max(axis=-1)))


@dataclass(frozen=True)
class MaskSchedule:
    """Iterative decoding schedule: step count, sampling temperature, unmask mode."""

    n_steps: int
    temperature: float = 1.0
    mode: str = "greedy"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.mode not in ("greedy", "random"):
            raise ValueError("mode must be 'greedy' or 'random'")


def remaining_masked(i: int, n_steps: int, n_positions: int) -> int:
    """Positions left masked after iteration i: ceil(S * cos(pi/2 * (i+1)/N)).

    The final iteration is pinned to 0 (the cosine hits zero exactly there;
    floating-point residue must not leave a position masked).
    """
    if i + 1 >= n_steps:
        return 0
    gamma = math.cos(math.pi / 2.0 * (i + 1) / n_steps)
    return math.ceil(gamma * n_positions)


def mask_count_trace(schedule: MaskSchedule, n_positions: int) -> list[int]:
    return [remaining_masked(i, schedule.n_steps, n_positions)
            for i in range(schedule.n_steps)]


class PredictorOutput(NamedTuple):
    video_logits: np.ndarray  # (S, k, v_f)
    contact_logits: np.ndarray | None = None
    joint_angles: np.ndarray | None = None


class Predictor(Protocol):
    """Forward interface consumed by the decoder.

    Given the full token grid (MASK sentinels included), the action and
    joint sequences, and the target frame index, returns factored logits
    for every position of that frame (plus optional contact and joint
    heads).
    """

    def predict_frame(self, grid: TokenGrid, actions, joints,
                      frame: int) -> PredictorOutput: ...


class TableLookupPredictor:
    """Deterministic oracle: saturated logits pointing at a fixed target grid.

    The margin is large enough that softmax puts probability exactly 1.0
    on the target digit in float64, so sampling at any reasonable
    temperature reproduces the target.
    """

    def __init__(self, target_tokens: np.ndarray, vocab: FactorizedVocab,
                 margin: float = 1e6):
        self.target = np.asarray(target_tokens, dtype=np.int64)
        self.vocab = vocab
        self.margin = margin

    def predict_frame(self, grid: TokenGrid, actions, joints,
                      frame: int) -> PredictorOutput:
        s = grid.spatial_size
        digits = decompose_array(self.target[frame], self.vocab)  # (S, k)
        logits = np.zeros((s, self.vocab.k, self.vocab.v_f))
        pos = np.arange(s)[:, None]
        fac = np.arange(self.vocab.k)[None, :]
        logits[pos, fac, digits] = self.margin
        return PredictorOutput(video_logits=logits)


class FrameDecodeResult(NamedTuple):
    tokens: np.ndarray                # (S,) decoded frame, no MASK entries
    mask_trace: list[int]             # masked count after each iteration
    commit_history: list[np.ndarray]  # positions committed per iteration, in order


class RolloutResult(NamedTuple):
    grid: TokenGrid
    mask_traces: list[list[int]]


def _sample_factored(logits: np.ndarray, temperature: float, rng
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Sample digits per position/factor; returns (digits, their probabilities)."""
    probs = softmax(logits / temperature, axis=-1)
    cum = probs.cumsum(axis=-1)
    u = rng.random(probs.shape[:-1])
    idx = np.sum(cum <= u[..., None], axis=-1)
    idx = np.minimum(idx, probs.shape[-1] - 1)
    chosen = np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0]
    return idx, chosen


def decode_frame(predictor: Predictor, context: TokenGrid, frame: int,
                 schedule: MaskSchedule, rng, actions=None,
                 joints=None) -> FrameDecodeResult:
    """Iteratively decode one frame from all-masked to fully committed.

    Each iteration samples tokens for the still-masked positions at the
    schedule temperature, scores them by the product over factors of the
    sampled digits' probabilities, and leaves the ``remaining_masked``
    lowest-confidence positions masked (greedy mode) or a uniform random
    subset (random mode). Committed positions are never re-masked; ties
    commit the lowest flat position index first.
    """
    if not 0 <= frame < context.n_frames:
        raise ValueError("frame out of range")
    if np.any(context.tokens[:frame] == context.vocab.mask_token):
        raise ValueError("frames before the target must be fully populated")
    s = context.spatial_size
    vocab = context.vocab
    tokens = np.zeros(s, dtype=np.int64)
    still_masked = np.ones(s, dtype=bool)
    work = np.array(context.tokens)
    trace: list[int] = []
    history: list[np.ndarray] = []

    for i in range(schedule.n_steps):
        work[frame] = np.where(still_masked, vocab.mask_token, tokens)
        out = predictor.predict_frame(context.with_tokens(work), actions,
                                      joints, frame)
        digits, digit_probs = _sample_factored(out.video_logits,
                                               schedule.temperature, rng)
        conf = digit_probs.prod(axis=-1)  # (S,)
        sampled = compose_array(digits, vocab)

        n_remain = remaining_masked(i, schedule.n_steps, s)
        candidates = np.flatnonzero(still_masked)
        n_commit = len(candidates) - n_remain
        commit = np.empty(0, dtype=np.int64)
        if n_commit > 0:
            if schedule.mode == "greedy":
                order = candidates[np.argsort(-conf[candidates], kind="stable")]
                commit = order[:n_commit]
            else:
                commit = rng.choice(candidates, size=n_commit, replace=False)
            tokens[commit] = sampled[commit]
            still_masked[commit] = False
        trace.append(int(still_masked.sum()))
        history.append(commit)

    assert not still_masked.any()
    return FrameDecodeResult(tokens=tokens, mask_trace=trace,
                             commit_history=history)


def decode_rollout(predictor: Predictor, context: TokenGrid, n_future: int,
                   schedule: MaskSchedule, rng, actions=None,
                   joints=None) -> RolloutResult:
    """Decode ``n_future`` frames autoregressively starting at t_hist.

    Each decoded frame is committed into the grid before the next frame is
    decoded; already-committed frames are never revisited.
    """
    if n_future < 0:
        raise ValueError("n_future must be nonnegative")
    if context.t_hist + n_future > context.n_frames:
        raise ValueError("rollout exceeds grid length")
    grid = context
    traces: list[list[int]] = []
    for frame in range(context.t_hist, context.t_hist + n_future):
        result = decode_frame(predictor, grid, frame, schedule, rng,
                              actions=actions, joints=joints)
        tokens = np.array(grid.tokens)
        tokens[frame] = result.tokens
        grid = grid.with_tokens(tokens)
        traces.append(result.mask_trace)
    return RolloutResult(grid=grid, mask_traces=traces)
