"""Pack and load episode archives: token streams, numeric arrays, metadata.

An archive is a directory or an uncompressed (stored) zip containing:

    video.bin            rgb token stream, little-endian u32, frame-major
    contact_splat.bin    contact token stream, same layout
    meta.json            schema-validated metadata (see schemas/)
    arrays/*.bin         numeric arrays in self-describing npy format
                         (dtype + shape header), float64 / int64 payloads

Packing is byte-deterministic: fixed file order, fixed zip timestamps,
sorted JSON keys. Loading validates sizes, shapes, and token ranges and
is lossless down to the float bits.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .splat import ContactRecord

CONTACT_MODES = {"no_contact": 0, "sticking": 1, "sliding": 2, "separating": 3}

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

_TOKEN_FILES = ("video.bin", "contact_splat.bin")


class DatasetFormatError(ValueError):
    """Archive contents are malformed (truncated, mis-shaped, out of range)."""


class MetaFormatError(DatasetFormatError):
    """meta.json is missing, unparsable, or fails schema validation."""


def _meta_schema() -> dict:
    text = resources.files("contactworld").joinpath(
        "schemas/episode_meta.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class DatasetMeta:
    """Stream-level metadata: grid size, codebook, frame count, segmentation."""

    tokens_per_frame: int
    codebook_size: int
    frame_count: int
    frame_rate: float
    segments: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "segments",
                           tuple((int(a), int(b)) for a, b in self.segments))
        cursor = 0
        for start, length in self.segments:
            if start != cursor or length < 1:
                raise ValueError("segments must be ordered, disjoint, and contiguous")
            cursor = start + length
        if cursor != self.frame_count:
            raise ValueError("segments must cover frame_count")


@dataclass
class EpisodeRecord:
    """One logged episode: token grids, proprioception, actions, physics."""

    rgb_tokens: np.ndarray       # (T, S) ints in [0, codebook_size)
    contact_tokens: np.ndarray   # (T, S)
    q: np.ndarray                # (T, N_j) joint positions
    qdot: np.ndarray             # (T, N_j) joint velocities
    actions: np.ndarray          # (T, 3)
    forces: list[list[ContactRecord]]
    mu_s: np.ndarray             # per step (T,) or per body (n_bodies,)
    mu_k: np.ndarray
    contact_mode: np.ndarray     # (T,) ints in {0..3}
    grid_h: int
    grid_w: int
    codebook_size: int
    frame_rate: float
    mu_mode: str = "per_step"
    reward: np.ndarray | None = None
    extra_meta: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return int(self.rgb_tokens.shape[0])

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_joints(self) -> int:
        return int(self.q.shape[1])

    def validate(self, horizon_bounds: tuple[int, int] = (300, 600)) -> None:
        t, s = self.frame_count, self.tokens_per_frame
        lo, hi = horizon_bounds
        if not lo <= t <= hi:
            raise ValueError(f"episode length {t} outside bounds [{lo}, {hi}]")
        for name in ("rgb_tokens", "contact_tokens"):
            tok = getattr(self, name)
            if tok.shape != (t, s):
                raise ValueError(f"{name} must be ({t}, {s})")
            if tok.min() < 0 or tok.max() >= self.codebook_size:
                raise ValueError(f"{name} outside [0, {self.codebook_size})")
        if self.q.shape != (t, self.n_joints) or self.qdot.shape != self.q.shape:
            raise ValueError("q/qdot shape mismatch")
        if self.actions.shape != (t, 3):
            raise ValueError("actions must be (T, 3)")
        if len(self.forces) != t:
            raise ValueError("forces must list one entry per step")
        if self.contact_mode.shape != (t,):
            raise ValueError("contact_mode must be (T,)")
        if self.contact_mode.min() < 0 or self.contact_mode.max() > 3:
            raise ValueError("contact_mode values must lie in {0..3}")
        if self.mu_mode not in ("per_step", "per_body"):
            raise ValueError("mu_mode must be per_step or per_body")
        if self.mu_mode == "per_step" and self.mu_s.shape != (t,):
            raise ValueError("per_step friction arrays must be (T,)")
        if self.mu_s.shape != self.mu_k.shape:
            raise ValueError("mu_s/mu_k shape mismatch")
        if self.reward is not None and self.reward.shape != (t,):
            raise ValueError("reward must be (T,)")


# ---------------------------------------------------------------------------
# low-level encoders


def token_bytes(tokens: np.ndarray) -> bytes:
    """Little-endian u32, frame-major then row-major within each frame."""
    return np.ascontiguousarray(tokens, dtype="<u4").tobytes()


def tokens_from_bytes(raw: bytes, frame_count: int, tokens_per_frame: int,
                      codebook_size: int) -> np.ndarray:
    expected = frame_count * tokens_per_frame * 4
    if len(raw) != expected:
        raise DatasetFormatError(
            f"token file holds {len(raw)} bytes, expected {expected}")
    tokens = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    tokens = tokens.reshape(frame_count, tokens_per_frame)
    if tokens.max(initial=0) >= codebook_size:
        raise DatasetFormatError(
            f"token value {tokens.max()} >= codebook size {codebook_size}")
    return tokens


def write_token_file(path, tokens: np.ndarray) -> None:
    Path(path).write_bytes(token_bytes(tokens))


def read_token_file(path, frame_count: int, tokens_per_frame: int,
                    codebook_size: int) -> np.ndarray:
    return tokens_from_bytes(Path(path).read_bytes(), frame_count,
                             tokens_per_frame, codebook_size)


def _array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0))
    return buf.getvalue()


def _array_from_bytes(raw: bytes, name: str) -> np.ndarray:
    try:
        return np.lib.format.read_array(io.BytesIO(raw))
    except Exception as exc:
        raise DatasetFormatError(f"array {name} unreadable: {exc}") from exc


def _meta_bytes(meta: dict) -> bytes:
    return (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# pack / load


def _episode_files(ep: EpisodeRecord) -> dict[str, bytes]:
    flat = np.array([[*c.p, *c.f] for step in ep.forces for c in step],
                    dtype=float).reshape(-1, 6)
    counts = np.array([len(step) for step in ep.forces], dtype=np.int64)
    meta = {
        "format_version": 1,
        "frame_count": ep.frame_count,
        "grid": {"h": ep.grid_h, "w": ep.grid_w},
        "tokens_per_frame": ep.tokens_per_frame,
        "codebook_size": ep.codebook_size,
        "frame_rate": ep.frame_rate,
        "n_joints": ep.n_joints,
        "mu_mode": ep.mu_mode,
        "has_reward": ep.reward is not None,
        "segments": [[0, ep.frame_count]],
    }
    files = {
        "meta.json": _meta_bytes(meta),
        "video.bin": token_bytes(ep.rgb_tokens),
        "contact_splat.bin": token_bytes(ep.contact_tokens),
        "arrays/q.bin": _array_bytes(ep.q.astype("<f8")),
        "arrays/qdot.bin": _array_bytes(ep.qdot.astype("<f8")),
        "arrays/actions.bin": _array_bytes(ep.actions.astype("<f8")),
        "arrays/forces.bin": _array_bytes(flat.astype("<f8")),
        "arrays/forces_count.bin": _array_bytes(counts.astype("<i8")),
        "arrays/mu_s.bin": _array_bytes(ep.mu_s.astype("<f8")),
        "arrays/mu_k.bin": _array_bytes(ep.mu_k.astype("<f8")),
        "arrays/contact_mode.bin": _array_bytes(ep.contact_mode.astype("<i8")),
    }
    if ep.reward is not None:
        files["arrays/reward.bin"] = _array_bytes(ep.reward.astype("<f8"))
    return files


def pack_episode(ep: EpisodeRecord, path,
                 horizon_bounds: tuple[int, int] = (300, 600)) -> None:
    """Write an episode archive (directory, or stored zip for .zip paths).

    Output bytes are deterministic for identical input. The episode is
    validated first; violations raise before anything is written.
    """
    ep.validate(horizon_bounds=horizon_bounds)
    files = _episode_files(ep)
    path = Path(path)
    if path.suffix == ".zip":
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(files):
                info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
                zf.writestr(info, files[name])
    else:
        for name in sorted(files):
            target = path / name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(files[name])


def _read_archive(path) -> dict[str, bytes]:
    path = Path(path)
    if path.is_file() and path.suffix == ".zip":
        with zipfile.ZipFile(path) as zf:
            return {name: zf.read(name) for name in zf.namelist()}
    if path.is_dir():
        out = {}
        for p in sorted(path.rglob("*")):
            if p.is_file():
                out[p.relative_to(path).as_posix()] = p.read_bytes()
        return out
    raise DatasetFormatError(f"no archive at {path}")


def _validate_meta(meta_raw: bytes, strict: bool) -> tuple[dict, dict]:
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MetaFormatError(f"meta.json is not valid JSON: {exc}") from exc
    schema = _meta_schema()
    known = set(schema["properties"])
    extra = {k: v for k, v in meta.items() if k not in known}
    if not strict:
        schema = dict(schema)
        schema["additionalProperties"] = True
    try:
        jsonschema.validate(meta, schema)
    except jsonschema.ValidationError as exc:
        raise MetaFormatError(f"meta.json schema violation: {exc.message}") from exc
    return meta, extra


def load_episode(path, strict: bool = True,
                 horizon_bounds: tuple[int, int] | None = None) -> EpisodeRecord:
    """Load an archive back into an EpisodeRecord (bit-exact inverse of pack).

    Strict mode rejects unknown meta.json fields; lax mode preserves them
    in ``extra_meta``. Truncated files, shape mismatches, and out-of-range
    tokens raise DatasetFormatError.
    """
    files = _read_archive(path)
    if "meta.json" not in files:
        raise MetaFormatError("meta.json missing")
    meta, extra = _validate_meta(files["meta.json"], strict)

    t = meta["frame_count"]
    s = meta["tokens_per_frame"]
    if meta["grid"]["h"] * meta["grid"]["w"] != s:
        raise MetaFormatError("grid does not match tokens_per_frame")
    codebook = meta["codebook_size"]

    for name in _TOKEN_FILES:
        if name not in files:
            raise DatasetFormatError(f"{name} missing")

    def arr(name):
        key = f"arrays/{name}.bin"
        if key not in files:
            raise DatasetFormatError(f"{key} missing")
        return _array_from_bytes(files[key], name)

    rgb = tokens_from_bytes(files["video.bin"], t, s, codebook)
    contact = tokens_from_bytes(files["contact_splat.bin"], t, s, codebook)
    counts = arr("forces_count")
    flat = arr("forces")
    if counts.shape != (t,) or counts.sum() != flat.shape[0]:
        raise DatasetFormatError("force table does not match per-step counts")
    forces = []
    cursor = 0
    for n in counts:
        step = [ContactRecord(p=row[:3], f=row[3:]) for row
                in flat[cursor:cursor + int(n)]]
        forces.append(step)
        cursor += int(n)

    ep = EpisodeRecord(
        rgb_tokens=rgb,
        contact_tokens=contact,
        q=arr("q"),
        qdot=arr("qdot"),
        actions=arr("actions"),
        forces=forces,
        mu_s=arr("mu_s"),
        mu_k=arr("mu_k"),
        contact_mode=arr("contact_mode"),
        grid_h=meta["grid"]["h"],
        grid_w=meta["grid"]["w"],
        codebook_size=codebook,
        frame_rate=meta["frame_rate"],
        mu_mode=meta["mu_mode"],
        reward=arr("reward") if meta["has_reward"] else None,
        extra_meta=extra,
    )
    try:
        bounds = horizon_bounds if horizon_bounds is not None else (1, t)
        ep.validate(horizon_bounds=bounds)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from exc
    return ep


# ---------------------------------------------------------------------------
# concatenated streams


@dataclass(frozen=True)
class ConcatView:
    """Episodes concatenated into one token stream with segment boundaries."""

    tokens: np.ndarray  # (total_frames, S)
    segments: tuple[tuple[int, int], ...]

    def iter_windows(self, window: int):
        """Yield (start, stop) for every window fully inside one segment."""
        if window < 1:
            raise ValueError("window must be positive")
        for start, length in self.segments:
            for off in range(length - window + 1):
                yield (start + off, start + off + window)


def concat_view(episodes, stream: str = "rgb") -> ConcatView:
    """Concatenate episode token grids in input order, recording segments."""
    attr = {"rgb": "rgb_tokens", "contact": "contact_tokens"}[stream]
    arrays = [getattr(ep, attr) for ep in episodes]
    if not arrays:
        return ConcatView(tokens=np.zeros((0, 0), dtype=np.int64), segments=())
    widths = {a.shape[1] for a in arrays}
    if len(widths) != 1:
        raise ValueError("episodes disagree on tokens per frame")
    segments = []
    cursor = 0
    for a in arrays:
        segments.append((cursor, a.shape[0]))
        cursor += a.shape[0]
    return ConcatView(tokens=np.concatenate(arrays, axis=0),
                      segments=tuple(segments))


# ---------------------------------------------------------------------------
# synthetic episodes (demos, round-trip tests, CLI determinism checks)


def random_episode(seed: int, frames: int | None = None, grid_h: int = 4,
                   grid_w: int = 4, codebook_size: int = 4096,
                   n_joints: int = 4, frame_rate: float = 50.0,
                   horizon_bounds: tuple[int, int] = (300, 600)) -> EpisodeRecord:
    rng = np.random.Generator(np.random.PCG64(seed))
    lo, hi = horizon_bounds
    t = int(rng.integers(lo, hi + 1)) if frames is None else frames
    s = grid_h * grid_w
    forces = []
    for _ in range(t):
        step = [ContactRecord(p=rng.normal(size=3), f=rng.normal(size=3))
                for _ in range(int(rng.integers(0, 4)))]
        forces.append(step)
    return EpisodeRecord(
        rgb_tokens=rng.integers(0, codebook_size, size=(t, s)),
        contact_tokens=rng.integers(0, codebook_size, size=(t, s)),
        q=rng.normal(size=(t, n_joints)),
        qdot=rng.normal(size=(t, n_joints)),
        actions=rng.normal(size=(t, 3)),
        forces=forces,
        mu_s=rng.uniform(0.2, 1.0, size=t),
        mu_k=rng.uniform(0.1, 0.8, size=t),
        contact_mode=rng.integers(0, 4, size=t),
        grid_h=grid_h,
        grid_w=grid_w,
        codebook_size=codebook_size,
        frame_rate=frame_rate,
        reward=rng.normal(size=t) if rng.random() < 0.5 else None,
    )


def episode_to_json(ep: EpisodeRecord) -> dict:
    """JSON-friendly episode (floats survive bit-exactly via repr round-trip)."""
    return {
        "grid": {"h": ep.grid_h, "w": ep.grid_w},
        "codebook_size": ep.codebook_size,
        "frame_rate": ep.frame_rate,
        "mu_mode": ep.mu_mode,
        "rgb_tokens": ep.rgb_tokens.tolist(),
        "contact_tokens": ep.contact_tokens.tolist(),
        "q": ep.q.tolist(),
        "qdot": ep.qdot.tolist(),
        "actions": ep.actions.tolist(),
        "forces": [[{"p": c.p.tolist(), "f": c.f.tolist()} for c in step]
                   for step in ep.forces],
        "mu_s": ep.mu_s.tolist(),
        "mu_k": ep.mu_k.tolist(),
        "contact_mode": ep.contact_mode.tolist(),
        "reward": None if ep.reward is None else ep.reward.tolist(),
    }


def episode_from_json(d: dict) -> EpisodeRecord:
    return EpisodeRecord(
        rgb_tokens=np.asarray(d["rgb_tokens"], dtype=np.int64),
        contact_tokens=np.asarray(d["contact_tokens"], dtype=np.int64),
        q=np.asarray(d["q"], dtype=float),
        qdot=np.asarray(d["qdot"], dtype=float),
        actions=np.asarray(d["actions"], dtype=float),
        forces=[[ContactRecord(p=np.asarray(c["p"], dtype=float),
                               f=np.asarray(c["f"], dtype=float))
                 for c in step] for step in d["forces"]],
        mu_s=np.asarray(d["mu_s"], dtype=float),
        mu_k=np.asarray(d["mu_k"], dtype=float),
        contact_mode=np.asarray(d["contact_mode"], dtype=np.int64),
        grid_h=int(d["grid"]["h"]),
        grid_w=int(d["grid"]["w"]),
        codebook_size=int(d["codebook_size"]),
        frame_rate=float(d["frame_rate"]),
        mu_mode=d.get("mu_mode", "per_step"),
        reward=None if d.get("reward") is None
        else np.asarray(d["reward"], dtype=float),
    )
