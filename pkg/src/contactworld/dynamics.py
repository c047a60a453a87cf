"""Forward-only spatial-temporal transformer over factored token grids.

Each frame is a control token (projected action + joint embeddings)
prepended to its video-token embeddings. Blocks apply bidirectional
spatial attention within frames, causal temporal attention across frames
at fixed spatial position, then a GELU feed-forward. Three heads emit
factored video logits, factored contact logits, and regressed joint
angles. Weights are randomly initialized and never trained here; the
module exists to exercise decoding, losses, and the checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .tokens import (FactorizedVocab, PredictorOutput, TokenGrid,
                     decompose_array)

LAMBDA_CONTACT = 2.0
LAMBDA_JOINT = 1.0

CHECKPOINT_MAGIC = b"CWCKPT01"


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    d_model: int
    n_heads: int
    n_frames: int
    n_history: int
    grid_h: int
    grid_w: int
    vocab: FactorizedVocab
    n_joints: int = 4
    mup: bool = False
    qk_norm: bool = True
    dropout: float = 0.0  # inference-only module; kept for config echo

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.n_history < self.n_frames:
            raise ValueError("need 0 <= n_history < n_frames")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w


def toy_model_config(**overrides) -> ModelConfig:
    """Small configuration exercised by the test suite."""
    kwargs = dict(layers=2, d_model=32, n_heads=4, n_frames=4, n_history=2,
                  grid_h=4, grid_w=4, vocab=FactorizedVocab.of(16, 2),
                  n_joints=4)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def full_scale_config() -> ModelConfig:
    """Reference full-size configuration (constructible, not exercised in tests)."""
    return ModelConfig(layers=24, d_model=256, n_heads=8, n_frames=16,
                       n_history=8, grid_h=32, grid_w=32,
                       vocab=FactorizedVocab.of(256, 2), n_joints=4)


@dataclass
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class BlockWeights:
    spatial: AttentionWeights
    temporal: AttentionWeights
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ModelState:
    """All weight arrays; shapes follow the config (see expected_shapes)."""

    config: ModelConfig
    embeddings: list[np.ndarray]      # k tables of (v_f, D)
    e_mask: np.ndarray                # (D,)
    w_action: np.ndarray              # (D, 3)
    b_action: np.ndarray              # (D,)
    w_joint_in: np.ndarray            # (D, N_j)
    b_joint_in: np.ndarray            # (D,)
    pos: np.ndarray                   # (T, S+1, D)
    blocks: list[BlockWeights]
    w_out: np.ndarray                 # (k*v_f, D)
    w_contact: np.ndarray             # (k*v_f, D)
    w_joint_out: np.ndarray           # (N_j, D)


@dataclass
class ForwardOutput:
    video_logits: np.ndarray    # (T, S, k, v_f)
    contact_logits: np.ndarray  # (T, S, k, v_f)
    joint_pred: np.ndarray      # (T, N_j)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dff = cfg.d_model, cfg.d_ff
    s1 = cfg.tokens_per_frame + 1
    shapes: dict[str, tuple[int, ...]] = {}
    for j in range(cfg.vocab.k):
        shapes[f"embed.{j}"] = (cfg.vocab.v_f, d)
    shapes["e_mask"] = (d,)
    shapes["action.w"] = (d, 3)
    shapes["action.b"] = (d,)
    shapes["joint_in.w"] = (d, cfg.n_joints)
    shapes["joint_in.b"] = (d,)
    shapes["pos"] = (cfg.n_frames, s1, d)
    for i in range(cfg.layers):
        for sub in ("spatial", "temporal"):
            for name in ("wq", "wk", "wv", "wo"):
                shapes[f"block.{i}.{sub}.{name}"] = (d, d)
        shapes[f"block.{i}.ffn.w1"] = (d, dff)
        shapes[f"block.{i}.ffn.b1"] = (dff,)
        shapes[f"block.{i}.ffn.w2"] = (dff, d)
        shapes[f"block.{i}.ffn.b2"] = (d,)
    shapes["head.video"] = (cfg.vocab.k * cfg.vocab.v_f, d)
    shapes["head.contact"] = (cfg.vocab.k * cfg.vocab.v_f, d)
    shapes["head.joint"] = (cfg.n_joints, d)
    return shapes


def init_state(cfg: ModelConfig, seed: int) -> ModelState:
    """Seeded random weights: N(0, 0.02) embeddings/positions, uniform
    +-1/sqrt(fan_in) projections, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def table(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    def proj(n_out, n_in):
        bound = 1.0 / np.sqrt(n_in)
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    d = cfg.d_model

    def attn():
        return AttentionWeights(wq=proj(d, d).T, wk=proj(d, d).T,
                                wv=proj(d, d).T, wo=proj(d, d).T)

    blocks = [BlockWeights(spatial=attn(), temporal=attn(),
                           w1=proj(cfg.d_ff, d).T, b1=np.zeros(cfg.d_ff),
                           w2=proj(d, cfg.d_ff).T, b2=np.zeros(d))
              for _ in range(cfg.layers)]
    return ModelState(
        config=cfg,
        embeddings=[table(cfg.vocab.v_f, d) for _ in range(cfg.vocab.k)],
        e_mask=table(d),
        w_action=proj(d, 3),
        b_action=np.zeros(d),
        w_joint_in=proj(d, cfg.n_joints),
        b_joint_in=np.zeros(d),
        pos=table(cfg.n_frames, cfg.tokens_per_frame + 1, d),
        blocks=blocks,
        w_out=proj(cfg.vocab.k * cfg.vocab.v_f, d),
        w_contact=proj(cfg.vocab.k * cfg.vocab.v_f, d),
        w_joint_out=proj(cfg.n_joints, d),
    )


# ---------------------------------------------------------------------------
# building blocks


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Parameterless LayerNorm over the last axis; constant vectors map to 0."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, n_heads, d // n_heads)
    return np.swapaxes(x, -3, -2)  # (..., H, N, hd)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.swapaxes(x, -3, -2)
    *lead, n, h, hd = x.shape
    return x.reshape(*lead, n, h * hd)


def attention(x: np.ndarray, w: AttentionWeights, causal: bool,
              cfg: ModelConfig, return_weights: bool = False):
    """Multi-head self-attention over the second-to-last axis.

    Applies per-head LayerNorm to queries and keys when cfg.qk_norm is
    set; the logit scale is 8/d_k under mup, else 1/sqrt(d_k). A causal
    call masks columns j > i with -inf before the softmax.
    """
    q = _split_heads(x @ w.wq, cfg.n_heads)
    k = _split_heads(x @ w.wk, cfg.n_heads)
    v = _split_heads(x @ w.wv, cfg.n_heads)
    if cfg.qk_norm:
        q = layer_norm(q)
        k = layer_norm(k)
    scale = 8.0 / cfg.head_dim if cfg.mup else 1.0 / np.sqrt(cfg.head_dim)
    logits = scale * (q @ np.swapaxes(k, -1, -2))
    if causal:
        n = x.shape[-2]
        future = np.triu(np.ones((n, n), dtype=bool), k=1)
        logits = np.where(future, -np.inf, logits)
    weights = _softmax(logits)
    out = _merge_heads(weights @ v) @ w.wo
    if return_weights:
        return out, weights
    return out


def st_block(x: np.ndarray, bw: BlockWeights, cfg: ModelConfig) -> np.ndarray:
    """One block: pre-norm spatial attention, causal temporal attention on
    the un-normalized residual stream, pre-norm feed-forward."""
    x = x + attention(layer_norm(x), bw.spatial, causal=False, cfg=cfg)
    xt = np.swapaxes(x, 0, 1)  # (S+1, T, D)
    x = x + np.swapaxes(attention(xt, bw.temporal, causal=True, cfg=cfg), 0, 1)
    h = gelu(layer_norm(x) @ bw.w1 + bw.b1)
    return x + h @ bw.w2 + bw.b2


def embed_inputs(grid: TokenGrid, actions: np.ndarray, joints: np.ndarray,
                 state: ModelState) -> np.ndarray:
    """Token + control + positional embedding; returns (T, S+1, D).

    Video tokens embed as the sum of their factored digit embeddings,
    MASK as the mask embedding. The per-frame control token is
    LayerNorm(W_a a + b_a) + LayerNorm(W_j theta + b_j), prepended at
    position 0.
    """
    cfg = state.config
    t, s = cfg.n_frames, cfg.tokens_per_frame
    actions = np.asarray(actions, dtype=float)
    joints = np.asarray(joints, dtype=float)
    if grid.tokens.shape != (t, s):
        raise ValueError("grid shape does not match config")
    if actions.shape != (t, 3) or joints.shape != (t, cfg.n_joints):
        raise ValueError("actions/joints shape does not match config")

    masked = grid.tokens == grid.vocab.mask_token
    digits = decompose_array(np.where(masked, 0, grid.tokens), grid.vocab)
    video = np.zeros((t, s, cfg.d_model))
    for j, table in enumerate(state.embeddings):
        video += table[digits[..., j]]
    video[masked] = state.e_mask

    control = layer_norm(actions @ state.w_action.T + state.b_action) \
        + layer_norm(joints @ state.w_joint_in.T + state.b_joint_in)
    seq = np.concatenate([control[:, None, :], video], axis=1)
    return seq + state.pos


def forward(grid: TokenGrid, actions: np.ndarray, joints: np.ndarray,
            state: ModelState) -> ForwardOutput:
    """Full forward pass: embeddings, L blocks, three output heads."""
    cfg = state.config
    x = embed_inputs(grid, actions, joints, state)
    for bw in state.blocks:
        x = st_block(x, bw, cfg)
    y_video = x[:, 1:, :]
    t, s = cfg.n_frames, cfg.tokens_per_frame
    k, v_f = cfg.vocab.k, cfg.vocab.v_f
    video_logits = (y_video @ state.w_out.T).reshape(t, s, k, v_f)
    contact_logits = (y_video @ state.w_contact.T).reshape(t, s, k, v_f)
    joint_pred = x[:, 0, :] @ state.w_joint_out.T
    return ForwardOutput(video_logits=video_logits,
                         contact_logits=contact_logits,
                         joint_pred=joint_pred)


class ModelPredictor:
    """Adapter exposing the model through the decoder's predictor interface."""

    def __init__(self, state: ModelState):
        self.state = state

    def predict_frame(self, grid: TokenGrid, actions, joints,
                      frame: int) -> PredictorOutput:
        cfg = self.state.config
        if actions is None:
            actions = np.zeros((cfg.n_frames, 3))
        if joints is None:
            joints = np.zeros((cfg.n_frames, cfg.n_joints))
        out = forward(grid, actions, joints, self.state)
        return PredictorOutput(video_logits=out.video_logits[frame],
                               contact_logits=out.contact_logits[frame],
                               joint_angles=out.joint_pred[frame])


# ---------------------------------------------------------------------------
# losses


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_video(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray,
               vocab: FactorizedVocab) -> float:
    """Mean over masked positions of summed per-factor cross-entropy.

    An empty mask yields 0.0 by convention.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    digits = decompose_array(np.asarray(targets)[mask], vocab)  # (M, k)
    lp = _log_softmax(np.asarray(logits, dtype=float)[mask])    # (M, k, v_f)
    m = np.arange(digits.shape[0])[:, None]
    f = np.arange(vocab.k)[None, :]
    return float(-(lp[m, f, digits]).sum(axis=1).mean())


def loss_contact(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                 vocab: FactorizedVocab) -> float:
    """Factorized cross-entropy against contact token targets."""
    return loss_video(logits, targets, mask, vocab)


def loss_joint(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over frames of the squared error norm."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    return float(((pred - target) ** 2).sum(axis=-1).mean())


def loss_total(lv: float, lc: float, lj: float,
               lambda_contact: float = LAMBDA_CONTACT,
               lambda_joint: float = LAMBDA_JOINT) -> float:
    return lv + lambda_contact * lc + lambda_joint * lj


# ---------------------------------------------------------------------------
# checkpoint container: magic, header length, JSON header, f32 tensor data


def _config_to_dict(cfg: ModelConfig) -> dict:
    return {"layers": cfg.layers, "d_model": cfg.d_model,
            "n_heads": cfg.n_heads, "n_frames": cfg.n_frames,
            "n_history": cfg.n_history, "grid_h": cfg.grid_h,
            "grid_w": cfg.grid_w, "v_f": cfg.vocab.v_f, "k": cfg.vocab.k,
            "n_joints": cfg.n_joints, "mup": cfg.mup,
            "qk_norm": cfg.qk_norm, "dropout": cfg.dropout}


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(layers=d["layers"], d_model=d["d_model"],
                       n_heads=d["n_heads"], n_frames=d["n_frames"],
                       n_history=d["n_history"], grid_h=d["grid_h"],
                       grid_w=d["grid_w"],
                       vocab=FactorizedVocab.of(d["v_f"], d["k"]),
                       n_joints=d["n_joints"], mup=d["mup"],
                       qk_norm=d["qk_norm"], dropout=d["dropout"])


def _named_tensors(state: ModelState) -> dict[str, np.ndarray]:
    cfg = state.config
    tensors: dict[str, np.ndarray] = {}
    for j, table in enumerate(state.embeddings):
        tensors[f"embed.{j}"] = table
    tensors["e_mask"] = state.e_mask
    tensors["action.w"] = state.w_action
    tensors["action.b"] = state.b_action
    tensors["joint_in.w"] = state.w_joint_in
    tensors["joint_in.b"] = state.b_joint_in
    tensors["pos"] = state.pos
    for i, bw in enumerate(state.blocks):
        for sub, aw in (("spatial", bw.spatial), ("temporal", bw.temporal)):
            tensors[f"block.{i}.{sub}.wq"] = aw.wq
            tensors[f"block.{i}.{sub}.wk"] = aw.wk
            tensors[f"block.{i}.{sub}.wv"] = aw.wv
            tensors[f"block.{i}.{sub}.wo"] = aw.wo
        tensors[f"block.{i}.ffn.w1"] = bw.w1
        tensors[f"block.{i}.ffn.b1"] = bw.b1
        tensors[f"block.{i}.ffn.w2"] = bw.w2
        tensors[f"block.{i}.ffn.b2"] = bw.b2
    tensors["head.video"] = state.w_out
    tensors["head.contact"] = state.w_contact
    tensors["head.joint"] = state.w_joint_out
    return tensors


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: ModelState) -> None:
    """Single-file container: magic, u64 header length, JSON header (config
    echo and tensor offset/shape table), little-endian float32 data."""
    tensors = _named_tensors(state)
    shapes = expected_shapes(state.config)
    table = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.shape != shapes[name]:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, "
                                  f"expected {shapes[name]}")
        table[name] = {"offset": offset, "shape": list(arr.shape)}
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps({"config": _config_to_dict(state.config),
                         "dtype": "<f4", "tensors": table},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()
    cfg = _config_from_dict(header["config"])
    shapes = expected_shapes(cfg)
    if set(header["tensors"]) != set(shapes):
        raise CheckpointError("tensor table does not match config")
    arrays: dict[str, np.ndarray] = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        if shape != shapes[name]:
            raise CheckpointError(f"tensor {name} has shape {shape}, "
                                  f"expected {shapes[name]}")
        count = int(np.prod(shape))
        start = entry["offset"]
        raw = data[start:start + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"tensor {name} truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(float)

    blocks = []
    for i in range(cfg.layers):
        def aw(sub):
            return AttentionWeights(wq=arrays[f"block.{i}.{sub}.wq"],
                                    wk=arrays[f"block.{i}.{sub}.wk"],
                                    wv=arrays[f"block.{i}.{sub}.wv"],
                                    wo=arrays[f"block.{i}.{sub}.wo"])
        blocks.append(BlockWeights(spatial=aw("spatial"), temporal=aw("temporal"),
                                   w1=arrays[f"block.{i}.ffn.w1"],
                                   b1=arrays[f"block.{i}.ffn.b1"],
                                   w2=arrays[f"block.{i}.ffn.w2"],
                                   b2=arrays[f"block.{i}.ffn.b2"]))
    return ModelState(
        config=cfg,
        embeddings=[arrays[f"embed.{j}"] for j in range(cfg.vocab.k)],
        e_mask=arrays["e_mask"],
        w_action=arrays["action.w"],
        b_action=arrays["action.b"],
        w_joint_in=arrays["joint_in.w"],
        b_joint_in=arrays["joint_in.b"],
        pos=arrays["pos"],
        blocks=blocks,
        w_out=arrays["head.video"],
        w_contact=arrays["head.contact"],
        w_joint_out=arrays["head.joint"],
    )
