"""Render 3D contact forces into camera-aligned RGB splat images.

Each contact contributes an isotropic Gaussian kernel at its projected
pixel, colored by force magnitude (red) and projected force direction
(green/blue), weighted by depth so nearer contacts dominate. Overlapping
contributions are blended by normalized weighted averaging (a soft
z-buffer), never summed unboundedly.

The inner accumulation loop is the hot kernel; a compiled Cython backend
is used when available, with a bit-identical pure-Python fallback. See
``splat_backend()`` / ``available_backends()``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import _splat_py

try:
    from . import _splat_cy
except ImportError:
    _splat_cy = None

_BACKEND_ENV = "CONTACTWORLD_SPLAT_BACKEND"


class NearPlaneError(ValueError):
    """Point lies behind the camera near plane."""


def _readonly(a, shape=None) -> np.ndarray:
    out = np.array(a, dtype=float)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite values")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: world pose, intrinsics, image size, near plane."""

    position: np.ndarray
    rotation_cw: np.ndarray  # world -> camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    x_min: float

    def __post_init__(self):
        object.__setattr__(self, "position", _readonly(self.position, (3,)))
        object.__setattr__(self, "rotation_cw", _readonly(self.rotation_cw, (3, 3)))
        err = np.abs(self.rotation_cw.T @ self.rotation_cw - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation_cw not orthonormal (|R^T R - I| = {err:.3g})")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.x_min > 0:
            raise ValueError("near plane x_min must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            position=np.asarray(d["c"], dtype=float),
            rotation_cw=np.asarray(d["rotation_cw"], dtype=float).reshape(3, 3),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            x_min=float(d["x_min"]),
        )


@dataclass(frozen=True)
class ContactRecord:
    """One contact: world-frame position and force."""

    p: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _readonly(self.p, (3,)))
        object.__setattr__(self, "f", _readonly(self.f, (3,)))


@dataclass(frozen=True)
class SplatConfig:
    """Shaping parameters for splat rendering.

    ``force_display_scale`` is (a, b) in s = a + b * |f|, the world-space
    displacement scale for the direction probe point.
    """

    m_max: float = 10.0
    gamma: float = 1.0
    r_min: float = 1.0
    r_max: float = 8.0
    tau_depth: float = 1.0
    force_display_scale: tuple[float, float] = (0.05, 0.01)
    kernel_window_mult: float = 3.0

    def __post_init__(self):
        if not self.m_max > 0:
            raise ValueError("m_max must be positive")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not (0 < self.r_min <= self.r_max):
            raise ValueError("need 0 < r_min <= r_max")
        if not self.tau_depth > 0:
            raise ValueError("tau_depth must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SplatConfig":
        kwargs = {}
        for key in ("m_max", "gamma", "r_min", "r_max", "tau_depth", "kernel_window_mult"):
            if key in d:
                kwargs[key] = float(d[key])
        if "force_display_scale" in d:
            a, b = d["force_display_scale"]
            kwargs["force_display_scale"] = (float(a), float(b))
        return cls(**kwargs)


@dataclass(frozen=True)
class SplatImage:
    """height x width x 3 image, channels in [0, 1]; untouched pixels are (0,0,0)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must be (H, W, 3)")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


# ---------------------------------------------------------------------------
# geometry


def world_to_camera(p, cam: CameraModel) -> np.ndarray:
    """Map a world-frame point to camera frame; component 0 is depth."""
    return cam.rotation_cw @ (np.asarray(p, dtype=float) - cam.position)


def project(x_cam, cam: CameraModel) -> tuple[float, float]:
    """Pinhole projection of a camera-frame point to pixel coordinates.

    Uses u = cx - fx * (Y / X), v = cy - fy * (Z / X). The caller must
    have clipped against the near plane; X < x_min raises NearPlaneError.
    """
    x = float(x_cam[0])
    y = float(x_cam[1])
    z = float(x_cam[2])
    if x < cam.x_min:
        raise NearPlaneError(f"depth {x} below near plane {cam.x_min}")
    u = cam.cx - cam.fx * (y / x)
    v = cam.cy - cam.fy * (z / x)
    return u, v


def _round_half_away(x: float) -> int:
    if x >= 0.0:
        return int(math.floor(x + 0.5))
    return int(math.ceil(x - 0.5))


def splat_radius(m: float, cfg: SplatConfig) -> float:
    """Kernel radius in pixels for force magnitude m (saturating at m_max)."""
    if m < 0:
        raise ValueError("force magnitude must be nonnegative")
    t = (min(m, cfg.m_max) / cfg.m_max) ** cfg.gamma
    return cfg.r_min + (cfg.r_max - cfg.r_min) * t


def encode_color(contact: ContactRecord, cam: CameraModel,
                 cfg: SplatConfig) -> tuple[np.ndarray, tuple[int, int]]:
    """Per-contact color triple and rounded pixel center.

    Red encodes clipped normalized force magnitude. Green/blue encode the
    unit pixel-space displacement toward a probe point offset along the
    force vector, affinely mapped from [-1, 1] to [0, 1]. A degenerate
    displacement (force along the optical axis, or probe behind the near
    plane) falls back to the neutral (0.5, 0.5) code.
    """
    x_cam = world_to_camera(contact.p, cam)
    u, v = project(x_cam, cam)

    m = float(np.linalg.norm(contact.f))
    red = min(m, cfg.m_max) / cfg.m_max

    green = blue = 0.5
    a, b = cfg.force_display_scale
    s = a + b * m
    probe_cam = world_to_camera(contact.p + s * contact.f, cam)
    if probe_cam[0] >= cam.x_min:
        u_end, v_end = project(probe_cam, cam)
        du = u_end - u
        dv = v_end - v
        norm = math.hypot(du, dv)
        if norm > 0.0:
            green = (du / norm + 1.0) / 2.0
            blue = (dv / norm + 1.0) / 2.0

    center = (_round_half_away(u), _round_half_away(v))
    return np.array([red, green, blue]), center


# ---------------------------------------------------------------------------
# rendering backends


def available_backends() -> tuple[str, ...]:
    return ("compiled", "python") if _splat_cy is not None else ("python",)


def splat_backend() -> str:
    """Name of the accumulation backend selected by default."""
    return _resolve_backend(None)


def _resolve_backend(backend: str | None) -> str:
    if backend is None:
        backend = os.environ.get(_BACKEND_ENV) or ("compiled" if _splat_cy else "python")
    if backend not in ("compiled", "python"):
        raise ValueError(f"unknown splat backend {backend!r}")
    if backend == "compiled" and _splat_cy is None:
        raise RuntimeError("compiled splat backend not available")
    return backend


def _kernel(backend: str):
    if backend == "compiled":
        return _splat_cy.accumulate_contact
    return _splat_py.accumulate_contact


def accumulate_splats(contacts, cam: CameraModel, cfg: SplatConfig,
                      backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate weighted colors and weights, before normalization.

    Returns (acc, wacc) with shapes (H, W, 3) and (H, W). Contacts behind
    the near plane and zero-magnitude forces are skipped. Accumulation
    order is the contact order with a fixed row-major pixel sweep, so the
    result is deterministic.
    """
    accumulate = _kernel(_resolve_backend(backend))
    acc = np.zeros((cam.height, cam.width, 3))
    wacc = np.zeros((cam.height, cam.width))
    for contact in contacts:
        x_cam = world_to_camera(contact.p, cam)
        depth = float(x_cam[0])
        if depth < cam.x_min:
            continue
        m = float(np.linalg.norm(contact.f))
        if m == 0.0:
            continue
        color, (u0, v0) = encode_color(contact, cam, cfg)
        radius = splat_radius(m, cfg)
        sigma = radius / 3.0
        win = math.ceil(cfg.kernel_window_mult * radius)
        depth_w = math.exp(-depth / cfg.tau_depth)
        accumulate(acc, wacc, u0, v0, win, sigma, depth_w,
                   float(color[0]), float(color[1]), float(color[2]))
    return acc, wacc


def render_splats(contacts, cam: CameraModel, cfg: SplatConfig,
                  backend: str | None = None) -> SplatImage:
    """Render contacts to a normalized splat image (soft z-buffer blend)."""
    acc, wacc = accumulate_splats(contacts, cam, cfg, backend=backend)
    out = np.zeros_like(acc)
    touched = wacc > 0.0
    out[touched] = acc[touched] / wacc[touched, None]
    # weighted averages can stray a ulp outside [0, 1]
    np.clip(out, 0.0, 1.0, out=out)
    return SplatImage(out)


# ---------------------------------------------------------------------------
# scene / image I/O


def load_scene(path) -> list[ContactRecord]:
    """Read a JSON array of {p: [x,y,z], f: [x,y,z]} records."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("scene file must contain a JSON array")
    return [ContactRecord(p=np.asarray(r["p"], dtype=float),
                          f=np.asarray(r["f"], dtype=float)) for r in raw]


def load_camera(path) -> CameraModel:
    with open(path) as fh:
        return CameraModel.from_dict(json.load(fh))


def load_splat_config(path) -> SplatConfig:
    with open(path) as fh:
        return SplatConfig.from_dict(json.load(fh))


def image_to_uint8(image: SplatImage) -> np.ndarray:
    """Quantize to 8-bit channels: round(255 * I), half away from zero."""
    return np.floor(255.0 * image.pixels + 0.5).astype(np.uint8)


def write_ppm(path, image: SplatImage) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    data = image_to_uint8(image)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_png(path, image: SplatImage) -> None:
    from PIL import Image

    Image.fromarray(image_to_uint8(image), mode="RGB").save(path, format="PNG")


def write_image(path, image: SplatImage, fmt: str) -> None:
    if fmt == "png":
        write_png(path, image)
    elif fmt == "ppm":
        write_ppm(path, image)
    else:
        raise ValueError(f"unknown image format {fmt!r}")
