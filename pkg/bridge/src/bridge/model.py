"""The hosted denoising model.

Real pretrained diffusion backbones do not fit this deployment, so the
service hosts a procedural stand-in: a ray-traced Lambertian sphere whose
color is derived from the prompt text. For a noisy input it predicts the
noise analytically against that target image, which makes the model exact,
multiview-consistent, and fast while exercising the complete wire contract
(schedule handshake, conditional/negative prompts, CFG, per-view gradients).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from bridge.config import BridgeError

SPHERE_RADIUS = 0.45
AMBIENT = 0.25
LIGHT_DIR = np.array([0.4, -0.6, 0.8])


def camera_rays(azimuth, elevation, distance, fov_deg, height, width):
    """Eye position and per-pixel world-space ray directions.

    Convention shared with the engine: azimuth 0 places the camera on the
    -y axis, world +z is up, the camera looks at the origin, and pixel
    centers sit on integer coordinates with the principal point at the
    image center.
    """
    az = np.radians(azimuth)
    el = np.radians(elevation)
    eye = distance * np.array(
        [np.sin(az) * np.cos(el), -np.cos(az) * np.cos(el), np.sin(el)]
    )
    forward = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    f = 0.5 * height / np.tan(0.5 * np.radians(fov_deg))
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    d_cam = np.stack(
        [(jj - cx) / f, (ii - cy) / f, np.ones_like(jj, dtype=float)], axis=-1
    )
    world = d_cam @ np.stack([right, down, forward])
    world /= np.linalg.norm(world, axis=-1, keepdims=True)
    return eye, world


def prompt_color(prompt: str) -> np.ndarray:
    """Stable pseudo-random base color in [0.25, 0.95] per channel."""
    digest = hashlib.sha256(prompt.strip().lower().encode("utf-8")).digest()
    raw = np.frombuffer(digest[:3], dtype=np.uint8).astype(float) / 255.0
    return 0.25 + 0.7 * raw


def render_sphere(prompt, azimuth, elevation, distance, fov_deg, height, width):
    """Shaded sphere on a black background, float64 HxWx3 in [0, 1]."""
    eye, rays = camera_rays(azimuth, elevation, distance, fov_deg, height, width)
    # |eye + t d|^2 = r^2 with |d| = 1
    b = rays @ eye
    c = eye @ eye - SPHERE_RADIUS**2
    disc = b * b - c
    hit = disc > 0.0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    hit &= t > 0.0
    points = eye + t[..., None] * rays
    normals = points / SPHERE_RADIUS
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    img = np.zeros((height, width, 3))
    img[hit] = shade[hit, None] * prompt_color(prompt)
    return img


@dataclass
class ProceduralSphereModel:
    """Noise-prediction model with its own schedule (T=600, linear beta)."""

    precision: str = "fp32"
    T: int = 600
    beta_start: float = 5e-5
    beta_end: float = 1.5e-2

    def __post_init__(self):
        self.beta = np.linspace(self.beta_start, self.beta_end, self.T)
        self.alpha_bar = np.cumprod(1.0 - self.beta)
        self._rng = np.random.default_rng(0)

    def schedule(self) -> dict:
        return {"T": self.T, "alpha_bar": self.alpha_bar.tolist()}

    def _target(self, prompt, camera, height, width):
        img = render_sphere(
            prompt,
            camera["azimuth"],
            camera["elevation"],
            camera["distance"],
            camera["fov_deg"],
            height,
            width,
        )
        if self.precision == "fp16":
            img = img.astype(np.float16).astype(float)
        return img

    def predict_noise(self, x_t, prompt, camera, t):
        """eps_hat against the prompt's sphere target at the given camera."""
        ab = self.alpha_bar[t - 1]
        target = self._target(prompt, camera, x_t.shape[0], x_t.shape[1])
        return (x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)

    def pixel_gradients(self, mode, prompt, negative_prompt, t, cfg_scale, images, cameras):
        """Score-distillation pixel gradients for one request.

        The model noises each render itself, predicts the noise under both
        the conditional and the negative prompt, combines them with
        classifier-free guidance, and returns w(t) * (eps_hat - eps).
        """
        if mode not in ("sd", "mv"):
            raise BridgeError(f"mode must be 'sd' or 'mv', got {mode!r}")
        if not 1 <= t <= self.T:
            raise BridgeError(f"timestep {t} outside [1, {self.T}]")
        if len(images) != len(cameras):
            raise BridgeError("images/cameras length mismatch")
        ab = self.alpha_bar[t - 1]
        w = 1.0 - ab
        grads = []
        for img, cam in zip(images, cameras):
            eps = self._rng.standard_normal(img.shape)
            x_t = np.sqrt(ab) * img + np.sqrt(1.0 - ab) * eps
            eps_cond = self.predict_noise(x_t, prompt, cam, t)
            eps_uncond = self.predict_noise(x_t, negative_prompt, cam, t)
            eps_hat = eps_uncond + cfg_scale * (eps_cond - eps_uncond)
            grads.append(w * (eps_hat - eps))
        return grads
