"""Score-distillation guidance: prompt augmentation, diffusion noise
schedule, classifier-free guidance, the SDS pixel gradient, and the
pluggable score-provider interface.

Two providers ship with the engine: ``AnalyticDenoiser`` (an exact oracle
around known target images, used for tests and mock-target generation) and
``RemoteScoreProvider`` (HTTP client for an external diffusion service,
wire format in :mod:`splatgen.io`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from splatgen.errors import ConfigError, GuidanceUnavailableError, ShapeError
from splatgen.gaussians import CameraPose

DEFAULT_NEGATIVE_PROMPT = (
    "unrealistic, blurry, low quality, out of focus, low contrast, low-resolution"
)


@dataclass
class Prompt:
    text: str
    negative_text: str = DEFAULT_NEGATIVE_PROMPT

    def __post_init__(self):
        if not self.text:
            raise ConfigError("prompt text must be non-empty")


@dataclass
class NoiseSchedule:
    """Discrete diffusion schedule; timesteps are 1-based, t in [1, T]."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ConfigError("beta must lie strictly in (0, 1)")
        if np.any(np.diff(self.beta) <= 0):
            raise ConfigError("beta must be strictly increasing")
        if np.any(np.diff(self.alpha_bar) >= 0) or self.alpha_bar[0] >= 1:
            raise ConfigError("alpha_bar must be strictly decreasing and < 1")

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    def abar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    beta = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))


@dataclass
class GuidanceConfig:
    cfg_scale: float = 50.0
    t_min_percent: float = 0.02
    t_max_percent: float = 0.98
    weight: float = 1.0
    mode: str = "multiview"  # "single-view" | "multiview"

    def __post_init__(self):
        if self.cfg_scale <= 0:
            raise ConfigError("cfg_scale must be positive")
        if not (0 < self.t_min_percent < 1 and 0 < self.t_max_percent < 1):
            raise ConfigError("timestep percents must lie in (0, 1)")
        if self.t_min_percent > self.t_max_percent:
            raise ConfigError("t_min_percent must be <= t_max_percent")
        if self.mode not in ("single-view", "multiview"):
            raise ConfigError(f"unknown guidance mode {self.mode!r}")


class ScoreProvider(Protocol):
    """Provider of per-view noise predictions for noisy renders.

    ``predict_noise`` receives the noisy images x_t; it must return one
    prediction per view, shape-matched to its input.
    """

    def predict_noise(
        self,
        noisy_images: Sequence[np.ndarray],
        cameras: Sequence[CameraPose],
        prompt_text: str,
        negative_text: str,
        t: int,
        cfg_scale: float,
    ) -> list[np.ndarray]: ...


def augment_prompt(prompt: Prompt, camera: CameraPose) -> str:
    """Quantize the camera into a viewpoint phrase appended to the prompt."""
    if camera.elevation > 60.0:
        return f"{prompt.text}, overhead view"
    az = camera.azimuth % 360.0
    if az >= 315.0 or az < 45.0:
        phrase = "front view"
    elif az < 135.0:
        phrase = "side view"
    elif az < 225.0:
        phrase = "back view"
    else:
        phrase = "side view"
    return f"{prompt.text}, {phrase}"


def add_noise(image: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps."""
    if eps.shape != image.shape:
        raise ShapeError("noise shape must match image shape")
    ab = schedule.abar(t)
    return np.sqrt(ab) * image + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("conditional/unconditional shapes differ")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sds_weight(t: int, schedule: NoiseSchedule) -> float:
    """w(t) = 1 - abar_t (DreamFusion-family default)."""
    return 1.0 - schedule.abar(t)


def sample_timestep(rng: np.random.Generator, config: GuidanceConfig, schedule: NoiseSchedule) -> int:
    lo = int(np.ceil(config.t_min_percent * schedule.T))
    hi = int(np.floor(config.t_max_percent * schedule.T))
    lo = max(lo, 1)
    if hi < lo:
        raise ConfigError("empty timestep window")
    return int(rng.integers(lo, hi + 1))


def multiview_sds_pixel_gradients(
    images: Sequence[np.ndarray],
    cameras: Sequence[CameraPose],
    provider: ScoreProvider,
    prompt: Prompt,
    t: int,
    noises: Sequence[np.ndarray],
    schedule: NoiseSchedule,
    cfg_scale: float,
    prompt_text: str | None = None,
) -> list[np.ndarray]:
    """Joint SDS gradients for N views rendered from the same cloud snapshot.

    One provider call carries all views; per view the gradient is
    w(t) * (eps_hat - eps). ``prompt_text`` overrides the raw prompt (used by
    the single-view path to pass the viewpoint-augmented prompt).
    """
    if len(images) < 1 or len(images) != len(cameras) or len(images) != len(noises):
        raise ShapeError("images, cameras and noises must have equal nonzero length")
    noisy = [add_noise(x, t, e, schedule) for x, e in zip(images, noises)]
    text = prompt.text if prompt_text is None else prompt_text
    try:
        eps_hat = provider.predict_noise(
            noisy, list(cameras), text, prompt.negative_text, t, cfg_scale
        )
    except GuidanceUnavailableError:
        raise
    except Exception as exc:  # provider failure surfaces as a typed error
        raise GuidanceUnavailableError(str(exc)) from exc
    if len(eps_hat) != len(images):
        raise GuidanceUnavailableError("provider returned wrong number of predictions")
    w = sds_weight(t, schedule)
    out = []
    for eh, e, x in zip(eps_hat, noises, images):
        if eh.shape != x.shape:
            raise GuidanceUnavailableError("provider prediction shape mismatch")
        out.append(w * (eh - e))
    return out


def sds_pixel_gradient(
    image: np.ndarray,
    provider: ScoreProvider,
    prompt: Prompt,
    camera: CameraPose,
    t: int,
    eps: np.ndarray,
    schedule: NoiseSchedule,
    cfg_scale: float,
) -> np.ndarray:
    """Single-view SDS gradient with viewpoint prompt augmentation."""
    return multiview_sds_pixel_gradients(
        [image],
        [camera],
        provider,
        prompt,
        t,
        [eps],
        schedule,
        cfg_scale,
        prompt_text=augment_prompt(prompt, camera),
    )[0]


class AnalyticDenoiser:
    """Oracle provider around known per-camera target images x*.

    eps_hat = (x_t - sqrt(abar_t) x*) / sqrt(1 - abar_t), which collapses the
    SDS gradient to w(t) sqrt(abar)/sqrt(1-abar) (x - x*). Reentrant.
    """

    def __init__(self, target_fn: Callable[[CameraPose], np.ndarray], schedule: NoiseSchedule):
        self.target_fn = target_fn
        self.schedule = schedule

    def predict_noise(self, noisy_images, cameras, prompt_text, negative_text, t, cfg_scale):
        ab = self.schedule.abar(t)
        out = []
        for x_t, cam in zip(noisy_images, cameras):
            target = self.target_fn(cam)
            if target.shape != x_t.shape:
                raise ShapeError("target shape mismatch")
            out.append((x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab))
        return out


class NoiseEchoProvider:
    """Degenerate provider predicting exactly the injected noise; useful for
    zero-gradient plumbing tests."""

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        self._last_noises: list[np.ndarray] | None = None

    def set_noises(self, noises):
        self._last_noises = [n.copy() for n in noises]

    def predict_noise(self, noisy_images, cameras, prompt_text, negative_text, t, cfg_scale):
        if self._last_noises is None or len(self._last_noises) != len(noisy_images):
            raise GuidanceUnavailableError("echo provider has no matching noises")
        return [n.copy() for n in self._last_noises]


class RemoteScoreProvider:
    """HTTP client for an external diffusion service speaking the guidance
    wire protocol. The remote side owns the model: it noises the supplied
    renders itself (possibly in latent space) and returns pixel-space SDS
    gradients directly, so this provider bypasses the local eps residual.

    Set ``provider.mode`` to "mv" or "sd" depending on the hosted model.
    """

    def __init__(self, base_url: str, mode: str = "mv", timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.mode = mode
        self.timeout = timeout

    def fetch_schedule(self) -> NoiseSchedule:
        import requests

        try:
            resp = requests.get(f"{self.base_url}/v1/schedule", timeout=self.timeout)
            resp.raise_for_status()
            data = resp.json()
        except Exception as exc:
            raise GuidanceUnavailableError(f"schedule handshake failed: {exc}") from exc
        alpha_bar = np.asarray(data["alpha_bar"], dtype=float)
        if alpha_bar.shape[0] != int(data["T"]):
            raise GuidanceUnavailableError("handshake T does not match alpha_bar length")
        # recover beta from the cumulative products
        alphas = np.empty_like(alpha_bar)
        alphas[0] = alpha_bar[0]
        alphas[1:] = alpha_bar[1:] / alpha_bar[:-1]
        return NoiseSchedule(beta=1.0 - alphas, alpha_bar=alpha_bar)

    def pixel_gradients(
        self,
        images: Sequence[np.ndarray],
        cameras: Sequence[CameraPose],
        prompt_text: str,
        negative_text: str,
        t: int,
        cfg_scale: float,
    ) -> list[np.ndarray]:
        import requests

        from splatgen.io import decode_image_b64, guidance_request_json

        payload = guidance_request_json(
            self.mode, prompt_text, negative_text, t, cfg_scale, images, cameras
        )
        try:
            resp = requests.post(
                f"{self.base_url}/v1/guidance", json=payload, timeout=self.timeout
            )
            resp.raise_for_status()
            data = resp.json()
        except Exception as exc:
            raise GuidanceUnavailableError(f"guidance request failed: {exc}") from exc
        if "error" in data:
            raise GuidanceUnavailableError(str(data["error"]))
        grads = data.get("grads", [])
        if len(grads) != len(images):
            raise GuidanceUnavailableError("grads count != images count")
        return [
            decode_image_b64(g, img.shape[0], img.shape[1]) for g, img in zip(grads, images)
        ]
