"""Two-stage score-distillation training pipeline.

Stage 1 optimizes the cloud against a multiview score provider; stage 2
additionally mixes in single-view guidance with viewpoint-augmented prompts.
Both stages apply the alpha-map sparsity regularizer and adapt the number of
Gaussians by densification (first half of each stage) and pruning.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from splatgen.errors import ConfigError, DegenerateModelError, GuidanceUnavailableError
from splatgen.gaussians import (
    SH_C0,
    CameraPose,
    GaussianCloud,
    quat_to_rotmat,
)
from splatgen.guidance import (
    GuidanceConfig,
    NoiseSchedule,
    Prompt,
    augment_prompt,
    multiview_sds_pixel_gradients,
    sample_timestep,
)
from splatgen.rasterizer import RenderGrads, render, render_backward

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
MULTIVIEW_GROUP = 4


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    batch_cameras: int = 12
    n_init_gaussians: int = 5000
    densify_interval: int = 100
    densify_grad_threshold: float = 0.02
    prune_interval: int = 100
    prune_opacity_threshold: float = 0.05
    lr_position: float = 1e-4
    lr_feature: float = 1e-2
    lr_opacity: float = 3e-3
    lr_scale: float = 3e-3
    lr_rotation: float = 3e-3
    weight_mv: float = 1.0
    weight_sparsity: float = 1.0
    weight_sd: float = 0.5
    render_resolution: int = 256
    distance_min: float = 0.8
    distance_max: float = 1.2
    fov_min: float = 15.0
    fov_max: float = 60.0
    elevation_min: float = -20.0
    elevation_max: float = 60.0
    azimuth_min: float = 0.0
    azimuth_max: float = 360.0
    # 0 = continuous azimuths; k > 0 snaps sampled azimuths to k evenly
    # spaced values over [0, 360), for fixed-viewpoint reference setups
    azimuth_steps: int = 0
    seed: int = 0
    sh_degree: int = 0
    init_radius: float = 0.5
    scene_extent: float = 1.0
    split_scale_cutoff: float = 0.01
    split_factor: float = 1.6
    clone_jitter: float = 0.01
    densify_in_stage2: bool = True
    max_guidance_failures: int = 10
    mv_cfg_scale: float = 50.0
    mv_t_min_percent: float = 0.02
    mv_t_max_percent: float = 0.98
    sd_cfg_scale: float = 50.0
    sd_t_min_percent: float = 0.2
    sd_t_max_percent: float = 0.5

    def __post_init__(self):
        for name in ("weight_mv", "weight_sparsity", "weight_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.densify_interval <= 0 or self.prune_interval <= 0:
            raise ConfigError("intervals must be > 0")
        for lo, hi in (
            (self.distance_min, self.distance_max),
            (self.fov_min, self.fov_max),
            (self.elevation_min, self.elevation_max),
            (self.azimuth_min, self.azimuth_max),
        ):
            if hi < lo:
                raise ConfigError("camera range is empty")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in [0, 3]")
        if self.azimuth_steps < 0:
            raise ConfigError("azimuth_steps must be >= 0")

    def mv_guidance(self) -> GuidanceConfig:
        return GuidanceConfig(
            cfg_scale=self.mv_cfg_scale,
            t_min_percent=self.mv_t_min_percent,
            t_max_percent=self.mv_t_max_percent,
            weight=self.weight_mv,
            mode="multiview",
        )

    def sd_guidance(self) -> GuidanceConfig:
        return GuidanceConfig(
            cfg_scale=self.sd_cfg_scale,
            t_min_percent=self.sd_t_min_percent,
            t_max_percent=self.sd_t_max_percent,
            weight=self.weight_sd,
            mode="single-view",
        )


@dataclass
class BoundProvider:
    """A score provider paired with the schedule and window it operates in."""

    provider: object
    schedule: NoiseSchedule
    config: GuidanceConfig


@dataclass
class RunReport:
    label: str = "full"
    stage_seconds: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    step_losses: list = field(default_factory=list)
    gaussian_counts: list = field(default_factory=list)  # (global step, count)
    total_steps: int = 0

    @property
    def gpu_hours(self) -> float:
        return self.total_seconds / 3600.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "stage_seconds": dict(self.stage_seconds),
            "total_seconds": self.total_seconds,
            "gpu_hours": self.gpu_hours,
            "step_losses": list(self.step_losses),
            "gaussian_counts": [list(c) for c in self.gaussian_counts],
            "total_steps": self.total_steps,
        }


@dataclass
class TrainState:
    cloud: GaussianCloud
    rng: np.random.Generator
    step: int = 0
    adam_t: int = 0
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None
    wall_seconds: float = 0.0
    step_losses: list = field(default_factory=list)
    consecutive_failures: int = 0

    def __post_init__(self):
        n = self.cloud.count
        for name in PARAM_GROUPS:
            arr = getattr(self.cloud, name)
            self.moments_m.setdefault(name, np.zeros_like(arr))
            self.moments_v.setdefault(name, np.zeros_like(arr))
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)

    def check_alignment(self):
        n = self.cloud.count
        for name in PARAM_GROUPS:
            assert self.moments_m[name].shape == getattr(self.cloud, name).shape
            assert self.moments_v[name].shape == getattr(self.cloud, name).shape
        assert self.grad_accum.shape == (n,)
        assert self.grad_count.shape == (n,)


def init_cloud(n: int, rng: np.random.Generator, radius: float = 0.5, sh_degree: int = 0) -> GaussianCloud:
    """Random cloud: positions uniform in a ball, isotropic scales from a
    nearest-neighbor heuristic, opacity 0.1, random gray base color."""
    if n < 1:
        raise ConfigError("need at least one Gaussian")
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius * rng.random(n) ** (1.0 / 3.0)
    positions = dirs * radii[:, None]
    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    sigma = radius * (4.0 / n) ** (1.0 / 3.0)
    log_scales = np.full((n, 3), np.log(sigma))
    opacity_logits = np.full(n, np.log(0.1 / 0.9))
    m = (sh_degree + 1) ** 2
    sh = np.zeros((n, m, 3))
    gray = rng.uniform(0.3, 0.7, size=n)
    sh[:, 0, :] = ((gray - 0.5) / SH_C0)[:, None]
    return GaussianCloud(positions, rotations, log_scales, opacity_logits, sh)


def _quantize_azimuth(az: float, config: TrainConfig) -> float:
    if config.azimuth_steps <= 0:
        return az
    step = 360.0 / config.azimuth_steps
    return (round(az / step) * step) % 360.0


def sample_cameras(rng: np.random.Generator, config: TrainConfig, k: int) -> list[CameraPose]:
    cams = []
    for _ in range(k):
        az = _quantize_azimuth(rng.uniform(config.azimuth_min, config.azimuth_max), config)
        el = rng.uniform(config.elevation_min, config.elevation_max)
        dist = rng.uniform(config.distance_min, config.distance_max)
        fov = rng.uniform(config.fov_min, config.fov_max)
        cams.append(
            CameraPose(az % 360.0, el, dist, fov, config.render_resolution, config.render_resolution)
        )
    return cams


def sample_camera_group(rng: np.random.Generator, config: TrainConfig) -> list[CameraPose]:
    """Four poses sharing elevation/distance/FOV with azimuths 90 deg apart."""
    az = _quantize_azimuth(rng.uniform(config.azimuth_min, config.azimuth_max), config)
    el = rng.uniform(config.elevation_min, config.elevation_max)
    dist = rng.uniform(config.distance_min, config.distance_max)
    fov = rng.uniform(config.fov_min, config.fov_max)
    return [
        CameraPose((az + 90.0 * i) % 360.0, el, dist, fov, config.render_resolution, config.render_resolution)
        for i in range(MULTIVIEW_GROUP)
    ]


def sparsity_loss(alpha: np.ndarray) -> tuple[float, np.ndarray]:
    """L1 of the alpha map normalized by pixel count, with its gradient."""
    n = alpha.size
    grad = np.where(alpha > 0, 1.0 / n, 0.0)
    return float(np.mean(np.abs(alpha))), grad


def _adam_step(state: TrainState, grads: dict, config: TrainConfig) -> None:
    lrs = {
        "positions": config.lr_position,
        "rotations": config.lr_rotation,
        "log_scales": config.lr_scale,
        "opacity_logits": config.lr_opacity,
        "sh_coeffs": config.lr_feature,
    }
    state.adam_t += 1
    t = state.adam_t
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name in PARAM_GROUPS:
        g = grads[name]
        m = state.moments_m[name]
        v = state.moments_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        getattr(state.cloud, name)[...] -= update
    # keep quaternions unit-norm after every optimizer step
    q = state.cloud.rotations
    q /= np.linalg.norm(q, axis=1, keepdims=True)


def densify(state: TrainState, config: TrainConfig) -> TrainState:
    """Clone small / split large Gaussians whose mean accumulated screen-space
    positional gradient exceeds the threshold; resets the gradient stats."""
    cloud = state.cloud
    n = cloud.count
    counts = np.maximum(state.grad_count, 1.0)
    avg = state.grad_accum / counts
    hot = avg > config.densify_grad_threshold
    if not np.any(hot):
        state.grad_accum = np.zeros(n)
        state.grad_count = np.zeros(n)
        return state

    scales = cloud.scales()
    max_scale = scales.max(axis=1)
    split_mask = hot & (max_scale > config.split_scale_cutoff * config.scene_extent)
    clone_mask = hot & ~split_mask

    keep = ~split_mask
    new = {name: [getattr(cloud, name)[keep]] for name in PARAM_GROUPS}
    new_m = {name: [state.moments_m[name][keep]] for name in PARAM_GROUPS}
    new_v = {name: [state.moments_v[name][keep]] for name in PARAM_GROUPS}

    def _append(idx, positions, log_scales):
        k = idx.sum()
        new["positions"].append(positions)
        new["rotations"].append(cloud.rotations[idx])
        new["log_scales"].append(log_scales)
        new["opacity_logits"].append(cloud.opacity_logits[idx])
        new["sh_coeffs"].append(cloud.sh_coeffs[idx])
        for name in PARAM_GROUPS:
            zeros = np.zeros((k,) + getattr(cloud, name).shape[1:])
            new_m[name].append(zeros)
            new_v[name].append(zeros.copy())

    if np.any(clone_mask):
        jitter = state.rng.standard_normal((int(clone_mask.sum()), 3))
        pos = cloud.positions[clone_mask] + config.clone_jitter * scales[clone_mask] * jitter
        _append(clone_mask, pos, cloud.log_scales[clone_mask])

    if np.any(split_mask):
        idx = np.where(split_mask)[0]
        R = quat_to_rotmat(cloud.normalized_rotations()[idx])
        arg = np.argmax(scales[idx], axis=1)
        axis = R[np.arange(idx.size), :, arg]
        sigma = scales[idx, arg]
        child_ls = cloud.log_scales[idx] - np.log(config.split_factor)
        for sign in (+0.5, -0.5):
            pos = cloud.positions[idx] + sign * sigma[:, None] * axis
            _append(split_mask, pos, child_ls)

    state.cloud = GaussianCloud(*(np.concatenate(new[name]) for name in PARAM_GROUPS))
    for name in PARAM_GROUPS:
        state.moments_m[name] = np.concatenate(new_m[name])
        state.moments_v[name] = np.concatenate(new_v[name])
    state.grad_accum = np.zeros(state.cloud.count)
    state.grad_count = np.zeros(state.cloud.count)
    state.check_alignment()
    return state


def prune(state: TrainState, config: TrainConfig) -> TrainState:
    """Drop near-transparent and oversized Gaussians; moments follow rows."""
    cloud = state.cloud
    opac = cloud.opacities()
    max_scale = cloud.scales().max(axis=1)
    keep = (opac >= config.prune_opacity_threshold) & (
        max_scale <= 0.5 * config.scene_extent
    )
    if not np.any(keep):
        raise DegenerateModelError(
            "pruning removed every Gaussian; model collapsed "
            f"(min opacity {opac.min():.4g}, max scale {max_scale.max():.4g})"
        )
    if np.all(keep):
        return state
    state.cloud = cloud.select(keep)
    for name in PARAM_GROUPS:
        state.moments_m[name] = state.moments_m[name][keep]
        state.moments_v[name] = state.moments_v[name][keep]
    state.grad_accum = state.grad_accum[keep]
    state.grad_count = state.grad_count[keep]
    state.check_alignment()
    return state


def _accumulate(total: dict, g: RenderGrads, scale: float) -> None:
    total["positions"] += scale * g.positions
    total["rotations"] += scale * g.rotations
    total["log_scales"] += scale * g.log_scales
    total["opacity_logits"] += scale * g.opacity_logits
    total["sh_coeffs"] += scale * g.sh_coeffs


def _batch_allocation(config: TrainConfig, stage: int) -> tuple[int, int]:
    """(multiview groups, single views) for one step."""
    if stage == 1:
        return max(config.batch_cameras // MULTIVIEW_GROUP, 1), 0
    n_single = min(MULTIVIEW_GROUP, max(config.batch_cameras - MULTIVIEW_GROUP, 0))
    n_groups = max((config.batch_cameras - n_single) // MULTIVIEW_GROUP, 1)
    return n_groups, n_single


def _provider_sds(bound: BoundProvider, images, cameras, prompt, t, rng, single_view):
    """Per-view pixel gradients from either a noise-prediction provider or a
    direct-gradient (remote) provider."""
    provider = bound.provider
    if hasattr(provider, "pixel_gradients"):
        if single_view:
            grads = []
            for img, cam in zip(images, cameras):
                grads += provider.pixel_gradients(
                    [img], [cam], augment_prompt(prompt, cam), prompt.negative_text,
                    t, bound.config.cfg_scale,
                )
            return grads
        return provider.pixel_gradients(
            images, cameras, prompt.text, prompt.negative_text, t, bound.config.cfg_scale
        )
    noises = [rng.standard_normal(img.shape) for img in images]
    if single_view:
        grads = []
        for img, cam, eps in zip(images, cameras, noises):
            grads += multiview_sds_pixel_gradients(
                [img], [cam], provider, prompt, t, [eps], bound.schedule,
                bound.config.cfg_scale, prompt_text=augment_prompt(prompt, cam),
            )
        return grads
    return multiview_sds_pixel_gradients(
        images, cameras, provider, prompt, t, noises, bound.schedule, bound.config.cfg_scale
    )


def train_step(
    state: TrainState,
    prompt: Prompt,
    mv: BoundProvider,
    config: TrainConfig,
    stage: int,
    sd: BoundProvider | None = None,
) -> TrainState:
    """One optimization step. Guidance failures skip the step; more than
    ``max_guidance_failures`` consecutive failures abort."""
    if stage not in (1, 2):
        raise ConfigError("stage must be 1 or 2")
    t0 = time.perf_counter()
    n_groups, n_single = _batch_allocation(config, stage)
    if stage == 1 or sd is None:
        n_single = 0
    background = np.zeros(3)

    total = {name: np.zeros_like(getattr(state.cloud, name)) for name in PARAM_GROUPS}
    step_loss = 0.0
    try:
        n_mv_views = n_groups * MULTIVIEW_GROUP
        for _ in range(n_groups):
            cams = sample_camera_group(state.rng, config)
            t = sample_timestep(state.rng, mv.config, mv.schedule)
            outs = [render(state.cloud, cam, background) for cam in cams]
            images = [o.rgb for o in outs]
            pix_grads = _provider_sds(mv, images, cams, prompt, t, state.rng, single_view=False)
            for out, cam, g in zip(outs, cams, pix_grads):
                s_loss, s_grad = sparsity_loss(out.alpha)
                up_rgb = (config.weight_mv / n_mv_views) * g
                up_alpha = (config.weight_sparsity / n_mv_views) * s_grad
                bg = render_backward(state.cloud, cam, background, up_rgb, up_alpha)
                _accumulate(total, bg, 1.0)
                state.grad_accum += bg.mean2d_norms
                state.grad_count += (bg.mean2d_norms > 0).astype(float)
                step_loss += (
                    config.weight_mv * float(np.mean(g * g))
                    + config.weight_sparsity * s_loss
                ) / n_mv_views
        if n_single > 0:
            cams = sample_cameras(state.rng, config, n_single)
            t = sample_timestep(state.rng, sd.config, sd.schedule)
            outs = [render(state.cloud, cam, background) for cam in cams]
            images = [o.rgb for o in outs]
            pix_grads = _provider_sds(sd, images, cams, prompt, t, state.rng, single_view=True)
            for out, cam, g in zip(outs, cams, pix_grads):
                up_rgb = (config.weight_sd / n_single) * g
                bg = render_backward(
                    state.cloud, cam, background, up_rgb, np.zeros_like(out.alpha)
                )
                _accumulate(total, bg, 1.0)
                state.grad_accum += bg.mean2d_norms
                state.grad_count += (bg.mean2d_norms > 0).astype(float)
                step_loss += config.weight_sd * float(np.mean(g * g)) / n_single
    except GuidanceUnavailableError:
        state.consecutive_failures += 1
        if state.consecutive_failures >= config.max_guidance_failures:
            raise GuidanceUnavailableError(
                f"guidance failed {state.consecutive_failures} times in a row"
            )
        state.wall_seconds += time.perf_counter() - t0
        return state

    state.consecutive_failures = 0
    _adam_step(state, total, config)
    state.step += 1
    state.step_losses.append(step_loss)
    state.wall_seconds += time.perf_counter() - t0
    return state


def run_pipeline(
    prompt: Prompt,
    mv: BoundProvider,
    config: TrainConfig,
    sd: BoundProvider | None = None,
    initial_cloud: GaussianCloud | None = None,
) -> tuple[GaussianCloud, RunReport]:
    """Full two-stage generation. With stage2_steps=0 this is the
    first-stage-only model."""
    wall0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    cloud = (
        initial_cloud.copy()
        if initial_cloud is not None
        else init_cloud(config.n_init_gaussians, rng, config.init_radius, config.sh_degree)
    )
    state = TrainState(cloud=cloud, rng=rng)
    report = RunReport(label="first-stage-only" if config.stage2_steps == 0 else "full")
    report.gaussian_counts.append((0, state.cloud.count))

    global_step = 0
    for stage, steps in ((1, config.stage1_steps), (2, config.stage2_steps)):
        stage_t0 = state.wall_seconds
        densify_allowed = stage == 1 or config.densify_in_stage2
        for s in range(1, steps + 1):
            train_step(state, prompt, mv, config, stage, sd=sd if stage == 2 else None)
            global_step += 1
            topo_changed = False
            if densify_allowed and s % config.densify_interval == 0 and s <= steps // 2:
                densify(state, config)
                topo_changed = True
            if s % config.prune_interval == 0:
                prune(state, config)
                topo_changed = True
            if topo_changed:
                report.gaussian_counts.append((global_step, state.cloud.count))
        report.stage_seconds[f"stage{stage}"] = state.wall_seconds - stage_t0
    report.total_seconds = time.perf_counter() - wall0
    report.step_losses = list(state.step_losses)
    report.total_steps = global_step
    return state.cloud, report
