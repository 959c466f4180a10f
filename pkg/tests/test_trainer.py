import numpy as np
import pytest

from support import make_camera, random_cloud
from splatgen.errors import ConfigError, DegenerateModelError, GuidanceUnavailableError
from splatgen.gaussians import SH_C0
from splatgen.guidance import (
    AnalyticDenoiser,
    NoiseEchoProvider,
    Prompt,
    linear_schedule,
)
from splatgen.rasterizer import render
from splatgen.trainer import (
    MULTIVIEW_GROUP,
    BoundProvider,
    RunReport,
    TrainConfig,
    TrainState,
    _batch_allocation,
    densify,
    init_cloud,
    prune,
    run_pipeline,
    sample_camera_group,
    sample_cameras,
    sparsity_loss,
    train_step,
)


def small_config(**kw):
    base = dict(
        stage1_steps=4,
        stage2_steps=2,
        batch_cameras=4,
        n_init_gaussians=30,
        densify_interval=2,
        prune_interval=2,
        render_resolution=24,
        seed=7,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestInitCloud:
    def test_deterministic_and_counts(self):
        a = init_cloud(100, np.random.default_rng(3))
        b = init_cloud(100, np.random.default_rng(3))
        assert a.count == 100
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.sh_coeffs, b.sh_coeffs)

    def test_positions_inside_ball(self):
        cloud = init_cloud(500, np.random.default_rng(0), radius=0.5)
        assert np.all(np.linalg.norm(cloud.positions, axis=1) <= 0.5 + 1e-12)

    def test_opacity_and_color_ranges(self):
        cloud = init_cloud(200, np.random.default_rng(1))
        assert np.allclose(cloud.opacities(), 0.1)
        base = 0.5 + SH_C0 * cloud.sh_coeffs[:, 0, 0]
        assert base.min() >= 0.3 - 1e-9 and base.max() <= 0.7 + 1e-9
        # gray: all three channels equal
        assert np.allclose(cloud.sh_coeffs[:, 0, 0], cloud.sh_coeffs[:, 0, 1])
        assert np.allclose(cloud.sh_coeffs[:, 0, 0], cloud.sh_coeffs[:, 0, 2])

    def test_identity_rotations_isotropic_scales(self):
        cloud = init_cloud(50, np.random.default_rng(2))
        assert np.allclose(cloud.rotations, [1.0, 0, 0, 0])
        assert np.allclose(cloud.log_scales, cloud.log_scales[0, 0])

    def test_rejects_zero(self):
        with pytest.raises(ConfigError):
            init_cloud(0, np.random.default_rng(0))


class TestCameraSampling:
    def test_within_configured_ranges(self):
        cfg = small_config()
        rng = np.random.default_rng(11)
        cams = sample_cameras(rng, cfg, 200)
        for c in cams:
            assert cfg.distance_min <= c.distance <= cfg.distance_max
            assert cfg.fov_min <= c.fov_deg <= cfg.fov_max
            assert cfg.elevation_min <= c.elevation <= cfg.elevation_max
            assert 0.0 <= c.azimuth < 360.0
            assert c.width == c.height == cfg.render_resolution

    def test_group_of_four_orthogonal_azimuths(self):
        cfg = small_config()
        rng = np.random.default_rng(12)
        for _ in range(20):
            group = sample_camera_group(rng, cfg)
            assert len(group) == MULTIVIEW_GROUP == 4
            base = group[0]
            for i, c in enumerate(group):
                assert np.isclose((c.azimuth - base.azimuth) % 360.0, 90.0 * i)
                assert c.elevation == base.elevation
                assert c.distance == base.distance
                assert c.fov_deg == base.fov_deg


class TestSparsityLoss:
    def test_value_is_mean_alpha(self, rng):
        a = rng.uniform(0, 1, (16, 16))
        loss, grad = sparsity_loss(a)
        assert np.isclose(loss, a.mean())
        assert np.allclose(grad, 1.0 / a.size)

    def test_zero_alpha_zero_grad(self):
        loss, grad = sparsity_loss(np.zeros((8, 8)))
        assert loss == 0.0
        assert np.allclose(grad, 0.0)

    def test_mixed(self):
        a = np.zeros((2, 2))
        a[0, 0] = 0.5
        loss, grad = sparsity_loss(a)
        assert np.isclose(loss, 0.125)
        assert grad[0, 0] == 0.25 and grad[1, 1] == 0.0


class TestBatchAllocation:
    def test_stage1_all_groups(self):
        assert _batch_allocation(small_config(batch_cameras=12), 1) == (3, 0)
        assert _batch_allocation(small_config(batch_cameras=4), 1) == (1, 0)
        assert _batch_allocation(small_config(batch_cameras=2), 1) == (1, 0)

    def test_stage2_mixed(self):
        assert _batch_allocation(small_config(batch_cameras=12), 2) == (2, 4)
        assert _batch_allocation(small_config(batch_cameras=8), 2) == (1, 4)
        assert _batch_allocation(small_config(batch_cameras=4), 2) == (1, 0)


class TestDensifyPrune:
    def _state(self, n=10, seed=0):
        cloud = random_cloud(np.random.default_rng(seed), n)
        return TrainState(cloud=cloud, rng=np.random.default_rng(seed + 1))

    def test_no_hot_gaussians_no_change(self):
        st = self._state()
        cfg = small_config()
        n0 = st.cloud.count
        densify(st, cfg)
        assert st.cloud.count == n0
        assert np.all(st.grad_accum == 0) and np.all(st.grad_count == 0)

    def test_split_large_gaussian(self):
        st = self._state(n=5)
        cfg = small_config()
        st.cloud.log_scales[2] = np.log([0.3, 0.05, 0.05])  # major axis x, big
        st.moments_m["positions"][:] = 1.0  # sentinel for tracking
        st.grad_accum[2] = 10.0
        st.grad_count[2] = 1.0
        orig_pos = st.cloud.positions[2].copy()
        densify(st, cfg)
        # original removed, two children added: net +1
        assert st.cloud.count == 6
        # children live at +-0.5 sigma along the major axis with scales / 1.6
        children = st.cloud.positions[4:]
        mid = children.mean(axis=0)
        assert np.allclose(mid, orig_pos, atol=1e-12)
        assert np.isclose(np.linalg.norm(children[0] - children[1]), 0.3)
        assert np.allclose(st.cloud.scales()[4:], [0.3 / 1.6, 0.05 / 1.6, 0.05 / 1.6])
        # new rows start with zero Adam moments; survivors keep theirs
        assert np.allclose(st.moments_m["positions"][:4], 1.0)
        assert np.allclose(st.moments_m["positions"][4:], 0.0)
        assert np.all(st.grad_accum == 0)

    def test_clone_small_gaussian(self):
        st = self._state(n=5)
        cfg = small_config()
        st.cloud.log_scales[1] = np.log(0.005)  # below 1% of extent 1.0
        st.grad_accum[1] = 10.0
        st.grad_count[1] = 1.0
        orig = st.cloud.positions[1].copy()
        densify(st, cfg)
        assert st.cloud.count == 6
        # clone lands near the original (1% of sigma jitter)
        assert np.linalg.norm(st.cloud.positions[5] - orig) < 0.005 * 0.01 * 10
        assert np.allclose(st.cloud.log_scales[5], np.log(0.005))

    def test_threshold_uses_mean_not_sum(self):
        st = self._state(n=3)
        cfg = small_config(densify_grad_threshold=0.02)
        st.grad_accum[0] = 0.05  # accumulated over many views
        st.grad_count[0] = 10.0  # mean 0.005 < threshold
        densify(st, cfg)
        assert st.cloud.count == 3

    def test_prune_transparent_and_oversized(self):
        st = self._state(n=6)
        cfg = small_config()
        st.cloud.opacity_logits[0] = -8.0  # ~0.0003 < 0.05
        st.cloud.log_scales[3] = np.log(0.6)  # > 0.5 * extent
        st.moments_v["log_scales"][:] = np.arange(6)[:, None]
        prune(st, cfg)
        assert st.cloud.count == 4
        assert np.allclose(st.moments_v["log_scales"][:, 0], [1, 2, 4, 5])

    def test_prune_all_raises(self):
        st = self._state(n=4)
        st.cloud.opacity_logits[:] = -10.0
        with pytest.raises(DegenerateModelError):
            prune(st, small_config())


class TestTrainStep:
    def _bound(self, provider):
        sched = linear_schedule()
        cfg = small_config()
        return BoundProvider(provider, sched, cfg.mv_guidance())

    def test_exact_zero_gradients_fix_parameters(self):
        from splatgen.trainer import PARAM_GROUPS, _adam_step

        cfg = small_config()
        cloud = random_cloud(np.random.default_rng(5), 8)
        st = TrainState(cloud=cloud.copy(), rng=np.random.default_rng(6))
        zeros = {name: np.zeros_like(getattr(cloud, name)) for name in PARAM_GROUPS}
        for _ in range(3):
            _adam_step(st, zeros, cfg)
        assert np.array_equal(st.cloud.positions, cloud.positions)
        assert np.array_equal(st.cloud.log_scales, cloud.log_scales)
        assert np.array_equal(st.cloud.sh_coeffs, cloud.sh_coeffs)

    def test_self_consistent_guidance_gives_vanishing_loss(self):
        # a denoiser whose target equals the current render yields a
        # score-distillation gradient that is zero up to float roundoff; with
        # sparsity disabled the step loss vanishes and every parameter moves
        # by at most one Adam step (bounded by its learning rate)
        sched = linear_schedule()
        cfg = small_config(weight_sparsity=0.0, batch_cameras=4)
        cloud = random_cloud(np.random.default_rng(5), 8)
        st = TrainState(cloud=cloud.copy(), rng=np.random.default_rng(6))
        bound = BoundProvider(_self_render_provider(st, sched), sched, cfg.mv_guidance())
        train_step(st, Prompt(text="x"), bound, cfg, stage=1)
        assert st.step == 1
        assert st.step_losses[0] < 1e-20
        assert np.max(np.abs(st.cloud.positions - cloud.positions)) <= cfg.lr_position * 1.0001
        assert np.max(np.abs(st.cloud.log_scales - cloud.log_scales)) <= cfg.lr_scale * 1.0001

    def test_sparsity_only_shrinks_coverage(self):
        sched = linear_schedule()
        cfg = small_config(weight_sparsity=1.0, batch_cameras=4, stage1_steps=30)
        cloud = random_cloud(np.random.default_rng(5), 8)
        cloud.opacity_logits[:] = 1.0
        st = TrainState(cloud=cloud.copy(), rng=np.random.default_rng(6))
        bound = BoundProvider(_self_render_provider(st, sched), sched, cfg.mv_guidance())
        cam = make_camera(24, 24)
        before = render(cloud, cam, np.zeros(3)).alpha.mean()
        for _ in range(30):
            train_step(st, Prompt(text="x"), bound, cfg, stage=1)
        after = render(st.cloud, cam, np.zeros(3)).alpha.mean()
        assert after < before

    def test_guidance_failure_skips_then_aborts(self):
        sched = linear_schedule()

        class Failing:
            def predict_noise(self, *a, **k):
                raise GuidanceUnavailableError("down")

        cfg = small_config(max_guidance_failures=3)
        st = TrainState(
            cloud=random_cloud(np.random.default_rng(0), 5),
            rng=np.random.default_rng(1),
        )
        bound = BoundProvider(Failing(), sched, cfg.mv_guidance())
        for _ in range(2):
            train_step(st, Prompt(text="x"), bound, cfg, stage=1)
        assert st.step == 0 and st.consecutive_failures == 2
        with pytest.raises(GuidanceUnavailableError):
            train_step(st, Prompt(text="x"), bound, cfg, stage=1)

    def test_invalid_stage(self):
        sched = linear_schedule()
        st = TrainState(
            cloud=random_cloud(np.random.default_rng(0), 3),
            rng=np.random.default_rng(1),
        )
        with pytest.raises(ConfigError):
            train_step(
                st, Prompt(text="x"),
                BoundProvider(_self_render_provider(st, sched), sched, small_config().mv_guidance()),
                small_config(), stage=3,
            )


def _self_render_provider(state, schedule):
    """Denoiser whose target is the trainer's own current render, so the
    score-distillation gradient is identically zero."""
    return AnalyticDenoiser(
        lambda cam: render(state.cloud, cam, np.zeros(3)).rgb, schedule
    )


class TestRunPipeline:
    def _target_provider(self):
        sched = linear_schedule()
        target_cloud = random_cloud(np.random.default_rng(42), 6)

        def target_fn(cam):
            return render(target_cloud, cam, np.zeros(3)).rgb

        return AnalyticDenoiser(target_fn, sched), sched, target_fn

    def test_stage_schedule_and_report(self):
        provider, sched, _ = self._target_provider()
        cfg = small_config(stage1_steps=4, stage2_steps=2, n_init_gaussians=20)
        mv = BoundProvider(provider, sched, cfg.mv_guidance())
        sd = BoundProvider(provider, sched, cfg.sd_guidance())
        cloud, report = run_pipeline(Prompt(text="x"), mv, cfg, sd=sd)
        assert report.total_steps == 6
        assert report.label == "full"
        assert set(report.stage_seconds) == {"stage1", "stage2"}
        assert len(report.step_losses) <= 6
        assert report.gaussian_counts[0] == (0, 20)
        assert report.gpu_hours == report.total_seconds / 3600.0
        assert cloud.count >= 1

    def test_first_stage_only_label(self):
        provider, sched, _ = self._target_provider()
        cfg = small_config(stage1_steps=3, stage2_steps=0)
        mv = BoundProvider(provider, sched, cfg.mv_guidance())
        _, report = run_pipeline(Prompt(text="x"), mv, cfg)
        assert report.label == "first-stage-only"
        assert report.total_steps == 3

    def test_deterministic_given_seed(self):
        provider, sched, _ = self._target_provider()
        cfg = small_config(stage1_steps=3, stage2_steps=0, seed=123)
        mv = BoundProvider(provider, sched, cfg.mv_guidance())
        a, _ = run_pipeline(Prompt(text="x"), mv, cfg)
        b, _ = run_pipeline(Prompt(text="x"), mv, cfg)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.sh_coeffs, b.sh_coeffs)

    def test_loss_decreases_toward_known_target(self):
        # analytic-denoiser guidance toward a fixed renderable target: the
        # mean photometric error against that target must drop
        provider, sched, target_fn = self._target_provider()
        cfg = small_config(
            stage1_steps=60, stage2_steps=0, n_init_gaussians=40,
            render_resolution=24, batch_cameras=4,
            lr_position=2e-3, lr_feature=5e-2, lr_opacity=2e-2, lr_scale=1e-2,
            weight_sparsity=0.1,
            densify_interval=20, prune_interval=30, seed=3,
        )
        mv = BoundProvider(provider, sched, cfg.mv_guidance())
        rng = np.random.default_rng(0)

        def photometric(cloud):
            errs = []
            for az in (0.0, 90.0, 180.0, 270.0):
                cam = make_camera(24, 24, azimuth=az)
                errs.append(np.mean((render(cloud, cam, np.zeros(3)).rgb - target_fn(cam)) ** 2))
            return float(np.mean(errs))

        init = init_cloud(cfg.n_init_gaussians, np.random.default_rng(cfg.seed), cfg.init_radius)
        before = photometric(init)
        cloud, _ = run_pipeline(Prompt(text="x"), mv, cfg)
        after = photometric(cloud)
        assert after < before

    def test_initial_cloud_respected(self):
        provider, sched, _ = self._target_provider()
        cfg = small_config(stage1_steps=1, stage2_steps=0, densify_interval=100, prune_interval=100)
        mv = BoundProvider(provider, sched, cfg.mv_guidance())
        seed_cloud = random_cloud(np.random.default_rng(9), 17)
        cloud, _ = run_pipeline(Prompt(text="x"), mv, cfg, initial_cloud=seed_cloud)
        assert cloud.count == 17
        # the provided cloud object itself must not be mutated
        assert np.array_equal(seed_cloud.positions, random_cloud(np.random.default_rng(9), 17).positions)
