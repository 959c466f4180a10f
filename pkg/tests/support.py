"""Shared test helpers: an independent per-pixel reference renderer (no
tiling, no shared code with the production compositing path) and finite
difference utilities."""

import numpy as np

from splatgen.gaussians import CameraPose, GaussianCloud


def reference_render(cloud: GaussianCloud, camera: CameraPose, background=(0.0, 0.0, 0.0)):
    """O(pixels x gaussians) renderer: sequential front-to-back compositing of
    every Gaussian over the full frame. Returns (rgb, alpha)."""
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=float)
    n = cloud.count

    # camera model (recomputed here from its definition)
    az = np.deg2rad(camera.azimuth)
    el = np.deg2rad(camera.elevation)
    cpos = camera.distance * np.array(
        [np.sin(az) * np.cos(el), -np.cos(az) * np.cos(el), np.sin(el)]
    )
    fwd = -cpos / np.linalg.norm(cpos)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    W = np.stack([right, down, fwd])
    fy = 0.5 * h / np.tan(0.5 * np.deg2rad(camera.fov_deg))
    fx = fy
    cx, cy = 0.5 * (w - 1), 0.5 * (h - 1)

    entries = []
    for i in range(n):
        q = cloud.rotations[i] / np.linalg.norm(cloud.rotations[i])
        qw, qx, qy, qz = q
        R = np.array(
            [
                [1 - 2 * (qy**2 + qz**2), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
                [2 * (qx * qy + qw * qz), 1 - 2 * (qx**2 + qz**2), 2 * (qy * qz - qw * qx)],
                [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx**2 + qy**2)],
            ]
        )
        s = np.exp(cloud.log_scales[i])
        sigma = R @ np.diag(s**2) @ R.T
        t = W @ (cloud.positions[i] - cpos)
        if t[2] <= 0.01:
            continue
        z = t[2]
        u = fx * t[0] / z + cx
        v = fy * t[1] / z + cy
        J = np.array([[fx / z, 0, -fx * t[0] / z**2], [0, fy / z, -fy * t[1] / z**2]])
        cov2d = J @ W @ sigma @ W.T @ J.T + 0.3 * np.eye(2)
        # color: SH evaluated toward the gaussian, clamped
        d = cloud.positions[i] - cpos
        d = d / np.linalg.norm(d)
        color = np.clip(_sh_color(cloud.sh_coeffs[i], d), 0.0, 1.0)
        opac = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[i]))
        entries.append((z, i, u, v, np.linalg.inv(cov2d), color, opac))
    entries.sort(key=lambda e: (e[0], e[1]))

    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.astype(float)
    ys = ys.astype(float)
    rgb = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    T = np.ones((h, w))
    for _, _, u, v, conic, color, opac in entries:
        dx = xs - u
        dy = ys - v
        power = -0.5 * (conic[0, 0] * dx**2 + 2 * conic[0, 1] * dx * dy + conic[1, 1] * dy**2)
        alpha = np.minimum(opac * np.exp(power), 0.99)
        active = T >= 1e-4
        wgt = np.where(active, alpha * T, 0.0)
        rgb += wgt[:, :, None] * color
        alpha_map += wgt
        T = np.where(active, T * (1.0 - alpha), T)
    rgb += (1.0 - alpha_map)[:, :, None] * bg
    return rgb, alpha_map


def _sh_color(coeffs, d):
    # real SH basis written out independently of the library tables
    x, y, z = d
    basis = [0.28209479177387814]
    if coeffs.shape[0] >= 4:
        basis += [
            -0.4886025119029199 * y,
            0.4886025119029199 * z,
            -0.4886025119029199 * x,
        ]
    if coeffs.shape[0] >= 9:
        basis += [
            1.0925484305920792 * x * y,
            -1.0925484305920792 * y * z,
            0.31539156525252005 * (2 * z * z - x * x - y * y),
            -1.0925484305920792 * x * z,
            0.5462742152960396 * (x * x - y * y),
        ]
    if coeffs.shape[0] >= 16:
        basis += [
            -0.5900435899266435 * y * (3 * x * x - y * y),
            2.890611442640554 * x * y * z,
            -0.4570457994644658 * y * (4 * z * z - x * x - y * y),
            0.3731763325901154 * z * (2 * z * z - 3 * x * x - 3 * y * y),
            -0.4570457994644658 * x * (4 * z * z - x * x - y * y),
            1.445305721320277 * z * (x * x - y * y),
            -0.5900435899266435 * x * (x * x - 3 * y * y),
        ]
    return 0.5 + np.asarray(basis) @ coeffs


def random_cloud(rng, n, sh_degree=0, spread=0.4, scale_range=(0.05, 0.25)):
    """Random well-conditioned cloud for oracle comparisons."""
    positions = rng.uniform(-spread, spread, size=(n, 3))
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    opacity_logits = rng.uniform(-1.5, 1.5, size=n)
    m = (sh_degree + 1) ** 2
    sh = np.zeros((n, m, 3))
    # keep raw colors inside (0,1) so the clamp stays inactive for grad checks
    sh[:, 0, :] = rng.uniform(-0.4, 0.4, size=(n, 3)) / 0.28209479177387814
    if m > 1:
        sh[:, 1:, :] = rng.uniform(-0.05, 0.05, size=(n, m - 1, 3))
    return GaussianCloud(positions, rotations, log_scales, opacity_logits, sh)


def make_camera(width=64, height=64, azimuth=0.0, elevation=0.0):
    return CameraPose(azimuth, elevation, 3.0, 40.0, width, height)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / den)
