"""Gaussian primitives: covariance construction, spherical-harmonics color,
and perspective projection into camera space.

All functions are pure; batch variants (suffix ``_batch``) operate on stacked
arrays and are what the rasterizer consumes. Every differentiable operation
has a matching ``*_vjp`` computing exact reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from splatgen.errors import InvalidParameterError, ShapeError

# Real spherical-harmonics constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

DEFAULT_NEAR_PLANE = 0.01
COV2D_LOWPASS = 0.3  # px^2 added to both diagonal entries of cov2d


@dataclass
class CameraPose:
    """Turntable pinhole camera looking at the world origin, +z up-reference.

    azimuth/elevation in degrees, distance in scene units, fov_deg is the
    vertical field of view.
    """

    azimuth: float
    elevation: float
    distance: float
    fov_deg: float
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not (self.distance > 0):
            raise InvalidParameterError(f"camera distance must be > 0, got {self.distance}")
        if not (0.0 < self.fov_deg < 180.0):
            raise InvalidParameterError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        self.azimuth = float(self.azimuth) % 360.0

    @property
    def position(self) -> np.ndarray:
        az = np.deg2rad(self.azimuth)
        el = np.deg2rad(self.elevation)
        return self.distance * np.array(
            [np.sin(az) * np.cos(el), -np.cos(az) * np.cos(el), np.sin(el)]
        )

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x (right), y (down),
        z (forward) axes expressed in world coordinates."""
        pos = self.position
        fwd = -pos / np.linalg.norm(pos)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        n = np.linalg.norm(right)
        if n < 1e-12:  # looking straight up/down
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
            n = np.linalg.norm(right)
        right = right / n
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def intrinsics(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy) with pixel centers at integer coordinates."""
        fy = 0.5 * self.height / np.tan(0.5 * np.deg2rad(self.fov_deg))
        fx = fy
        cx = 0.5 * (self.width - 1)
        cy = 0.5 * (self.height - 1)
        return fx, fy, cx, cy


@dataclass
class GaussianCloud:
    """The optimizable 3D representation.

    positions (N,3); rotations (N,4) raw quaternions (w,x,y,z) renormalized in
    the forward pass; log_scales (N,3); opacity_logits (N,); sh_coeffs
    (N, (L+1)^2, 3).
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        n = self.count
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ShapeError(f"{name}: expected {want}, got {got}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise ShapeError(f"sh_coeffs: expected (N, (L+1)^2, 3), got {self.sh_coeffs.shape}")
        m = self.sh_coeffs.shape[1]
        if int(np.sqrt(m)) ** 2 != m:
            raise ShapeError(f"sh_coeffs count {m} is not a perfect square")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[1])) - 1

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def normalized_rotations(self) -> np.ndarray:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return self.rotations / norms

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
        )

    def select(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[idx],
            self.rotations[idx],
            self.log_scales[idx],
            self.opacity_logits[idx],
            self.sh_coeffs[idx],
        )

    @staticmethod
    def empty(sh_degree: int = 0) -> "GaussianCloud":
        m = (sh_degree + 1) ** 2
        return GaussianCloud(
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros((0, 3)),
            np.zeros((0,)),
            np.zeros((0, m, 3)),
        )


# ---------------------------------------------------------------------------
# Covariance construction


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N,4) unit quaternions (w,x,y,z) -> (N,3,3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_quat_partials(q: np.ndarray) -> np.ndarray:
    """(N,4) unit quats -> (N,4,3,3) with dR/dq_a stacked along axis 1."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(-1, 3, 3)
    dx = np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1
    ).reshape(-1, 3, 3)
    dy = np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=-1
    ).reshape(-1, 3, 3)
    dz = np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=-1
    ).reshape(-1, 3, 3)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def build_covariance_batch(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2*log_scale)) R^T with R from the renormalized
    quaternion. Returns (N,3,3)."""
    if not (np.isfinite(rotations).all() and np.isfinite(log_scales).all()):
        raise InvalidParameterError("non-finite rotation or log_scale")
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise InvalidParameterError("zero-norm quaternion")
    q = rotations / norms
    R = quat_to_rotmat(q)
    s = np.exp(log_scales)  # (N,3)
    M = R * s[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


def build_covariance_vjp(
    rotations: np.ndarray, log_scales: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of build_covariance_batch w.r.t. raw quaternions and
    log scales, given upstream d_cov (N,3,3)."""
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    q = rotations / norms
    R = quat_to_rotmat(q)
    s = np.exp(log_scales)
    M = R * s[:, None, :]
    dM = (d_cov + np.transpose(d_cov, (0, 2, 1))) @ M
    dR = dM * s[:, None, :]
    d_log_scales = np.einsum("nik,nik->nk", R, dM) * s
    partials = _rotmat_quat_partials(q)  # (N,4,3,3)
    dq_unit = np.einsum("naij,nij->na", partials, dR)
    # back through normalization
    d_rot = (dq_unit - q * np.sum(q * dq_unit, axis=1, keepdims=True)) / norms
    return d_rot, d_log_scales


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Single-Gaussian covariance. Requires the quaternion to be unit norm
    within 1e-6."""
    rotation = np.asarray(rotation, dtype=float)
    log_scale = np.asarray(log_scale, dtype=float)
    if rotation.shape != (4,) or log_scale.shape != (3,):
        raise ShapeError("rotation must be (4,), log_scale (3,)")
    if not (np.isfinite(rotation).all() and np.isfinite(log_scale).all()):
        raise InvalidParameterError("non-finite inputs")
    if abs(np.linalg.norm(rotation) - 1.0) > 1e-6:
        raise InvalidParameterError("quaternion not unit norm within 1e-6")
    return build_covariance_batch(rotation[None], log_scale[None])[0]


# ---------------------------------------------------------------------------
# Spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions. dirs (N,3) -> (N,(L+1)^2)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction): (N,(L+1)^2,3)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g = np.zeros((n, (degree + 1) ** 2, 3))
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = -2 * SH_C2[2] * x
        g[:, 6, 1] = -2 * SH_C2[2] * y
        g[:, 6, 2] = 4 * SH_C2[2] * z
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = 2 * SH_C2[4] * x
        g[:, 8, 1] = -2 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = 6 * SH_C3[0] * x * y
        g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = -2 * SH_C3[2] * x * y
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = 8 * SH_C3[2] * y * z
        g[:, 12, 0] = -6 * SH_C3[3] * x * z
        g[:, 12, 1] = -6 * SH_C3[3] * y * z
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = -2 * SH_C3[4] * x * y
        g[:, 13, 2] = 8 * SH_C3[4] * x * z
        g[:, 14, 0] = 2 * SH_C3[5] * x * z
        g[:, 14, 1] = -2 * SH_C3[5] * y * z
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = -6 * SH_C3[6] * x * y
    return g


def eval_sh_batch(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """coeffs (N,M,3), unit dirs (N,3) -> raw RGB (N,3) = 0.5 + basis . coeffs."""
    m = coeffs.shape[1]
    degree = int(np.sqrt(m)) - 1
    basis = sh_basis(dirs, degree)
    return 0.5 + np.einsum("nm,nmc->nc", basis, coeffs)


def eval_sh_vjp(
    coeffs: np.ndarray, dirs: np.ndarray, d_rgb: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. coeffs (N,M,3) and direction (N,3)."""
    m = coeffs.shape[1]
    degree = int(np.sqrt(m)) - 1
    basis = sh_basis(dirs, degree)
    d_coeffs = basis[:, :, None] * d_rgb[:, None, :]
    bgrad = sh_basis_grad(dirs, degree)  # (N,M,3)
    d_dirs = np.einsum("nmc,nmd->nd", coeffs * d_rgb[:, None, :], bgrad)
    return d_coeffs, d_dirs


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Raw (unclamped) RGB for one Gaussian seen from unit direction view_dir."""
    coeffs = np.asarray(coeffs, dtype=float)
    view_dir = np.asarray(view_dir, dtype=float)
    if coeffs.ndim != 2 or coeffs.shape[1] != 3:
        raise ShapeError(f"coeffs must be (M,3), got {coeffs.shape}")
    m = coeffs.shape[0]
    if int(np.sqrt(m)) ** 2 != m or m > 16:
        raise ShapeError(f"coefficient count {m} is not (L+1)^2 with L<=3")
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise InvalidParameterError("view_dir must be unit norm")
    return eval_sh_batch(coeffs[None], view_dir[None])[0]


# ---------------------------------------------------------------------------
# Perspective projection (EWA local affine approximation)


def project_batch(
    positions: np.ndarray,
    covs: np.ndarray,
    camera: CameraPose,
    near: float = DEFAULT_NEAR_PLANE,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project Gaussians to the image plane.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), valid (N,) bool).
    Entries with depth <= near are culled (valid=False); their outputs are
    undefined and must be ignored.
    """
    W = camera.rotation()
    fx, fy, cx, cy = camera.intrinsics()
    t = (positions - camera.position) @ W.T  # (N,3) camera-space
    depth = t[:, 2]
    valid = depth > near
    z = np.where(valid, depth, 1.0)  # avoid div by ~0 on culled rows
    mean2d = np.stack([fx * t[:, 0] / z + cx, fy * t[:, 1] / z + cy], axis=1)
    J = np.zeros((positions.shape[0], 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 1, 1] = fy / z
    J[:, 0, 2] = -fx * t[:, 0] / z**2
    J[:, 1, 2] = -fy * t[:, 1] / z**2
    M = np.einsum("ij,njk,lk->nil", W, covs, W)
    cov2d = np.einsum("nij,njk,nlk->nil", J, M, J)
    cov2d[:, 0, 0] += COV2D_LOWPASS
    cov2d[:, 1, 1] += COV2D_LOWPASS
    return mean2d, cov2d, depth, valid


def project_vjp(
    positions: np.ndarray,
    covs: np.ndarray,
    camera: CameraPose,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
    d_depth: np.ndarray,
    valid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of project_batch w.r.t. positions and 3D covariances.

    Culled rows receive zero gradient. Includes the dependence of the local
    affine Jacobian on the Gaussian mean.
    """
    W = camera.rotation()
    fx, fy, _, _ = camera.intrinsics()
    t = (positions - camera.position) @ W.T
    z = np.where(valid, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]

    J = np.zeros((positions.shape[0], 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 1, 1] = fy / z
    J[:, 0, 2] = -fx * tx / z**2
    J[:, 1, 2] = -fy * ty / z**2
    M = np.einsum("ij,njk,lk->nil", W, covs, W)

    mask = valid.astype(float)
    d_mean2d = d_mean2d * mask[:, None]
    d_cov2d = d_cov2d * mask[:, None, None]
    d_depth = d_depth * mask

    # through cov2d = J M J^T
    d_M = np.einsum("nai,nab,nbj->nij", J, d_cov2d, J)
    d_cov = np.einsum("ji,njk,kl->nil", W, d_M, W)  # W^T dM W
    d_J = np.einsum("nab,nbi,nij->naj", d_cov2d + np.transpose(d_cov2d, (0, 2, 1)), J, M)

    # through mean2d = (fx tx/z + cx, fy ty/z + cy)
    d_t = np.einsum("nij,ni->nj", J, d_mean2d)
    d_t[:, 2] += d_depth

    # J's own dependence on t
    d_t[:, 0] += d_J[:, 0, 2] * (-fx / z**2)
    d_t[:, 1] += d_J[:, 1, 2] * (-fy / z**2)
    d_t[:, 2] += (
        d_J[:, 0, 0] * (-fx / z**2)
        + d_J[:, 1, 1] * (-fy / z**2)
        + d_J[:, 0, 2] * (2 * fx * tx / z**3)
        + d_J[:, 1, 2] * (2 * fy * ty / z**3)
    )
    d_pos = d_t @ W
    return d_pos * mask[:, None], d_cov * mask[:, None, None]


def project_gaussian(
    mean: np.ndarray,
    cov: np.ndarray,
    camera: CameraPose,
    near: float = DEFAULT_NEAR_PLANE,
):
    """Project one Gaussian. Returns (mean2d, cov2d, depth), or None when the
    Gaussian is behind the near plane (culled marker, not an error)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.shape != (3,) or cov.shape != (3, 3):
        raise ShapeError("mean must be (3,), cov (3,3)")
    if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
        raise InvalidParameterError("non-finite inputs")
    mean2d, cov2d, depth, valid = project_batch(mean[None], cov[None], camera, near)
    if not valid[0]:
        return None
    return mean2d[0], cov2d[0], float(depth[0])


def view_directions(positions: np.ndarray, camera: CameraPose) -> np.ndarray:
    """Unit directions from the camera center to each Gaussian mean."""
    d = positions - camera.position
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def view_directions_vjp(
    positions: np.ndarray, camera: CameraPose, d_dirs: np.ndarray
) -> np.ndarray:
    d = positions - camera.position
    n = np.linalg.norm(d, axis=1, keepdims=True)
    u = d / n
    return (d_dirs - u * np.sum(u * d_dirs, axis=1, keepdims=True)) / n
