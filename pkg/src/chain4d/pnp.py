"""Camera pose recovery from 2D-3D matches.

A pinhole camera with a fixed NDC focal length projects world points
through pose (R, t). Pose estimation runs the classic robust pipeline:
seeded RANSAC over minimal 4-point samples solved by EPnP (control-point
barycentric formulation, planar variant included), a quadric consistent
solver as fallback when EPnP degenerates toward a camera at infinity, and
Levenberg-Marquardt refinement on the inlier set with the rotation moved
along axis-angle increments so it stays exactly orthonormal.
"""

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .animation import procrustes_rotation
from .errors import (
    DegenerateGeometryError,
    NumericalError,
    PnPFailureError,
    ValidationError,
)

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "PnPConfig",
    "project",
    "project_depths",
    "epnp_solve",
    "quadric_pnp",
    "ransac_pnp",
    "lm_refine",
    "reprojection_rmse",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in NDC units over a pixel raster.

    The image extent spans [-1, 1] in NDC regardless of resolution; pixel
    coordinates map NDC x to (x + 1) / 2 * width (y likewise).
    """

    focal: float = 2.1875
    principal: tuple = (0.0, 0.0)
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if not self.focal > 0:
            raise ValidationError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")

    def ndc_to_pixels(self, ndc: np.ndarray) -> np.ndarray:
        ndc = np.asarray(ndc, dtype=np.float64)
        out = np.empty_like(ndc)
        out[..., 0] = (ndc[..., 0] + 1.0) * 0.5 * self.width
        out[..., 1] = (ndc[..., 1] + 1.0) * 0.5 * self.height
        return out

    def pixels_to_normalized(self, px: np.ndarray) -> np.ndarray:
        """Pixels to focal-normalized camera-plane coordinates."""
        px = np.asarray(px, dtype=np.float64)
        out = np.empty_like(px)
        out[..., 0] = (2.0 * px[..., 0] / self.width - 1.0
                       - self.principal[0]) / self.focal
        out[..., 1] = (2.0 * px[..., 1] / self.height - 1.0
                       - self.principal[1]) / self.focal
        return out

    def pixel_scale(self) -> float:
        """Pixels per unit of normalized image-plane offset (for thresholds)."""
        return 0.5 * self.focal * max(self.width, self.height)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: X_cam = R @ X_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValidationError(
                f"pose needs a 3x3 rotation and 3-vector translation, "
                f"got {r.shape} and {t.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-8:
            raise ValidationError("rotation is not orthonormal within 1e-8")
        if np.linalg.det(r) < 0.0:
            raise ValidationError("rotation has negative determinant")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PnPConfig:
    """Robust-estimation knobs: RANSAC schedule and thresholds."""

    threshold_px: float = 8.0
    iterations: int = 400
    confidence: float = 0.999
    seed: int = 0
    sample_size: int = 4
    fallback_translation_scale: float = 1e3

    def __post_init__(self):
        if not self.threshold_px > 0:
            raise ValidationError(
                f"inlier threshold must be positive, got {self.threshold_px}")
        if self.iterations < 1:
            raise ValidationError("need at least one iteration")
        if not 0.0 < self.confidence < 1.0:
            raise ValidationError("confidence must lie in (0, 1)")
        if self.sample_size < 4:
            raise ValidationError("minimal sample needs at least 4 matches")


def _as_matches(points2d, points3d):
    p2 = np.asarray(points2d, dtype=np.float64)
    p3 = np.asarray(points3d, dtype=np.float64)
    if p2.ndim != 2 or p2.shape[1] != 2:
        raise ValidationError(f"2D points must be Mx2, got {p2.shape}")
    if p3.shape != (p2.shape[0], 3):
        raise ValidationError(
            f"3D points must be {p2.shape[0]}x3, got {p3.shape}")
    return p2, p3


def project_depths(points3d, pose: CameraPose,
                   intrinsics: CameraIntrinsics):
    """Project points, returning (pixels, camera depths) without judgment;
    callers decide what to do about non-positive depths."""
    pts = np.atleast_2d(np.asarray(points3d, dtype=np.float64))
    cam = pose.transform(pts)
    z = cam[:, 2]
    safe = np.where(z == 0.0, 1e-300, z)
    ndc = np.empty((pts.shape[0], 2))
    ndc[:, 0] = intrinsics.focal * cam[:, 0] / safe + intrinsics.principal[0]
    ndc[:, 1] = intrinsics.focal * cam[:, 1] / safe + intrinsics.principal[1]
    return intrinsics.ndc_to_pixels(ndc), z


def project(points3d, pose: CameraPose,
            intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection to pixel coordinates.

    Raises when any point lands at or behind the camera plane; use
    ``project_depths`` to handle that case yourself.
    """
    single = np.asarray(points3d).ndim == 1
    px, z = project_depths(points3d, pose, intrinsics)
    if np.any(z <= 0.0):
        bad = int(np.argmax(z <= 0.0))
        raise NumericalError(
            f"point {bad} has non-positive camera depth {z[bad]:.6g} "
            f"(behind the camera)")
    return px[0] if single else px


def reprojection_rmse(pose, points2d, points3d, intrinsics) -> float:
    px, z = project_depths(points3d, pose, intrinsics)
    res = np.linalg.norm(px - points2d, axis=1)
    res[z <= 0.0] = np.inf
    return float(np.sqrt(np.mean(res ** 2)))


def _control_points(pts3d: np.ndarray):
    """EPnP world control points: centroid plus principal directions.

    Returns (control points, planar flag). Collinear input has no usable
    second principal direction and is rejected.
    """
    centroid = pts3d.mean(axis=0)
    centered = pts3d - centroid
    cov = centered.T @ centered / pts3d.shape[0]
    evals, evecs = np.linalg.eigh(cov)      # ascending
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    scale = np.sqrt(np.maximum(evals, 0.0))
    if scale[1] <= 1e-9 * max(scale[0], 1e-300):
        raise DegenerateGeometryError(
            "matches are collinear; pose is unobservable")
    planar = scale[2] <= 1e-6 * scale[0]
    if planar:
        ctrl = np.vstack([
            centroid,
            centroid + scale[0] * evecs[:, 0],
            centroid + scale[1] * evecs[:, 1],
        ])
    else:
        ctrl = np.vstack([
            centroid,
            centroid + scale[0] * evecs[:, 0],
            centroid + scale[1] * evecs[:, 1],
            centroid + scale[2] * evecs[:, 2],
        ])
    return ctrl, planar


def _barycentric(pts3d: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    """Coordinates of each point in the control-point affine frame."""
    n_ctrl = ctrl.shape[0]
    base = np.vstack([ctrl.T, np.ones(n_ctrl)])          # 4 x n_ctrl
    target = np.vstack([pts3d.T, np.ones(pts3d.shape[0])])
    alphas, *_ = np.linalg.lstsq(base, target, rcond=None)
    return alphas.T                                       # n x n_ctrl


def _distance_system(kernel: np.ndarray, ctrl: np.ndarray):
    """Linear system tying kernel-combination scales to control-point
    distances: L @ (beta products) = rho."""
    n_ctrl = ctrl.shape[0]
    nk = kernel.shape[1]
    pairs = [(i, j) for i in range(n_ctrl) for j in range(i + 1, n_ctrl)]
    rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in pairs])
    vs = [kernel[:, m].reshape(n_ctrl, 3) for m in range(nk)]
    diffs = np.array([[v[i] - v[j] for v in vs] for i, j in pairs])
    prods = []
    for b_i in range(nk):
        for a_i in range(b_i + 1):
            prods.append((a_i, b_i))
    l_mat = np.zeros((len(pairs), len(prods)))
    for col, (a, b) in enumerate(prods):
        dot = np.einsum("pd,pd->p", diffs[:, a], diffs[:, b])
        l_mat[:, col] = dot if a == b else 2.0 * dot
    return l_mat, rho, prods, diffs


def _beta_starts(l_mat, rho, prods, nk):
    """Initial beta guesses, one per truncated-unknown approximation."""
    col_of = {p: c for c, p in enumerate(prods)}
    starts = []

    def solve_cols(product_keys):
        cols = [col_of[p] for p in product_keys if p in col_of]
        if len(cols) != len(product_keys):
            return None
        sol, *_ = np.linalg.lstsq(l_mat[:, cols], rho, rcond=None)
        return dict(zip(product_keys, sol))

    # everything linear in beta_1
    keys = [(0, m) for m in range(nk)]
    sol = solve_cols(keys)
    if sol is not None and abs(sol[(0, 0)]) > 0.0:
        b1 = np.sqrt(abs(sol[(0, 0)]))
        beta = np.array([b1] + [sol[(0, m)] / b1 for m in range(1, nk)])
        starts.append(beta)
    # two active vectors
    if nk >= 2:
        sol = solve_cols([(0, 0), (0, 1), (1, 1)])
        if sol is not None:
            b1 = np.sqrt(abs(sol[(0, 0)]))
            b2 = np.sqrt(abs(sol[(1, 1)]))
            if sol[(0, 1)] < 0.0:
                b2 = -b2
            beta = np.zeros(nk)
            beta[0], beta[1] = b1, b2
            starts.append(beta)
    # three active vectors
    if nk >= 3:
        sol = solve_cols([(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)])
        if sol is not None and abs(sol[(0, 0)]) > 0.0:
            b1 = np.sqrt(abs(sol[(0, 0)]))
            b2 = np.sqrt(abs(sol[(1, 1)]))
            if sol[(0, 1)] < 0.0:
                b2 = -b2
            beta = np.zeros(nk)
            beta[0], beta[1] = b1, b2
            beta[2] = sol[(0, 2)] / b1
            starts.append(beta)
    return starts


def _gauss_newton_betas(betas, rho, diffs, iterations: int = 25):
    """Refine a batch of beta candidates on the distance residuals
    ||sum_k beta_k dv_k||^2 - rho per control pair (rows independent)."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float)).copy()
    nb, nk = betas.shape
    scale = max(float(np.max(np.abs(rho))), 1.0)
    active = np.ones(nb, dtype=bool)
    eye = np.eye(nk)
    for _ in range(iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cur = betas[idx]
        finite = np.isfinite(cur).all(axis=1)
        if not np.all(finite):
            active[idx[~finite]] = False
            idx = idx[finite]
            if idx.size == 0:
                break
            cur = cur[finite]
        combo = np.einsum("bk,pkd->bpd", cur, diffs)
        res = np.einsum("bpd,bpd->bp", combo, combo) - rho
        done = np.linalg.norm(res, axis=1) < 1e-14 * scale
        if np.all(done):
            active[idx] = False
            break
        jac = 2.0 * np.einsum("bpd,pkd->bpk", combo, diffs)
        gram = np.einsum("bpk,bpl->bkl", jac, jac)
        ridge = np.maximum(np.trace(gram, axis1=1, axis2=2) / nk, 1.0)
        gram = gram + (1e-12 * ridge)[:, None, None] * eye
        rhs = -np.einsum("bpk,bp->bk", jac, res)
        try:
            step = np.linalg.solve(gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        betas[idx] = cur + step
        small = (np.linalg.norm(step, axis=1)
                 < 1e-12 * np.maximum(np.linalg.norm(betas[idx], axis=1), 1.0))
        active[idx[done | small]] = False
    return betas


def _pose_from_camera_points(ctrl_world, ctrl_cam, alphas):
    """Rigid fit carrying world control points onto camera-frame ones."""
    cam_pts = alphas @ ctrl_cam
    if cam_pts[:, 2].mean() < 0.0:
        ctrl_cam = -ctrl_cam
        cam_pts = -cam_pts
    r = procrustes_rotation(ctrl_world, ctrl_cam)
    mu_w = ctrl_world.mean(axis=0)
    mu_c = ctrl_cam.mean(axis=0)
    t = mu_c - r @ mu_w
    return r, t


def _score_pose(r, t, pts3d, norm2d) -> float:
    cam = pts3d @ r.T + t
    z = cam[:, 2]
    if np.any(z <= 0.0):
        return np.inf
    proj = cam[:, :2] / z[:, None]
    return float(np.mean(np.linalg.norm(proj - norm2d, axis=1)))


def epnp_solve(points2d, points3d,
               intrinsics: CameraIntrinsics) -> CameraPose:
    """Control-point PnP on 4 or more matches.

    Expresses every 3D point in the affine frame of 4 (3 when the scene is
    planar) control points and reconstructs those control points in camera
    coordinates as a combination of the projection constraints' smallest
    singular vectors. The combination scales come from the control-point
    distance system, seeded by several truncated linearizations and
    polished by Gauss-Newton; the candidate with the lowest reprojection
    error wins, and a rigid fit world -> camera yields the pose.
    """
    p2, p3 = _as_matches(points2d, points3d)
    if p2.shape[0] < 4:
        raise ValidationError(
            f"need at least 4 matches, got {p2.shape[0]}")
    norm2d = intrinsics.pixels_to_normalized(p2)
    ctrl, planar = _control_points(p3)
    n_ctrl = ctrl.shape[0]
    alphas = _barycentric(p3, ctrl)

    n = p2.shape[0]
    m = np.zeros((2 * n, 3 * n_ctrl))
    for i in range(n):
        for j in range(n_ctrl):
            a = alphas[i, j]
            m[2 * i, 3 * j] = a
            m[2 * i, 3 * j + 2] = -a * norm2d[i, 0]
            m[2 * i + 1, 3 * j + 1] = a
            m[2 * i + 1, 3 * j + 2] = -a * norm2d[i, 1]
    _, _, vt = np.linalg.svd(m, full_matrices=True)
    nk = n_ctrl                              # kernel width: 4 spatial, 3 planar
    kernel = vt[::-1].T[:, :nk]              # columns by ascending singular value

    l_mat, rho, prods, diffs = _distance_system(kernel, ctrl)
    # The distance residuals are even in a global sign flip but not in
    # per-component flips, and the linearized seeds can land in a
    # reflected basin; sweep every relative sign pattern of each seed.
    patterns = [np.array((1.0,) + tail)
                for tail in itertools.product((1.0, -1.0), repeat=nk - 1)]
    seeds = []
    seen = set()
    for beta0 in _beta_starts(l_mat, rho, prods, nk):
        for signs in patterns:
            cand = beta0 * signs
            key = cand.tobytes()
            if key not in seen:
                seen.add(key)
                seeds.append(cand)
    refined = _gauss_newton_betas(np.array(seeds), rho, diffs)
    best = None
    for beta in refined:
        if not np.any(beta):
            continue
        ctrl_cam = (kernel @ beta).reshape(n_ctrl, 3)
        r, t = _pose_from_camera_points(ctrl, ctrl_cam, alphas)
        score = _score_pose(r, t, p3, norm2d)
        if best is None or score < best[0]:
            best = (score, r, t)
        if best[0] < 1e-10:
            break
    if best is None or not np.isfinite(best[0]):
        raise DegenerateGeometryError(
            "no control-point solution places the scene in front of "
            "the camera")
    return CameraPose(best[1], best[2])


def quadric_pnp(points2d, points3d,
                intrinsics: CameraIntrinsics) -> CameraPose:
    """Consistent-solver fallback: direct least squares over rotation
    entries with orthonormality restored by projection.

    Builds the homogeneous linear system in (vec(R), t), eliminates t,
    takes the smallest singular vector of the reduced quadric, projects it
    onto SO(3), and re-solves t given R. The reduced system pins a unique
    direction only with 6 or more matches; smaller samples are rejected.
    """
    p2, p3 = _as_matches(points2d, points3d)
    if p2.shape[0] < 6:
        raise ValidationError(
            f"the consistent solver needs at least 6 matches, "
            f"got {p2.shape[0]}")
    norm2d = intrinsics.pixels_to_normalized(p2)
    n = p2.shape[0]
    a_r = np.zeros((2 * n, 9))
    a_t = np.zeros((2 * n, 3))
    for i in range(n):
        x, y = norm2d[i]
        pt = p3[i]
        a_r[2 * i, 0:3] = pt
        a_r[2 * i, 6:9] = -x * pt
        a_t[2 * i] = (1.0, 0.0, -x)
        a_r[2 * i + 1, 3:6] = pt
        a_r[2 * i + 1, 6:9] = -y * pt
        a_t[2 * i + 1] = (0.0, 1.0, -y)
    # eliminate t: project a_r onto the orthogonal complement of col(a_t)
    q, _ = np.linalg.qr(a_t)
    reduced = a_r - q @ (q.T @ a_r)
    _, _, vt = np.linalg.svd(reduced)
    best = None
    for sign in (1.0, -1.0):
        r_raw = (sign * vt[-1]).reshape(3, 3)
        u, _, wt = np.linalg.svd(r_raw)
        d = np.sign(np.linalg.det(u @ wt))
        r = u @ np.diag([1.0, 1.0, d]) @ wt
        t, *_ = np.linalg.lstsq(a_t, -a_r @ r.ravel(), rcond=None)
        score = _score_pose(r, t, p3, norm2d)
        if best is None or score < best[0]:
            best = (score, r, t)
    if not np.isfinite(best[0]):
        raise DegenerateGeometryError(
            "consistent solver found no pose with the scene in front "
            "of the camera")
    return CameraPose(best[1], best[2])


def _axis_angle_matrix(rvec: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(rvec)
    if angle < 1e-300:
        return np.eye(3)
    axis = rvec / angle
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def lm_refine(pose: CameraPose, points2d, points3d,
              intrinsics: CameraIntrinsics,
              max_iterations: int = 50) -> CameraPose:
    """Levenberg-Marquardt polish of a pose on its inlier matches.

    The rotation moves along left-multiplied axis-angle increments, so
    every iterate is exactly orthonormal. Steps are accepted only when the
    reprojection RMSE drops, making the result never worse than the input;
    if the solver cannot improve at all it returns the input pose.
    """
    p2, p3 = _as_matches(points2d, points3d)

    def residuals(r, t):
        px, z = project_depths(p3, CameraPose(r, t), intrinsics)
        res = (px - p2).ravel()
        if np.any(z <= 0.0):
            return None
        return res

    r = pose.rotation.copy()
    t = pose.translation.copy()
    res = residuals(r, t)
    if res is None:
        warnings.warn("refinement skipped: points behind the initial camera",
                      stacklevel=2)
        return pose
    cost = float(res @ res)
    lam = 1e-3
    eps = 1e-7
    for _ in range(max_iterations):
        jac = np.empty((res.size, 6))
        for p_idx in range(6):
            delta = np.zeros(6)
            delta[p_idx] = eps
            r_p = _axis_angle_matrix(delta[:3]) @ r
            t_p = t + delta[3:]
            res_p = residuals(r_p, t_p)
            if res_p is None:
                res_p = res
            jac[:, p_idx] = (res_p - res) / eps
        g = jac.T @ res
        h = jac.T @ jac
        improved = False
        for _ in range(8):
            try:
                step = np.linalg.solve(h + lam * np.diag(np.diag(h))
                                       + 1e-12 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_new = _axis_angle_matrix(step[:3]) @ r
            t_new = t + step[3:]
            res_new = residuals(r_new, t_new)
            if res_new is not None:
                cost_new = float(res_new @ res_new)
                if cost_new < cost:
                    r, t, res, cost = r_new, t_new, res_new, cost_new
                    lam = max(lam * 0.3, 1e-12)
                    improved = True
                    break
            lam *= 10.0
        if not improved:
            break
        if np.linalg.norm(step) < 1e-14:
            break
    # numeric drift guard: fold the iterated rotation back onto SO(3)
    u, _, wt = np.linalg.svd(r)
    r = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ wt))]) @ wt
    refined = CameraPose(r, t)
    if reprojection_rmse(refined, p2, p3, intrinsics) > \
            reprojection_rmse(pose, p2, p3, intrinsics) + 1e-12:
        warnings.warn("refinement diverged; keeping the initial pose",
                      stacklevel=2)
        return pose
    return refined


def ransac_pnp(points2d, points3d, intrinsics: CameraIntrinsics,
               cfg: PnPConfig | None = None):
    """Seeded RANSAC pose estimation with EPnP minimal samples.

    Returns (pose, inlier mask, info dict). The winner is the model with
    the most inliers, ties broken by lower mean inlier residual and then
    by iteration index, so a given seed always returns the same pose. When
    EPnP's translation blows past 1e3 x scene scale or puts the scene
    behind the camera, the quadric consistent solver retries the same
    sample before it is abandoned.
    """
    cfg = cfg or PnPConfig()
    p2, p3 = _as_matches(points2d, points3d)
    n = p2.shape[0]
    if n < cfg.sample_size:
        raise ValidationError(
            f"robust pose estimation needs at least {cfg.sample_size} "
            f"matches, got {n}")
    scene_scale = float(np.linalg.norm(p3.max(axis=0) - p3.min(axis=0)))
    scene_scale = max(scene_scale, 1e-12)
    rng = np.random.default_rng(cfg.seed)

    best = None            # (count, mean_residual, iteration, pose, mask)
    for it in range(cfg.iterations):
        sample = rng.choice(n, size=cfg.sample_size, replace=False)
        pose = None
        try:
            pose = epnp_solve(p2[sample], p3[sample], intrinsics)
        except (DegenerateGeometryError, ValidationError):
            pose = None
        if pose is not None:
            depths = pose.transform(p3[sample])[:, 2]
            degenerate = (np.linalg.norm(pose.translation) >
                          cfg.fallback_translation_scale * scene_scale
                          or depths.mean() < 0.0)
            if degenerate:
                # the consistent solver needs 6 matches; on smaller
                # samples the iteration is abandoned (fresh sample next)
                if cfg.sample_size >= 6:
                    try:
                        pose = quadric_pnp(p2[sample], p3[sample], intrinsics)
                    except (DegenerateGeometryError, ValidationError):
                        pose = None
                else:
                    pose = None
        if pose is None:
            continue
        px, z = project_depths(p3, pose, intrinsics)
        res = np.linalg.norm(px - p2, axis=1)
        res[z <= 0.0] = np.inf
        mask = res < cfg.threshold_px
        count = int(mask.sum())
        if count < cfg.sample_size:
            continue
        mean_res = float(res[mask].mean())
        key = (-count, mean_res, it)
        if best is None or key < best[0]:
            best = (key, pose, mask)
            ratio = count / n
            if ratio > 0.0:
                denom = np.log1p(-min(ratio ** cfg.sample_size,
                                      1.0 - 1e-12))
                needed = np.log(1.0 - cfg.confidence) / denom
                if it + 1 >= needed:
                    break
    if best is None:
        raise PnPFailureError(
            f"no pose reached {cfg.sample_size} inliers at "
            f"{cfg.threshold_px:.3g} px over {cfg.iterations} iterations "
            f"({n} matches)")
    _, pose, mask = best
    refined = lm_refine(pose, p2[mask], p3[mask], intrinsics)
    rmse = reprojection_rmse(refined, p2[mask], p3[mask], intrinsics)
    info = {
        "inliers": int(mask.sum()),
        "matches": n,
        "rmse_px": rmse,
        "focal": intrinsics.focal,
    }
    return refined, mask, info
