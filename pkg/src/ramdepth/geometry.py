"""Pinhole cameras and epipolar projection.

Convention: poses map world points to camera coordinates (x_cam = R x + t),
pixel (0, 0) is the center of the top-left pixel. Projection math runs in
float64 and rejoins the float32 autodiff graph with an analytic Jacobian
w.r.t. depth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffcore import Tensor, record_op, ops

BEHIND_CAMERA_Z = 1e-6
DEPTH_CLAMP = 1e-4
# sentinel coordinate far outside any image, so bilinear sampling yields zeros
INVALID_COORD = -1e6


class GeometryError(Exception):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64)

    def rescale(self, scale: float) -> "Intrinsics":
        """Intrinsics at a 1/scale resolution, pixel-center preserving."""
        return Intrinsics(
            fx=self.fx / scale,
            fy=self.fy / scale,
            cx=(self.cx + 0.5) / scale - 0.5,
            cy=(self.cy + 0.5) / scale - 0.5,
        )


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray  # 3x3, world -> camera
    translation: np.ndarray  # 3-vector

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(r) - 1.0) > 1e-6 or np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise GeometryError("rotation must be orthonormal with det 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def scaled(self, factor: float) -> "Pose":
        return Pose(self.rotation, self.translation * factor)


@dataclass
class View:
    image: Tensor  # (3, H, W) in [0, 1]
    intrinsics: Intrinsics
    pose: Pose
    id: str

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


def relative_transform(ref: Pose, src: Pose):
    """(R, t) mapping reference-camera coordinates to source-camera ones."""
    r = src.rotation @ ref.rotation.T
    t = src.translation - r @ ref.translation
    return r, t


def project(q0, depth: float, ref, src):
    """Project reference pixel q0 at the given depth into the source camera.

    ref and src are (Intrinsics, Pose) pairs. Returns (u, v, z) where z is
    the source-camera depth before perspective division; z <= BEHIND_CAMERA_Z
    flags a behind-camera point.
    """
    if depth <= 0:
        raise GeometryError("project requires positive depth")
    k0, e0 = ref
    ki, ei = src
    u0, v0 = float(q0[0]), float(q0[1])
    ray = np.array([(u0 - k0.cx) / k0.fx, (v0 - k0.cy) / k0.fy, 1.0])
    r, t = relative_transform(e0, ei)
    p = r @ (depth * ray) + t
    z = p[2]
    if z <= BEHIND_CAMERA_Z:
        return INVALID_COORD, INVALID_COORD, z
    u = ki.fx * p[0] / z + ki.cx
    v = ki.fy * p[1] / z + ki.cy
    return u, v, z


def project_map(depth: Tensor, ref, src, scale: float = 1.0):
    """Densely project a coarse depth map into the source view.

    depth: Tensor (1, Hc, Wc) in the reference frame; ref/src are
    (Intrinsics, Pose) pairs at full resolution; scale is the coarse-to-full
    factor (intrinsics are rescaled by 1/scale on both sides).

    Returns (coords, valid): coords is a differentiable Tensor (2, Hc, Wc)
    of source coarse-pixel (u, v); valid is a bool array marking pixels in
    front of the source camera. Invalid pixels get a far out-of-bounds
    coordinate and zero depth-gradient, so downstream sampling yields zeros.
    """
    k0 = ref[0].rescale(scale)
    ki = src[0].rescale(scale)
    r, t = relative_transform(ref[1], src[1])

    depth = ops.clamp_min(depth, DEPTH_CLAMP)
    _, hc, wc = depth.shape
    vv, uu = np.meshgrid(np.arange(hc, dtype=np.float64), np.arange(wc, dtype=np.float64), indexing="ij")
    rays = np.stack([(uu - k0.cx) / k0.fx, (vv - k0.cy) / k0.fy, np.ones_like(uu)])  # (3, Hc, Wc)
    a = np.tensordot(r, rays, axes=1)  # (3, Hc, Wc): rotated ray directions

    d = depth.data[0].astype(np.float64)
    p = a * d[None] + t.reshape(3, 1, 1)
    z = p[2]
    valid = z > BEHIND_CAMERA_Z
    zs = np.where(valid, z, 1.0)
    u = ki.fx * p[0] / zs + ki.cx
    v = ki.fy * p[1] / zs + ki.cy
    coords = np.stack([np.where(valid, u, INVALID_COORD), np.where(valid, v, INVALID_COORD)])

    # du/dd, dv/dd from p = d*a + t: d(u)/dd = fx*(ax*tz - az*tx)/z^2
    du_dd = ki.fx * (a[0] * t[2] - a[2] * t[0]) / (zs * zs)
    dv_dd = ki.fy * (a[1] * t[2] - a[2] * t[1]) / (zs * zs)
    du_dd = np.where(valid, du_dd, 0.0)
    dv_dd = np.where(valid, dv_dd, 0.0)

    def bwd(g):
        dd = g[0] * du_dd + g[1] * dv_dd
        return (dd[None].astype(depth.dtype),)

    out = record_op([depth], coords.astype(depth.dtype), bwd)
    return out, valid


def normalize_poses(views: list[View]):
    """Rescale translations so reference-to-source baselines have mean 1.

    Returns (new views, scale); scale is the original mean baseline, so
    predicted depths multiply by scale to return to scene units and training
    ground truth divides by it.
    """
    if len(views) < 2:
        raise GeometryError("normalize_poses needs a reference and at least one source")
    ref = views[0]
    norms = []
    for v in views[1:]:
        _, t = relative_transform(ref.pose, v.pose)
        norms.append(np.linalg.norm(t))
    scale = float(np.mean(norms))
    if scale <= 0:
        raise GeometryError("degenerate baseline: all relative translations are zero")
    out = [replace(v, pose=v.pose.scaled(1.0 / scale)) for v in views]
    return out, scale


def backproject(depth, view: View):
    """Lift a full-resolution depth map to colored world points.

    depth: Tensor or array (1, H, W) or (H, W); non-positive entries are
    skipped. Returns (points (M, 3) float64, colors (M, 3) uint8).
    """
    d = depth.data if isinstance(depth, Tensor) else np.asarray(depth)
    d = d.reshape(view.height, view.width).astype(np.float64)
    k, e = view.intrinsics, view.pose
    vv, uu = np.meshgrid(np.arange(view.height, dtype=np.float64),
                         np.arange(view.width, dtype=np.float64), indexing="ij")
    keep = d > 0
    rays = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    p_cam = rays[keep] * d[keep][:, None]
    points = (p_cam - e.translation) @ e.rotation  # R^T (p - t), row-vector form
    img = view.image.data if isinstance(view.image, Tensor) else np.asarray(view.image)
    colors = np.clip(img.transpose(1, 2, 0)[keep] * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return points, colors


# ---------------------------------------------------------------------------
# cameras.txt: `view_id fx fy cx cy r00 ... r22 tx ty tz`

def save_cameras(path, views: list[View]) -> None:
    with open(path, "w") as f:
        for v in views:
            k, p = v.intrinsics, v.pose
            vals = [k.fx, k.fy, k.cx, k.cy, *p.rotation.reshape(-1), *p.translation]
            f.write(v.id + " " + " ".join(repr(float(x)) for x in vals) + "\n")


def load_cameras(path) -> dict[str, tuple[Intrinsics, Pose]]:
    cams: dict[str, tuple[Intrinsics, Pose]] = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 17:
                raise GeometryError(f"{path}:{ln}: expected 17 fields, got {len(parts)}")
            vid = parts[0]
            vals = [float(x) for x in parts[1:]]
            intr = Intrinsics(*vals[0:4])
            pose = Pose(np.array(vals[4:13]).reshape(3, 3), np.array(vals[13:16]))
            cams[vid] = (intr, pose)
    return cams
