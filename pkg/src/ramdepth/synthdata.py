"""Deterministic synthetic multi-view scenes with exact ground-truth depth.

Scenes are raycast through pinhole cameras: a tilted background plane that
covers every ray, optional extra planes, and textured spheres. Textures are
multi-octave value noise evaluated at the 3D hit point, so colors are
consistent across views by construction. The generator never exposes a
depth-range to the model side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Tensor
from .fileio import load_pfm, load_ppm, save_pfm, save_ppm
from .geometry import Intrinsics, Pose, View, load_cameras, relative_transform, save_cameras


class GenerationError(Exception):
    pass


# ---------------------------------------------------------------------------
# value noise

def _hash01(ix, iy, iz, seed: int):
    """Deterministic lattice hash -> [0, 1)."""
    seed64 = np.uint64((seed * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        h = (np.asarray(ix).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             ^ np.asarray(iy).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ np.asarray(iz).astype(np.uint64) * np.uint64(0x165667B19E3779F9)
             ^ seed64)
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1] at 3D points (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    pf = np.floor(p)
    i = pf.astype(np.int64)
    f = p - pf
    t = f * f * (3.0 - 2.0 * f)  # smoothstep fade
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (np.where(dx, t[..., 0], 1 - t[..., 0])
                     * np.where(dy, t[..., 1], 1 - t[..., 1])
                     * np.where(dz, t[..., 2], 1 - t[..., 2]))
                out += w * _hash01(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
    return out


def fbm(points: np.ndarray, seed: int, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise, normalized to [0, 1].

    The slow amplitude falloff (0.85/octave) keeps a large share of the
    texture contrast in the fine-scale octaves, so surfaces stay
    discriminative for matching and degrade visibly under defocus blur.
    """
    total = np.zeros(np.asarray(points).shape[:-1])
    amp, freq, norm = 1.0, 1.0, 0.0
    for o in range(octaves):
        total += amp * value_noise(np.asarray(points) * freq, seed + 101 * o)
        norm += amp
        amp *= 0.85
        freq *= 2.0
    return total / norm


# ---------------------------------------------------------------------------
# primitives

@dataclass
class _Plane:
    point: np.ndarray
    normal: np.ndarray  # unit
    tex_seed: int
    tex_freq: float

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        t = ((self.point - origin) @ self.normal) / np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        return np.where((np.abs(denom) > 1e-12) & (t > 1e-6), t, np.inf)


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    tex_seed: int
    tex_freq: float

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = (dirs * dirs).sum(axis=-1)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-6, t0, t1)
        return np.where(ok & (t > 1e-6), t, np.inf)


@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 96
    height: int = 64
    n_views: int = 4            # reference + (n_views - 1) sources
    n_spheres: int = 2
    depth_base_range: tuple[float, float] = (3.0, 7.0)   # generation-side only
    baseline_frac_range: tuple[float, float] = (0.06, 0.14)
    min_overlap: float = 0.5
    max_retries: int = 5
    untextured: bool = False    # robustness-test scenes: flat-colored surfaces

    def __post_init__(self):
        if self.width % 8 or self.height % 8:
            raise GenerationError("image dims must be divisible by 8")
        if self.n_views < 2:
            raise GenerationError("need at least one source view")


@dataclass
class Scene:
    id: str
    views: list[View]           # reference first
    gt_depths: list[np.ndarray]  # (H, W) float32 per view, camera-z units


def _look_at(position, target, up=(0.0, 1.0, 0.0)) -> Pose:
    z = np.asarray(target, float) - np.asarray(position, float)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return Pose(r, -r @ np.asarray(position, float))


def _shade(prims, hit_idx, points, untextured: bool) -> np.ndarray:
    """Per-pixel RGB in [0,1] from the hit primitive's texture."""
    h, w = hit_idx.shape
    img = np.zeros((3, h, w))
    for pi, prim in enumerate(prims):
        sel = hit_idx == pi
        if not sel.any():
            continue
        p = points[sel] * prim.tex_freq
        for ch in range(3):
            if untextured:
                img[ch][sel] = 0.25 + 0.5 * _hash01(
                    np.int64(pi), np.int64(ch), np.int64(0), prim.tex_seed)
            else:
                img[ch][sel] = 0.15 + 0.7 * fbm(p, prim.tex_seed + 7919 * ch)
    return img


def _render(prims, intr: Intrinsics, pose: Pose, w: int, h: int, untextured: bool):
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dirs_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy,
                         np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.rotation  # R^T d, row-vector form
    origin = -pose.rotation.T @ pose.translation
    ts = np.stack([p.intersect(origin, dirs) for p in prims])
    hit_idx = ts.argmin(axis=0)
    t = ts.min(axis=0)
    if not np.all(np.isfinite(t)):
        raise GenerationError("a ray escaped the scene (background plane misconfigured)")
    depth = t.astype(np.float32)  # dirs_cam has z == 1, so t is camera-z
    points = origin + dirs * t[..., None]
    img = _shade(prims, hit_idx, points, untextured)
    return np.clip(img, 0.0, 1.0).astype(np.float32), depth


def _overlap_fraction(ref: View, ref_depth, src: View) -> float:
    h, w = ref_depth.shape
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    k = ref.intrinsics
    rays = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    r, t = relative_transform(ref.pose, src.pose)
    p = (rays * ref_depth[..., None]) @ r.T + t
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = src.intrinsics.fx * p[..., 0] / z + src.intrinsics.cx
        v = src.intrinsics.fy * p[..., 1] / z + src.intrinsics.cy
    ok = (z > 1e-6) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    return float(ok.mean())


def generate_scene(spec: SceneSpec, scene_id: str = "scene") -> Scene:
    """Raycast a textured scene; deterministic per spec."""
    rng = np.random.default_rng(spec.seed)
    base = rng.uniform(*spec.depth_base_range)
    # Texture frequency scales with image width so the pixel-space detail is
    # resolution-independent: fine octaves stay below the sampling rate
    # (keeping colors view-consistent) while carrying enough contrast that
    # defocus blur measurably degrades matchability.
    tex_freq = rng.uniform(2.25, 4.5) / base * (spec.width / 96.0)

    prims: list = []
    tilt = rng.uniform(-0.2, 0.2, size=2)
    nb = np.array([tilt[0], tilt[1], -1.0])
    prims.append(_Plane(np.array([0.0, 0.0, base * rng.uniform(1.25, 1.6)]),
                        nb / np.linalg.norm(nb), int(rng.integers(1 << 30)), tex_freq))
    if rng.random() < 0.5:
        ng = np.array([rng.uniform(-0.1, 0.1), -1.0, rng.uniform(-0.3, 0.0)])
        prims.append(_Plane(np.array([0.0, base * 0.45, 0.0]),
                            ng / np.linalg.norm(ng), int(rng.integers(1 << 30)), tex_freq))
    for _ in range(spec.n_spheres):
        d = base * rng.uniform(0.55, 0.95)
        center = np.array([rng.uniform(-0.3, 0.3) * d, rng.uniform(-0.25, 0.25) * d, d])
        prims.append(_Sphere(center, base * rng.uniform(0.08, 0.18),
                             int(rng.integers(1 << 30)), tex_freq))

    w, h = spec.width, spec.height
    intr = Intrinsics(fx=0.9 * w, fy=0.9 * w, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)
    ref_pose = Pose(np.eye(3), np.zeros(3))
    ref_img, ref_depth = _render(prims, intr, ref_pose, w, h, spec.untextured)
    ref = View(Tensor(ref_img), intr, ref_pose, "view_0")

    views, depths = [ref], [ref_depth]
    target = np.array([0.0, 0.0, base * 0.85])
    shrink = 1.0
    for i in range(1, spec.n_views):
        for attempt in range(spec.max_retries + 1):
            mag = base * rng.uniform(*spec.baseline_frac_range) * shrink
            direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.35])
            direction /= np.linalg.norm(direction)
            pose = _look_at(direction * mag,
                            target + rng.normal(scale=0.02 * base, size=3))
            cand = View(None, intr, pose, f"view_{i}")
            if _overlap_fraction(ref, ref_depth, cand) >= spec.min_overlap:
                break
            shrink *= 0.7
        else:
            raise GenerationError(f"could not satisfy overlap floor for view {i}")
        img, depth = _render(prims, intr, pose, w, h, spec.untextured)
        cand.image = Tensor(img)
        views.append(cand)
        depths.append(depth)
    return Scene(scene_id, views, depths)


def reprojection_consistency(scene: Scene, z_tol: float = 0.02) -> float:
    """Fraction of mutually visible reference pixels whose color reprojects
    within 0.05; the multi-view consistency the matcher relies on."""
    ref = scene.views[0]
    ref_depth = scene.gt_depths[0]
    h, w = ref_depth.shape
    k = ref.intrinsics
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    rays = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    errs, total_vis = [], 0
    for src, src_depth in zip(scene.views[1:], scene.gt_depths[1:]):
        r, t = relative_transform(ref.pose, src.pose)
        p = (rays * ref_depth[..., None]) @ r.T + t
        z = p[..., 2]
        zs = np.where(z > 1e-6, z, 1.0)
        u = src.intrinsics.fx * p[..., 0] / zs + src.intrinsics.cx
        v = src.intrinsics.fy * p[..., 1] / zs + src.intrinsics.cy
        x0 = np.floor(u).astype(int)
        y0 = np.floor(v).astype(int)
        inb = (z > 1e-6) & (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
        x0c, y0c = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
        # mutually visible: all 4 bilinear corners agree in depth with the ray
        vis = inb.copy()
        for dy in (0, 1):
            for dx in (0, 1):
                dsrc = src_depth[y0c + dy, x0c + dx]
                vis &= np.abs(dsrc - z) <= z_tol * np.abs(z)
        fx, fy = u - x0c, v - y0c
        img = src.image.data
        for ch in range(3):
            c = img[ch]
            interp = (c[y0c, x0c] * (1 - fx) * (1 - fy) + c[y0c, x0c + 1] * fx * (1 - fy)
                      + c[y0c + 1, x0c] * (1 - fx) * fy + c[y0c + 1, x0c + 1] * fx * fy)
            err = np.abs(interp - ref.image.data[ch])
            errs.append((err[vis] < 0.05))
        total_vis += int(vis.sum())
    if total_vis == 0:
        return 1.0
    return float(np.concatenate([e.ravel() for e in errs]).mean())


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    mae: float
    rmse: float
    threshold_fractions: dict[float, float]


def compute_metrics(pred, gt, mask, thresholds=(0.1, 0.5, 1.0, 2.0)) -> Metrics:
    pred = np.asarray(pred, np.float64).reshape(-1)
    gt = np.asarray(gt, np.float64).reshape(-1)
    m = np.asarray(mask, bool).reshape(-1)
    if not m.any():
        raise ValueError("compute_metrics: empty valid mask")
    err = np.abs(pred[m] - gt[m])
    return Metrics(
        mae=float(err.mean()),
        rmse=float(np.sqrt((err ** 2).mean())),
        threshold_fractions={float(t): float((err > t).mean()) for t in thresholds},
    )


# ---------------------------------------------------------------------------
# image perturbation

def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian on (C, H, W); radius ceil(3*sigma), replicated edges."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.asarray(image, np.float64)
    for axis in (1, 2):
        padw = [(0, 0), (0, 0), (0, 0)]
        padw[axis] = (radius, radius)
        padded = np.pad(out, padw, mode="edge")
        out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), axis, padded)
    return out.astype(np.float32)


def blur_view(view: View, sigma: float) -> View:
    blurred = gaussian_blur(view.image.data, sigma)
    return View(Tensor(blurred), view.intrinsics, view.pose, view.id)


# ---------------------------------------------------------------------------
# dataset I/O: one directory per scene, scenes.txt manifest

def save_dataset(path, scenes: list[Scene]) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for scene in scenes:
        d = root / scene.id
        d.mkdir(exist_ok=True)
        for k, (view, depth) in enumerate(zip(scene.views, scene.gt_depths)):
            save_ppm(d / f"view_{k}.ppm", view.image.data)
            save_pfm(d / f"depth_{k}.pfm", depth)
        save_cameras(d / "cameras.txt", scene.views)
        names.append(scene.id)
    (root / "scenes.txt").write_text("".join(n + "\n" for n in names))


def load_dataset(path) -> list[Scene]:
    root = Path(path)
    manifest = root / "scenes.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    scenes = []
    for name in manifest.read_text().split():
        d = root / name
        cams = load_cameras(d / "cameras.txt")
        views, depths = [], []
        for k in range(len(cams)):
            vid = f"view_{k}"
            intr, pose = cams[vid]
            views.append(View(Tensor(load_ppm(d / f"{vid}.ppm")), intr, pose, vid))
            depths.append(load_pfm(d / f"depth_{k}.pfm"))
        scenes.append(Scene(name, views, depths))
    return scenes


def generate_dataset(n_scenes: int, seed: int, **spec_kwargs) -> list[Scene]:
    return [generate_scene(SceneSpec(seed=seed + 1000 * i, **spec_kwargs), f"scene_{i:04d}")
            for i in range(n_scenes)]
