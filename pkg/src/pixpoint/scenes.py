"""Procedural scene generation and analytic ray-cast rendering.

World frame equals the LiDAR frame: +x forward, +y left, +z up, LiDAR at the
origin. Scenes are a ground plane (class 0) plus convex primitives, either
floating in per-class altitude bands (default) or standing on the ground.
Camera images are rendered per pixel with first-hit shading
albedo * ambient * lambert (headlight lambert term); LiDAR returns are cast
over an azimuth x elevation grid. Everything is closed-form and deterministic
in the seed, so geometric ground truth is exact.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import CameraIntrinsics, RigidTransform, SensorRig
from .seeding import rng_for

KINDS = ("sphere", "box", "vertical_cylinder")

# Albedo anchors per class id (1-based); class 0 is the ground plane.
CLASS_PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.65, 0.85],
        [0.90, 0.80, 0.25],
        [0.30, 0.75, 0.30],
        [0.70, 0.35, 0.80],
        [0.95, 0.55, 0.15],
    ]
)

GROUND_ALBEDO = np.array([0.35, 0.33, 0.30])
SKY_RGB = np.array([0.55, 0.70, 0.90])


@dataclass(frozen=True)
class Primitive:
    class_id: int
    kind: str
    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple
    ground_plane_height: float
    ambient_light: float


@dataclass(frozen=True)
class WorldConfig:
    """Scene sampling bounds.

    Class id fixes the primitive kind (cycling sphere/box/cylinder), the
    albedo palette entry, and a geometric signature. Floating placement
    (default) puts class c inside its own altitude band z_band(c), so a
    point's height decodes the class; grounded placement sits primitives on
    the ground and instead bands the principal size by class. Either way
    classes are decodable both from appearance and from geometry, so both
    encoders can in principle carry the label signal.
    """

    x_range: tuple = (8.0, 12.5)
    y_range: tuple = (-4.0, 4.0)
    ground_height: float = -1.6
    num_classes: int = 6
    min_primitives: int = 4
    max_primitives: int = 6
    placement: str = "floating"   # floating | grounded
    size_min: float = 0.7
    size_step: float = 0.3        # grounded mode only: per-class size stride
    size_jitter: float = 0.3
    float_band_base: float = 0.6  # z offset of the class-1 band above ground
    float_band_step: float = 1.15
    ambient_range: tuple = (0.75, 1.0)
    class_weights: tuple | None = None

    def size_band(self, class_id: int) -> tuple:
        if self.placement == "floating":
            # z encodes the class; sizes share one range.
            return self.size_min, self.size_min + self.size_jitter
        lo = self.size_min + self.size_step * (class_id - 1)
        return lo, lo + self.size_jitter

    def z_band(self, class_id: int) -> tuple:
        lo = self.ground_height + self.float_band_base + self.float_band_step * (class_id - 1)
        return lo, lo + self.float_band_step

    def validate(self):
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ConfigError("degenerate world bounds")
        if self.min_primitives < 1 or self.max_primitives < self.min_primitives:
            raise ConfigError("primitive count range invalid")
        if self.num_classes < 1 or self.num_classes > len(CLASS_PALETTE):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_PALETTE)}]")
        if self.size_min <= 0 or self.size_step < 0 or self.size_jitter <= 0:
            raise ConfigError("size band parameters must be positive")
        if self.placement not in ("grounded", "floating"):
            raise ConfigError("placement must be grounded or floating")
        if self.placement == "floating":
            if self.float_band_step <= self.size_min + self.size_jitter:
                raise ConfigError("float_band_step must exceed the largest size")
        if not (0 < self.ambient_range[0] <= self.ambient_range[1] <= 1):
            raise ConfigError("ambient range must sit inside (0, 1]")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if len(w) != self.num_classes or np.any(w < 0) or w.sum() <= 0:
                raise ConfigError("class_weights must be num_classes nonnegative values")


@dataclass(frozen=True)
class RenderConfig:
    lidar_azimuth_count: int = 96
    lidar_elevation_count: int = 24
    lidar_azimuth_range: tuple = (-0.5, 0.5)
    lidar_elevation_range: tuple = (-0.30, 0.55)
    max_range: float = 60.0         # camera rendering range
    lidar_max_range: float = 35.0   # LiDAR return range, kept below max_range
                                    # so every return's pixel ray still hits

    def validate(self):
        if self.lidar_azimuth_count < 1 or self.lidar_elevation_count < 1:
            raise ConfigError("LiDAR grid must have at least one ray")
        if self.max_range <= 0 or self.lidar_max_range <= 0:
            raise ConfigError("ranges must be positive")
        if self.lidar_max_range > self.max_range:
            raise ConfigError("lidar_max_range must not exceed max_range")


@dataclass
class Sample:
    """One paired observation with exact geometric ground truth."""

    image: np.ndarray          # H x W x 3 float32 in [0, 1]
    points: np.ndarray         # N x 3 float32, LiDAR frame
    point_labels: np.ndarray   # N uint16 in [0, C]
    pixel_depth: np.ndarray    # H x W float32, 0 where invalid
    condition: str             # day_clear | day_rain | night
    rig: SensorRig
    sample_id: str = ""
    image_clean: np.ndarray | None = None

    @property
    def depth_valid(self) -> np.ndarray:
        return self.pixel_depth > 0


def default_rig(width: int = 96, height: int = 64, focal: float = 52.0) -> SensorRig:
    """Forward-looking pinhole camera mounted 1 cm below the LiDAR origin."""
    intr = CameraIntrinsics(
        fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )
    # cam x = -y_world (right), cam y = -z_world (down), cam z = +x_world.
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    center = np.array([0.0, 0.0, -0.01])
    return SensorRig(intr, RigidTransform(rot, -rot @ center))


def generate_scene(seed: int, world: WorldConfig = WorldConfig()) -> SceneSpec:
    """Draw a scene deterministically from the seed."""
    world.validate()
    rng = rng_for(seed, "scene")
    count = int(rng.integers(world.min_primitives, world.max_primitives + 1))
    if world.class_weights is None:
        weights = np.full(world.num_classes, 1.0 / world.num_classes)
    else:
        weights = np.asarray(world.class_weights, dtype=np.float64)
        weights = weights / weights.sum()

    prims = []
    for _ in range(count):
        class_id = int(rng.choice(world.num_classes, p=weights)) + 1
        kind = KINDS[(class_id - 1) % len(KINDS)]
        base = float(rng.uniform(*world.size_band(class_id)))
        # Vertical extent equals the banded size for every kind; horizontal
        # footprints vary freely.
        if kind == "sphere":
            size = np.array([base, base, base])
        elif kind == "box":
            size = np.array([base * rng.uniform(0.6, 1.4), base * rng.uniform(0.6, 1.4), base])
        else:
            diameter = base * rng.uniform(0.7, 0.95)
            size = np.array([diameter, diameter, base])
        if world.placement == "floating":
            z_lo, z_hi = world.z_band(class_id)
            cz = rng.uniform(z_lo + size[2] / 2.0, z_hi - size[2] / 2.0)
        else:
            cz = world.ground_height + size[2] / 2.0
        center = np.array(
            [rng.uniform(*world.x_range), rng.uniform(*world.y_range), cz]
        )
        albedo = np.clip(CLASS_PALETTE[class_id - 1] + rng.uniform(-0.08, 0.08, 3), 0.05, 0.95)
        prims.append(Primitive(class_id, kind, center, size, albedo))

    ambient = float(rng.uniform(*world.ambient_range))
    return SceneSpec(seed=seed, primitives=tuple(prims), ground_plane_height=world.ground_height,
                     ambient_light=ambient)


def _sphere_hits(origins, dirs, center, radius):
    oc = origins - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - a * c
    t = np.full(len(dirs), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_near = (-b - sq) / a
    t_far = (-b + sq) / a
    t = np.where(ok & (t_near > Z_EPS), t_near, t)
    t = np.where(ok & (t_near <= Z_EPS) & (t_far > Z_EPS), t_far, t)
    return t


def _box_hits(origins, dirs, center, half):
    # Slab test; zero direction components handled via +-inf slabs.
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        lo = (center - half - origins) * inv
        hi = (center + half - origins) * inv
    t0 = np.minimum(lo, hi)
    t1 = np.maximum(lo, hi)
    # Where a direction component is 0, the ray misses unless inside the
    # slab; override after the min/max so the miss encoding survives.
    parallel = dirs == 0.0
    inside = np.abs(origins - center) <= half
    t0 = np.where(parallel, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(parallel, np.where(inside, np.inf, -np.inf), t1)
    t_near = t0.max(axis=1)
    t_far = t1.min(axis=1)
    hit = (t_near <= t_far) & (t_far > Z_EPS)
    t = np.where(t_near > Z_EPS, t_near, t_far)
    return np.where(hit, t, np.inf)


def _cylinder_hits(origins, dirs, center, radius, z0, z1):
    t_best = np.full(len(dirs), np.inf)
    ox, oy = origins[:, 0] - center[0], origins[:, 1] - center[1]
    dx, dy = dirs[:, 0], dirs[:, 1]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for t_side in [(-b - sq) / a, (-b + sq) / a]:
            z = origins[:, 2] + t_side * dirs[:, 2]
            valid = ok & (t_side > Z_EPS) & (z >= z0) & (z <= z1)
            t_best = np.where(valid & (t_side < t_best), t_side, t_best)
        for z_cap in (z0, z1):
            dz = dirs[:, 2]
            t_cap = np.where(dz != 0, (z_cap - origins[:, 2]) / np.where(dz != 0, dz, 1.0), np.inf)
            px = origins[:, 0] + t_cap * dirs[:, 0] - center[0]
            py = origins[:, 1] + t_cap * dirs[:, 1] - center[1]
            valid = (t_cap > Z_EPS) & (px * px + py * py <= radius * radius)
            t_best = np.where(valid & (t_cap < t_best), t_cap, t_best)
    return t_best


Z_EPS = 1e-6


def _primitive_hits(origins, dirs, prim: Primitive):
    if prim.kind == "sphere":
        return _sphere_hits(origins, dirs, prim.center, prim.size[0] / 2.0)
    if prim.kind == "box":
        return _box_hits(origins, dirs, prim.center, prim.size / 2.0)
    if prim.kind == "vertical_cylinder":
        z0 = prim.center[2] - prim.size[2] / 2.0
        z1 = prim.center[2] + prim.size[2] / 2.0
        return _cylinder_hits(origins, dirs, prim.center, prim.size[0] / 2.0, z0, z1)
    raise ConfigError(f"unknown primitive kind {prim.kind!r}")


def _primitive_normal(prim: Primitive, hits: np.ndarray) -> np.ndarray:
    if prim.kind == "sphere":
        n = hits - prim.center
    elif prim.kind == "box":
        rel = (hits - prim.center) / (prim.size / 2.0)
        axis = np.argmax(np.abs(rel), axis=1)
        n = np.zeros_like(hits)
        n[np.arange(len(hits)), axis] = np.sign(rel[np.arange(len(hits)), axis])
        return n
    else:
        n = hits - prim.center
        side = np.abs(n[:, 2]) < prim.size[2] / 2.0 - 1e-9
        n = np.where(side[:, None], n * np.array([1.0, 1.0, 0.0]),
                     np.sign(n[:, 2])[:, None] * np.array([0.0, 0.0, 1.0]))
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def raycast_scene(origins: np.ndarray, dirs: np.ndarray, scene: SceneSpec,
                  max_range: float = np.inf):
    """First hit of each ray against primitives and the ground plane.

    Returns (t, class_id, normal, albedo); t is +inf and class_id is -1 for
    misses. t is measured in units of |dirs| (callers choose normalized or
    depth-parametrized direction vectors).
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = len(dirs)

    cand_t = [np.full(n_rays, np.inf)]
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz != 0, (scene.ground_plane_height - origins[:, 2]) / np.where(dz != 0, dz, 1.0), np.inf)
    cand_t[0] = np.where(t_ground > Z_EPS, t_ground, np.inf)
    for prim in scene.primitives:
        cand_t.append(_primitive_hits(origins, dirs, prim))

    stack = np.stack(cand_t, axis=0)
    best = np.argmin(stack, axis=0)
    t = stack[best, np.arange(n_rays)]
    hit_mask = np.isfinite(t) & (t <= max_range / np.maximum(np.linalg.norm(dirs, axis=1), 1e-12))

    class_id = np.full(n_rays, -1, dtype=np.int64)
    normal = np.zeros((n_rays, 3))
    albedo = np.zeros((n_rays, 3))
    hit_pts = origins + np.where(hit_mask, t, 0.0)[:, None] * dirs

    ground_sel = hit_mask & (best == 0)
    class_id[ground_sel] = 0
    normal[ground_sel] = np.array([0.0, 0.0, 1.0])
    albedo[ground_sel] = GROUND_ALBEDO
    for i, prim in enumerate(scene.primitives, start=1):
        sel = hit_mask & (best == i)
        if not np.any(sel):
            continue
        class_id[sel] = prim.class_id
        normal[sel] = _primitive_normal(prim, hit_pts[sel])
        albedo[sel] = prim.albedo

    t = np.where(hit_mask, t, np.inf)
    return t, class_id, normal, albedo


def camera_ray_dirs(rig: SensorRig, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """World-frame ray directions through continuous pixel coords (u, v).

    Directions have camera-z component 1, so the ray parameter of a hit
    equals its camera depth.
    """
    intr = rig.intrinsics
    d_cam = np.stack(
        [
            (np.asarray(u, dtype=np.float64) - intr.cx) / intr.fx,
            (np.asarray(v, dtype=np.float64) - intr.cy) / intr.fy,
            np.ones_like(np.asarray(u, dtype=np.float64)),
        ],
        axis=-1,
    )
    return d_cam @ rig.lidar_to_camera.rotation  # == R^T applied row-wise


def render_camera(scene: SceneSpec, rig: SensorRig, max_range: float = 60.0):
    """Render (image, depth, class_map) through pixel centers."""
    intr = rig.intrinsics
    cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    u = cols.reshape(-1) + 0.5
    v = rows.reshape(-1) + 0.5
    dirs = camera_ray_dirs(rig, u, v)
    origin = rig.camera_center()

    t, class_id, normal, albedo = raycast_scene(origin[None, :], dirs, scene, max_range=max_range)
    unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    lambert = np.maximum(0.0, -np.einsum("ij,ij->i", unit, normal))
    shaded = albedo * (scene.ambient_light * lambert)[:, None]
    sky = SKY_RGB * scene.ambient_light
    miss = class_id < 0
    shaded[miss] = sky

    image = np.clip(shaded, 0.0, 1.0).reshape(intr.height, intr.width, 3).astype(np.float32)
    depth = np.where(miss, 0.0, t).reshape(intr.height, intr.width).astype(np.float32)
    cmap = class_id.reshape(intr.height, intr.width)
    return image, depth, cmap


def render_class_map(scene: SceneSpec, rig: SensorRig, max_range: float = 60.0,
                     supersample: int = 3) -> np.ndarray:
    """Majority class per pixel over a supersampled sub-ray grid.

    Center-sampling misclassifies pixels that straddle silhouettes; the
    majority vote reflects which surface actually dominates the pixel.
    """
    intr = rig.intrinsics
    cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    offsets = (np.arange(supersample) + 0.5) / supersample
    votes = np.zeros((intr.height, intr.width, len(CLASS_PALETTE) + 2), dtype=np.int32)
    origin = rig.camera_center()
    for du in offsets:
        for dv in offsets:
            u = (cols + du).reshape(-1)
            v = (rows + dv).reshape(-1)
            dirs = camera_ray_dirs(rig, u, v)
            _, class_id, _, _ = raycast_scene(origin[None, :], dirs, scene, max_range=max_range)
            grid = class_id.reshape(intr.height, intr.width) + 1  # -1 (sky) -> 0
            for value in np.unique(grid):
                votes[:, :, value] += grid == value
    return votes.argmax(axis=2) - 1


def lidar_ray_dirs(cfg: RenderConfig) -> np.ndarray:
    az = np.linspace(*cfg.lidar_azimuth_range, cfg.lidar_azimuth_count)
    el = np.linspace(*cfg.lidar_elevation_range, cfg.lidar_elevation_count)
    aa, ee = np.meshgrid(az, el)
    aa, ee = aa.reshape(-1), ee.reshape(-1)
    return np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=1)


def scan_lidar(scene: SceneSpec, cfg: RenderConfig):
    """Cast the LiDAR grid from the origin; sky misses produce no point."""
    dirs = lidar_ray_dirs(cfg)
    t, class_id, _, _ = raycast_scene(np.zeros(3)[None, :], dirs, scene,
                                      max_range=cfg.lidar_max_range)
    hit = class_id >= 0
    points = (t[hit, None] * dirs[hit]).astype(np.float32)
    labels = class_id[hit].astype(np.uint16)
    return points, labels


def render_sample(scene: SceneSpec, rig: SensorRig, render_cfg: RenderConfig = RenderConfig(),
                  sample_id: str = "") -> Sample:
    """Produce one clean paired observation of the scene."""
    render_cfg.validate()
    image, depth, _ = render_camera(scene, rig, max_range=render_cfg.max_range)
    points, labels = scan_lidar(scene, render_cfg)
    return Sample(
        image=image,
        points=points,
        point_labels=labels,
        pixel_depth=depth,
        condition="day_clear",
        rig=rig,
        sample_id=sample_id,
        image_clean=image.copy(),
    )
