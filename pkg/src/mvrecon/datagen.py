"""Synthetic multi-view voxel dataset.

Procedural object families give category-characteristic shapes that are
fully deterministic from (category, seed, side).  Views are orthographic
silhouette + nearest-depth renders from a ring of azimuths at a fixed
elevation.  The occlusion protocol overwrites a square patch on the
odd-indexed views with background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BoxLargerThanImage, TooFewObjects
from .voxels import BINARY, VoxelGrid

CATEGORIES = (
    "box", "box_stack", "lshape", "table", "chair",
    "lamp", "cylinder", "ring", "composite",
)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)
DEFAULT_ELEVATION_DEG = 30.0
DEFAULT_N_VIEWS = 24
OCCLUSION_REFERENCE_SIZE = 224  # box sizes are quoted at this image size
OCCLUSION_BOX_SIZES = (10, 15, 20, 25, 30, 35, 40)


@dataclass
class SyntheticObject:
    object_id: str
    category: str
    seed: int
    grid: VoxelGrid


@dataclass(frozen=True)
class CameraPose:
    azimuth_index: int
    azimuth_deg: float
    elevation_deg: float = DEFAULT_ELEVATION_DEG


@dataclass
class ViewSet:
    object_id: str
    pose_indices: list[int]
    images: np.ndarray  # [n_views, channels, H, W] float32 in [0, 1]


def default_poses(n_views: int = DEFAULT_N_VIEWS,
                  elevation_deg: float = DEFAULT_ELEVATION_DEG) -> list[CameraPose]:
    step = 360.0 / n_views
    return [CameraPose(i, i * step, elevation_deg) for i in range(n_views)]


# --- procedural generators ---

def _object_rng(category: str, seed: int, side: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), CATEGORIES.index(category), int(side)])


def _coords(side: int):
    ax = np.arange(side) + 0.5
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _fill_box(vol, x0, y0, z0, ex, ey, ez):
    vol[x0:x0 + ex, y0:y0 + ey, z0:z0 + ez] = 1.0


def _gen_box(rng, vol, side):
    """Axis-aligned box.  Draw order: three extents, then three corners."""
    lo, hi = max(2, side // 4), side // 2
    ext = rng.integers(lo, hi + 1, size=3)
    corner = [int(rng.integers(1, side - 1 - ext[a] + 1)) for a in range(3)]
    _fill_box(vol, corner[0], corner[1], corner[2], *ext)


def box_trace(rng: np.random.Generator, side: int):
    """Re-derive the box extents/corner from the documented draw order."""
    lo, hi = max(2, side // 4), side // 2
    ext = rng.integers(lo, hi + 1, size=3)
    corner = [int(rng.integers(1, side - 1 - ext[a] + 1)) for a in range(3)]
    return ext, corner


def _gen_box_stack(rng, vol, side):
    count = int(rng.integers(2, 4))
    ex = int(rng.integers(max(3, side // 3), side // 2 + 1))
    ey = int(rng.integers(max(3, side // 3), side // 2 + 1))
    cx = side // 2 + int(rng.integers(-side // 8, side // 8 + 1))
    cy = side // 2 + int(rng.integers(-side // 8, side // 8 + 1))
    z = 1
    for _ in range(count):
        h = int(rng.integers(max(2, side // 8), max(3, side // 4) + 1))
        h = min(h, side - 1 - z)
        if h < 1:
            break
        x0 = int(np.clip(cx - ex // 2, 1, side - 1 - ex))
        y0 = int(np.clip(cy - ey // 2, 1, side - 1 - ey))
        _fill_box(vol, x0, y0, z, ex, ey, h)
        z += h
        ex = max(2, ex - int(rng.integers(1, max(2, ex // 2 + 1))))
        ey = max(2, ey - int(rng.integers(1, max(2, ey // 2 + 1))))


def _gen_lshape(rng, vol, side):
    ext = rng.integers(max(3, side // 3), side - 2 + 1, size=3)
    corner = [int(rng.integers(1, side - 1 - ext[a] + 1)) for a in range(3)]
    _fill_box(vol, corner[0], corner[1], corner[2], *ext)
    # carve one quadrant from the top to leave an L profile
    cut_x = int(ext[0] - ext[0] // 2)
    cut_z = int(ext[2] - ext[2] // 2)
    vol[corner[0] + ext[0] - cut_x:corner[0] + ext[0],
        corner[1]:corner[1] + ext[1],
        corner[2] + ext[2] - cut_z:corner[2] + ext[2]] = 0.0


def _gen_table(rng, vol, side):
    top_t = max(1, side // 10)
    ex = int(rng.integers(max(4, side // 2), side - 2 + 1))
    ey = int(rng.integers(max(4, side // 2), side - 2 + 1))
    x0 = int(rng.integers(1, side - 1 - ex + 1))
    y0 = int(rng.integers(1, side - 1 - ey + 1))
    z_top = int(rng.integers(side // 2, side - 1 - top_t + 1))
    _fill_box(vol, x0, y0, z_top, ex, ey, top_t)
    leg = max(1, side // 10)
    for lx in (x0, x0 + ex - leg):
        for ly in (y0, y0 + ey - leg):
            _fill_box(vol, lx, ly, 1, leg, leg, z_top - 1)


def _gen_chair(rng, vol, side):
    leg = max(1, side // 10)
    seat_t = max(1, side // 10)
    ex = int(rng.integers(max(4, side // 3), side // 2 + 1))
    ey = int(rng.integers(max(4, side // 3), side // 2 + 1))
    x0 = int(rng.integers(1, side - 1 - ex + 1))
    y0 = int(rng.integers(1, side - 1 - ey + 1))
    z_seat = int(rng.integers(max(2, side // 4), side // 2 + 1))
    _fill_box(vol, x0, y0, z_seat, ex, ey, seat_t)
    for lx in (x0, x0 + ex - leg):
        for ly in (y0, y0 + ey - leg):
            _fill_box(vol, lx, ly, 1, leg, leg, z_seat - 1)
    back_h = min(side - 1 - (z_seat + seat_t), int(rng.integers(side // 4, side // 2 + 1)))
    if back_h > 0:
        _fill_box(vol, x0, y0, z_seat + seat_t, ex, max(1, leg), back_h)


def _gen_lamp(rng, vol, side):
    xx, yy, _ = _coords(side)
    cx = side / 2 + float(rng.integers(-side // 8, side // 8 + 1))
    cy = side / 2 + float(rng.integers(-side // 8, side // 8 + 1))
    r_base = max(1.5, side / 6 + float(rng.integers(0, max(1, side // 8) + 1)))
    base_h = max(1, side // 8)
    dist = np.hypot(xx - cx, yy - cy)
    vol[:, :, 1:1 + base_h][dist[:, :, 1:1 + base_h] <= r_base] = 1.0
    pole_r = max(0.8, side / 16)
    z_top = side - 2
    vol[:, :, 1:z_top][dist[:, :, 1:z_top] <= pole_r] = 1.0
    shade_h = max(2, side // 5)
    r_shade = max(2.0, side / 5 + float(rng.integers(0, max(1, side // 8) + 1)))
    sl = slice(z_top - shade_h, z_top)
    vol[:, :, sl][dist[:, :, sl] <= r_shade] = 1.0
    vol[:, :, side - 2:] = 0.0
    vol[0, :, :] = vol[-1, :, :] = 0.0
    vol[:, 0, :] = vol[:, -1, :] = 0.0


def _gen_cylinder(rng, vol, side):
    xx, yy, _ = _coords(side)
    cx = side / 2 + float(rng.integers(-side // 8, side // 8 + 1))
    cy = side / 2 + float(rng.integers(-side // 8, side // 8 + 1))
    radius = side / 6 + float(rng.integers(0, max(1, side // 6) + 1))
    height = int(rng.integers(side // 2, side - 2 + 1))
    z0 = int(rng.integers(1, side - 1 - height + 1))
    mask = np.hypot(xx - cx, yy - cy) <= radius
    band = np.zeros_like(vol, dtype=bool)
    band[:, :, z0:z0 + height] = True
    vol[mask & band] = 1.0
    vol[0, :, :] = vol[-1, :, :] = 0.0
    vol[:, 0, :] = vol[:, -1, :] = 0.0


def _gen_ring(rng, vol, side):
    xx, yy, zz = _coords(side)
    r_mid = side / 3 + float(rng.integers(-max(1, side // 12), max(1, side // 12) + 1))
    r_mid = min(r_mid, (side - 3) / 2)
    thickness = max(1.0, side / 8)
    z0 = side / 2 + float(rng.integers(-side // 8, side // 8 + 1))
    z_half = max(1.0, side / 8)
    dist = np.hypot(xx - side / 2, yy - side / 2)
    mask = (np.abs(dist - r_mid) <= thickness) & (np.abs(zz - z0) <= z_half)
    vol[mask] = 1.0
    vol[0, :, :] = vol[-1, :, :] = 0.0
    vol[:, 0, :] = vol[:, -1, :] = 0.0
    vol[:, :, 0] = vol[:, :, -1] = 0.0


def _gen_composite(rng, vol, side):
    parts = rng.choice(["box", "cylinder", "ring"], size=2, replace=True)
    for part in parts:
        _GENERATORS[str(part)](rng, vol, side)


_GENERATORS = {
    "box": _gen_box,
    "box_stack": _gen_box_stack,
    "lshape": _gen_lshape,
    "table": _gen_table,
    "chair": _gen_chair,
    "lamp": _gen_lamp,
    "cylinder": _gen_cylinder,
    "ring": _gen_ring,
    "composite": _gen_composite,
}


def gen_object(category: str, seed: int, side: int,
               object_id: str | None = None) -> SyntheticObject:
    """Deterministic binary object of the given family, inside a 1-voxel margin."""
    if category not in _GENERATORS:
        raise ValueError(f"unknown category {category!r}")
    if side < 8:
        raise ValueError("side must be at least 8")
    rng = _object_rng(category, seed, side)
    vol = np.zeros((side, side, side), dtype=np.float32)
    _GENERATORS[category](rng, vol, side)
    if vol.sum() == 0:  # every family is constructed non-empty; guard anyway
        vol[side // 2, side // 2, side // 2] = 1.0
    if object_id is None:
        object_id = f"{category}-{seed}"
    return SyntheticObject(object_id, category, int(seed), VoxelGrid(side, vol, BINARY))


# --- rendering ---

def _rotation(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    rot_z = np.array([[math.cos(az), -math.sin(az), 0.0],
                      [math.sin(az), math.cos(az), 0.0],
                      [0.0, 0.0, 1.0]])
    rot_x = np.array([[1.0, 0.0, 0.0],
                      [0.0, math.cos(el), -math.sin(el)],
                      [0.0, math.sin(el), math.cos(el)]])
    return rot_x @ rot_z


def render_views(obj: SyntheticObject, poses: list[CameraPose] | None = None,
                 out_size: int = 64) -> ViewSet:
    """Orthographic silhouette + nearest-depth renders, background 0.

    Every occupied voxel is painted as a small square around its projected
    center, sized so that face-adjacent voxels leave no holes.
    """
    if poses is None:
        poses = default_poses()
    side = obj.grid.side
    occupied = np.argwhere(obj.grid.values > 0)
    centers = (occupied.astype(np.float64) + 0.5) / side - 0.5
    scale = (out_size - 4) / math.sqrt(3.0)
    half = (math.ceil(scale / side) + 1) // 2
    offsets = [(dr, dc) for dr in range(-half, half + 1)
               for dc in range(-half, half + 1)]
    center_px = (out_size - 1) / 2.0
    depth_span = math.sqrt(3.0)

    images = np.zeros((len(poses), 2, out_size, out_size), dtype=np.float32)
    for k, pose in enumerate(poses):
        rot = _rotation(pose.azimuth_deg, pose.elevation_deg)
        p = centers @ rot.T
        u = center_px + scale * p[:, 0]
        v = center_px - scale * p[:, 2]
        depth_norm = (0.5 * depth_span - p[:, 1]) / depth_span  # nearer -> larger
        iu = np.floor(u + 0.5).astype(np.int64)
        iv = np.floor(v + 0.5).astype(np.int64)
        rows, cols, vals = [], [], []
        for dr, dc in offsets:
            rows.append(iv + dr)
            cols.append(iu + dc)
            vals.append(depth_norm)
        rows = np.clip(np.concatenate(rows), 0, out_size - 1)
        cols = np.clip(np.concatenate(cols), 0, out_size - 1)
        vals = np.concatenate(vals)
        sil = images[k, 0]
        dep = images[k, 1]
        sil[rows, cols] = 1.0
        np.maximum.at(dep, (rows, cols), vals.astype(np.float32))
    return ViewSet(obj.object_id, [p.azimuth_index for p in poses], images)


def project_centers(obj: SyntheticObject, pose: CameraPose,
                    out_size: int) -> np.ndarray:
    """Pixel (row, col) of each occupied voxel center; the renderer's
    silhouette must cover all of them."""
    side = obj.grid.side
    occupied = np.argwhere(obj.grid.values > 0)
    centers = (occupied.astype(np.float64) + 0.5) / side - 0.5
    scale = (out_size - 4) / math.sqrt(3.0)
    center_px = (out_size - 1) / 2.0
    p = centers @ _rotation(pose.azimuth_deg, pose.elevation_deg).T
    iu = np.floor(center_px + scale * p[:, 0] + 0.5).astype(np.int64)
    iv = np.floor(center_px - scale * p[:, 2] + 0.5).astype(np.int64)
    return np.stack([iv, iu], axis=1)


# --- occlusion ---

def scaled_box_size(box: int, image_size: int,
                    reference: int = OCCLUSION_REFERENCE_SIZE) -> int:
    if box == 0:
        return 0
    return max(1, round(box * image_size / reference))


def occlude(images: np.ndarray, box: int, mode: str = "center", seed: int = 0,
            reference: int = OCCLUSION_REFERENCE_SIZE) -> np.ndarray:
    """Overwrite a box x box patch with background on the odd-indexed views.

    ``box`` is quoted at the reference image size and scales proportionally.
    Views are numbered from 1, so array indices 0, 2, 4, ... are hit.  The
    box is centered on the silhouette bounding box (mode="center") or
    placed seeded-randomly inside it (mode="random"), then clamped so it
    stays within the image.
    """
    if mode not in ("center", "random"):
        raise ValueError(f"unknown occlusion mode {mode!r}")
    out = np.array(images, copy=True)
    if box == 0:
        return out
    h, w = out.shape[-2], out.shape[-1]
    size = scaled_box_size(box, w, reference)
    if size > min(h, w):
        raise BoxLargerThanImage(f"box {size} exceeds image {h}x{w}")
    rng = np.random.default_rng([int(seed), 0x0cc1])
    for idx in range(0, out.shape[0], 2):
        fg = np.argwhere(out[idx, 0] > 0)
        if fg.size == 0:
            cr, cc = h // 2, w // 2
        else:
            (rmin, cmin), (rmax, cmax) = fg.min(axis=0), fg.max(axis=0)
            if mode == "random":
                cr = int(rng.integers(rmin, rmax + 1))
                cc = int(rng.integers(cmin, cmax + 1))
            else:
                cr, cc = (rmin + rmax) // 2, (cmin + cmax) // 2
        top = int(np.clip(cr - size // 2, 0, h - size))
        left = int(np.clip(cc - size // 2, 0, w - size))
        out[idx, :, top:top + size, left:left + size] = 0.0
    return out


# --- manifests and splits ---

@dataclass
class ManifestEntry:
    object_id: str
    category: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    voxel_side: int
    image_size: int
    n_views: int
    elevation_deg: float
    entries: list[ManifestEntry] = field(default_factory=list)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def _largest_remainder(want: list[float], total: int) -> list[int]:
    counts = [max(0, math.floor(w)) for w in want]
    while sum(counts) > total:
        counts[counts.index(max(counts))] -= 1
    frac = [w - c for w, c in zip(want, counts)]
    order = sorted(range(len(want)), key=lambda k: (-frac[k], k))
    for i in range(total - sum(counts)):
        counts[order[i % len(want)]] += 1
    return counts


def make_splits(entries: list[tuple[str, str]], ratios=DEFAULT_RATIOS,
                seed: int = 0) -> dict[str, str]:
    """(object_id, category) pairs -> {object_id: split}.

    Seeded shuffle, stratified per category: each category's counts stay
    within one object of its exact quota, and fractional remainders carry
    across categories so the global ratios hold too.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    rng = np.random.default_rng([int(seed), 0x5311])
    by_category: dict[str, list[str]] = {}
    for object_id, category in entries:
        by_category.setdefault(category, []).append(object_id)
    assignment: dict[str, str] = {}
    carry = [0.0] * len(SPLITS)
    for category in sorted(by_category):
        ids = sorted(by_category[category])
        order = rng.permutation(len(ids))
        n = len(ids)
        want = [r * n + c for r, c in zip(ratios, carry)]
        counts = _largest_remainder(want, n)
        carry = [w - got for w, got in zip(want, counts)]
        bounds = np.cumsum(counts)
        for pos, j in enumerate(order):
            split = SPLITS[int(np.searchsorted(bounds, pos, side="right"))]
            assignment[ids[j]] = split
    for split in SPLITS:
        if not any(v == split for v in assignment.values()):
            raise TooFewObjects(f"split {split!r} would be empty")
    return assignment


def manifest_to_text(manifest: DatasetManifest) -> str:
    lines = [
        "# mvrecon-dataset 1",
        f"# voxel_side {manifest.voxel_side}",
        f"# image_size {manifest.image_size}",
        f"# n_views {manifest.n_views}",
        f"# elevation_deg {manifest.elevation_deg:g}",
    ]
    for e in manifest.entries:
        lines.append(f"{e.object_id} {e.category} {e.seed} {e.split}")
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> DatasetManifest:
    header: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2:
                header[parts[0]] = parts[1]
            continue
        object_id, category, seed, split = line.split()
        entries.append(ManifestEntry(object_id, category, int(seed), split))
    return DatasetManifest(
        voxel_side=int(header["voxel_side"]),
        image_size=int(header["image_size"]),
        n_views=int(header["n_views"]),
        elevation_deg=float(header.get("elevation_deg", DEFAULT_ELEVATION_DEG)),
        entries=entries,
    )


# --- full datasets (in memory and on disk) ---

@dataclass
class DatasetObject:
    object_id: str
    category: str
    seed: int
    split: str
    grid: np.ndarray    # [V, V, V] float32 binary
    views: np.ndarray   # [n_views, 2, H, W] float32


@dataclass
class Dataset:
    voxel_side: int
    image_size: int
    n_views: int
    elevation_deg: float
    objects: list[DatasetObject]

    def split(self, name: str) -> list[DatasetObject]:
        return [o for o in self.objects if o.split == name]

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(
            self.voxel_side, self.image_size, self.n_views, self.elevation_deg,
            [ManifestEntry(o.object_id, o.category, o.seed, o.split)
             for o in self.objects])


def _quantize(images: np.ndarray) -> np.ndarray:
    # match the 8-bit precision of the on-disk PGM renders
    return np.rint(images * 255.0).astype(np.float32) / 255.0


def build_dataset(n_objects: int, voxel_side: int, image_size: int, seed: int = 0,
                  categories: tuple[str, ...] = CATEGORIES,
                  ratios=DEFAULT_RATIOS, n_views: int = DEFAULT_N_VIEWS,
                  elevation_deg: float = DEFAULT_ELEVATION_DEG) -> Dataset:
    """Generate, render, and split a dataset entirely in memory."""
    poses = default_poses(n_views, elevation_deg)
    objs = []
    for i in range(n_objects):
        category = categories[i % len(categories)]
        obj_seed = seed * 1_000_003 + i
        obj = gen_object(category, obj_seed, voxel_side,
                         object_id=f"obj{i:04d}")
        objs.append(obj)
    assignment = make_splits([(o.object_id, o.category) for o in objs],
                             ratios=ratios, seed=seed)
    records = []
    for obj in objs:
        views = render_views(obj, poses, out_size=image_size)
        records.append(DatasetObject(
            obj.object_id, obj.category, obj.seed, assignment[obj.object_id],
            obj.grid.values.astype(np.float32), _quantize(views.images)))
    return Dataset(voxel_side, image_size, n_views, elevation_deg, records)


# --- disk persistence (manifest + binvox ground truth + PGM views) ---

def save_dataset(dataset: Dataset, root) -> None:
    import os

    from .voxio import write_binvox, write_pgm

    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write(manifest_to_text(dataset.manifest()))
    vox_dir = os.path.join(root, "voxels")
    os.makedirs(vox_dir, exist_ok=True)
    for obj in dataset.objects:
        grid = VoxelGrid(dataset.voxel_side, obj.grid.astype(np.float32), BINARY)
        with open(os.path.join(vox_dir, f"{obj.object_id}.binvox"), "wb") as fh:
            fh.write(write_binvox(grid))
        view_dir = os.path.join(root, "views", obj.object_id)
        os.makedirs(view_dir, exist_ok=True)
        for k in range(obj.views.shape[0]):
            for ch, tag in ((0, "sil"), (1, "dep")):
                path = os.path.join(view_dir, f"v{k:02d}_{tag}.pgm")
                with open(path, "wb") as fh:
                    fh.write(write_pgm(obj.views[k, ch]))


def load_dataset(root) -> Dataset:
    import os

    from .voxio import read_binvox, read_pgm

    with open(os.path.join(root, "manifest.txt")) as fh:
        manifest = manifest_from_text(fh.read())
    objects = []
    for entry in manifest.entries:
        with open(os.path.join(root, "voxels", f"{entry.object_id}.binvox"), "rb") as fh:
            grid = read_binvox(fh.read())
        view_dir = os.path.join(root, "views", entry.object_id)
        views = np.zeros((manifest.n_views, 2, manifest.image_size,
                          manifest.image_size), dtype=np.float32)
        for k in range(manifest.n_views):
            for ch, tag in ((0, "sil"), (1, "dep")):
                with open(os.path.join(view_dir, f"v{k:02d}_{tag}.pgm"), "rb") as fh:
                    views[k, ch] = read_pgm(fh.read())
        objects.append(DatasetObject(entry.object_id, entry.category, entry.seed,
                                     entry.split, grid.values.astype(np.float32),
                                     views))
    return Dataset(manifest.voxel_side, manifest.image_size, manifest.n_views,
                   manifest.elevation_deg, objects)
