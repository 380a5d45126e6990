"""Sparse voxel scenes: representation, synthesis, pyramids and file I/O.

A scene is a sparse set of active voxels with per-voxel feature vectors,
plus ground truth as per-voxel semantic labels and per-object binary masks.
Class 0 is the designated empty class; active voxels may carry it (clutter
the decoder should learn to ignore). Synthetic scenes stand in for an
encoder: object voxels get class-correlated Gaussian features so attention
has signal to select on.

Voxel order is canonical everywhere: ascending flat index with x fastest,
i.e. ``flat = x + X * (y + Y * z)``. The scene file stores voxels in this
order, which makes files portable and round-trips bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .autodiff import NEG_FILL

_SCENE_MAGIC = b"SPOTSCN1"

# Placement retries before giving up on a scene spec.
_MAX_PLACE_ATTEMPTS = 200
_ACTIVE_FRACTION_CAP = 0.45


class SceneError(Exception):
    pass


class SceneGenerationError(SceneError):
    """The spec cannot be satisfied (objects do not fit, bad counts)."""


class SceneFormatError(SceneError):
    """Malformed scene file; message states which check failed."""


def flat_index(coords: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    return x + dims[0] * (y + dims[1] * z)


@dataclass
class SparseVoxelGrid:
    """Active voxel coordinates and features of one scene or pyramid level."""

    dims: tuple[int, int, int]
    coords: np.ndarray  # (Nv, 3) int
    features: np.ndarray  # (Nv, C) float

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def validate(self) -> "SparseVoxelGrid":
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise SceneError(f"bad dims {self.dims}")
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise SceneError(f"coords must be (Nv, 3), got {self.coords.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise SceneError(
                f"count mismatch: {self.coords.shape[0]} coords vs "
                f"{self.features.shape[0]} feature rows"
            )
        if self.coords.shape[0]:
            if self.coords.min() < 0 or np.any(
                self.coords >= np.asarray(self.dims)[None, :]
            ):
                raise SceneError("dimension mismatch: coordinate outside dims")
            flat = flat_index(self.coords, self.dims)
            if np.unique(flat).size != flat.size:
                raise SceneError("dimension mismatch: duplicate coordinates")
        if not np.all(np.isfinite(self.features)):
            raise SceneError("non-finite feature values")
        self.coords.flags.writeable = False
        self.features.flags.writeable = False
        return self


@dataclass
class SceneGroundTruth:
    """Per-voxel labels plus (class_id, voxel-index mask) per object."""

    labels: np.ndarray  # (Nv,) int
    objects: list[tuple[int, np.ndarray]]

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def validate(self, grid: SparseVoxelGrid, n_classes: int) -> "SceneGroundTruth":
        if self.labels.shape != (grid.num_voxels,):
            raise SceneError("count mismatch: labels length vs active voxels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise SceneError("label outside class range")
        seen = np.zeros(grid.num_voxels, dtype=bool)
        for class_id, mask in self.objects:
            if mask.size == 0:
                raise SceneError("empty object mask")
            if mask.min() < 0 or mask.max() >= grid.num_voxels:
                raise SceneError("dimension mismatch: mask index outside actives")
            if np.any(seen[mask]):
                raise SceneError("object masks overlap")
            seen[mask] = True
            if not np.all(self.labels[mask] == class_id):
                raise SceneError("object class disagrees with labels")
        nonempty = np.flatnonzero(self.labels != 0)
        if not np.array_equal(np.sort(nonempty), np.flatnonzero(seen)):
            raise SceneError("non-empty labels not covered by exactly one object")
        self.labels.flags.writeable = False
        for _, mask in self.objects:
            mask.flags.writeable = False
        return self


@dataclass
class SceneSpec:
    dims: tuple[int, int, int]
    n_objects: int
    n_classes: int
    channels: int = 32
    seed: int = 0


def _canonical_order(coords: np.ndarray, dims) -> np.ndarray:
    return np.argsort(flat_index(coords, dims), kind="stable")


def _place_objects(spec: SceneSpec, gen: np.random.Generator):
    """Place non-overlapping axis-aligned boxes or ellipsoids."""
    occupied = np.zeros(spec.dims, dtype=bool)
    placed = []
    for _ in range(spec.n_objects):
        for attempt in range(_MAX_PLACE_ATTEMPTS):
            size = [int(gen.integers(1, max(2, d // 2 + 1))) for d in spec.dims]
            origin = [int(gen.integers(0, d - s + 1)) for d, s in zip(spec.dims, size)]
            shape_kind = "ellipsoid" if gen.random() < 0.5 else "box"
            xs, ys, zs = [
                np.arange(o, o + s) for o, s in zip(origin, size)
            ]
            gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
            pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
            if shape_kind == "ellipsoid" and min(size) >= 2:
                center = np.asarray(origin) + (np.asarray(size) - 1) / 2.0
                radii = np.maximum(np.asarray(size) / 2.0, 0.5)
                r = np.sum(((pts - center) / radii) ** 2, axis=1)
                pts = pts[r <= 1.0]
            if pts.shape[0] == 0:
                continue
            if not occupied[pts[:, 0], pts[:, 1], pts[:, 2]].any():
                occupied[pts[:, 0], pts[:, 1], pts[:, 2]] = True
                placed.append(pts)
                break
        else:
            raise SceneGenerationError(
                f"could not place {spec.n_objects} objects in dims {spec.dims}"
            )
    return placed, occupied


def generate_scene(spec: SceneSpec) -> tuple[SparseVoxelGrid, SceneGroundTruth]:
    """Synthesize a sparse scene with disjoint objects of distinct classes.

    Deterministic for a fixed seed. Features are class means plus Gaussian
    noise, rounded through float32 so that scene files round-trip exactly.
    """
    if any(d < 4 for d in spec.dims):
        raise SceneGenerationError(f"dims {spec.dims} too small (need >= 4)")
    if spec.n_objects < 1:
        raise SceneGenerationError("n_objects must be >= 1")
    if spec.n_classes < 2:
        raise SceneGenerationError("n_classes must be >= 2 (empty plus one)")
    if spec.n_objects > spec.n_classes - 1:
        raise SceneGenerationError(
            f"{spec.n_objects} objects need {spec.n_objects} distinct non-empty "
            f"classes but only {spec.n_classes - 1} exist"
        )

    gen = rng.stream(spec.seed, "scene")
    dense = int(np.prod(spec.dims))
    budget = int(dense * _ACTIVE_FRACTION_CAP)

    for _ in range(_MAX_PLACE_ATTEMPTS):
        placed, occupied = _place_objects(spec, gen)
        n_object_voxels = sum(p.shape[0] for p in placed)
        if n_object_voxels < budget:
            break
    else:
        raise SceneGenerationError("objects never fit the active-fraction budget")

    class_ids = 1 + gen.permutation(spec.n_classes - 1)[: spec.n_objects]

    # Background clutter: empty-class actives scattered off the objects.
    n_bg = min(n_object_voxels, budget - n_object_voxels)
    free = np.stack(np.nonzero(~occupied), axis=1)
    n_bg = min(n_bg, free.shape[0])
    bg = free[gen.permutation(free.shape[0])[:n_bg]] if n_bg else np.zeros((0, 3), int)

    coords = np.concatenate([np.concatenate(placed, axis=0), bg], axis=0)
    labels = np.concatenate(
        [
            np.concatenate(
                [np.full(p.shape[0], c, dtype=np.int64) for p, c in zip(placed, class_ids)]
            ),
            np.zeros(n_bg, dtype=np.int64),
        ]
    )

    order = _canonical_order(coords, spec.dims)
    coords = coords[order].astype(np.int64)
    labels = labels[order]

    means = 2.0 * gen.standard_normal((spec.n_classes, spec.channels))
    features = means[labels] + 0.5 * gen.standard_normal((coords.shape[0], spec.channels))
    features = features.astype(np.float32).astype(np.float64)

    grid = SparseVoxelGrid(tuple(spec.dims), coords, features).validate()
    objects = [
        (int(labels_class), np.flatnonzero(labels == labels_class))
        for labels_class in class_ids
    ]
    gt = SceneGroundTruth(labels, objects).validate(grid, spec.n_classes)
    return grid, gt


# ---------------------------------------------------------------------------
# downsampling and pyramids
# ---------------------------------------------------------------------------


def _halve_dims(dims) -> tuple[int, int, int]:
    return tuple(max(1, d // 2) for d in dims)


def _downsample_with_map(grid: SparseVoxelGrid) -> tuple[SparseVoxelGrid, np.ndarray]:
    """Floor-halve coordinates, merge duplicates by feature averaging.

    Coordinates in an odd trailing slice are clamped into the halved grid so
    dims stay exactly floor(dims / 2). Returns the coarser grid plus, for
    each input voxel, the index of its parent in the output.
    """
    new_dims = _halve_dims(grid.dims)
    halved = grid.coords // 2
    halved = np.minimum(halved, np.asarray(new_dims)[None, :] - 1)
    flat = flat_index(halved, new_dims)
    uniq, parent, counts = np.unique(flat, return_inverse=True, return_counts=True)

    n_out = uniq.size
    feats = np.zeros((n_out, grid.channels), dtype=grid.features.dtype)
    np.add.at(feats, parent, grid.features)
    feats /= counts[:, None]

    out_coords = np.zeros((n_out, 3), dtype=np.int64)
    out_coords[:, 0] = uniq % new_dims[0]
    out_coords[:, 1] = (uniq // new_dims[0]) % new_dims[1]
    out_coords[:, 2] = uniq // (new_dims[0] * new_dims[1])
    out = SparseVoxelGrid(new_dims, out_coords, feats).validate()
    return out, parent


def downsample(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    if any(d < 2 for d in grid.dims):
        raise SceneError(f"downsample needs all dims >= 2, got {grid.dims}")
    return _downsample_with_map(grid)[0]


@dataclass
class ScenePyramid:
    """Multi-resolution view of one scene, coarsest level first.

    ``parent_maps[i]`` sends each finest-level voxel index to its ancestor
    index at level i, which is how guidance masks defined on the finest grid
    are projected onto the level a decoder layer attends to.
    """

    levels: list[SparseVoxelGrid]
    parent_maps: list[np.ndarray] = field(default_factory=list)

    @property
    def finest(self) -> SparseVoxelGrid:
        return self.levels[-1]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def project_mask(self, mask: np.ndarray, level: int) -> np.ndarray:
        """Project a finest-grid boolean mask to a level (any-child rule)."""
        out = np.zeros(self.levels[level].num_voxels, dtype=bool)
        out[self.parent_maps[level][mask]] = True
        return out


def build_pyramid(grid: SparseVoxelGrid, n_levels: int) -> ScenePyramid:
    if n_levels < 1:
        raise SceneError("pyramid needs at least one level")
    fine_first = [grid]
    maps_fine_first = [np.arange(grid.num_voxels)]
    for _ in range(n_levels - 1):
        coarser, parent = _downsample_with_map(fine_first[-1])
        fine_first.append(coarser)
        maps_fine_first.append(parent[maps_fine_first[-1]])
    return ScenePyramid(fine_first[::-1], maps_fine_first[::-1])


# ---------------------------------------------------------------------------
# dense heatmaps and trilinear upsampling
# ---------------------------------------------------------------------------


def densify(
    dims, coords: np.ndarray, values: np.ndarray, fill: float = NEG_FILL
) -> np.ndarray:
    """Scatter per-active-voxel values onto the dense grid.

    The fill value is a large negative constant so empty voxels never win a
    semantic argmax over the densified heatmaps.
    """
    out = np.full(dims, fill, dtype=np.float64)
    out[coords[:, 0], coords[:, 1], coords[:, 2]] = values
    return out


def upsample_mask(heatmap: np.ndarray, factor: int) -> np.ndarray:
    """Trilinear upsampling of a dense heatmap by an integer factor.

    Output site j lies at input coordinate j / factor (clamped), so sites
    at multiples of the factor coincide with input sample centers and keep
    their values exactly.
    """
    if factor not in (2, 4):
        raise ValueError(f"factor must be 2 or 4, got {factor}")
    if heatmap.ndim != 3:
        raise ValueError("heatmap must be a dense 3D grid")

    axes = []
    for d in heatmap.shape:
        pos = np.arange(d * factor, dtype=np.float64) / factor
        pos = np.minimum(pos, d - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, d - 1)
        axes.append((lo, hi, pos - lo))

    (x0, x1, wx), (y0, y1, wy), (z0, z1, wz) = axes
    out = np.zeros([d * factor for d in heatmap.shape], dtype=np.float64)
    for xi, fx in ((x0, 1.0 - wx), (x1, wx)):
        for yi, fy in ((y0, 1.0 - wy), (y1, wy)):
            for zi, fz in ((z0, 1.0 - wz), (z1, wz)):
                w = fx[:, None, None] * fy[None, :, None] * fz[None, None, :]
                out += w * heatmap[np.ix_(xi, yi, zi)]
    return out


# ---------------------------------------------------------------------------
# scene file I/O
# ---------------------------------------------------------------------------


def save_scene(path, grid: SparseVoxelGrid, gt: SceneGroundTruth, n_classes: int) -> None:
    """Binary scene file, little-endian; layout documented in the README."""
    with open(path, "wb") as f:
        f.write(_SCENE_MAGIC)
        f.write(
            struct.pack(
                "<7I",
                *grid.dims,
                grid.num_voxels,
                grid.channels,
                n_classes,
                gt.num_objects,
            )
        )
        f.write(grid.coords.astype("<u4").tobytes(order="C"))
        f.write(grid.features.astype("<f4").tobytes(order="C"))
        f.write(gt.labels.astype("<u4").tobytes(order="C"))
        for class_id, mask in gt.objects:
            f.write(struct.pack("<2I", class_id, mask.size))
            f.write(mask.astype("<u4").tobytes(order="C"))


def _take(buf: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise SceneFormatError(f"truncated payload while reading {what}")
    return buf[offset : offset + n], offset + n


def load_scene(path) -> tuple[SparseVoxelGrid, SceneGroundTruth, int]:
    """Load a scene file; returns (grid, ground truth, n_classes)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < len(_SCENE_MAGIC) + 28:
        raise SceneFormatError("malformed header: file too short")
    if buf[: len(_SCENE_MAGIC)] != _SCENE_MAGIC:
        raise SceneFormatError("malformed header: bad magic")
    x, y, z, nv, c, ncls, nobj = struct.unpack_from("<7I", buf, len(_SCENE_MAGIC))
    offset = len(_SCENE_MAGIC) + 28

    fixed_bytes = nv * (12 + 4 * c + 4)
    if len(buf) - offset < fixed_bytes:
        raise SceneFormatError(
            f"count mismatch: header declares Nv={nv}, C={c} but payload is short"
        )

    raw, offset = _take(buf, offset, nv * 12, "coordinates")
    coords = np.frombuffer(raw, dtype="<u4").reshape(nv, 3).astype(np.int64)
    raw, offset = _take(buf, offset, nv * 4 * c, "features")
    features = np.frombuffer(raw, dtype="<f4").reshape(nv, c).astype(np.float64)
    raw, offset = _take(buf, offset, nv * 4, "labels")
    labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)

    objects = []
    for i in range(nobj):
        raw, offset = _take(buf, offset, 8, f"object {i} header")
        class_id, mask_size = struct.unpack("<2I", raw)
        raw, offset = _take(buf, offset, 4 * mask_size, f"object {i} mask")
        objects.append((class_id, np.frombuffer(raw, dtype="<u4").astype(np.int64)))
    if offset != len(buf):
        raise SceneFormatError("count mismatch: trailing bytes after last object")

    try:
        grid = SparseVoxelGrid((x, y, z), coords, features).validate()
        gt = SceneGroundTruth(labels, objects).validate(grid, ncls)
    except SceneError as e:
        raise SceneFormatError(str(e)) from e
    return grid, gt, ncls
