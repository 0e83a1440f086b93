"""Synthetic terrain worlds with per-cell appearance features.

A world is a regular grid of square cells. Each cell carries a terrain class
id, a frozen appearance feature vector, and each class maps to a control
effectiveness factor eta. Features are built once from per-class cluster
centers plus per-cell jitter on a single tile, and the tile is repeated
across the map exactly (both the class pattern and the jitter repeat), which
mirrors how a fixed overhead feature image would be tiled over a larger
field. Queries outside the map clamp to the border cell and are logged;
features are never extrapolated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .serialize import load_arrays, save_arrays

log = logging.getLogger(__name__)


@dataclass
class TerrainClassSpec:
    """One terrain type: a name, its eta entries, and optional appearance twin.

    `features_like` names another class whose cluster center this class
    reuses, producing visually identical terrains with different physics.
    """

    name: str
    eta: tuple
    features_like: str | None = None


@dataclass
class WorldSpec:
    """Everything needed to build a world deterministically."""

    rows: int = 60
    cols: int = 120
    cell_size: float = 0.25
    tile_rows: int = 30
    tile_cols: int = 40
    layout: str = "bands"          # bands | blocks
    feature_dim: int = 8
    feature_scale: float = 4.0     # cluster center radius
    feature_noise: float = 0.15    # per-cell jitter std, frozen at build time
    min_separation: float = 3.0    # required distance between distinct centers
    seed: int = 0
    classes: list = field(default_factory=list)

    def validate(self):
        if self.rows <= 0 or self.cols <= 0 or self.cell_size <= 0:
            raise ValueError("world dimensions and cell size must be positive")
        if self.rows % self.tile_rows or self.cols % self.tile_cols:
            raise ValueError(
                f"map {self.rows}x{self.cols} must be an exact multiple of the "
                f"tile {self.tile_rows}x{self.tile_cols}")
        if self.layout not in ("bands", "blocks"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be at least 1")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be nonnegative")
        if not self.classes:
            raise ValueError("world needs at least one terrain class")
        widths = {len(c.eta) for c in self.classes}
        if len(widths) != 1:
            raise ValueError("all classes must define eta with the same width")
        for c in self.classes:
            for v in c.eta:
                if not (math.isfinite(v) and 0.0 < v <= 2.0):
                    raise ValueError(f"class {c.name!r}: eta entries must lie in (0, 2]")
            if c.features_like is not None and c.features_like not in [x.name for x in self.classes]:
                raise ValueError(f"class {c.name!r}: features_like target {c.features_like!r} unknown")


@dataclass
class TerrainWorldMap:
    """Immutable terrain grid: class ids, frozen features, per-class eta."""

    class_grid: np.ndarray      # (rows, cols) int
    features: np.ndarray        # (rows, cols, feature_dim) float64
    eta_table: np.ndarray       # (n_classes, eta_dim) float64
    cell_size: float
    class_names: list
    centers: np.ndarray         # (n_classes, feature_dim) cluster centers
    feature_noise: float

    @property
    def rows(self):
        return self.class_grid.shape[0]

    @property
    def cols(self):
        return self.class_grid.shape[1]

    @property
    def extent(self):
        """(width, height) of the map in meters."""
        return self.cols * self.cell_size, self.rows * self.cell_size


def _draw_centers(rng, spec: WorldSpec) -> np.ndarray:
    """Cluster centers on a sphere of radius feature_scale, well separated."""
    own = [i for i, c in enumerate(spec.classes) if c.features_like is None]
    centers = np.zeros((len(spec.classes), spec.feature_dim))
    placed = []
    for i in own:
        for _ in range(1000):
            v = rng.normal(size=spec.feature_dim)
            v *= spec.feature_scale / np.linalg.norm(v)
            if all(np.linalg.norm(v - p) >= spec.min_separation for p in placed):
                break
        else:
            raise ValueError(
                "could not place class centers with the requested separation; "
                "lower min_separation or raise feature_scale")
        centers[i] = v
        placed.append(v)
    name_to_idx = {c.name: i for i, c in enumerate(spec.classes)}
    for i, c in enumerate(spec.classes):
        if c.features_like is not None:
            centers[i] = centers[name_to_idx[c.features_like]]
    return centers


def _tile_class_layout(spec: WorldSpec) -> np.ndarray:
    """Class-id pattern for a single tile."""
    n = len(spec.classes)
    tile = np.zeros((spec.tile_rows, spec.tile_cols), dtype=np.int64)
    if spec.layout == "bands":
        for c in range(spec.tile_cols):
            tile[:, c] = (c * n) // spec.tile_cols
    else:  # blocks: 2 rows x n columns of rectangles, classes cycling
        half = max(1, spec.tile_rows // 2)
        for r in range(spec.tile_rows):
            for c in range(spec.tile_cols):
                block_col = (c * n) // spec.tile_cols
                tile[r, c] = (block_col + (r // half)) % n
    return tile


def build_world(spec: WorldSpec) -> TerrainWorldMap:
    """Construct a world deterministically from its spec.

    The same spec (including seed) always yields byte-identical grids.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = _draw_centers(rng, spec)
    tile_classes = _tile_class_layout(spec)
    jitter = rng.normal(0.0, spec.feature_noise, size=(spec.tile_rows, spec.tile_cols, spec.feature_dim))
    tile_features = centers[tile_classes] + jitter
    reps = (spec.rows // spec.tile_rows, spec.cols // spec.tile_cols)
    class_grid = np.tile(tile_classes, reps)
    features = np.tile(tile_features, (reps[0], reps[1], 1))
    eta_table = np.array([list(c.eta) for c in spec.classes], dtype=float)
    return TerrainWorldMap(
        class_grid=class_grid,
        features=features,
        eta_table=eta_table,
        cell_size=spec.cell_size,
        class_names=[c.name for c in spec.classes],
        centers=centers,
        feature_noise=spec.feature_noise,
    )


def cell_index(world: TerrainWorldMap, x: float, y: float) -> tuple[int, int, bool]:
    """Map a position to (row, col) with border clamping.

    Returns the clamped flag so callers can log out-of-map queries.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite world query ({x}, {y})")
    col = int(math.floor(x / world.cell_size))
    row = int(math.floor(y / world.cell_size))
    clamped = False
    if col < 0 or col >= world.cols:
        col = min(max(col, 0), world.cols - 1)
        clamped = True
    if row < 0 or row >= world.rows:
        row = min(max(row, 0), world.rows - 1)
        clamped = True
    return row, col, clamped


def features_under_robot(world: TerrainWorldMap, x: float, y: float, psi: float,
                         half_spacing: float = 0.3) -> tuple[np.ndarray, bool]:
    """Mean of the features under the two track contact patches.

    The patches sit at +/- half_spacing laterally in the body frame. Returns
    (features, clamped) where clamped reports whether any patch left the map.
    """
    ox = -math.sin(psi) * half_spacing
    oy = math.cos(psi) * half_spacing
    r1, c1, cl1 = cell_index(world, x + ox, y + oy)
    r2, c2, cl2 = cell_index(world, x - ox, y - oy)
    clamped = cl1 or cl2
    if clamped:
        log.debug("feature query clamped to map border at (%.2f, %.2f)", x, y)
    feat = 0.5 * (world.features[r1, c1] + world.features[r2, c2])
    return feat, clamped


def eta_under_robot(world: TerrainWorldMap, x: float, y: float) -> np.ndarray:
    """Terrain effectiveness entries for the cell under the robot center."""
    row, col, clamped = cell_index(world, x, y)
    if clamped:
        log.debug("eta query clamped to map border at (%.2f, %.2f)", x, y)
    return world.eta_table[world.class_grid[row, col]].copy()


class FeatureProvider:
    """Noisy, brightness-scaled view of a world's features.

    Use mode 'synthetic' for worlds built by build_world and 'recorded' for
    worlds loaded from a container file; both read the same grid. With a
    fixed seed the noise sequence, and therefore every returned feature, is
    deterministic. Brightness multiplies the clean patch mean before noise is
    added, emulating a uniformly darkened appearance.
    """

    def __init__(self, world: TerrainWorldMap, noise_std: float = 0.0,
                 brightness: float = 1.0, seed: int = 0, mode: str = "synthetic"):
        if noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if brightness <= 0:
            raise ValueError("brightness must be positive")
        if mode not in ("synthetic", "recorded"):
            raise ValueError(f"unknown provider mode {mode!r}")
        self.world = world
        self.noise_std = noise_std
        self.brightness = brightness
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.clamp_count = 0

    def features_under_robot(self, x: float, y: float, psi: float,
                             half_spacing: float = 0.3) -> np.ndarray:
        feat, clamped = features_under_robot(self.world, x, y, psi, half_spacing)
        if clamped:
            self.clamp_count += 1
        out = self.brightness * feat
        if self.noise_std > 0:
            out = out + self.rng.normal(0.0, self.noise_std, size=out.shape)
        return out

    def eta_under_robot(self, x: float, y: float) -> np.ndarray:
        return eta_under_robot(self.world, x, y)


def linear_margin_stats(world: TerrainWorldMap) -> dict:
    """Worst-case linear separation margin between class feature clouds.

    For each class pair the features are projected on the line between the
    class means; the margin is half the gap between the projected means minus
    nothing (the separating hyperplane sits at the midpoint). Returns the
    minimum margin over pairs and the largest intra-class projected std.
    """
    ids = np.unique(world.class_grid)
    flat = world.features.reshape(-1, world.features.shape[-1])
    labels = world.class_grid.reshape(-1)
    means = {i: flat[labels == i].mean(axis=0) for i in ids}
    min_margin = math.inf
    max_std = 0.0
    for a in ids:
        for b in ids:
            if b <= a:
                continue
            if np.array_equal(world.centers[a], world.centers[b]):
                continue  # twin classes share appearance by design
            d = means[b] - means[a]
            dist = np.linalg.norm(d)
            if dist == 0:
                continue
            d = d / dist
            pa = flat[labels == a] @ d
            pb = flat[labels == b] @ d
            min_margin = min(min_margin, 0.5 * abs(pb.mean() - pa.mean()))
            max_std = max(max_std, pa.std(), pb.std())
    return {"min_margin": min_margin, "max_intra_std": max_std}


def save_world(path, world: TerrainWorldMap) -> None:
    save_arrays(path, {
        "class_grid": world.class_grid,
        "features": world.features,
        "eta_table": world.eta_table,
        "centers": world.centers,
    }, kind="world", meta={
        "cell_size": world.cell_size,
        "class_names": list(world.class_names),
        "feature_noise": world.feature_noise,
    })


def load_world(path) -> TerrainWorldMap:
    arrays, meta = load_arrays(path, expect_kind="world")
    return TerrainWorldMap(
        class_grid=arrays["class_grid"],
        features=arrays["features"],
        eta_table=arrays["eta_table"],
        cell_size=float(meta["cell_size"]),
        class_names=list(meta["class_names"]),
        centers=arrays["centers"],
        feature_noise=float(meta["feature_noise"]),
    )
