"""Procedural semantic worlds, agent viewports, obstructions and exact correspondences.

Worlds are Voronoi class maps painted with per-class colour prototypes plus a
smooth, seeded texture field. Viewports sit on the feature-patch lattice and
turn in right angles only, so every target feature cell either lands exactly
on one supporting cell or falls outside the supporting view.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import WorldConfig
from .errors import ConfigError, GenerationError
from .grid import patch_mean

MIN_CLASS_FRACTION = 0.01

# out-of-distribution obstruction colours lie well outside the [0, 1] cube
_OOD_LOW, _OOD_HIGH = -0.6, 1.6


@dataclass
class World:
    class_map: np.ndarray  # (rows, cols) int
    appearance: np.ndarray  # (rows, cols, 3)
    prototypes: np.ndarray  # (C, 3)
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_map.shape


@dataclass(frozen=True)
class Viewport:
    agent_id: int
    origin: tuple[int, int]
    rotation: int  # degrees, multiple of 90
    view_rows: int
    view_cols: int

    @property
    def quarter_turns(self) -> int:
        return (self.rotation // 90) % 4

    @property
    def footprint(self) -> tuple[int, int]:
        """World-aligned extent (rows, cols) covered by this viewport."""
        if self.quarter_turns % 2:
            return self.view_cols, self.view_rows
        return self.view_rows, self.view_cols

    def crop(self, arr: np.ndarray) -> np.ndarray:
        r0, c0 = self.origin
        fr, fc = self.footprint
        return np.rot90(arr[r0 : r0 + fr, c0 : c0 + fc], self.quarter_turns, axes=(0, 1))

    def pixel_world_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """World (row, col) of every view pixel, integer pixel indices."""
        r0, c0 = self.origin
        fr, fc = self.footprint
        rr, cc = np.meshgrid(np.arange(r0, r0 + fr), np.arange(c0, c0 + fc), indexing="ij")
        k = self.quarter_turns
        return np.rot90(rr, k), np.rot90(cc, k)

    def world_to_view_lookup(self) -> np.ndarray:
        """For each footprint pixel (world-aligned), the flat index of the view pixel showing it."""
        vidx = np.arange(self.view_rows * self.view_cols).reshape(self.view_rows, self.view_cols)
        return np.rot90(vidx, -self.quarter_turns)

    def overlap(self, other: Viewport) -> float:
        """Fraction of this view's area also covered by ``other``."""
        (r0, c0), (fr, fc) = self.origin, self.footprint
        (s0, d0), (gr, gc) = other.origin, other.footprint
        dr = max(0, min(r0 + fr, s0 + gr) - max(r0, s0))
        dc = max(0, min(c0 + fc, d0 + gc) - max(c0, d0))
        return dr * dc / float(fr * fc)


@dataclass
class SceneSample:
    """One synchronized snapshot of ``N`` agents."""

    observations: list[np.ndarray]
    gt_masks: list[np.ndarray]
    obstruction_masks: list[np.ndarray]
    correspondences: dict[tuple[int, int], np.ndarray]
    viewports: list[Viewport]
    feat_rows: int
    feat_cols: int
    seed: int = 0
    obstruction_colors: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.observations)

    @property
    def no_match(self) -> int:
        return self.feat_rows * self.feat_cols

    @property
    def view_shape(self) -> tuple[int, int]:
        return self.observations[0].shape[:2]

    @property
    def patch(self) -> int:
        return self.view_shape[0] // self.feat_rows

    def copy(self) -> SceneSample:
        return replace(
            self,
            observations=[o.copy() for o in self.observations],
            gt_masks=[m.copy() for m in self.gt_masks],
            obstruction_masks=[m.copy() for m in self.obstruction_masks],
            correspondences={k: v.copy() for k, v in self.correspondences.items()},
            viewports=list(self.viewports),
            obstruction_colors=dict(self.obstruction_colors),
        )

    def subset(self, agents: list[int]) -> SceneSample:
        """Keep only ``agents`` (re-indexed in the given order)."""
        remap = {a: i for i, a in enumerate(agents)}
        return SceneSample(
            observations=[self.observations[a] for a in agents],
            gt_masks=[self.gt_masks[a] for a in agents],
            obstruction_masks=[self.obstruction_masks[a] for a in agents],
            correspondences={
                (remap[t], remap[s]): v
                for (t, s), v in self.correspondences.items()
                if t in remap and s in remap
            },
            viewports=[replace(self.viewports[a], agent_id=remap[a]) for a in agents],
            feat_rows=self.feat_rows,
            feat_cols=self.feat_cols,
            seed=self.seed,
            obstruction_colors={remap[a]: c for a, c in self.obstruction_colors.items() if a in remap},
        )


# ---------------------------------------------------------------------------
# worlds


def class_prototypes(n_classes: int, seed: int = 0) -> np.ndarray:
    """Colour prototype per class inside [0.15, 0.85]^3.

    The first eight classes take the shrunken cube corners; further classes are
    drawn (seeded) from the cube interior with a minimum separation.
    """
    corners = np.array(list(itertools.product((0.15, 0.85), repeat=3)))
    order = [7, 0, 4, 2, 1, 6, 5, 3]
    protos = [corners[i] for i in order[: min(n_classes, 8)]]
    rng = np.random.default_rng([seed, 9173])
    while len(protos) < n_classes:
        cand = rng.uniform(0.15, 0.85, size=3)
        if min(np.linalg.norm(cand - p) for p in protos) > 0.3:
            protos.append(cand)
    return np.array(protos)


def generate_world(config: WorldConfig, seed: int | None = None) -> World:
    """Seeded Voronoi class map with textured pseudo-RGB appearance."""
    seed = config.seed if seed is None else seed
    rows, cols, C = config.world_rows, config.world_cols, config.n_classes
    if rows < config.view_rows or cols < config.view_cols:
        raise ConfigError("world smaller than a viewport")
    if C < 2:
        raise ConfigError("need at least two classes")
    cells = rows * cols
    need = int(np.ceil(MIN_CLASS_FRACTION * cells))
    if C * max(need, 1) > cells:
        raise ConfigError(f"a {rows}x{cols} world cannot give each of {C} classes 1% coverage")

    rng = np.random.default_rng(seed)
    n_sites = max(C, int(round(cells / float(config.region_size**2))))
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    class_map = None
    for _ in range(50):
        sites = rng.uniform(0, [rows, cols], size=(n_sites, 2))
        labels = np.concatenate([rng.permutation(C), rng.integers(0, C, n_sites - C)])
        d2 = ((pix[:, None, :] - sites[None, :, :]) ** 2).sum(-1)
        region = d2.argmin(axis=1)
        cmap = labels[region].reshape(rows, cols)
        counts = np.bincount(cmap.ravel(), minlength=C)
        if counts.min() >= need:
            class_map = cmap
            break
        # hand the largest regions of over-represented classes to missing ones
        sizes = np.bincount(region, minlength=n_sites)
        for missing in np.flatnonzero(counts < need):
            big = int(np.argmax(sizes * (labels != missing)))
            labels[big] = missing
            sizes[big] = 0
        cmap = labels[region].reshape(rows, cols)
        if np.bincount(cmap.ravel(), minlength=C).min() >= need:
            class_map = cmap
            break
    if class_map is None:
        raise GenerationError("could not reach minimum class coverage")

    protos = class_prototypes(C, seed)
    noise = rng.standard_normal((rows, cols, 3))
    smooth = np.stack(
        [gaussian_filter(noise[..., ch], config.texture_sigma, mode="wrap") for ch in range(3)], axis=-1
    )
    smooth /= smooth.std(axis=(0, 1), keepdims=True) + 1e-12
    appearance = protos[class_map] + config.texture_amplitude * smooth
    return World(class_map=class_map.astype(np.int64), appearance=appearance, prototypes=protos, seed=seed)


# ---------------------------------------------------------------------------
# viewports


def mean_pairwise_overlap(viewports: list[Viewport]) -> float:
    pairs = list(itertools.combinations(viewports, 2))
    if not pairs:
        return 1.0
    return float(np.mean([a.overlap(b) for a, b in pairs]))


def _lattice_positions(limit: int, step: int) -> np.ndarray:
    return np.arange(0, limit + 1, step)


def place_agents(
    world: World | tuple[int, int],
    n_agents: int,
    overlap_target: float,
    seed: int,
    view_rows: int = 64,
    view_cols: int = 64,
    patch: int = 8,
    rotations: bool = True,
    tolerance: float = 0.05,
    max_tries: int = 400,
) -> list[Viewport]:
    """Place ``n_agents`` patch-aligned viewports with a target mean pairwise overlap.

    Origins are drawn from a square window whose width is tuned so the mean
    pairwise overlap lands within ``tolerance`` of ``overlap_target`` (relaxed
    to 0.10 after half the attempts). ``overlap_target == 0`` asks for fully
    disjoint views.
    """
    if n_agents < 2:
        raise ConfigError("place_agents needs at least two agents")
    rows, cols = world.shape if isinstance(world, World) else world
    if rotations and view_rows != view_cols:
        raise ConfigError("rotations need square viewports")
    rng = np.random.default_rng(seed)
    max_r, max_c = rows - view_rows, cols - view_cols
    if max_r < 0 or max_c < 0:
        raise ConfigError("world smaller than a viewport")
    ys, xs = _lattice_positions(max_r, patch), _lattice_positions(max_c, patch)

    def make(origins) -> list[Viewport]:
        rots = rng.integers(0, 4, n_agents) * 90 if rotations else np.zeros(n_agents, int)
        return [
            Viewport(i, (int(r), int(c)), int(rot), view_rows, view_cols)
            for i, ((r, c), rot) in enumerate(zip(origins, rots))
        ]

    if overlap_target <= 0.0:
        for _ in range(max_tries):
            vps: list[Viewport] = []
            for _ in range(n_agents * 50):
                cand = make([(rng.choice(ys), rng.choice(xs))])[0]
                if all(cand.overlap(v) == 0.0 for v in vps):
                    vps.append(replace(cand, agent_id=len(vps)))
                    if len(vps) == n_agents:
                        return vps
        raise GenerationError(f"cannot place {n_agents} disjoint viewports in a {rows}x{cols} world")

    # window width in lattice steps, tuned by a coarse scan
    max_w = max(len(ys), len(xs)) - 1

    def sample(width: int) -> list[Viewport]:
        wy, wx = min(width, len(ys) - 1), min(width, len(xs) - 1)
        by = rng.integers(0, len(ys) - wy)
        bx = rng.integers(0, len(xs) - wx)
        origins = [
            (ys[by + rng.integers(0, wy + 1)], xs[bx + rng.integers(0, wx + 1)]) for _ in range(n_agents)
        ]
        return make(origins)

    scores = []
    for width in range(max_w + 1):
        trial = [mean_pairwise_overlap(sample(width)) for _ in range(8)]
        scores.append(abs(float(np.mean(trial)) - overlap_target))
    best = int(np.argmin(scores))
    candidates = sorted(range(max_w + 1), key=lambda w: (scores[w], w))[:3]
    for attempt in range(max_tries):
        tol = tolerance if attempt < max_tries // 2 else 0.10
        width = best if attempt % 3 == 0 else candidates[attempt % len(candidates)]
        vps = sample(width)
        m = mean_pairwise_overlap(vps)
        any_overlap = any(a.overlap(b) > 0 for a, b in itertools.combinations(vps, 2))
        if abs(m - overlap_target) <= tol and any_overlap:
            return vps
    raise GenerationError(
        f"could not reach mean overlap {overlap_target:.2f} with {n_agents} agents in a {rows}x{cols} world"
    )


# ---------------------------------------------------------------------------
# correspondences


def _cell_centres(vp: Viewport, feat_rows: int, feat_cols: int) -> tuple[np.ndarray, np.ndarray]:
    rr, cc = vp.pixel_world_coords()
    patch = vp.view_rows // feat_rows
    centres = patch_mean(np.stack([rr + 0.5, cc + 0.5], axis=-1).astype(np.float64), patch)
    return centres[..., 0], centres[..., 1]


def gt_correspondence(
    vp_t: Viewport,
    vp_s: Viewport,
    feat_rows: int,
    feat_cols: int,
    obstruction_s: np.ndarray | None = None,
) -> np.ndarray:
    """Map each target feature cell to the supporting cell covering the same world spot.

    Cells whose centre falls outside the supporting view, or whose supporting
    cell is majority obstructed, get the no-match value ``feat_rows*feat_cols``.
    """
    if vp_s.view_rows % feat_rows or vp_s.view_cols % feat_cols:
        raise ConfigError("view dims must be divisible by feature dims")
    no_match = feat_rows * feat_cols
    patch = vp_s.view_rows // feat_rows
    cr, cc = _cell_centres(vp_t, feat_rows, feat_cols)
    (s0, d0), (fr, fc) = vp_s.origin, vp_s.footprint
    u = np.floor(cr - s0).astype(int)
    v = np.floor(cc - d0).astype(int)
    inside = (u >= 0) & (u < fr) & (v >= 0) & (v < fc)
    lookup = vp_s.world_to_view_lookup()
    out = np.full((feat_rows, feat_cols), no_match, dtype=np.int64)
    flat = lookup[np.clip(u, 0, fr - 1), np.clip(v, 0, fc - 1)]
    vi, vj = flat // vp_s.view_cols, flat % vp_s.view_cols
    cell = (vi // patch) * feat_cols + (vj // patch)
    out[inside] = cell[inside]
    if obstruction_s is not None and obstruction_s.any():
        frac = patch_mean(obstruction_s[..., None].astype(np.float64), patch)[..., 0].ravel()
        blocked = frac > 0.5
        out[inside & blocked[np.clip(cell, 0, no_match - 1)]] = no_match
    return out


def all_correspondences(
    viewports: list[Viewport], feat_rows: int, feat_cols: int, obstructions: list[np.ndarray] | None = None
) -> dict[tuple[int, int], np.ndarray]:
    out = {}
    for t, s in itertools.permutations(range(len(viewports)), 2):
        obs = obstructions[s] if obstructions is not None else None
        out[(t, s)] = gt_correspondence(viewports[t], viewports[s], feat_rows, feat_cols, obs)
    return out


# ---------------------------------------------------------------------------
# obstructions


@dataclass(frozen=True)
class ObstructionShape:
    min_size: int = 8
    max_size: int = 20
    kind: str = "rect"  # rect | ellipse
    probability: float = 1.0
    agents: tuple[int, ...] | None = None


def rasterize(kind: str, rows: int, cols: int, top: int, left: int, h: int, w: int) -> np.ndarray:
    mask = np.zeros((rows, cols), dtype=bool)
    if h <= 0 or w <= 0:
        return mask
    if kind == "rect":
        mask[top : top + h, left : left + w] = True
    elif kind == "ellipse":
        rr, cc = np.meshgrid(np.arange(rows) + 0.5, np.arange(cols) + 0.5, indexing="ij")
        cy, cx = top + h / 2.0, left + w / 2.0
        mask = ((rr - cy) / (h / 2.0)) ** 2 + ((cc - cx) / (w / 2.0)) ** 2 <= 1.0
    else:
        raise ConfigError(f"unknown obstruction kind {kind!r}")
    return mask


def ood_color(rng: np.random.Generator) -> np.ndarray:
    """A colour far outside every class prototype's neighbourhood."""
    base = np.where(rng.random(3) < 0.5, _OOD_LOW, _OOD_HIGH)
    return base + rng.uniform(-0.05, 0.05, size=3)


def insert_obstruction(sample: SceneSample, shape: ObstructionShape, seed: int) -> SceneSample:
    """Paint an independent out-of-distribution footprint into each chosen view.

    Ground-truth masks are untouched; correspondences are recomputed so that
    majority-obstructed supporting cells become no-match.
    """
    rng = np.random.default_rng(seed)
    out = sample.copy()
    rows, cols = sample.view_shape
    if shape.max_size <= 0:
        return out
    agents = range(sample.n_agents) if shape.agents is None else shape.agents
    for a in agents:
        if rng.random() >= shape.probability:
            continue
        h = int(rng.integers(shape.min_size, shape.max_size + 1))
        w = int(rng.integers(shape.min_size, shape.max_size + 1))
        if h * w >= 0.5 * rows * cols:
            raise ConfigError("obstruction footprint must stay under half the viewport")
        if h == 0 or w == 0:
            continue
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        mask = rasterize(shape.kind, rows, cols, top, left, h, w)
        color = ood_color(rng)
        tex = rng.uniform(-0.03, 0.03, size=(rows, cols, 3))
        obs = out.observations[a]
        obs[mask] = color + tex[mask]
        out.obstruction_masks[a] = out.obstruction_masks[a] | mask
        out.obstruction_colors[a] = color
    out.correspondences = all_correspondences(out.viewports, out.feat_rows, out.feat_cols, out.obstruction_masks)
    return out


# ---------------------------------------------------------------------------
# samples


def render_sample(world: World, viewports: list[Viewport], feat_rows: int, feat_cols: int, seed: int = 0) -> SceneSample:
    obs = [vp.crop(world.appearance).copy() for vp in viewports]
    masks = [vp.crop(world.class_map).copy() for vp in viewports]
    blank = [np.zeros(m.shape, dtype=bool) for m in masks]
    return SceneSample(
        observations=obs,
        gt_masks=masks,
        obstruction_masks=blank,
        correspondences=all_correspondences(viewports, feat_rows, feat_cols),
        viewports=list(viewports),
        feat_rows=feat_rows,
        feat_cols=feat_cols,
        seed=seed,
    )


def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def make_sample(config: WorldConfig, seed: int, obstruct: bool = True) -> SceneSample:
    """World, placement, rendering and (optionally) obstruction for one seed."""
    config.validate()
    world = generate_world(config, seed)
    vps = place_agents(
        world,
        config.n_agents,
        config.overlap_target,
        seed + 1,
        config.view_rows,
        config.view_cols,
        config.patch,
        config.rotations,
    ) if config.n_agents >= 2 else [Viewport(0, (0, 0), 0, config.view_rows, config.view_cols)]
    sample = render_sample(world, vps, config.feat_rows, config.feat_cols, seed)
    if obstruct and config.obstruction_max > 0:
        shape = ObstructionShape(
            config.obstruction_min, config.obstruction_max, config.obstruction_kind, config.obstruction_prob
        )
        sample = insert_obstruction(sample, shape, seed + 2)
    return sample


def make_dataset(config: WorldConfig, n_samples: int, seed: int | None = None, obstruct: bool = True) -> list[SceneSample]:
    base = config.seed if seed is None else seed
    return [make_sample(config, sample_seed(base, i), obstruct) for i in range(n_samples)]
