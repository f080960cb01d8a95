"""Seeded procedural scenes: textured terrain mosaics under a sky band, with objects on top.

A scene is fully described by a :class:`SceneSpec`; rendering the spec is a
pure function, so labels and pixels always line up. Terrain labels are per
texture rather than per Voronoi cell, so two disjoint cells painted with the
same texture form one region.
"""
from __future__ import annotations

import colorsys
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import (
    LabelMap,
    Manifest,
    Sample,
    Taxonomy,
    VOID,
    atomic_write_bytes,
    encode_labels,
    encode_ppm,
    format_kv,
    manifest_text,
    parse_kv,
)
from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

SKY = "sky"
SHAPES = ("circle", "rectangle", "triangle")
MAX_ATTEMPTS = 32


@dataclass(frozen=True)
class ObjectType:
    name: str
    shape: str
    color: tuple[float, float, float]
    probability: float
    size: tuple[float, float] = (8.0, 14.0)  # radius-like extent in pixels


DEFAULT_OBJECTS = (
    ObjectType("rock", "circle", (0.55, 0.52, 0.50), 0.6),
    ObjectType("building", "rectangle", (0.75, 0.30, 0.25), 0.5),
    ObjectType("tree", "triangle", (0.10, 0.45, 0.12), 0.5),
)


@dataclass(frozen=True)
class GenConfig:
    height: int = 64
    width: int = 64
    texture_pool: int = 24
    min_terrains: int = 2
    max_terrains: int = 6
    max_slots: int = 8
    objects: tuple[ObjectType, ...] = DEFAULT_OBJECTS
    scale_range: tuple[float, float] = (0.5, 2.0)
    sky_fraction: tuple[float, float] = (0.15, 0.3)
    seed: int = 0
    pool_seed: int = 0

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"image size must be positive, got {self.height}x{self.width}")
        if not 1 <= self.min_terrains <= self.max_terrains <= self.max_slots:
            raise ConfigError(
                f"need 1 <= min_terrains ({self.min_terrains}) <= max_terrains ({self.max_terrains})"
                f" <= slots ({self.max_slots})"
            )
        if self.max_terrains > self.texture_pool:
            raise ConfigError(f"max_terrains {self.max_terrains} exceeds texture pool of {self.texture_pool}")
        for o in self.objects:
            if not 0.0 <= o.probability <= 1.0:
                raise ConfigError(f"activation probability of {o.name} outside [0, 1]: {o.probability}")
            if o.shape not in SHAPES:
                raise ConfigError(f"unknown shape {o.shape!r} for {o.name}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad texture scale range {self.scale_range}")
        lo, hi = self.sky_fraction
        if not 0 <= lo <= hi < 1:
            raise ConfigError(f"bad sky fraction range {self.sky_fraction}")

    @property
    def class_names(self) -> list[str]:
        return [SKY] + [o.name for o in self.objects]

    def taxonomy(self) -> Taxonomy:
        return Taxonomy(self.class_names, self.max_slots, frozenset({VOID}),
                        [texture_name(i) for i in range(self.texture_pool)])


def texture_name(texture_id: int) -> str:
    return f"tex{texture_id:02d}"


# -- textures -----------------------------------------------------------------------
def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Stateless lattice hash to [-1, 1] (splitmix64 finaliser)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ \
            (iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)) ^ \
            np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(y: np.ndarray, x: np.ndarray, salt: int) -> np.ndarray:
    y0 = np.floor(y)
    x0 = np.floor(x)
    fy = _fade(y - y0)
    fx = _fade(x - x0)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    v00 = _hash01(x0, y0, salt)
    v01 = _hash01(x0 + 1, y0, salt)
    v10 = _hash01(x0, y0 + 1, salt)
    v11 = _hash01(x0 + 1, y0 + 1, salt)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def pool_colors(pool_size: int, pool_seed: int = 0) -> np.ndarray:
    """Distinct base colours: evenly spread hues, alternating value/saturation bands."""
    rng = np.random.default_rng([pool_seed, 0xC0102])
    offset = rng.random()
    out = np.zeros((pool_size, 3))
    for i in range(pool_size):
        hue = (offset + i * 0.618033988749895) % 1.0
        band = i % 3
        sat = (0.35, 0.6, 0.8)[band]
        val = (0.75, 0.55, 0.4)[(i // 3) % 3]
        out[i] = colorsys.hsv_to_rgb(hue, sat, val)
    return out


@dataclass(frozen=True)
class Texture:
    texture_id: int
    scale: float
    base_color: tuple[float, float, float]
    tint: tuple[float, float, float]
    period: float
    octaves: int
    amplitude: float
    salt: int

    def __call__(self, y, x) -> np.ndarray:
        """RGB in [0, 1] at pixel coordinates ``(y, x)`` (arrays of equal shape)."""
        y = np.asarray(y, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        n = np.zeros(y.shape)
        freq = 1.0 / (self.period * self.scale)
        amp, norm = 1.0, 0.0
        for o in range(self.octaves):
            n += amp * value_noise(y * freq, x * freq, self.salt + 7919 * o)
            norm += amp
            amp *= 0.5
            freq *= 2.0
        n /= norm
        rgb = np.asarray(self.base_color) + self.amplitude * n[..., None] * np.asarray(self.tint)
        return np.clip(rgb, 0.0, 1.0)


def make_texture(texture_id: int, scale: float, pool_size: int = 24, pool_seed: int = 0) -> Texture:
    if not 0 <= texture_id < pool_size:
        raise ConfigError(f"texture id {texture_id} outside pool of {pool_size}")
    rng = np.random.default_rng([pool_seed, texture_id])
    tint = 0.6 + 0.4 * rng.random(3)
    return Texture(
        texture_id=texture_id,
        scale=float(scale),
        base_color=tuple(pool_colors(pool_size, pool_seed)[texture_id]),
        tint=tuple(tint),
        period=float(rng.uniform(3.0, 8.0)),
        octaves=int(rng.integers(1, 4)),
        amplitude=float(rng.uniform(0.1, 0.18)),
        salt=int(rng.integers(1, 2**62)),
    )


# -- scene description ---------------------------------------------------------------
@dataclass(frozen=True)
class PlacedObject:
    class_id: int
    shape: str
    cy: float
    cx: float
    size: float
    color: tuple[float, float, float]


@dataclass
class SceneSpec:
    seed: int
    height: int
    width: int
    pool_size: int
    pool_seed: int
    textures: list[int]
    scales: list[float]
    sky_rows: int
    sky_color: tuple[float, float, float]
    sites: list[tuple[float, float]]
    cell_texture: list[int]
    objects: list[PlacedObject]
    dither_seed: int
    num_cs: int
    region_textures: list[int] = field(default_factory=list)

    def to_text(self) -> str:
        items = [
            ("seed", self.seed),
            ("height", self.height),
            ("width", self.width),
            ("pool_size", self.pool_size),
            ("pool_seed", self.pool_seed),
            ("textures", ",".join(map(str, self.textures))),
            ("scales", ",".join(repr(s) for s in self.scales)),
            ("sky_rows", self.sky_rows),
            ("sky_color", ",".join(repr(c) for c in self.sky_color)),
            ("sites", ";".join(f"{y!r},{x!r}" for y, x in self.sites)),
            ("cell_texture", ",".join(map(str, self.cell_texture))),
            ("objects", ";".join(
                f"{o.class_id},{o.shape},{o.cy!r},{o.cx!r},{o.size!r},{o.color[0]!r},{o.color[1]!r},{o.color[2]!r}"
                for o in self.objects
            )),
            ("dither_seed", self.dither_seed),
            ("num_cs", self.num_cs),
            ("region_textures", ",".join(map(str, self.region_textures))),
        ]
        return format_kv(items)

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        kv = parse_kv(text, "<scene>")

        def ints(key):
            return [int(v) for v in kv[key].split(",") if v.strip()]

        def floats(key):
            return [float(v) for v in kv[key].split(",") if v.strip()]

        try:
            objects = []
            for chunk in filter(None, kv["objects"].split(";")):
                f = chunk.split(",")
                objects.append(PlacedObject(int(f[0]), f[1], float(f[2]), float(f[3]), float(f[4]),
                                            (float(f[5]), float(f[6]), float(f[7]))))
            sites = [tuple(float(v) for v in s.split(",")) for s in filter(None, kv["sites"].split(";"))]
            return cls(
                seed=int(kv["seed"]),
                height=int(kv["height"]),
                width=int(kv["width"]),
                pool_size=int(kv["pool_size"]),
                pool_seed=int(kv["pool_seed"]),
                textures=ints("textures"),
                scales=floats("scales"),
                sky_rows=int(kv["sky_rows"]),
                sky_color=tuple(floats("sky_color")),
                sites=sites,
                cell_texture=ints("cell_texture"),
                objects=objects,
                dither_seed=int(kv["dither_seed"]),
                num_cs=int(kv["num_cs"]),
                region_textures=ints("region_textures"),
            )
        except (KeyError, IndexError, ValueError) as exc:
            raise ParseError(f"malformed scene spec: {exc}") from None


# -- rendering ------------------------------------------------------------------------
def _shape_mask(obj: PlacedObject, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy = yy + 0.5 - obj.cy
    dx = xx + 0.5 - obj.cx
    s = obj.size
    if obj.shape == "circle":
        return dy * dy + dx * dx <= s * s
    if obj.shape == "rectangle":
        return (np.abs(dy) <= s) & (np.abs(dx) <= 0.7 * s)
    # upright isosceles triangle, apex at top
    t = (dy + s) / (2 * s)
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= 0.8 * s * t)


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, LabelMap]:
    """Rasterise a spec; fills ``spec.region_textures`` with the texture behind each CA region id."""
    h, w = spec.height, spec.width
    num_cs = spec.num_cs
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    sites = np.asarray(spec.sites, dtype=np.float64).reshape(-1, 2)
    d = np.sqrt((yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2)
    nearest = np.argsort(d, axis=-1, kind="stable")[..., :2]
    cell = nearest[..., 0]
    if sites.shape[0] > 1:
        d1 = np.take_along_axis(d, nearest[..., :1], -1)[..., 0]
        d2 = np.take_along_axis(d, nearest[..., 1:2], -1)[..., 0]
        coin = np.random.default_rng(spec.dither_seed).random((h, w)) < 0.5
        edge = (d2 - d1 < 1.0) & coin
        cell = np.where(edge, nearest[..., 1], cell)
    tex_slot = np.asarray(spec.cell_texture)[cell]  # index into spec.textures

    image = np.zeros((h, w, 3))
    for k, (tid, scale) in enumerate(zip(spec.textures, spec.scales)):
        sel = tex_slot == k
        if sel.any():
            image[sel] = make_texture(tid, scale, spec.pool_size, spec.pool_seed)(yy[sel], xx[sel])
    code = np.full((h, w), -1, dtype=np.int64)  # texture slot, or -2 - class id for CS
    code[:] = tex_slot

    sky = yy < spec.sky_rows
    shade = 1.0 - 0.25 * (yy / max(spec.sky_rows, 1))
    image[sky] = np.clip(np.asarray(spec.sky_color) * shade[sky][:, None], 0, 1)
    code[sky] = -2  # class 0

    for obj in spec.objects:
        m = _shape_mask(obj, yy, xx)
        image[m] = obj.color
        code[m] = -2 - obj.class_id

    present = [k for k in range(len(spec.textures)) if (code == k).any()]
    codes = np.full((h, w), VOID, dtype=np.uint16)
    cs = code <= -2
    codes[cs] = (-2 - code[cs]).astype(np.uint16)
    for r, k in enumerate(present):
        codes[code == k] = num_cs + r
    spec.region_textures = [spec.textures[k] for k in present]
    return np.round(image * 255.0).astype(np.uint8), LabelMap(codes, num_cs)


def sample_spec(cfg: GenConfig, rng: np.random.Generator, scene_seed: int) -> SceneSpec:
    h, w = cfg.height, cfg.width
    n_terr = int(rng.integers(cfg.min_terrains, cfg.max_terrains + 1))
    textures = [int(t) for t in rng.choice(cfg.texture_pool, size=n_terr, replace=False)]
    lo, hi = cfg.scale_range
    scales = [float(np.exp(rng.uniform(math.log(lo), math.log(hi)))) for _ in textures]
    sky_rows = int(round(h * rng.uniform(*cfg.sky_fraction)))
    sky_color = tuple(float(c) for c in np.clip(np.array([0.45, 0.65, 0.95]) + rng.normal(0, 0.04, 3), 0, 1))
    n_cells = int(rng.integers(n_terr, 2 * n_terr + 1))
    sites = [(float(rng.uniform(sky_rows, h)), float(rng.uniform(0, w))) for _ in range(n_cells)]
    cell_texture = list(range(n_terr)) + [int(v) for v in rng.integers(0, n_terr, size=n_cells - n_terr)]
    cell_texture = [cell_texture[i] for i in rng.permutation(n_cells)]
    objects = []
    for cls, ot in enumerate(cfg.objects, start=1):
        if rng.random() >= ot.probability:
            continue
        for _ in range(int(rng.integers(1, 3))):
            size = float(rng.uniform(*ot.size))
            cy = float(rng.uniform(max(sky_rows - size / 2, size / 2), h - size / 2))
            cx = float(rng.uniform(size / 2, w - size / 2))
            color = tuple(float(c) for c in np.clip(np.asarray(ot.color) + rng.normal(0, 0.04, 3), 0, 1))
            objects.append(PlacedObject(cls, ot.shape, cy, cx, size, color))
    return SceneSpec(
        seed=scene_seed, height=h, width=w, pool_size=cfg.texture_pool, pool_seed=cfg.pool_seed,
        textures=textures, scales=scales, sky_rows=sky_rows, sky_color=sky_color, sites=sites,
        cell_texture=cell_texture, objects=objects, dither_seed=int(rng.integers(0, 2**31 - 1)),
        num_cs=len(cfg.class_names),
    )


def generate_scene(cfg: GenConfig, scene_seed: int) -> tuple[np.ndarray, LabelMap, SceneSpec]:
    cfg.validate()
    rng = np.random.default_rng(scene_seed)
    for _ in range(MAX_ATTEMPTS):
        spec = sample_spec(cfg, rng, scene_seed)
        image, labels = render_scene(spec)
        if labels.num_regions >= cfg.min_terrains:
            return image, labels, spec
    log.warning("scene %d: objects hid terrains in every attempt; keeping the last draw", scene_seed)
    return image, labels, spec


SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def split_tags(n: int, seed: int) -> list[str]:
    """Seeded 80/10/10 train/val/test assignment of sample indices."""
    order = np.random.default_rng([seed, 0x5111]).permutation(n)
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[1]))
    tags = ["test"] * n
    for rank, i in enumerate(order):
        tags[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


def generate_dataset(cfg: GenConfig, n: int, out_dir, workers: int = 1) -> Manifest:
    """Write ``n`` scenes (seeds ``cfg.seed + i``) plus taxonomy and manifest under ``out_dir``."""
    cfg.validate()
    if n < 0:
        raise ConfigError(f"scene count must be >= 0, got {n}")
    out = Path(out_dir)
    taxonomy = cfg.taxonomy()
    if n == 0:
        return Manifest([], taxonomy)
    for sub in ("images", "labels", "specs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    tags = split_tags(n, cfg.seed)

    def one(i: int) -> Sample:
        image, labels, spec = generate_scene(cfg, cfg.seed + i)
        name = f"{i:06d}"
        img_path = out / "images" / f"{name}.ppm"
        lbl_path = out / "labels" / f"{name}.tlbl"
        try:
            atomic_write_bytes(img_path, encode_ppm(image))
            atomic_write_bytes(lbl_path, encode_labels(labels))
            atomic_write_bytes(out / "specs" / f"{name}.scene", spec.to_text().encode("utf-8"))
        except OSError as exc:
            raise OSError(f"cannot write scene {name} under {out}: {exc}") from exc
        return Sample(name, img_path, lbl_path, tags[i], tuple(texture_name(t) for t in spec.region_textures))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, range(n)))
    else:
        samples = [one(i) for i in range(n)]
    atomic_write_bytes(out / "taxonomy.txt", taxonomy.to_text().encode("utf-8"))
    atomic_write_bytes(out / "manifest.txt", manifest_text(samples, "taxonomy.txt", out).encode("utf-8"))
    return Manifest(samples, taxonomy)
