"""Synthetic distortion bank and dataset generation for panoramas.

Four distortion families, three strength levels each, applied either inside
spherical regions (raised-cosine falloff at the rim) or globally:

    GN  additive Gaussian noise, sigma 0.05 / 0.10 / 0.20
    GB  Gaussian blur, sigma 2 / 4 / 8 px
    BD  brightness discontinuity, luminance factor 1.3 / 1.6 / 2.0 (clamped)
    ST  stitching break, piecewise horizontal shift of 4 / 8 / 16 px across a
        seam through the region

Every record carries a deterministic pseudo quality score derived from the
distortion type, level, and spherical coverage, so generated corpora are
self-labeling for both regression and the auxiliary classification tasks.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .projection import erp_grid

TYPES = ("GN", "GB", "BD", "ST")
GN_SIGMA = {1: 0.05, 2: 0.10, 3: 0.20}
GB_SIGMA = {1: 2.0, 2: 4.0, 3: 8.0}
BD_FACTOR = {1: 1.3, 2: 1.6, 3: 2.0}
ST_SHIFT = {1: 4, 2: 8, 3: 16}
TYPE_WEIGHT = {"GN": 1.0, "GB": 0.9, "BD": 0.7, "ST": 0.8}

REGION_RADIUS = np.pi / 8.0
FALLOFF = np.pi / 64.0
# coverage saturates once distorted area reaches this fraction of the sphere
COVERAGE_SATURATION = 0.25

JUFE_STYLE = "jufe"
OIQ_STYLE = "oiq"
SCORE_RANGES = {JUFE_STYLE: (1.0, 5.0), OIQ_STYLE: (1.0, 3.0)}
MANIFEST_VERSION = 1
NOT_APPLICABLE = -1


@dataclass(frozen=True)
class Region:
    """Spherical cap, radians."""

    lon: float
    lat: float
    radius: float = REGION_RADIUS


@dataclass(frozen=True)
class DistortionSpec:
    """Complete recipe for one distorted panorama.

    dist_type None with no regions and global_flag False means pristine.
    global_flag True requires an empty region list.
    """

    dist_type: str | None
    level: int
    regions: tuple[Region, ...] = ()
    global_flag: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.global_flag and self.regions:
            raise ValueError("global distortion cannot also carry regions")
        if self.dist_type is not None:
            if self.dist_type not in TYPES:
                raise ValueError(f"unknown distortion type {self.dist_type!r}")
            if self.level not in (1, 2, 3):
                raise ValueError(f"level must be 1, 2 or 3, got {self.level}")

    @property
    def pristine(self) -> bool:
        return not self.regions and not self.global_flag


def angular_distance_map(height: int, width: int, region: Region) -> np.ndarray:
    """Great-circle distance from every pixel center to the region center."""
    lon, lat = erp_grid(height, width)
    cos_d = np.sin(lat) * np.sin(region.lat) + np.cos(lat) * np.cos(region.lat) * np.cos(
        lon - region.lon
    )
    return np.arccos(np.clip(cos_d, -1.0, 1.0))


def region_mask(height: int, width: int, regions, falloff: float = FALLOFF) -> np.ndarray:
    """Blend weights in [0, 1]: 1 inside each cap, raised cosine over the rim.

    Pixels farther than radius + falloff from every center get exactly 0, so
    blending with the mask leaves them bit-identical.
    """
    mask = np.zeros((height, width))
    for region in regions:
        dist = angular_distance_map(height, width, region)
        m = np.zeros_like(dist)
        m[dist <= region.radius] = 1.0
        rim = (dist > region.radius) & (dist < region.radius + falloff)
        m[rim] = 0.5 * (1.0 + np.cos(np.pi * (dist[rim] - region.radius) / falloff))
        mask = np.maximum(mask, m)
    return mask


def solid_angle(region: Region) -> float:
    return float(2.0 * np.pi * (1.0 - np.cos(region.radius)))


def _seam_row_weight(height: int, width: int, center_lat: float) -> np.ndarray:
    # rows below the seam latitude take the shifted content
    _, lat = erp_grid(height, width)
    return (lat < center_lat).astype(np.float64)


def apply_distortion(image: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Apply spec to an equirectangular image in [0, 1].

    Pure function of (image, spec): the noise stream is seeded from spec.seed
    alone. Pixels outside every region (plus falloff) come back bit-identical.
    """
    img = np.asarray(image, dtype=np.float64)
    if spec.pristine:
        return img.copy()
    h, w = img.shape[:2]
    rng = np.random.default_rng(spec.seed)

    if spec.global_flag:
        mask = np.ones((h, w))
    else:
        mask = region_mask(h, w, spec.regions)
    if img.ndim == 3:
        mask3 = mask[..., None]
    else:
        mask3 = mask

    if spec.dist_type == "GN":
        noise = rng.normal(0.0, GN_SIGMA[spec.level], size=img.shape)
        return np.clip(img + mask3 * noise, 0.0, 1.0)

    if spec.dist_type == "GB":
        sigma = GB_SIGMA[spec.level]
        if img.ndim == 3:
            sig = (sigma, sigma, 0.0)
            modes = ("nearest", "wrap", "nearest")
        else:
            sig = (sigma, sigma)
            modes = ("nearest", "wrap")
        blurred = ndimage.gaussian_filter(img, sigma=sig, mode=modes)
        return img * (1.0 - mask3) + blurred * mask3

    if spec.dist_type == "BD":
        bright = np.clip(img * BD_FACTOR[spec.level], 0.0, 1.0)
        return img * (1.0 - mask3) + bright * mask3

    if spec.dist_type == "ST":
        shift = ST_SHIFT[spec.level]
        out = img
        if spec.global_flag:
            weight = _seam_row_weight(h, w, 0.0)
            if img.ndim == 3:
                weight = weight[..., None]
            out = out * (1.0 - weight) + np.roll(out, shift, axis=1) * weight
        else:
            for region in spec.regions:
                m = region_mask(h, w, [region]) * _seam_row_weight(h, w, region.lat)
                if img.ndim == 3:
                    m = m[..., None]
                out = out * (1.0 - m) + np.roll(out, shift, axis=1) * m
        return out

    raise ValueError(f"unhandled distortion type {spec.dist_type!r}")


def coverage_factor(spec: DistortionSpec) -> float:
    if spec.global_flag:
        return 1.0
    covered = sum(solid_angle(r) for r in spec.regions)
    return min(1.0, covered / (4.0 * np.pi * COVERAGE_SATURATION))


def pseudo_mos(spec: DistortionSpec, score_range) -> float:
    """Deterministic quality score: hi for pristine, dropping with type
    severity weight, level/3, and spherical coverage; clamped to the range."""
    lo, hi = score_range
    if spec.pristine:
        return float(hi)
    drop = (hi - lo) * TYPE_WEIGHT[spec.dist_type] * (spec.level / 3.0) * coverage_factor(spec)
    return float(np.clip(hi - drop, lo, hi))


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class SampleRecord:
    path: str
    spec: DistortionSpec
    range_label: int
    type_label: int
    degree_label: int
    pseudo_mos: float
    split: str


@dataclass
class Manifest:
    taxonomy: str
    score_range: tuple
    records: list
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        recs = []
        for r in self.records:
            recs.append(
                {
                    "path": r.path,
                    "type": r.spec.dist_type,
                    "level": r.spec.level if r.spec.dist_type is not None else None,
                    "regions": [
                        {"lon": reg.lon, "lat": reg.lat, "radius": reg.radius}
                        for reg in r.spec.regions
                    ],
                    "global": r.spec.global_flag,
                    "range_label": r.range_label,
                    "type_label": r.type_label,
                    "degree_label": r.degree_label,
                    "pseudo_mos": r.pseudo_mos,
                    "split": r.split,
                }
            )
        return {
            "version": self.version,
            "taxonomy": self.taxonomy,
            "score_range": list(self.score_range),
            "records": recs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        records = []
        for rec in d["records"]:
            spec = DistortionSpec(
                dist_type=rec["type"],
                level=rec["level"] if rec["level"] is not None else 0,
                regions=tuple(
                    Region(lon=g["lon"], lat=g["lat"], radius=g["radius"])
                    for g in rec["regions"]
                ),
                global_flag=rec["global"],
            )
            records.append(
                SampleRecord(
                    path=rec["path"],
                    spec=spec,
                    range_label=rec["range_label"],
                    type_label=rec["type_label"],
                    degree_label=rec["degree_label"],
                    pseudo_mos=rec["pseudo_mos"],
                    split=rec["split"],
                )
            )
        return cls(
            taxonomy=d["taxonomy"],
            score_range=tuple(d["score_range"]),
            records=records,
            version=d["version"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]


def range_class_count(taxonomy: str) -> int:
    return 2 if taxonomy == JUFE_STYLE else 4


def record_source(record: SampleRecord) -> str:
    """Source panorama identifier, recovered from the generated file name."""
    return record.path.rsplit("_r", 1)[0]


def _draw_regions(rng: np.random.Generator, count: int, radius: float) -> tuple:
    """Region centers near the equator band, pairwise separation > 2*radius."""
    regions: list[Region] = []
    while len(regions) < count:
        lon = float(rng.uniform(-np.pi, np.pi))
        lat = float(rng.uniform(-np.pi / 8.0, np.pi / 8.0))
        cand = Region(lon=lon, lat=lat, radius=radius)
        ok = True
        for other in regions:
            cos_d = np.sin(cand.lat) * np.sin(other.lat) + np.cos(cand.lat) * np.cos(
                other.lat
            ) * np.cos(cand.lon - other.lon)
            if np.arccos(np.clip(cos_d, -1.0, 1.0)) <= 2.0 * radius:
                ok = False
                break
        if ok:
            regions.append(cand)
    return tuple(regions)


def _interleave_by_class(groups: list[list]) -> list:
    out = []
    longest = max(len(g) for g in groups)
    for i in range(longest):
        for g in groups:
            if i < len(g):
                out.append(g[i])
    return out


def taxonomy_cells(taxonomy: str) -> list:
    """Per-image generation cells as (range_class, dist_type, level) tuples.

    dist_type None marks the pristine cell (first range class of the
    four-class taxonomy). Cells are interleaved round-robin over range classes
    so small per-image budgets still cover every range label.
    """
    if taxonomy == JUFE_STYLE:
        groups = [
            [(rc, t, lv) for t in TYPES for lv in (1, 2, 3)] for rc in (0, 1)
        ]
    elif taxonomy == OIQ_STYLE:
        groups = [[(0, None, 0)]] + [
            [(rc, t, lv) for t in TYPES for lv in (1, 2, 3)] for rc in (1, 2, 3)
        ]
    else:
        raise ValueError(f"unknown taxonomy {taxonomy!r}")
    return _interleave_by_class(groups)


def _spec_for_cell(taxonomy: str, cell, rng: np.random.Generator, seed: int, radius: float) -> DistortionSpec:
    range_class, dist_type, level = cell
    if dist_type is None:
        return DistortionSpec(dist_type=None, level=0, seed=seed)
    if taxonomy == JUFE_STYLE:
        n_regions = range_class + 1
        global_flag = False
    else:
        if range_class == 3:
            n_regions = 0
            global_flag = True
        else:
            n_regions = range_class
            global_flag = False
    regions = _draw_regions(rng, n_regions, radius) if n_regions else ()
    return DistortionSpec(
        dist_type=dist_type, level=level, regions=regions, global_flag=global_flag, seed=seed
    )


def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0, 0.0, 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def assign_splits(n_sources: int, seed: int) -> list[str]:
    """80/20 split over source panoramas, at least one of each when n >= 2."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_sources)
    n_train = int(round(0.8 * n_sources))
    n_train = min(max(n_train, 1), n_sources - 1 if n_sources > 1 else 1)
    split = ["test"] * n_sources
    for idx in order[:n_train]:
        split[idx] = "train"
    return split


def generate_dataset(
    base_images: list,
    taxonomy: str,
    out_dir,
    n_per_image: int = 24,
    seed: int = 0,
    region_radius: float = REGION_RADIUS,
) -> Manifest:
    """Distort every base panorama n_per_image times and write PNGs + manifest.

    base_images is a list of (name, array) pairs with arrays in [0, 1].
    Record seeds derive as seed XOR record_index; region placement draws from
    a dataset-level stream seeded by `seed`, so reruns are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    score_range = SCORE_RANGES[taxonomy]
    cells = taxonomy_cells(taxonomy)
    splits = assign_splits(len(base_images), seed)
    placement_rng = np.random.default_rng(seed)

    records = []
    record_index = 0
    for img_idx, (name, image) in enumerate(base_images):
        for j in range(n_per_image):
            cell = cells[j % len(cells)]
            rec_seed = seed ^ record_index
            spec = _spec_for_cell(taxonomy, cell, placement_rng, rec_seed, region_radius)
            distorted = apply_distortion(image, spec)
            fname = f"{name}_r{record_index:04d}.png"
            save_png(out / fname, distorted)
            if spec.dist_type is None:
                type_label = NOT_APPLICABLE
                degree_label = NOT_APPLICABLE
            else:
                type_label = TYPES.index(spec.dist_type)
                degree_label = spec.level - 1
            records.append(
                SampleRecord(
                    path=fname,
                    spec=spec,
                    range_label=cell[0],
                    type_label=type_label,
                    degree_label=degree_label,
                    pseudo_mos=pseudo_mos(spec, score_range),
                    split=splits[img_idx],
                )
            )
            record_index += 1

    manifest = Manifest(taxonomy=taxonomy, score_range=score_range, records=records)
    manifest.save(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# procedural base panoramas


def procedural_panorama(seed: int, height: int = 256, width: int = 512) -> np.ndarray:
    """Synthetic equirectangular test content, deterministic per seed.

    Mix of low-frequency sinusoids, a smooth random field, and hard-edged
    geometric patterns (the edges give blur something to destroy). All seeds
    draw from one stationary texture family: fixed spectrum, scale, and
    contrast with randomized phases and placement, so panoramas agree in
    their local statistics and a distortion stays measurable against them.
    """
    rng = np.random.default_rng(seed)
    lon, lat = erp_grid(height, width)
    img = np.zeros((height, width, 3))
    for ch in range(3):
        p1, p2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        img[..., ch] = 0.5 + 0.06 * np.sin(2.0 * lon + p1) + 0.06 * np.cos(3.0 * 2.0 * lat + p2)

    field = rng.normal(0.0, 1.0, size=(height // 16, width // 16, 3))
    field = ndimage.zoom(field, (16, 16, 1), order=1, mode="grid-wrap")
    field = field[:height, :width]
    img += 0.10 * field

    # two checker scales: coarse cells survive mild blur, fine cells do not,
    # which keeps the blur levels distinguishable after rendering
    for cell, amp in ((np.pi / 12.0, 0.12), (np.pi / 40.0, 0.10)):
        off_lon, off_lat = rng.uniform(0.0, 2.0 * cell, size=2)
        checker = (
            (np.floor((lon + off_lon) / cell) + np.floor((lat + off_lat) / cell)) % 2.0
        )[..., None]
        img += amp * (checker - 0.5)

    return np.clip(img, 0.0, 1.0)
