"""
Synthetic lesion volumes with region-level ground truth.

Each volume is a stack of slices showing an elliptical "skull" around smooth
noise texture. Positive volumes carry one dark disk-shaped lesion per
affected region (two for the "both" class, one per hemisphere). The image is
split into a rows x cols grid of regions; rows run anterior to posterior and
columns left to right.

Archive layout (relative to the archive directory):

    manifest.json            spec, geometry, splits and one record per sample
    samples/NNNN.f32         volume, little-endian float32, C order [S, 1, H, W]
    samples/NNNN.mask.u8     lesion mask, uint8 0/1, C order [S, 1, H, W]
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from artifact_store import ArtifactStore
from config import MANIFEST_FILE, SAMPLES_DIR, SPLIT_FRACTIONS
from errors import DatasetSpecError
from models.config_models import DatasetSpec
from nets import VolumeBatch

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "acat-synth/1"


class LesionClass(IntEnum):
    NONE = 0
    LEFT = 1
    RIGHT = 2
    BOTH = 3


class RegionLabel(IntEnum):
    """Grid regions; the index is ``row * 2 + col`` on the default 3x2 grid."""
    ANTERIOR_LEFT = 0
    ANTERIOR_RIGHT = 1
    MIDDLE_LEFT = 2
    MIDDLE_RIGHT = 3
    POSTERIOR_LEFT = 4
    POSTERIOR_RIGHT = 5


@dataclass(frozen=True)
class Geometry:
    height: int
    width: int
    rows: int = 3
    cols: int = 2

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    def region_index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def row_col(self, region: int) -> Tuple[int, int]:
        return divmod(int(region), self.cols)

    def region_grid(self) -> np.ndarray:
        """Region index of every pixel, [H, W]."""
        rows = _band(np.arange(self.height), self.height, self.rows)
        cols = _band(np.arange(self.width), self.width, self.cols)
        return (rows[:, None] * self.cols + cols[None, :]).astype(np.int64)


def _band(positions: np.ndarray, extent: int, parts: int) -> np.ndarray:
    # Pixel centres decide membership; a centre on a boundary goes to the lower band.
    band = np.ceil((positions + 0.5) * parts / extent).astype(np.int64) - 1
    return np.clip(band, 0, parts - 1)


def region_of_pixel(h: int, w: int, geometry: Geometry) -> int:
    """
    Region containing pixel (h, w).

    Returns:
        RegionLabel on the 3x2 grid, otherwise the plain region index
    """
    if not (0 <= h < geometry.height and 0 <= w < geometry.width):
        raise ValueError(f"pixel ({h}, {w}) outside a {geometry.height}x{geometry.width} image")
    row = int(_band(np.array([h]), geometry.height, geometry.rows)[0])
    col = int(_band(np.array([w]), geometry.width, geometry.cols)[0])
    index = geometry.region_index(row, col)
    return RegionLabel(index) if (geometry.rows, geometry.cols) == (3, 2) else index


@dataclass
class SynthSample:
    index: int
    volume: np.ndarray
    label: LesionClass
    regions: Tuple[int, ...]
    mask: np.ndarray
    tier: int
    contrasts: Tuple[float, ...] = ()


@dataclass
class SynthDataset:
    spec: DatasetSpec
    geometry: Geometry
    samples: List[SynthSample]
    splits: Dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, indices: Optional[Sequence[int]] = None) -> VolumeBatch:
        chosen = [self.samples[i] for i in (range(len(self.samples)) if indices is None else indices)]
        return VolumeBatch(
            images=np.stack([s.volume for s in chosen]),
            labels=np.array([int(s.label) for s in chosen], dtype=np.int64),
            regions=[tuple(s.regions) for s in chosen],
            masks=np.stack([s.mask for s in chosen]),
            tiers=np.array([s.tier for s in chosen], dtype=np.int64),
            indices=np.array([s.index for s in chosen], dtype=np.int64),
        )

    def positives(self, indices: Sequence[int]) -> List[int]:
        return [i for i in indices if self.samples[i].label != LesionClass.NONE]


def geometry_for(spec: DatasetSpec) -> Geometry:
    return Geometry(spec.image_size, spec.image_size, spec.grid_rows, spec.grid_cols)


def _brain_masks(spec: DatasetSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(interior, skull ring) boolean masks of the head ellipse."""
    size = spec.image_size
    centre = (size - 1) / 2.0
    hh, ww = np.mgrid[0:size, 0:size]
    outer_h, outer_w = 0.46 * size, 0.42 * size
    inner_h, inner_w = outer_h - spec.skull_thickness, outer_w - spec.skull_thickness
    outer = ((hh - centre) / outer_h) ** 2 + ((ww - centre) / outer_w) ** 2 <= 1.0
    interior = ((hh - centre) / inner_h) ** 2 + ((ww - centre) / inner_w) ** 2 <= 1.0
    return interior, outer & ~interior


def _disk(radius: float) -> np.ndarray:
    reach = int(math.ceil(radius))
    yy, xx = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    return (yy ** 2 + xx ** 2) <= radius ** 2


def _tile_extent(geometry: Geometry) -> int:
    return min(geometry.height // geometry.rows, geometry.width // geometry.cols)


def _placement_sites(spec: DatasetSpec, geometry: Geometry, radius: float) -> List[np.ndarray]:
    """Per region, the pixel centres where a disk of ``radius`` fits inside both the region and the head."""
    interior, _ = _brain_masks(spec)
    grid = geometry.region_grid()
    sites = []
    for region in range(geometry.n_regions):
        allowed = (grid == region) & interior
        feasible = binary_erosion(allowed, structure=_disk(radius), border_value=0)
        sites.append(np.argwhere(feasible))
    return sites


def validate_spec(spec: DatasetSpec) -> Geometry:
    """
    Check that every size tier can be placed in every region.

    Raises:
        DatasetSpecError: when the smallest radius is below one pixel or the
            largest lesion does not fit some region
    """
    geometry = geometry_for(spec)
    tile = _tile_extent(geometry)
    smallest = min(low for low, _ in spec.tier_radius_fractions) * tile
    largest = max(high for _, high in spec.tier_radius_fractions) * tile
    if smallest < 1.0:
        raise DatasetSpecError(f"smallest lesion radius {smallest:.2f}px is below one pixel; enlarge the images")
    if spec.class_probs[LesionClass.NONE] < 1.0:
        empty = [region for region, sites in enumerate(_placement_sites(spec, geometry, largest)) if len(sites) == 0]
        if empty:
            raise DatasetSpecError(f"a lesion of radius {largest:.2f}px does not fit inside regions {empty}")
    return geometry


def allocate_counts(probs: Sequence[float], total: int) -> List[int]:
    """Split ``total`` by ``probs`` exactly, giving leftovers to the largest fractional parts."""
    raw = [p * total for p in probs]
    counts = [int(math.floor(value)) for value in raw]
    order = sorted(range(len(probs)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def split_indices(n: int, seed: int, fractions: Tuple[float, float, float] = SPLIT_FRACTIONS) -> Dict[str, np.ndarray]:
    """Disjoint, exhaustive train/val/test index sets from a seeded permutation."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


class _Renderer:
    """Draws one volume from a per-sample generator."""

    def __init__(self, spec: DatasetSpec, geometry: Geometry):
        self.spec = spec
        self.geometry = geometry
        self.interior, self.skull = _brain_masks(spec)
        self.tile = _tile_extent(geometry)
        self.sites = {tier: _placement_sites(spec, geometry, high * self.tile)
                      for tier, (_, high) in enumerate(spec.tier_radius_fractions, start=1)}
        hh, ww = np.mgrid[0:spec.image_size, 0:spec.image_size]
        self.hh, self.ww = hh, ww

    def _texture(self, rng: np.random.Generator) -> np.ndarray:
        spec = self.spec
        slices = []
        for _ in range(spec.n_slices):
            noise = rng.standard_normal((spec.image_size, spec.image_size))
            if spec.noise_smoothing > 0:
                noise = gaussian_filter(noise, spec.noise_smoothing)
            std = noise.std()
            noise = noise / std if std > 0 else noise
            plane = np.zeros((spec.image_size, spec.image_size))
            plane[self.interior] = spec.tissue_intensity + spec.noise_std * noise[self.interior]
            plane[self.skull] = spec.skull_intensity
            slices.append(plane)
        return np.stack(slices)

    def _regions(self, label: LesionClass, rng: np.random.Generator) -> Tuple[int, ...]:
        rows = self.geometry.rows
        if label == LesionClass.NONE:
            return ()
        if label == LesionClass.LEFT:
            return (self.geometry.region_index(int(rng.integers(rows)), 0),)
        if label == LesionClass.RIGHT:
            return (self.geometry.region_index(int(rng.integers(rows)), self.geometry.cols - 1),)
        return (self.geometry.region_index(int(rng.integers(rows)), 0),
                self.geometry.region_index(int(rng.integers(rows)), self.geometry.cols - 1))

    def _slice_radii(self, radius: float) -> List[float]:
        n = self.spec.n_slices
        middle = (n - 1) / 2.0
        reach = max(middle, 1.0)
        return [max(1.0, radius * (1.0 - self.spec.slice_radius_decay * abs(s - middle) / reach)) for s in range(n)]

    def render(self, index: int, label: LesionClass, tier: int, rng: np.random.Generator) -> SynthSample:
        spec = self.spec
        regions = self._regions(label, rng)
        lesions = []
        for region in regions:
            low, high = spec.tier_radius_fractions[tier - 1]
            radius = float(rng.uniform(low, high)) * self.tile
            sites = self.sites[tier][region]
            cy, cx = sites[int(rng.integers(len(sites)))]
            contrast = float(rng.uniform(*spec.contrast_range))
            lesions.append((int(cy), int(cx), radius, contrast))

        mask = np.zeros((spec.n_slices, spec.image_size, spec.image_size), dtype=bool)
        lesion_masks = []
        for cy, cx, radius, _ in lesions:
            dist2 = (self.hh - cy) ** 2 + (self.ww - cx) ** 2
            disk = np.stack([dist2 <= r ** 2 for r in self._slice_radii(radius)])
            lesion_masks.append((disk, dist2, radius))
            mask |= disk

        for attempt in range(20):
            volume = self._texture(rng)
            for (disk, _, _), (_, _, _, contrast) in zip(lesion_masks, lesions):
                volume = np.where(disk, volume + contrast, volume)
            volume = np.clip(volume, 0.0, 1.0)
            if self._darker_than_surroundings(volume, mask, lesion_masks):
                break
            logger.debug(f"Sample {index}: lesion not darker than its surroundings, redrawing texture ({attempt + 1})")
        else:
            raise DatasetSpecError(f"sample {index}: could not draw a lesion darker than its surroundings")

        return SynthSample(
            index=index,
            volume=volume[:, None].astype(np.float32),
            label=label,
            regions=tuple(int(r) for r in regions),
            mask=mask[:, None].astype(np.uint8),
            tier=tier if regions else 0,
            contrasts=tuple(round(c, 6) for *_, c in lesions),
        )

    def _darker_than_surroundings(self, volume, mask, lesion_masks) -> bool:
        for disk, dist2, radius in lesion_masks:
            annulus = (dist2 > radius ** 2) & (dist2 <= (2 * radius) ** 2) & self.interior
            annulus = np.broadcast_to(annulus, mask.shape) & ~mask
            if not annulus.any() or volume[disk].mean() >= volume[annulus].mean():
                return False
        return True


def generate_dataset(spec: DatasetSpec, threads: int = 1) -> SynthDataset:
    """
    Generate the dataset for ``spec``; a pure function of the spec and its seed.

    Class counts follow ``class_probs`` exactly (largest remainder); each
    sample draws from its own substream of the seed, so thread count does not
    change the output.
    """
    geometry = validate_spec(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_samples + 1)
    master = np.random.default_rng(streams[-1])
    counts = allocate_counts(spec.class_probs, spec.n_samples)
    labels = np.repeat(np.arange(len(counts)), counts)
    master.shuffle(labels)
    tiers = master.choice(np.arange(1, 5), size=spec.n_samples, p=spec.tier_probs)

    renderer = _Renderer(spec, geometry)

    def draw(i: int) -> SynthSample:
        return renderer.render(i, LesionClass(int(labels[i])), int(tiers[i]), np.random.default_rng(streams[i]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(draw, range(spec.n_samples)))
    else:
        samples = [draw(i) for i in range(spec.n_samples)]
    logger.info(f"✅ Generated {len(samples)} volumes (class counts {counts}) with seed {spec.seed}")
    return SynthDataset(spec, geometry, samples, split_indices(spec.n_samples, spec.seed))


def write_dataset_archive(dataset: SynthDataset, store: ArtifactStore, directory: str) -> List[str]:
    """Write the archive; returns the written paths relative to ``directory``."""
    records, written = [], []
    for sample in dataset.samples:
        volume_name = f"{SAMPLES_DIR}/{sample.index:04d}.f32"
        mask_name = f"{SAMPLES_DIR}/{sample.index:04d}.mask.u8"
        store.save_binary_file(directory, volume_name, np.ascontiguousarray(sample.volume, dtype="<f4").tobytes())
        store.save_binary_file(directory, mask_name, np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())
        written += [volume_name, mask_name]
        records.append({
            "index": sample.index,
            "label": int(sample.label),
            "label_name": sample.label.name.lower(),
            "regions": list(sample.regions),
            "tier": sample.tier,
            "contrasts": list(sample.contrasts),
            "shape": list(sample.volume.shape),
            "volume": volume_name,
            "mask": mask_name,
        })
    g = dataset.geometry
    manifest = {
        "format": ARCHIVE_FORMAT,
        "spec": dataset.spec.model_dump(mode="json"),
        "geometry": {"height": g.height, "width": g.width, "rows": g.rows, "cols": g.cols},
        "splits": {name: [int(i) for i in indices] for name, indices in dataset.splits.items()},
        "samples": records,
    }
    store.save_json(directory, MANIFEST_FILE, manifest)
    written.append(MANIFEST_FILE)
    logger.info(f"💾 Dataset archive written to {store.get_file_path(directory, '')}")
    return written


def load_dataset_archive(store: ArtifactStore, directory: str) -> SynthDataset:
    manifest = store.load_json(directory, MANIFEST_FILE)
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"{directory}: unsupported dataset archive format {manifest.get('format')}")
    spec = DatasetSpec.model_validate(manifest["spec"])
    geometry = Geometry(**manifest["geometry"])
    samples = []
    for record in manifest["samples"]:
        shape = tuple(record["shape"])
        volume = np.frombuffer(store.load_binary_file(directory, record["volume"]), dtype="<f4").reshape(shape)
        mask = np.frombuffer(store.load_binary_file(directory, record["mask"]), dtype=np.uint8).reshape(shape)
        samples.append(SynthSample(
            index=record["index"],
            volume=volume.astype(np.float32),
            label=LesionClass(record["label"]),
            regions=tuple(record["regions"]),
            mask=mask.copy(),
            tier=record["tier"],
            contrasts=tuple(record["contrasts"]),
        ))
    splits = {name: np.array(indices, dtype=np.int64) for name, indices in manifest["splits"].items()}
    return SynthDataset(spec, geometry, samples, splits)
