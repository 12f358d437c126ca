"""
Synthetic Episode Service
Procedural source/target domains, few-shot episodes, support augmentation
and the on-disk export used by the CLI
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from models import (
    DataConfig, DomainSpec, IntensityCurve, InvalidClassError,
    MissingArtifactError, QueryMaskAccessError, TextureParams
)
from utils.images import load_image, load_mask, save_image, save_mask
from utils.runtime import derive_seed

logger = logging.getLogger(__name__)

SHAPE_FAMILIES = ('polygon', 'blob', 'ring', 'star')
MIN_FG_FRACTION = 0.05
MAX_FG_FRACTION = 0.60

PHASE_CODES = {
    'pretrain': 1,
    'train': 2,
    'disc': 3,
    'finetune': 4,
    'eval': 5,
    'pseudo': 6,
    'augment': 7,
}

# Target domain looks: (texture amplitude, frequency, gamma, gain, grayscale, hue anchor)
TARGET_LOOKS = [
    (0.14, 7.0, 0.70, 0.95, False, 0.25),   # satellite-like: greens and browns, busy texture
    (0.08, 2.5, 1.45, 1.05, False, 0.95),   # dermoscopy-like: warm palette, smooth
    (0.10, 4.0, 1.80, 1.10, True, 0.00),    # x-ray-like: grayscale, strong curve
]

ImageGrid = np.ndarray
MaskGrid = np.ndarray


@dataclass
class Episode:
    support: List[Tuple[ImageGrid, MaskGrid]]
    query_image: ImageGrid
    query_mask: MaskGrid
    class_id: int
    domain_id: int
    seed: int = 0

    @property
    def k_shots(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class SupportSet:
    """Support pairs of one episode, with no route back to its query"""
    images: Tuple[ImageGrid, ...]
    masks: Tuple[MaskGrid, ...]
    class_id: int
    domain_id: int
    episode_index: int


@dataclass
class EpisodeBatch:
    support_images: torch.Tensor      # B x K x 3 x H x W
    support_masks: torch.Tensor       # B x K x H x W
    query_images: torch.Tensor        # B x 3 x H x W
    query_masks: Optional[torch.Tensor]   # B x H x W
    class_ids: torch.Tensor           # B
    domain_ids: torch.Tensor          # B

    def to(self, device) -> 'EpisodeBatch':
        return EpisodeBatch(
            support_images=self.support_images.to(device),
            support_masks=self.support_masks.to(device),
            query_images=self.query_images.to(device),
            query_masks=None if self.query_masks is None else self.query_masks.to(device),
            class_ids=self.class_ids.to(device),
            domain_ids=self.domain_ids.to(device),
        )


@dataclass(frozen=True)
class AugmentDraw:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0
    brightness: float = 1.0
    hue: float = 0.0

    @property
    def geometric_only(self) -> 'AugmentDraw':
        return AugmentDraw(hflip=self.hflip, vflip=self.vflip, rot90=self.rot90)


# =============================================================================
# DOMAINS
# =============================================================================

def _hsv_to_rgb(h: float, s: float, v: float) -> List[float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [float(c) for c in [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]]


def _luma(rgb: Sequence[float]) -> float:
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def _palette(rng: np.random.Generator, class_set: List[int], hue_anchor: Optional[float],
             background: List[float]) -> Dict[int, List[float]]:
    palette = {}
    for class_id in class_set:
        for _ in range(32):
            hue = rng.uniform(0.0, 1.0) if hue_anchor is None else (hue_anchor + rng.normal(0.0, 0.08)) % 1.0
            color = _hsv_to_rgb(hue, rng.uniform(0.45, 0.9), rng.uniform(0.55, 0.95))
            if abs(_luma(color) - _luma(background)) >= 0.2:
                break
        palette[class_id] = color
    return palette


def build_domains(seed: int = 0, n_source_classes: int = 12, n_target_domains: int = 3,
                  classes_per_target: int = 4) -> List[DomainSpec]:
    """
    Source domain (id 0) plus target domains with disjoint class sets

    Returns:
        [source, target_1, ..., target_n]
    """
    domains = []
    rng = np.random.default_rng(derive_seed(seed, 0))
    source_classes = list(range(n_source_classes))
    background = [0.18, 0.22, 0.30]
    domains.append(DomainSpec(
        domain_id=0,
        texture_params=TextureParams(amplitude=0.05, frequency=2.0),
        palette=_palette(rng, source_classes, None, background),
        background=background,
        intensity_transform=IntensityCurve(gamma=1.0, gain=1.0),
        class_set=source_classes,
    ))

    next_class = n_source_classes
    for index in range(n_target_domains):
        amplitude, frequency, gamma, gain, grayscale, hue = TARGET_LOOKS[index % len(TARGET_LOOKS)]
        domain_id = index + 1
        rng = np.random.default_rng(derive_seed(seed, domain_id))
        class_set = list(range(next_class, next_class + classes_per_target))
        next_class += classes_per_target
        background = _hsv_to_rgb((hue + 0.5) % 1.0, 0.35, rng.uniform(0.35, 0.55))
        domains.append(DomainSpec(
            domain_id=domain_id,
            texture_params=TextureParams(amplitude=amplitude, frequency=frequency),
            palette=_palette(rng, class_set, hue, background),
            background=background,
            intensity_transform=IntensityCurve(gamma=gamma, gain=gain, offset=0.02 * domain_id),
            class_set=class_set,
            grayscale=grayscale,
        ))
    return domains


def restyle_domain(look: DomainSpec, class_set: List[int]) -> DomainSpec:
    """Domain with the rendering of `look` over another class set (palette reused cyclically)"""
    colors = [look.palette[c] for c in look.class_set]
    return look.model_copy(update={
        'class_set': list(class_set),
        'palette': {c: colors[i % len(colors)] for i, c in enumerate(class_set)},
    })


def domains_from_config(cfg: DataConfig, seed: int = 0) -> List[DomainSpec]:
    return build_domains(seed, cfg.n_source_classes, cfg.n_target_domains, cfg.classes_per_target)


# =============================================================================
# SCENES
# =============================================================================

def _outline(family: str, variant: int, rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Unit-radius outline (and inner hole for rings) as N x 2 arrays centred at 0"""
    if family == 'polygon':
        n = 3 + variant % 6
        angles = np.arange(n) * 2 * np.pi / n
        radii = 1.0 + rng.uniform(-0.1, 0.1, size=n)
        return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1), None
    angles = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
    if family == 'blob':
        lobes = 2 + variant
        radii = 1.0 + 0.25 * np.sin(lobes * angles + rng.uniform(0, 2 * np.pi))
        return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1), None
    if family == 'ring':
        aspect = 1.0 + 0.12 * variant
        outer = np.stack([np.cos(angles) * aspect, np.sin(angles)], axis=1) / aspect ** 0.5
        inner_ratio = min(0.35 + 0.06 * variant, 0.7)
        return outer, outer * inner_ratio
    points = 4 + variant
    angles = np.arange(2 * points) * np.pi / points
    radii = np.where(np.arange(2 * points) % 2 == 0, 1.0, 0.5)
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1), None


def _rasterize(outer: np.ndarray, inner: Optional[np.ndarray], size: int) -> np.ndarray:
    canvas = Image.new('L', (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    draw.polygon([tuple(p) for p in outer], fill=1)
    if inner is not None:
        draw.polygon([tuple(p) for p in inner], fill=0)
    return np.asarray(canvas, dtype=np.uint8).copy()


def _place(rng: np.random.Generator, family: str, variant: int, size: int,
           target_fraction: float) -> np.ndarray:
    outer, inner = _outline(family, variant, rng)
    rotation = rng.uniform(0, 2 * np.pi)
    rot = np.array([[np.cos(rotation), -np.sin(rotation)], [np.sin(rotation), np.cos(rotation)]])
    outer = outer @ rot.T
    inner = None if inner is None else inner @ rot.T
    extent = np.abs(outer).max()
    centre_u = rng.uniform(0.0, 1.0, size=2)

    scale = math.sqrt(target_fraction * size * size / np.pi)
    mask = None
    for _ in range(5):
        scale = min(scale, 0.48 * size / extent)
        margin = scale * extent
        centre = margin + centre_u * max(size - 2 * margin, 0.0)
        mask = _rasterize(outer * scale + centre, None if inner is None else inner * scale + centre, size)
        fraction = mask.mean()
        if fraction <= 0:
            scale *= 2.0
            continue
        if abs(fraction - target_fraction) < 0.01:
            break
        scale *= math.sqrt(target_fraction / fraction)
    return mask


def scene_mask(rng_seed: int, class_id: int, size: int = 64) -> MaskGrid:
    """Foreground geometry; depends on (seed, class) only, never on the domain"""
    rng = np.random.default_rng(derive_seed(rng_seed, class_id, 1))
    family = SHAPE_FAMILIES[class_id % len(SHAPE_FAMILIES)]
    variant = class_id // len(SHAPE_FAMILIES)
    mask = _place(rng, family, variant, size, rng.uniform(0.12, 0.30))
    fraction = mask.mean()
    if not MIN_FG_FRACTION <= fraction <= MAX_FG_FRACTION:
        logger.debug(f"scene {rng_seed}/{class_id}: fraction {fraction:.3f} out of range, using disk")
        mask = _place(rng, 'blob', 0, size, 0.2)
    return mask


def _render(mask: MaskGrid, distractor: Optional[Tuple[MaskGrid, int]], domain: DomainSpec,
            class_id: int, rng: np.random.Generator) -> ImageGrid:
    size = mask.shape[0]
    image = np.empty((3, size, size), dtype=np.float64)
    image[:] = np.asarray(domain.background, dtype=np.float64)[:, None, None]
    if distractor is not None:
        other_mask, other_class = distractor
        image[:, other_mask > 0] = np.asarray(domain.palette[other_class])[:, None]
    image[:, mask > 0] = np.asarray(domain.palette[class_id])[:, None]

    yy, xx = np.mgrid[0:size, 0:size] / size
    theta, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * domain.texture_params.frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    texture = domain.texture_params.amplitude * (0.7 * wave + 0.3 * rng.standard_normal((size, size)))
    image += texture[None]

    if domain.grayscale:
        image[:] = (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2])[None]

    curve = domain.intensity_transform
    image = np.clip(image, 0.0, 1.0)
    image = np.clip(curve.gain * image ** curve.gamma + curve.offset, 0.0, 1.0)
    return image.astype(np.float32)


def generate_scene(rng_seed: int, domain: DomainSpec, class_id: int, size: int = 64) -> Tuple[ImageGrid, MaskGrid]:
    """
    Render one labelled scene of `class_id` in `domain`

    Returns:
        (image 3 x size x size float32 in [0, 1], mask size x size uint8 in {0, 1})
    """
    if class_id not in domain.class_set:
        raise InvalidClassError(f"class {class_id} not in domain {domain.domain_id} class set {domain.class_set}")

    mask = scene_mask(rng_seed, class_id, size)
    rng = np.random.default_rng(derive_seed(rng_seed, class_id, domain.domain_id, 2))

    distractor = None
    others = [c for c in domain.class_set if c != class_id]
    if others and rng.uniform() < 0.5:
        other = int(rng.choice(others))
        other_rng = np.random.default_rng(derive_seed(rng_seed, other, 3))
        other_mask = _place(other_rng, SHAPE_FAMILIES[other % len(SHAPE_FAMILIES)],
                            other // len(SHAPE_FAMILIES), size, other_rng.uniform(0.04, 0.08))
        distractor = (other_mask, other)

    return _render(mask, distractor, domain, class_id, rng), mask


def sample_episode(rng_seed: int, domain: DomainSpec, k_shots: int, size: int = 64) -> Episode:
    if k_shots < 1:
        raise ValueError("k_shots must be >= 1")
    rng = np.random.default_rng(derive_seed(rng_seed, domain.domain_id, 4))
    class_id = int(rng.choice(domain.class_set))
    seeds = [int(s) for s in rng.choice(2 ** 31 - 1, size=k_shots + 1, replace=False)]
    support = [generate_scene(s, domain, class_id, size) for s in seeds[:k_shots]]
    query_image, query_mask = generate_scene(seeds[-1], domain, class_id, size)
    return Episode(support=support, query_image=query_image, query_mask=query_mask,
                   class_id=class_id, domain_id=domain.domain_id, seed=rng_seed)


def episode_seeds(base_seed: int, phase: str, epoch: int, count: int, domain_id: int = 0) -> List[int]:
    code = PHASE_CODES[phase]
    return [derive_seed(base_seed, code, domain_id, epoch, i) for i in range(count)]


def collate(episodes: Sequence[Episode], with_query_masks: bool = True) -> EpisodeBatch:
    """Stack same-K episodes into batched tensors"""
    k = {ep.k_shots for ep in episodes}
    if len(k) != 1:
        raise ValueError(f"episodes in one batch must share K, got {sorted(k)}")
    return EpisodeBatch(
        support_images=torch.from_numpy(np.stack([np.stack([img for img, _ in ep.support]) for ep in episodes])),
        support_masks=torch.from_numpy(np.stack([np.stack([m for _, m in ep.support]) for ep in episodes])).float(),
        query_images=torch.from_numpy(np.stack([ep.query_image for ep in episodes])),
        query_masks=torch.from_numpy(np.stack([ep.query_mask for ep in episodes])).float() if with_query_masks else None,
        class_ids=torch.tensor([ep.class_id for ep in episodes], dtype=torch.long),
        domain_ids=torch.tensor([ep.domain_id for ep in episodes], dtype=torch.long),
    )


# =============================================================================
# AUGMENTATION
# =============================================================================

def draw_augmentation(rng_seed: int, photometric: bool = True) -> AugmentDraw:
    rng = np.random.default_rng(derive_seed(rng_seed, PHASE_CODES['augment']))
    draw = AugmentDraw(
        hflip=bool(rng.uniform() < 0.5),
        vflip=bool(rng.uniform() < 0.5),
        rot90=int(rng.integers(0, 4)),
        brightness=float(rng.uniform(0.8, 1.2)) if rng.uniform() < 0.5 else 1.0,
        hue=float(rng.uniform(-0.25, 0.25) * np.pi) if rng.uniform() < 0.5 else 0.0,
    )
    return draw if photometric else draw.geometric_only


def _hue_matrix(angle: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space"""
    cos, sin = np.cos(angle), np.sin(angle)
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / np.sqrt(3)
    return cos * np.eye(3) + (1 - cos) / 3 * np.ones((3, 3)) + sin * cross


def apply_augmentation(image: ImageGrid, mask: MaskGrid, draw: AugmentDraw) -> Tuple[ImageGrid, MaskGrid]:
    if draw.hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if draw.vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if draw.rot90:
        image, mask = np.rot90(image, draw.rot90, axes=(1, 2)), np.rot90(mask, draw.rot90)
    image = np.ascontiguousarray(image, dtype=np.float32)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if draw.brightness != 1.0:
        image = np.clip(image * draw.brightness, 0.0, 1.0).astype(np.float32)
    if draw.hue != 0.0:
        image = np.clip(np.einsum('ij,jhw->ihw', _hue_matrix(draw.hue), image), 0.0, 1.0).astype(np.float32)
    return image, mask


def augment_support(image: ImageGrid, mask: MaskGrid, rng_seed: int,
                    photometric: bool = True) -> Tuple[ImageGrid, MaskGrid]:
    """Flips and 90-degree rotations on both; brightness and hue on the image only"""
    return apply_augmentation(image, mask, draw_augmentation(rng_seed, photometric))


def make_pseudo_target(images: torch.Tensor, rng_seed: int) -> torch.Tensor:
    """
    Strong photometric/texture shift of source images standing in for unseen domains

    Args:
        images: B x 3 x H x W in [0, 1]
        rng_seed: Seed for the per-sample shift parameters

    Returns:
        Shifted images, same shape, in [0, 1]
    """
    gen = torch.Generator().manual_seed(int(rng_seed))
    b, _, h, w = images.shape
    gamma = torch.exp(torch.empty(b, 1, 1, 1).uniform_(math.log(0.5), math.log(2.0), generator=gen))
    mix = torch.softmax(2.0 * torch.randn(b, 3, 3, generator=gen), dim=-1)
    freq = torch.empty(b, 1, 1).uniform_(3.0, 8.0, generator=gen)
    amp = torch.empty(b, 1, 1).uniform_(0.05, 0.2, generator=gen)
    theta = torch.empty(b, 1, 1).uniform_(0.0, math.pi, generator=gen)
    yy, xx = torch.meshgrid(torch.arange(h) / h, torch.arange(w) / w, indexing='ij')
    wave = amp * torch.sin(2 * math.pi * freq * (xx * torch.cos(theta) + yy * torch.sin(theta)))
    noise = 0.03 * torch.randn(b, 1, h, w, generator=gen)

    device = images.device
    mixed = torch.einsum('bij,bjhw->bihw', mix.to(device), images)
    shifted = mixed.clamp(min=0.0) ** gamma.to(device) + wave.unsqueeze(1).to(device) + noise.to(device)
    return shifted.clamp(0.0, 1.0)


# =============================================================================
# SUPPORT-ONLY ACCESS
# =============================================================================

class QueryMaskGuard:
    """
    Fine-tuning view over target episodes that exposes supports only.
    Every attempt to reach a query mask is counted and refused.
    """

    def __init__(self, episodes: Sequence[Episode]):
        self._episodes = list(episodes)
        self.accesses = 0

    def __len__(self) -> int:
        return len(self._episodes)

    def support_sets(self) -> List[SupportSet]:
        return [
            SupportSet(
                images=tuple(img for img, _ in ep.support),
                masks=tuple(m for _, m in ep.support),
                class_id=ep.class_id,
                domain_id=ep.domain_id,
                episode_index=i,
            )
            for i, ep in enumerate(self._episodes)
        ]

    def query_mask(self, index: int) -> MaskGrid:
        self.accesses += 1
        raise QueryMaskAccessError(f"query mask of target episode {index} requested during fine-tuning")


# =============================================================================
# EPISODE SOURCES AND EXPORT
# =============================================================================

class LiveEpisodeSource:
    def __init__(self, domain: DomainSpec, size: int = 64):
        self.domain = domain
        self.size = size

    def episode(self, rng_seed: int, k_shots: int) -> Episode:
        return sample_episode(rng_seed, self.domain, k_shots, self.size)


@dataclass
class ManifestEntry:
    seed: int
    class_id: int
    image_file: str
    mask_file: str


@dataclass
class ExportedEpisodeSource:
    directory: Path
    domain: DomainSpec
    entries: Dict[int, List[ManifestEntry]] = field(default_factory=dict)

    def __post_init__(self):
        self.directory = Path(self.directory)
        manifest = self.directory / 'manifest.txt'
        if not manifest.exists():
            raise MissingArtifactError(f"no manifest at {manifest}")
        for line in manifest.read_text().splitlines():
            if not line.strip() or line.startswith('#'):
                continue
            seed, class_id, image_file, mask_file = line.split()
            entry = ManifestEntry(int(seed), int(class_id), image_file, mask_file)
            self.entries.setdefault(entry.class_id, []).append(entry)

    def episode(self, rng_seed: int, k_shots: int) -> Episode:
        rng = np.random.default_rng(derive_seed(rng_seed, self.domain.domain_id, 4))
        classes = sorted(c for c, items in self.entries.items() if len(items) >= k_shots + 1)
        if not classes:
            raise MissingArtifactError(f"{self.directory}: no class has {k_shots + 1} exported scenes")
        class_id = int(rng.choice(classes))
        picks = rng.choice(len(self.entries[class_id]), size=k_shots + 1, replace=False)
        scenes = [self._load(self.entries[class_id][int(i)]) for i in picks]
        return Episode(support=scenes[:k_shots], query_image=scenes[-1][0], query_mask=scenes[-1][1],
                       class_id=class_id, domain_id=self.domain.domain_id, seed=rng_seed)

    def _load(self, entry: ManifestEntry) -> Tuple[ImageGrid, MaskGrid]:
        return load_image(self.directory / entry.image_file), load_mask(self.directory / entry.mask_file)


EpisodeSource = Union[LiveEpisodeSource, ExportedEpisodeSource]


def episode_source(domain: DomainSpec, cfg: DataConfig) -> EpisodeSource:
    if cfg.data_dir:
        return ExportedEpisodeSource(Path(cfg.data_dir) / f"domain_{domain.domain_id}", domain)
    return LiveEpisodeSource(domain, cfg.image_size)


def export_domain(domain: DomainSpec, out_dir: Union[str, Path], scenes_per_class: int,
                  seed: int, size: int = 64) -> Path:
    """
    Write one directory per domain: manifest.txt plus PPM images and PGM masks

    Returns:
        The domain directory
    """
    directory = Path(out_dir) / f"domain_{domain.domain_id}"
    (directory / 'images').mkdir(parents=True, exist_ok=True)
    (directory / 'masks').mkdir(parents=True, exist_ok=True)

    lines = [f"# domain_id={domain.domain_id} size={size}"]
    for class_id in domain.class_set:
        for index in range(scenes_per_class):
            scene_seed = derive_seed(seed, domain.domain_id, class_id, index)
            image, mask = generate_scene(scene_seed, domain, class_id, size)
            stem = f"c{class_id:03d}_{index:04d}"
            save_image(image, directory / 'images' / f"{stem}.ppm")
            save_mask(mask, directory / 'masks' / f"{stem}.pgm")
            lines.append(f"{scene_seed} {class_id} images/{stem}.ppm masks/{stem}.pgm")

    (directory / 'manifest.txt').write_text('\n'.join(lines) + '\n')
    logger.info(f"[domain {domain.domain_id}] exported {len(lines) - 1} scenes to {directory}")
    return directory
