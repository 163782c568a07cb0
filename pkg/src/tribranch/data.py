"""Dataset storage, minibatch sampling, and a procedural street-scene
generator.

Datasets live on disk as ``root/{images,masks}/NNNNN.png`` plus a
``manifest.txt`` listing one ``image [mask]`` pair of relative paths
per line.  Images are 8-bit RGB, masks single-channel 8-bit class ids
with 255 reserved for ignored pixels.

The generator composes structured scenes (sky band, building skyline,
sidewalk, road, vegetation, cars, poles, signs) from a per-image layout
RNG stream and renders appearance from a separate stream, so a source
and a target dataset built from the same seed share pixel-exact masks
while their images differ by the configured appearance shift.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

CLASS_NAMES = ("sky", "building", "road", "sidewalk", "vegetation", "car", "pole", "sign")
SKY, BUILDING, ROAD, SIDEWALK, VEGETATION, CAR, POLE, SIGN = range(8)
IGNORE_ID = 255


# -- on-disk format --------------------------------------------------------------


@dataclass
class Dataset:
    root: str
    images: np.ndarray  # N x H x W x 3, float32 in [0, 1]
    masks: Optional[np.ndarray]  # N x H x W, uint8 class ids, 255 = ignore
    entries: list

    def __len__(self):
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]


def write_mask_png(path, mask: np.ndarray):
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def load_dataset(root, with_masks: bool = True) -> Dataset:
    """Read a dataset directory into memory.

    ``with_masks=False`` skips mask files even when the manifest lists
    them; use it when loading the unlabeled target training set so its
    ground truth cannot leak into training.
    """
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.txt under {root}")
    entries = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (1, 2):
            raise ValueError(f"{manifest}: malformed line {line!r}")
        entries.append((parts[0], parts[1] if len(parts) == 2 else None))
    if not entries:
        raise ValueError(f"{manifest}: empty manifest")

    images, masks = [], []
    want_masks = with_masks and all(m is not None for _, m in entries)
    for img_rel, mask_rel in entries:
        img_path = root / img_rel
        if not img_path.is_file():
            raise FileNotFoundError(f"missing image file {img_path}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        images.append(img)
        if want_masks:
            mask_path = root / mask_rel
            if not mask_path.is_file():
                raise FileNotFoundError(f"missing mask file {mask_path}")
            mask = np.asarray(Image.open(mask_path), dtype=np.uint8)
            if mask.shape != img.shape[:2]:
                raise ValueError(
                    f"mask {mask_path} is {mask.shape}, image is {img.shape[:2]}"
                )
            masks.append(mask)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ValueError(f"images under {root} have mixed dimensions: {sorted(shapes)}")
    return Dataset(
        root=str(root),
        images=np.stack(images),
        masks=np.stack(masks) if want_masks else None,
        entries=entries,
    )


# -- minibatch sampling ------------------------------------------------------------


@dataclass
class Minibatch:
    images: np.ndarray  # B x H x W x 3
    masks: np.ndarray  # B x H x W
    provenance: str  # "source" | "pseudo-target"


class EpochSampler:
    """Deterministic infinite index stream: one fresh permutation per epoch.

    The permutation for epoch e is a pure function of (seed, stream, e),
    so a sampler reconstructed at an epoch boundary continues exactly
    where an uninterrupted run would be.
    """

    def __init__(self, n: int, seed: int, stream: int = 0):
        if n < 1:
            raise ValueError("sampler needs a non-empty dataset")
        self.n = n
        self.seed = seed
        self.stream = stream
        self.epoch = 0
        self.pos = 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.stream, epoch]))
        return rng.permutation(self.n)

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos >= self.n:
                self.epoch += 1
                self.pos = 0
                self._perm = self._permutation(self.epoch)
            out.append(int(self._perm[self.pos]))
            self.pos += 1
        return out


def sample_minibatch(
    source: Dataset,
    batch_size: int,
    sampler: EpochSampler,
    pseudo_target=None,
    target_sampler: Optional[EpochSampler] = None,
):
    """One training batch: all-source, or half source / half pseudo-target.

    With ``pseudo_target`` given (anything carrying stacked ``images``
    and ``masks`` arrays), ``batch_size`` must be even and the result is
    a (source Minibatch, target Minibatch) pair of B/2 samples each.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if source.masks is None:
        raise ValueError("source dataset has no masks; cannot train on it")
    if pseudo_target is None:
        idx = sampler.take(batch_size)
        return Minibatch(source.images[idx], source.masks[idx], "source")
    if batch_size % 2:
        raise ValueError(f"batch_size must be even in curriculum mode, got {batch_size}")
    if target_sampler is None:
        raise ValueError("curriculum sampling needs a target sampler")
    half = batch_size // 2
    si = sampler.take(half)
    ti = target_sampler.take(half)
    return (
        Minibatch(source.images[si], source.masks[si], "source"),
        Minibatch(pseudo_target.images[ti], pseudo_target.masks[ti], "pseudo-target"),
    )


# -- id-mapping import adapter -------------------------------------------------------


def load_id_mapping(path) -> np.ndarray:
    """Parse an id-mapping table ("external_id train_id" per line, #-comments)
    into a 256-entry lookup; unmapped external ids become the ignore id."""
    lut = np.full(256, IGNORE_ID, dtype=np.uint8)
    seen = False
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}: malformed mapping line {raw!r}")
        src, dst = int(parts[0]), int(parts[1])
        if not (0 <= src <= 255 and 0 <= dst <= 255):
            raise ValueError(f"{path}: ids must be in [0, 255], got {raw!r}")
        lut[src] = dst
        seen = True
    if not seen:
        raise ValueError(f"{path}: empty id-mapping table")
    return lut


def import_dataset(src_root, mapping_path, out_root) -> Dataset:
    """Copy an external dataset, rewriting mask ids through the mapping table."""
    src_root, out_root = Path(src_root), Path(out_root)
    lut = load_id_mapping(mapping_path)
    ds = load_dataset(src_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img_rel, mask_rel) in enumerate(ds.entries):
        name = f"{i:05d}.png"
        shutil.copyfile(src_root / img_rel, out_root / "images" / name)
        if mask_rel is not None:
            mask = np.asarray(Image.open(src_root / mask_rel), dtype=np.uint8)
            write_mask_png(out_root / "masks" / name, lut[mask])
            lines.append(f"images/{name} masks/{name}")
        else:
            lines.append(f"images/{name}")
    (out_root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return load_dataset(out_root)


# -- procedural scene generator --------------------------------------------------------


@dataclass
class DomainShift:
    """Appearance-only distribution shift knobs applied at render time."""

    hue_rotation: float = 0.0  # degrees around the RGB gray axis
    gamma: float = 1.0
    noise_level: float = 0.02
    texture_freq: float = 1.0


@dataclass
class SceneGenConfig:
    seed: int = 0
    count: int = 200
    height: int = 64
    width: int = 128
    source_shift: DomainShift = field(default_factory=DomainShift)
    target_shift: DomainShift = field(
        default_factory=lambda: DomainShift(
            hue_rotation=40.0, gamma=1.45, noise_level=0.06, texture_freq=1.7
        )
    )

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)

    def shift_for(self, domain: str) -> DomainShift:
        if domain == "source":
            return self.source_shift
        if domain == "target":
            return self.target_shift
        raise ValueError(f"unknown domain {domain!r}")


def _scene_layout(h: int, w: int, rng: np.random.Generator):
    """Class-id mask plus car instance rectangles from one layout stream."""
    mask = np.empty((h, w), dtype=np.uint8)
    horizon = int(rng.integers(int(0.32 * h), int(0.44 * h) + 1))
    road_top = int(rng.integers(int(0.62 * h), int(0.70 * h) + 1))
    sw_height = int(rng.integers(max(2, h // 16), max(3, h // 10) + 1))
    sw_top = road_top - sw_height

    mask[:horizon] = SKY
    mask[horizon:sw_top] = BUILDING
    mask[sw_top:road_top] = SIDEWALK
    mask[road_top:] = ROAD

    # skyline: towers of varying height rising above the base horizon
    x = 0
    while x < w:
        seg = int(rng.integers(max(4, w // 10), max(5, w // 4)))
        top = int(rng.integers(int(0.55 * horizon), horizon + 1))
        mask[top:horizon, x : x + seg] = BUILDING
        x += seg

    # tree canopies along the building/sidewalk boundary
    yy, xx = np.ogrid[:h, :w]
    for _ in range(int(rng.integers(2, 5))):
        cy = int(rng.integers(horizon - 2, max(horizon - 1, sw_top - 2)))
        cx = int(rng.integers(0, w))
        r = int(rng.integers(3, max(4, h // 9)))
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (yy < sw_top)
        mask[blob] = VEGETATION

    # cars on the road
    cars = []
    for _ in range(int(rng.integers(1, 4))):
        ch = int(rng.integers(max(3, h // 12), max(4, h // 8) + 1))
        cw = int(rng.integers(max(6, w // 10), max(7, w // 6) + 1))
        cy = int(rng.integers(road_top, h - ch))
        cx = int(rng.integers(0, w - cw))
        mask[cy : cy + ch, cx : cx + cw] = CAR
        cars.append((cy, cx, ch, cw))

    # poles on the sidewalk, most carrying a small sign at the top
    pw = max(1, w // 64)
    for _ in range(int(rng.integers(1, 4))):
        px = int(rng.integers(2, w - 4))
        ph = int(rng.integers(max(4, int(0.12 * h)), max(5, int(0.22 * h)) + 1))
        top = sw_top + 1 - ph
        mask[max(0, top) : sw_top + 1, px : px + pw] = POLE
        if rng.random() < 0.75:
            s = int(rng.integers(2, 4))
            sy, sx = max(0, top), max(0, px - 1)
            mask[sy : sy + s, sx : sx + s] = SIGN
    return mask, cars


def _hue_matrix(degrees: float) -> np.ndarray:
    # Rodrigues rotation of RGB space around the (1,1,1) gray axis.
    theta = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) * np.cos(theta) + np.sin(theta) * kx + (1 - np.cos(theta)) * np.outer(k, k)


def _render_scene(mask: np.ndarray, cars: list, rng: np.random.Generator, shift: DomainShift) -> np.ndarray:
    """8-bit RGB image for a layout; all appearance randomness comes from
    ``rng`` (shared across domains), all shift comes from ``shift``."""
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    f = shift.texture_freq

    def jitter(c, s=0.03):
        return np.clip(np.asarray(c) + rng.normal(0.0, s, 3), 0.0, 1.0)

    sky_top = jitter((0.50, 0.68, 0.92))
    sky_bot = jitter((0.78, 0.86, 0.97))
    building = jitter((0.47, 0.42, 0.38))
    road = jitter((0.27, 0.27, 0.30))
    sidewalk = jitter((0.63, 0.61, 0.58))
    veg = jitter((0.16, 0.44, 0.15))
    pole = jitter((0.20, 0.20, 0.23), 0.02)
    sign = np.asarray([(0.85, 0.13, 0.10), (0.95, 0.78, 0.08), (0.10, 0.30, 0.80)])[
        int(rng.integers(0, 3))
    ]
    phases = rng.uniform(0, 2 * np.pi, 4)

    grad = np.clip(yy / max(1, int(0.45 * h)), 0.0, 1.0)[..., None]
    img = sky_top * (1 - grad) + sky_bot * grad

    wy = max(2, int(round(5.0 / f)))
    wx = max(2, int(round(4.0 / f)))
    windows = (((yy // wy) + (xx // wx)) % 2 == 0)[..., None]
    layers = {
        BUILDING: building * (1 - 0.25 * windows),
        ROAD: road * (1 + 0.10 * np.sin(2 * np.pi * f * yy / 5.0 + phases[0]))[..., None],
        SIDEWALK: sidewalk * (1 + 0.07 * np.sin(2 * np.pi * f * xx / 3.0 + phases[1]))[..., None],
        VEGETATION: veg * (1 + 0.22 * np.sin(2 * np.pi * f * (xx + yy) / 4.0 + phases[2]))[..., None],
        POLE: np.broadcast_to(pole, (h, w, 3)),
        SIGN: np.broadcast_to(sign, (h, w, 3)),
    }
    for cls, layer in layers.items():
        sel = mask == cls
        img[sel] = np.broadcast_to(layer, (h, w, 3))[sel]

    for cy, cx, ch, cw in cars:
        body = rng.uniform(0.10, 0.90, 3)
        region = np.zeros((h, w), dtype=bool)
        region[cy : cy + ch, cx : cx + cw] = True
        region &= mask == CAR
        img[region] = body
        cabin = np.zeros((h, w), dtype=bool)
        cabin[cy : cy + max(1, ch // 3), cx + cw // 5 : cx + cw - cw // 5] = True
        img[cabin & region] = body * 0.45

    noise = rng.standard_normal((h, w, 3))
    img = np.clip(img, 0.0, 1.0) ** shift.gamma
    img = img @ _hue_matrix(shift.hue_rotation).T
    img = np.clip(img + shift.noise_level * noise, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def generate_scene(cfg: SceneGenConfig, index: int, domain: str):
    """One (image, mask) pair; layout stream is domain-independent."""
    layout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, 0]))
    app_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, 1]))
    mask, cars = _scene_layout(cfg.height, cfg.width, layout_rng)
    image = _render_scene(mask, cars, app_rng, cfg.shift_for(domain))
    return image, mask


def generate_scenes(cfg: SceneGenConfig, domain: str, out_root) -> Dataset:
    if cfg.count < 1:
        raise ValueError("count must be positive")
    if cfg.height < 16 or cfg.width < 16:
        raise ValueError("height and width must be at least 16")
    cfg.shift_for(domain)  # validates the domain tag
    out_root = Path(out_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(cfg.count):
        image, mask = generate_scene(cfg, i, domain)
        name = f"{i:05d}.png"
        Image.fromarray(image, mode="RGB").save(out_root / "images" / name)
        write_mask_png(out_root / "masks" / name, mask)
        lines.append(f"images/{name} masks/{name}")
    (out_root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return load_dataset(out_root)
