"""Synthetic cross-domain identity data and a Market-style directory loader.

Synthetic images are built from three independent ingredients:

* identity: a fixed random "person" pattern (colored body parts plus a
  fine texture) shared by every image of that identity, in either domain;
* domain style: a per-domain color affine map and a per-domain bank of
  background scenes (each image draws one), scaled by ``style_strength``;
* camera: one of two jitter buckets (horizontal shift plus brightness
  offset) with a little per-image wobble, then Gaussian pixel noise.

Pixel values are quantized to multiples of 1/255 so an 8-bit PNG export
round-trips exactly.
"""

from __future__ import annotations

import logging
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfigError, DatasetSplit, Domain, LabeledSample, seeded_rng

log = logging.getLogger(__name__)

SPLIT_DIRS = ("train_source", "train_target", "query", "gallery")
CAMERAS = (1, 2)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# identity token, optional camera (Market names carry a trailing sequence "s1"), index
_NAME = re.compile(r"^(?P<id>-?\d+)(?:_c(?P<cam>\d+)(?:s\d+)?)?_(?P<index>[^.]+)\.(?P<ext>[A-Za-z]+)$")


class DataError(RuntimeError):
    """Raised for unreadable or malformed datasets."""


@dataclass(frozen=True)
class SynthConfig:
    num_source_ids: int = 20
    num_target_ids: int = 20
    images_per_id: int = 10
    image_shape: tuple[int, int, int] = (32, 32, 3)
    style_strength: float = 0.6
    noise_std: float = 0.05
    seed: int = 0
    camera_shift: float = 0.1  # horizontal offset of each camera bucket, as a fraction of width
    camera_brightness: float = 0.12
    backgrounds_per_domain: int = 8

    def problems(self) -> list[str]:
        out = []
        if self.num_source_ids < 1:
            out.append("num_source_ids: must be positive")
        if self.num_target_ids < 1:
            out.append("num_target_ids: must be positive")
        if self.images_per_id < 2:
            out.append("images_per_id: must be >= 2 (positive pairs and a gallery match need two images)")
        if len(self.image_shape) != 3 or self.image_shape[2] != 3 or min(self.image_shape[:2]) < 16:
            out.append("image_shape: must be (H, W, 3) with H, W >= 16")
        if not 0.0 <= self.style_strength <= 1.0:
            out.append("style_strength: must lie in [0, 1]")
        if self.noise_std < 0:
            out.append("noise_std: must be non-negative")
        if not 0.0 <= self.camera_shift <= 0.25:
            out.append("camera_shift: must lie in [0, 0.25]")
        if self.backgrounds_per_domain < 1:
            out.append("backgrounds_per_domain: must be positive")
        if not 0.0 <= self.camera_brightness <= 0.5:
            out.append("camera_brightness: must lie in [0, 0.5]")
        return out


def _smooth_field(rng, shape, cells) -> np.ndarray:
    """Random field on a coarse grid, bilinearly upsampled to ``shape[:2]``."""
    h, w, c = shape
    coarse = rng.uniform(0.0, 1.0, size=(cells[0] + 1, cells[1] + 1, c))
    ys = np.linspace(0, cells[0], h)
    xs = np.linspace(0, cells[1], w)
    y0 = np.minimum(ys.astype(int), cells[0] - 1)
    x0 = np.minimum(xs.astype(int), cells[1] - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    cc = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * cc + fx * d)


@dataclass
class _Person:
    pattern: np.ndarray  # h x w x 3 appearance
    mask: np.ndarray  # h x w silhouette in [0, 1]


@dataclass
class _Style:
    mix: np.ndarray  # 3 x 3 color map
    offset: np.ndarray  # 3
    backgrounds: np.ndarray  # bank of H x W x 3 scenes; each image draws one


@dataclass
class SyntheticRenderer:
    """Holds the fixed random ingredients; renders one image per call."""

    config: SynthConfig
    persons: dict = field(default_factory=dict)
    styles: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.config
        H, W, _ = cfg.image_shape
        ph, pw = int(round(H * 0.75)), int(round(W * 0.4))
        rng = seeded_rng(cfg.seed, "identities")
        yy, xx = np.mgrid[0:ph, 0:pw]
        # rounded-rectangle silhouette
        mask = np.clip(1.5 - np.abs((xx + 0.5) / pw * 2 - 1) ** 4 * 1.5, 0, 1)
        mask = mask * np.clip(1.5 - np.abs((yy + 0.5) / ph * 2 - 1) ** 6 * 1.5, 0, 1)
        for ident in range(cfg.num_source_ids + cfg.num_target_ids):
            parts = rng.uniform(0.1, 0.9, size=(4, 1, 3))
            body = np.repeat(parts, int(np.ceil(ph / 4)), axis=0)[:ph]
            body = np.broadcast_to(body, (ph, pw, 3))
            texture = _smooth_field(rng, (ph, pw, 3), (6, 3)) - 0.5
            pattern = np.clip(body + 0.35 * texture, 0, 1)
            self.persons[ident] = _Person(pattern, mask)
        srng = seeded_rng(cfg.seed, "styles")
        s = cfg.style_strength
        neutral = np.full((H, W, 3), 0.5)
        for domain in (Domain.SOURCE, Domain.TARGET):
            mix = np.eye(3) + s * srng.normal(scale=0.45, size=(3, 3))
            offset = s * srng.normal(scale=0.15, size=3)
            textures = np.stack([_smooth_field(srng, (H, W, 3), (4, 4)) for _ in range(cfg.backgrounds_per_domain)])
            backgrounds = (1 - s) * neutral + s * textures
            self.styles[domain] = _Style(mix, offset, backgrounds)

    def render(self, identity: int, domain: Domain, camera: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        H, W, _ = cfg.image_shape
        person = self.persons[identity]
        style = self.styles[Domain(domain)]
        ph, pw = person.mask.shape
        bucket = CAMERAS.index(camera)
        sign = -1 if bucket == 0 else 1
        shift = sign * int(round(W * cfg.camera_shift))
        brightness = sign * cfg.camera_brightness
        dx = shift + int(rng.integers(-1, 2))
        dy = int(rng.integers(-1, 2))
        top = (H - ph) // 2 + dy
        left = (W - pw) // 2 + dx
        canvas = style.backgrounds[rng.integers(len(style.backgrounds))].copy()
        y0, y1 = max(top, 0), min(top + ph, H)
        x0, x1 = max(left, 0), min(left + pw, W)
        m = person.mask[y0 - top : y1 - top, x0 - left : x1 - left, None]
        p = person.pattern[y0 - top : y1 - top, x0 - left : x1 - left]
        canvas[y0:y1, x0:x1] = m * p + (1 - m) * canvas[y0:y1, x0:x1]
        image = canvas @ style.mix.T + style.offset
        image = image + brightness + rng.normal(scale=0.02)
        if cfg.noise_std > 0:
            image = image + rng.normal(scale=cfg.noise_std, size=image.shape)
        return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic(config: SynthConfig | None = None) -> DatasetSplit:
    """Build a deterministic source/target split from ``config``.

    Source identities get ids ``0 .. num_source_ids - 1`` and target
    identities continue after them, so the two sets never intersect. The
    target training set is a separate rendering of the target identities;
    query holds the first image of each target identity (camera 1) and the
    gallery the remaining ones, alternating cameras.
    """
    config = config or SynthConfig()
    problems = config.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    renderer = SyntheticRenderer(config)
    rng = seeded_rng(config.seed, "render")
    n_src = config.num_source_ids

    def render_set(ids, domain):
        out = []
        for ident in ids:
            for k in range(config.images_per_id):
                camera = CAMERAS[k % 2]
                image = renderer.render(ident, domain, camera, rng)
                out.append(LabeledSample(image, ident, camera, domain))
        return out

    source_ids = range(n_src)
    target_ids = range(n_src, n_src + config.num_target_ids)
    train_source = render_set(source_ids, Domain.SOURCE)
    train_target = render_set(target_ids, Domain.TARGET)
    test = render_set(target_ids, Domain.TARGET)
    query = test[:: config.images_per_id]
    gallery = [s for i, s in enumerate(test) if i % config.images_per_id]
    return DatasetSplit(train_source, train_target, query, gallery)


def _file_name(sample: LabeledSample, index: int) -> str:
    if sample.camera is None:
        return f"{sample.identity:04d}_{index:06d}.png"
    return f"{sample.identity:04d}_c{sample.camera}_{index:06d}.png"


def export_directory(split: DatasetSplit, root) -> Path:
    """Write ``split`` as PNG files under ``root/<split name>/``."""
    root = Path(root)
    for name in SPLIT_DIRS:
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i, sample in enumerate(getattr(split, name)):
            pixels = np.round(np.asarray(sample.image) * 255.0).astype(np.uint8)
            Image.fromarray(pixels).save(folder / _file_name(sample, i))
    return root


@dataclass
class DirectoryManifest:
    root: Path
    pattern: str
    entries: list  # (path, identity token, camera or None)


def parse_name(name: str) -> tuple[str, int | None]:
    """Return (identity token, camera) for ``{identity}_c{camera}_{index}.{ext}``."""
    match = _NAME.match(name)
    if match is None or Path(name).suffix.lower() not in IMAGE_SUFFIXES:
        raise DataError(f"unparseable file name: {name}")
    cam = match.group("cam")
    return match.group("id"), None if cam is None else int(cam)


def scan_directory(root) -> DirectoryManifest:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise DataError(f"empty directory: {root}")
    entries, bad = [], []
    for path in files:
        try:
            token, camera = parse_name(path.name)
        except DataError:
            bad.append(path.name)
            continue
        if token.startswith("-"):
            log.info("skipping junk image %s", path.name)
            continue
        entries.append((path, token, camera))
    if bad:
        raise DataError(f"unparseable file names in {root}: {', '.join(bad)}")
    if not entries:
        raise DataError(f"no usable images in {root}")
    return DirectoryManifest(root, "{identity}_c{camera}_{index}.{ext}", entries)


def _read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_directory(root, domain: Domain, id_map: dict | None = None) -> list[LabeledSample]:
    """Load every image under ``root`` in lexicographic path order.

    Identity tokens are remapped to contiguous labels in ascending token
    order. Pass ``id_map`` to share one mapping between directories (query
    and gallery must agree); it is extended in place with unseen tokens.
    """
    manifest = scan_directory(root)
    if id_map is None:
        id_map = {}
    for token in sorted({t for _, t, _ in manifest.entries}, key=lambda t: (int(t), t)):
        id_map.setdefault(token, len(id_map))
    workers = int(os.environ.get("ARN_NUM_WORKERS", "1") or 1)
    paths = [p for p, _, _ in manifest.entries]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(_read_image, paths))
    else:
        images = [_read_image(p) for p in paths]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images in {root} have differing shapes: {sorted(shapes)}")
    return [
        LabeledSample(image, id_map[token], camera, domain)
        for image, (_, token, camera) in zip(images, manifest.entries)
    ]


def load_split(root) -> DatasetSplit:
    """Load the four-directory layout written by :func:`export_directory`."""
    root = Path(root)
    missing = [name for name in SPLIT_DIRS if not (root / name).is_dir()]
    if missing:
        raise DataError(f"{root} is missing {', '.join(missing)}")
    train_source = load_directory(root / "train_source", Domain.SOURCE)
    train_target = load_directory(root / "train_target", Domain.TARGET)
    test_ids: dict = {}
    query = load_directory(root / "query", Domain.TARGET, test_ids)
    gallery = load_directory(root / "gallery", Domain.TARGET, test_ids)
    return DatasetSplit(train_source, train_target, query, gallery)


def _domain_stats(samples) -> dict:
    cams = Counter(s.camera for s in samples)
    return {
        "identities": len({s.identity for s in samples}),
        "images": len(samples),
        "cameras": {str(k): cams[k] for k in sorted(cams, key=lambda c: -1 if c is None else c)},
    }


def dataset_stats(split: DatasetSplit) -> dict:
    """Identity, image and per-camera image counts for each part of the split."""
    return {name: _domain_stats(getattr(split, name)) for name in SPLIT_DIRS}
