"""Image/label containers, dataset ingestion, preprocessing, splitting and
synthetic two-domain lung phantoms."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

BACKGROUND, RIGHT_LUNG, LEFT_LUNG = 0, 1, 2
NUM_CLASSES = 3
CLASS_NAMES = {RIGHT_LUNG: "right_lung", LEFT_LUNG: "left_lung"}
DOMAINS = ("source", "target", "transformed")
SPLITS = ("train", "val", "test", "unsplit")


@dataclass
class Image:
    pixels: np.ndarray
    spacing_mm: float = 1.0
    domain_tag: str = "source"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"expected a 2-D image, got shape {self.pixels.shape}")
        if self.spacing_mm <= 0:
            raise ValueError("spacing_mm must be positive")
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Case:
    image: Image
    label: np.ndarray | None
    case_id: str

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class Dataset:
    items: list[Case]
    domain_tag: str = "source"
    split_tag: str = "unsplit"

    def __post_init__(self):
        ids = [c.case_id for c in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("case ids must be unique")
        for c in self.items:
            if c.label is not None:
                check_label(c.label, c.image.pixels.shape)
        if self.split_tag not in SPLITS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def images(self) -> list[Image]:
        return [c.image for c in self.items]

    @property
    def labels(self) -> list[np.ndarray | None]:
        return [c.label for c in self.items]

    def subset(self, indices: Iterable[int], split_tag: str | None = None) -> "Dataset":
        return Dataset([self.items[i] for i in indices], self.domain_tag,
                       split_tag or self.split_tag)


def check_label(label: np.ndarray, shape: tuple[int, ...]) -> None:
    if label.shape != tuple(shape):
        raise ValueError(f"dimension mismatch: mask {label.shape} vs image {tuple(shape)}")
    bad = np.setdiff1d(np.unique(label), [BACKGROUND, RIGHT_LUNG, LEFT_LUNG])
    if bad.size:
        raise ValueError(f"invalid class id(s) in mask: {bad.tolist()}")


# ---------------------------------------------------------------- disk I/O

def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing image file: {path}")
    with PILImage.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I", "F"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64)


def read_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing mask file: {path}")
    with PILImage.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"mask {path} must be an 8-bit index raster, got mode {im.mode}")
        arr = np.asarray(im)
    return arr.astype(np.uint8)


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    """Store an image in [0,255] as a lossless 16-bit PNG."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 255.0)
    arr16 = np.round(arr * 257.0).astype(np.uint16)
    PILImage.fromarray(arr16).save(path)


def write_mask(path: str | Path, label: np.ndarray) -> None:
    PILImage.fromarray(np.asarray(label, dtype=np.uint8)).save(path)


def load_dataset(root: str | Path, manifest: str | Path, domain_tag: str = "source",
                 spacing_mm: float = 1.0) -> Dataset:
    """Read a tab-separated manifest (case-id, image path, optional mask path).

    Paths are resolved relative to ``root``. Images are returned raw; run
    :func:`preprocess_dataset` before training.
    """
    root = Path(root)
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    items = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2 or len(fields) > 3:
            raise ValueError(f"{manifest}:{lineno}: expected 2 or 3 tab-separated fields")
        case_id, img_path = fields[0], fields[1]
        mask_path = fields[2] if len(fields) == 3 and fields[2].strip() else None
        pixels = read_image(root / img_path)
        label = None
        if mask_path is not None:
            label = read_mask(root / mask_path)
            check_label(label, pixels.shape)
        items.append(Case(Image(pixels, spacing_mm, domain_tag), label, case_id))
    return Dataset(items, domain_tag)


def save_dataset(dataset: Dataset, out_dir: str | Path, name: str = "manifest.tsv") -> Path:
    """Write images/masks plus a manifest under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for case in dataset:
        img_rel = f"images/{case.case_id}.png"
        write_image(out_dir / img_rel, case.image.pixels)
        row = [case.case_id, img_rel]
        if case.label is not None:
            mask_rel = f"masks/{case.case_id}.png"
            write_mask(out_dir / mask_rel, case.label)
            row.append(mask_rel)
        lines.append("\t".join(row))
    path = out_dir / name
    path.write_text("\n".join(lines) + "\n")
    return path


# ------------------------------------------------------------ preprocessing

def resize_image(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape == (size, size):
        return pixels.copy()
    im = PILImage.fromarray(pixels.astype(np.float32))
    return np.asarray(im.resize((size, size), PILImage.BILINEAR), dtype=np.float64)


def resize_label(label: np.ndarray, size: int) -> np.ndarray:
    if label.shape == (size, size):
        return label.copy()
    im = PILImage.fromarray(label.astype(np.uint8))
    return np.asarray(im.resize((size, size), PILImage.NEAREST), dtype=np.uint8)


def rescale(pixels: np.ndarray) -> np.ndarray:
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi == lo:
        return np.zeros_like(pixels, dtype=np.float64)
    return (pixels - lo) / (hi - lo) * 255.0


def preprocess(image: Image, working_size: int) -> Image:
    """Resize to a square working size (bilinear) and min-max rescale to [0,255]."""
    if image.pixels.size == 0:
        raise ValueError("empty image")
    if working_size < 8:
        raise ValueError("working_size must be >= 8")
    out = rescale(resize_image(image.pixels, working_size))
    spacing = image.spacing_mm * image.pixels.shape[1] / working_size
    return Image(out, spacing, image.domain_tag)


def preprocess_dataset(dataset: Dataset, working_size: int) -> Dataset:
    items = []
    for c in dataset:
        label = None if c.label is None else resize_label(c.label, working_size)
        items.append(Case(preprocess(c.image, working_size), label, c.case_id))
    return Dataset(items, dataset.domain_tag, dataset.split_tag)


# ---------------------------------------------------------------- splitting

def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items by ``ratios``."""
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(dataset: Dataset, ratios: Sequence[float] = (7, 1, 2), seed: int = 0):
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    sizes = apportion(len(dataset), ratios)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    tags = ["train", "val", "test"] + ["unsplit"] * max(0, len(sizes) - 3)
    parts, start = [], 0
    for size, tag in zip(sizes, tags):
        parts.append(dataset.subset(perm[start:start + size].tolist(), tag))
        start += size
    return tuple(parts)


# ----------------------------------------------------------------- phantoms

@dataclass
class Appearance:
    """Intensity model of one imaging domain (levels on the 0..255 scale)."""

    background: float = 200.0
    lobe: float = 60.0
    gamma: float = 1.0
    contrast: float = 1.0
    noise_sigma: float = 3.0
    blur_sigma: float = 1.0

    def validate(self):
        for name in ("background", "lobe"):
            v = getattr(self, name)
            if not 0.0 <= v <= 255.0:
                raise ValueError(f"{name} level {v} outside [0,255]")
        if self.gamma <= 0 or self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("gamma must be positive, noise/blur non-negative")


SOURCE_APPEARANCE = Appearance(background=200.0, lobe=60.0, gamma=1.0)
# Inverted contrast (bright lobes on a dark field) and gamma 0.5.
TARGET_APPEARANCE = Appearance(background=60.0, lobe=190.0, gamma=0.5, noise_sigma=3.0)


@dataclass
class PhantomParams:
    working_size: int = 64
    # geometry, as fractions of working_size
    lobe_offset: float = 0.22
    center_jitter: float = 0.03
    half_width: tuple[float, float] = (0.11, 0.15)
    half_height: tuple[float, float] = (0.25, 0.31)
    max_tilt_deg: float = 8.0
    appearance: Appearance = field(default_factory=Appearance)
    domain_tag: str = "source"
    seed: int = 0
    id_prefix: str = ""

    def validate(self):
        if self.working_size < 16:
            raise ValueError("phantoms need working_size >= 16")
        self.appearance.validate()
        lo_w, hi_w = self.half_width
        lo_h, hi_h = self.half_height
        if not (0 < lo_w <= hi_w and 0 < lo_h <= hi_h):
            raise ValueError("lobe axis ranges must be positive and ordered")
        t = math.radians(self.max_tilt_deg)
        ext_x = math.sqrt((hi_w * math.cos(t)) ** 2 + (hi_h * math.sin(t)) ** 2)
        ext_y = math.sqrt((hi_w * math.sin(t)) ** 2 + (hi_h * math.cos(t)) ** 2)
        margin = 1.5 / self.working_size
        gap = 2 * (self.lobe_offset - self.center_jitter - ext_x)
        edge_x = 0.5 - self.lobe_offset - self.center_jitter - ext_x
        edge_y = 0.5 - self.center_jitter - ext_y
        if gap < margin or edge_x < margin or edge_y < margin:
            raise ValueError("geometry ranges cannot fit two disjoint lobes inside the frame")


def _ellipse(size, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _phantom_label(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    s = params.working_size
    label = np.zeros((s, s), dtype=np.uint8)
    # the patient's right lung sits on the image left
    for cls, side in ((RIGHT_LUNG, -1), (LEFT_LUNG, 1)):
        jx, jy = rng.uniform(-params.center_jitter, params.center_jitter, size=2)
        cx = s * (0.5 + side * params.lobe_offset + jx)
        cy = s * (0.5 + jy)
        a = s * rng.uniform(*params.half_width)
        b = s * rng.uniform(*params.half_height)
        theta = math.radians(rng.uniform(-params.max_tilt_deg, params.max_tilt_deg))
        label[_ellipse(s, cy, cx, a, b, theta)] = cls
    return label


def render_phantom(label: np.ndarray, app: Appearance, rng: np.random.Generator) -> np.ndarray:
    raw = np.where(label > 0, app.lobe, app.background).astype(np.float64)
    if app.blur_sigma > 0:
        raw = ndimage.gaussian_filter(raw, app.blur_sigma, mode="nearest")
    u = 0.5 + app.contrast * (raw / 255.0 - 0.5)
    u = np.clip(u, 0.0, 1.0) ** app.gamma
    u = u + rng.normal(0.0, app.noise_sigma / 255.0, size=u.shape)
    return rescale(np.clip(u, 0.0, 1.0) * 255.0)


def generate_phantoms(params: PhantomParams, n: int) -> Dataset:
    """Labeled, preprocessed phantoms.

    Geometry and appearance draw from independent streams derived from
    ``params.seed``, so two domains built with the same seed share every
    LabelMap and differ only in intensity.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    params.validate()
    geo_rng = np.random.default_rng([params.seed, 0])
    app_rng = np.random.default_rng([params.seed, 1])
    items = []
    for i in range(n):
        label = _phantom_label(params, geo_rng)
        pixels = render_phantom(label, params.appearance, app_rng)
        case_id = f"{params.id_prefix}{params.domain_tag}_{i:04d}"
        items.append(Case(Image(pixels, 1.0, params.domain_tag), label, case_id))
    return Dataset(items, params.domain_tag)


def phantom_params(domain: str, seed: int, **overrides) -> PhantomParams:
    app = SOURCE_APPEARANCE if domain == "source" else TARGET_APPEARANCE
    params = PhantomParams(appearance=dataclasses.replace(app), domain_tag=domain, seed=seed)
    return dataclasses.replace(params, **overrides)
