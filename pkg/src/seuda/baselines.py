"""Comparison settings: no adaptation, histogram matching, supervised
fine-tuning, and the two GAN-based transforms."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptation import AdaptationState, transform
from .data import Dataset, Image
from .metrics import SETTINGS, MetricsReport, evaluate
from .segmenter import (FrozenModelError, SegmenterModel, TrainOptions, predict_labels,
                        train_segmenter)

BINS = 256


def _bin_index(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(pixels), 0, BINS - 1).astype(np.int64)


def image_histogram(pixels: np.ndarray) -> np.ndarray:
    counts = np.bincount(_bin_index(pixels).ravel(), minlength=BINS).astype(np.float64)
    return counts / counts.sum()


def build_reference_histogram(source_train: Dataset, bins: int = BINS) -> np.ndarray:
    """Normalized intensity histogram pooled over every source training pixel."""
    if bins != BINS:
        raise ValueError(f"only {BINS} unit-width bins are supported")
    if len(source_train) == 0:
        raise ValueError("empty dataset")
    counts = np.zeros(BINS)
    for img in source_train.images:
        counts += np.bincount(_bin_index(img.pixels).ravel(), minlength=BINS)
    return counts / counts.sum()


def histogram_match(image: Image, reference: np.ndarray) -> Image:
    """Map each value to the smallest reference level whose CDF reaches the image CDF."""
    ref_cdf = np.cumsum(reference)
    img_cdf = np.cumsum(image_histogram(image.pixels))
    lut = np.searchsorted(ref_cdf, img_cdf - 1e-12, side="left")
    lut = np.minimum(lut, BINS - 1).astype(np.float64)
    return Image(lut[_bin_index(image.pixels)], image.spacing_mm, image.domain_tag)


def save_histogram(hist: np.ndarray, path: str | Path) -> None:
    Path(path).write_text("".join(f"{v!r}\n" for v in hist.tolist()))


def load_histogram(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing histogram file: {path}")
    values = np.array([float(x) for x in path.read_text().split()])
    if values.shape != (BINS,):
        raise ValueError(f"{path}: expected {BINS} lines, found {values.size}")
    return values


def fine_tune_stl(source_model: SegmenterModel, target_train: Dataset, target_val: Dataset,
                  opts: TrainOptions | None = None, lr_scale: float = 0.1,
                  fixed_prefixes: tuple[str, ...] = ()) -> SegmenterModel:
    """Continue training a copy of the source model on labeled target data at a reduced lr.

    All layers are updated unless their parameter names start with one of
    ``fixed_prefixes`` (e.g. ``("stem", "stages.0")`` to tune only the deeper layers).
    """
    if source_model.frozen:
        raise FrozenModelError("pass an unfrozen copy of the source model (see unfrozen_copy)")
    for name, p in source_model.net.named_parameters():
        p.requires_grad_(not any(name.startswith(x) for x in fixed_prefixes))
    opts = opts or TrainOptions()
    opts = dataclasses.replace(opts, lr=opts.lr * lr_scale)
    model, _ = train_segmenter(source_model, target_train, target_val, opts)
    return model


@dataclass
class SettingInputs:
    """Artifacts a setting may need; unused fields stay ``None``."""

    segmenter: SegmenterModel | None = None
    stl_model: SegmenterModel | None = None
    reference_histogram: np.ndarray | None = None
    cyuda_state: AdaptationState | None = None
    seuda_state: AdaptationState | None = None


def setting_images(setting: str, inputs: SettingInputs, images: list[Image]) -> list[Image]:
    """The images a setting feeds to its segmenter."""
    if setting in ("S-test", "T-noDA", "T-STL"):
        return list(images)
    if setting == "T-HistM":
        if inputs.reference_histogram is None:
            raise ValueError("T-HistM needs a reference histogram")
        return [histogram_match(im, inputs.reference_histogram) for im in images]
    state = inputs.cyuda_state if setting == "CyUDA" else inputs.seuda_state
    if state is None:
        raise ValueError(f"{setting} needs a trained adaptation state")
    if setting == "CyUDA" and state.config.lambda_sem != 0 and state.semantic:
        raise ValueError("CyUDA needs an adaptation state trained with lambda_sem = 0")
    return [transform(state, im) for im in images]


def run_setting(setting: str, inputs: SettingInputs, dataset: Dataset,
                config: dict | None = None) -> MetricsReport:
    """Build the setting's pipeline, predict on ``dataset`` and evaluate."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; choose from {SETTINGS}")
    if any(c.label is None for c in dataset):
        raise ValueError(f"{setting}: evaluation data must be labeled")
    model = inputs.stl_model if setting == "T-STL" else inputs.segmenter
    if model is None:
        raise ValueError(f"{setting} needs a {'fine-tuned' if setting == 'T-STL' else 'source'} "
                         "segmenter")
    images = setting_images(setting, inputs, dataset.images)
    preds = predict_labels(model, images)
    return evaluate(preds, dataset.labels, [im.spacing_mm for im in dataset.images], setting,
                    [c.case_id for c in dataset], config)
