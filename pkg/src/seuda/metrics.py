"""Dice/recall/precision, symmetric average surface distance, post-processing
and per-setting reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import CLASS_NAMES, LEFT_LUNG, RIGHT_LUNG

SETTINGS = ("S-test", "T-noDA", "T-HistM", "T-STL", "CyUDA", "SeUDA")
METRIC_NAMES = ("dice", "recall", "precision", "asd")

_STRUCT = {4: ndimage.generate_binary_structure(2, 1), 8: ndimage.generate_binary_structure(2, 2)}


class UndefinedASD(ValueError):
    pass


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def overlap_metrics(pred: np.ndarray, gt: np.ndarray, class_id: int):
    """(dice, recall, precision) in percent for one class."""
    _check_pair(pred, gt)
    p = pred == class_id
    g = gt == class_id
    inter = int(np.count_nonzero(p & g))
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 100.0, 100.0, 100.0
    dice = 200.0 * inter / (np_ + ng)
    recall = 100.0 * inter / ng if ng else 0.0
    precision = 100.0 * inter / np_ if np_ else 0.0
    return dice, recall, precision


def boundary(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Foreground pixels with at least one neighbor outside the mask; the frame counts as outside."""
    mask = mask.astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_STRUCT[connectivity], border_value=0)
    return mask & ~eroded


def asd(pred: np.ndarray, gt: np.ndarray, class_id: int, spacing_mm: float = 1.0,
        connectivity: int = 4) -> float:
    """Symmetric average surface distance in mm."""
    _check_pair(pred, gt)
    bp = boundary(pred == class_id, connectivity)
    bg = boundary(gt == class_id, connectivity)
    if not bp.any() or not bg.any():
        raise UndefinedASD(f"ASD undefined: empty mask for class {class_id}")
    # distance from every pixel to the nearest boundary pixel of the other mask
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    total = d_to_g[bp].sum() + d_to_p[bg].sum()
    return float(total / (bp.sum() + bg.sum()) * spacing_mm)


def largest_component(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=_STRUCT[connectivity])
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(lab.ravel())[1:]
    # labels follow raster order, so argmax keeps the top-left-most of tied components
    return lab == (int(np.argmax(sizes)) + 1)


def holes(mask: np.ndarray, blocked: np.ndarray | None = None, connectivity: int = 4) -> np.ndarray:
    """Pixels of complement regions that do not touch the frame.

    Regions containing any ``blocked`` pixel (another lung) are not holes.
    """
    lab, n = ndimage.label(~mask, structure=_STRUCT[connectivity])
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    edge = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    keep[edge] = False
    if blocked is not None and blocked.any():
        keep[np.unique(lab[blocked])] = False
    return keep[lab]


def postprocess(pred: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Largest connected component per lung class, then hole filling."""
    cores = {c: largest_component(pred == c, connectivity) for c in (RIGHT_LUNG, LEFT_LUNG)}
    out = np.zeros_like(pred, dtype=np.uint8)
    for c, core in cores.items():
        other = cores[LEFT_LUNG if c == RIGHT_LUNG else RIGHT_LUNG]
        out[core | holes(core, other, connectivity)] = c
    return out


@dataclass
class CaseMetrics:
    case_id: str
    class_name: str
    dice: float
    recall: float
    precision: float
    asd: float | None


@dataclass
class MetricsReport:
    setting: str
    cases: list[CaseMetrics] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        out = {}
        for name in CLASS_NAMES.values():
            rows = [c for c in self.cases if c.class_name == name]
            agg = {}
            for m in ("dice", "recall", "precision"):
                agg[m] = float(np.mean([getattr(r, m) for r in rows])) if rows else math.nan
            asds = [r.asd for r in rows if r.asd is not None]
            agg["asd"] = float(np.mean(asds)) if asds else math.nan
            agg["asd_undefined"] = len(rows) - len(asds)
            out[name] = agg
        return out

    def mean_dice(self) -> float:
        agg = self.aggregate()
        return float(np.mean([agg[n]["dice"] for n in CLASS_NAMES.values()]))

    def mean_asd(self) -> float:
        agg = self.aggregate()
        return float(np.nanmean([agg[n]["asd"] for n in CLASS_NAMES.values()]))

    # one JSON object per line: header, cases, aggregate
    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "header", "setting": self.setting, "config": self.config},
                            sort_keys=True)]
        lines += [json.dumps({"kind": "case", **asdict(c)}) for c in self.cases]
        lines.append(json.dumps({"kind": "aggregate", "setting": self.setting,
                                 "metrics": self.aggregate()}))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsReport":
        report = None
        cases = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "header":
                report = cls(rec["setting"], config=rec["config"])
            elif kind == "case":
                cases.append(CaseMetrics(**rec))
        if report is None:
            raise ValueError("report has no header record")
        report.cases = cases
        return report

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_jsonl(Path(path).read_text())


def evaluate(preds, gts, spacing_mm: float = 1.0, setting_tag: str = "S-test",
             case_ids=None, config: dict | None = None, connectivity: int = 4) -> MetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} ground truths")
    if case_ids is None:
        case_ids = [f"case_{i:04d}" for i in range(len(preds))]
    spacings = spacing_mm if isinstance(spacing_mm, (list, tuple)) else [spacing_mm] * len(preds)
    report = MetricsReport(setting_tag, config=dict(config or {}))
    for pred, gt, cid, sp in zip(preds, gts, case_ids, spacings):
        _check_pair(pred, gt)
        pp = postprocess(np.asarray(pred), connectivity)
        for cls, name in CLASS_NAMES.items():
            d, r, p = overlap_metrics(pp, gt, cls)
            try:
                a = asd(pp, gt, cls, sp, connectivity)
            except UndefinedASD:
                a = None
            report.cases.append(CaseMetrics(cid, name, d, r, p, a))
    return report


def format_table(reports: list[MetricsReport]) -> str:
    """Side-by-side Dice/Recall/Precision/ASD for right and left lung."""
    cols = [f"{side} {m}" for side in ("R", "L") for m in ("Dice", "Recall", "Prec", "ASD")]
    header = f"{'Setting':<10}" + "".join(f"{c:>10}" for c in cols)
    lines = [header, "-" * len(header)]
    for rep in reports:
        agg = rep.aggregate()
        vals = [agg[name][m] for name in ("right_lung", "left_lung") for m in METRIC_NAMES]
        lines.append(f"{rep.setting:<10}" + "".join(f"{v:>10.2f}" for v in vals))
    lines.append(f"{'T-FeatDA':<10}  not implemented")
    return "\n".join(lines) + "\n"
