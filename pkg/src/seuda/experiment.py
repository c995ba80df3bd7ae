"""Desk-scale experiment runner: the six evaluation settings on two-domain
phantoms, and the repeated-initialisation stability study."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import adaptation as ad
from .baselines import SettingInputs, build_reference_histogram, fine_tune_stl, run_setting
from .data import Dataset, generate_phantoms, phantom_params, split
from .metrics import SETTINGS, MetricsReport
from .segmenter import SegmenterConfig, TrainOptions, build_segmenter, train_segmenter

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    """Flat, file-loadable configuration of one toy run."""

    seed: int = 0
    working_size: int = 64
    spacing_mm: float = 1.0
    n_source_train: int = 40
    n_source_val: int = 10
    n_source_test: int = 10
    n_target_train: int = 40
    n_target_test: int = 10
    # segmenter
    seg_base_channels: int = 8
    seg_stage_blocks: tuple = (1, 1, 1, 1)
    seg_dilated_rates: tuple = (2, 4)
    seg_head_rates: tuple = (6, 12, 18, 24)
    seg_epochs: int = 20
    seg_lr: float = 0.01
    seg_batch_size: int = 4
    stl_epochs: int = 20
    stl_lr_scale: float = 0.1
    stl_val: int = 5
    # adaptation
    gen_downsamples: int = 2
    gen_res_blocks: int = 3
    gen_channels: int = 8
    disc_layers: int = 5
    disc_channels: int = 8
    uda_epochs: int = 30
    alpha: float = 0.5
    beta: float = 10.0
    lambda_sem: float = 0.5
    lr: float = 0.002
    pool_size: int = 50
    mask_pool: bool = True
    label_smoothing: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        vals = {}
        for k, v in d.items():
            vals[k] = tuple(v) if isinstance(known[k].default, tuple) else v
        return cls(**vals)

    @classmethod
    def load(cls, path: str | Path) -> "ToyConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing config file: {path}")
        d = yaml.safe_load(path.read_text()) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: expected flat key/value pairs")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def segmenter_config(self) -> SegmenterConfig:
        return SegmenterConfig(self.seg_base_channels, list(self.seg_stage_blocks),
                               list(self.seg_dilated_rates), list(self.seg_head_rates),
                               working_size=self.working_size)

    def train_options(self, epochs: int | None = None) -> TrainOptions:
        return TrainOptions(epochs=self.seg_epochs if epochs is None else epochs, lr=self.seg_lr,
                            batch_size=self.seg_batch_size, seed=self.seed)

    def adaptation_config(self, lambda_sem: float | None = None, seed: int | None = None):
        half = self.uda_epochs // 2
        return ad.AdaptationConfig(
            alpha=self.alpha, beta=self.beta,
            lambda_sem=self.lambda_sem if lambda_sem is None else lambda_sem,
            base_lr=self.lr, hold_epochs=half, decay_epochs=self.uda_epochs - half,
            pool_size=self.pool_size, mask_pool=self.mask_pool,
            label_smoothing=self.label_smoothing, seed=self.seed if seed is None else seed)

    def build_adaptation(self, lambda_sem: float | None = None, seed: int | None = None,
                         semantic: bool = True) -> ad.AdaptationState:
        return ad.build_adaptation(
            ad.GeneratorConfig(self.gen_downsamples, self.gen_res_blocks, self.gen_channels),
            ad.DiscriminatorConfig(self.disc_layers, self.disc_channels),
            self.adaptation_config(lambda_sem, seed), semantic=semantic,
            working_size=self.working_size)


@dataclass
class ToyData:
    source_train: Dataset
    source_val: Dataset
    source_test: Dataset
    target_train: Dataset
    target_test: Dataset


def make_toy_data(cfg: ToyConfig) -> ToyData:
    """Source and target phantoms with independent anatomy (unpaired domains)."""
    n_src = cfg.n_source_train + cfg.n_source_val + cfg.n_source_test
    n_tgt = cfg.n_target_train + cfg.n_target_test
    src = generate_phantoms(phantom_params("source", 2 * cfg.seed, working_size=cfg.working_size), n_src)
    tgt = generate_phantoms(phantom_params("target", 2 * cfg.seed + 1, working_size=cfg.working_size), n_tgt)
    s_tr, s_va, s_te = split(src, (cfg.n_source_train, cfg.n_source_val, cfg.n_source_test), cfg.seed)
    t_tr, t_te = split(tgt, (cfg.n_target_train, cfg.n_target_test), cfg.seed)[:2]
    for ds in (t_tr, t_te):
        ds.domain_tag = "target"
    t_te.split_tag = "test"
    return ToyData(s_tr, s_va, s_te, t_tr, t_te)


def train_source_segmenter(cfg: ToyConfig, data: ToyData):
    torch.manual_seed(cfg.seed)
    model = build_segmenter(cfg.segmenter_config(), seed=cfg.seed)
    model, history = train_segmenter(model, data.source_train, data.source_val, cfg.train_options())
    return model, history


def train_stl(cfg: ToyConfig, model, data: ToyData):
    n_val = cfg.stl_val
    t_tr = data.target_train.subset(range(len(data.target_train) - n_val))
    t_va = data.target_train.subset(range(len(data.target_train) - n_val, len(data.target_train)))
    return fine_tune_stl(model.unfrozen_copy(), t_tr, t_va, cfg.train_options(cfg.stl_epochs),
                         cfg.stl_lr_scale)


def train_uda(cfg: ToyConfig, segmenter, data: ToyData, lambda_sem: float | None = None,
              seed: int | None = None, epochs: int | None = None):
    state = cfg.build_adaptation(lambda_sem, seed)
    state, history = ad.train_adaptation(state, segmenter, data.source_train, data.target_train,
                                         cfg.uda_epochs if epochs is None else epochs)
    return state, history


def run_bench(cfg: ToyConfig, settings=SETTINGS, data: ToyData | None = None,
              artifacts: SettingInputs | None = None) -> tuple[dict[str, MetricsReport], SettingInputs]:
    """Train whatever the requested settings need and evaluate each of them."""
    settings = list(settings)
    if not settings:
        raise ValueError("no settings requested")
    unknown = [s for s in settings if s not in SETTINGS]
    if unknown:
        raise ValueError(f"unknown settings {unknown}")
    data = data or make_toy_data(cfg)
    inputs = artifacts or SettingInputs()
    timings = {}
    t0 = time.perf_counter()
    if inputs.segmenter is None:
        inputs.segmenter, _ = train_source_segmenter(cfg, data)
        timings["segmenter"] = time.perf_counter() - t0
    if "T-STL" in settings and inputs.stl_model is None:
        t = time.perf_counter()
        inputs.stl_model = train_stl(cfg, inputs.segmenter, data)
        timings["stl"] = time.perf_counter() - t
    inputs.segmenter.freeze()
    if "T-HistM" in settings and inputs.reference_histogram is None:
        inputs.reference_histogram = build_reference_histogram(data.source_train)
    if "SeUDA" in settings and inputs.seuda_state is None:
        t = time.perf_counter()
        inputs.seuda_state, _ = train_uda(cfg, inputs.segmenter, data)
        timings["seuda"] = time.perf_counter() - t
    if "CyUDA" in settings and inputs.cyuda_state is None:
        t = time.perf_counter()
        inputs.cyuda_state, _ = train_uda(cfg, inputs.segmenter, data, lambda_sem=0.0)
        timings["cyuda"] = time.perf_counter() - t
    reports = {}
    for setting in settings:
        ds = data.source_test if setting == "S-test" else data.target_test
        try:
            reports[setting] = run_setting(setting, inputs, ds, {**cfg.to_dict(), "timings": timings})
        except Exception as exc:
            raise RuntimeError(f"setting {setting} failed: {exc}") from exc
        log.info("%s mean dice %.2f", setting, reports[setting].mean_dice())
    return reports, inputs


def stability_study(cfg: ToyConfig, n_runs: int, lambda_values, data: ToyData | None = None,
                    segmenter=None, seeds=None) -> dict:
    """Train ``n_runs`` adaptation models per lambda with distinct seeds; summarise Dice/ASD."""
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    data = data or make_toy_data(cfg)
    if segmenter is None:
        segmenter, _ = train_source_segmenter(cfg, data)
    segmenter.freeze()
    seeds = list(seeds) if seeds is not None else [cfg.seed * 1000 + i for i in range(n_runs)]
    if len(seeds) != n_runs:
        raise ValueError("need one seed per run")
    out = {"n_runs": n_runs, "seeds": seeds, "config": cfg.to_dict(), "lambda": {}}
    for lam in lambda_values:
        dices, asds = [], []
        for s in seeds:
            state, _ = train_uda(cfg, segmenter, data, lambda_sem=lam, seed=s)
            rep = run_setting("SeUDA" if lam > 0 else "CyUDA",
                              SettingInputs(segmenter=segmenter, seuda_state=state, cyuda_state=state),
                              data.target_test)
            dices.append(rep.mean_dice())
            asds.append(rep.mean_asd())
        out["lambda"][str(lam)] = {
            "dice": dices, "asd": asds,
            "dice_mean": float(np.mean(dices)), "dice_std": float(np.std(dices, ddof=1)),
            "asd_mean": float(np.mean(asds)), "asd_std": float(np.std(asds, ddof=1))}
    return out
