"""Semantic-aware cycle-consistent image transformation (target -> source).

Two generators (G_ts, G_st), image discriminators D_s / D_t, and a mask
discriminator D_m that judges segmenter outputs on transformed images against
real source label maps. Setting ``lambda_sem = 0`` gives the cycle-only
ablation (CyUDA).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NUM_CLASSES, Dataset, Image
from .segmenter import NonFiniteLossError, SegmenterModel, image_tensor, seeded_init

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
NETWORKS = ("G_ts", "G_st", "D_s", "D_t", "D_m")


@dataclass
class GeneratorConfig:
    encoder_downsamples: int = 2
    residual_blocks: int = 9
    base_channels: int = 64

    def validate(self):
        if min(self.encoder_downsamples, self.residual_blocks, self.base_channels) < 1:
            raise ValueError("generator config values must be positive")


@dataclass
class DiscriminatorConfig:
    layers: int = 5
    base_channels: int = 64
    patch_mode: bool = True

    def validate(self):
        if self.layers < 2:
            raise ValueError("discriminator needs at least 2 layers")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")


@dataclass
class AdaptationConfig:
    alpha: float = 0.5
    beta: float = 10.0
    lambda_sem: float = 0.5
    base_lr: float = 0.002
    hold_epochs: int = 100
    decay_epochs: int = 100
    adam_betas: tuple[float, float] = (0.5, 0.999)
    pool_size: int = 50
    mask_pool: bool = True
    label_smoothing: float = 0.0
    seed: int = 0

    def validate(self):
        if min(self.alpha, self.beta, self.lambda_sem) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.pool_size < 0:
            raise ValueError("pool_size must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


def toy_generator_config() -> GeneratorConfig:
    return GeneratorConfig(encoder_downsamples=2, residual_blocks=3, base_channels=8)


def toy_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(layers=5, base_channels=8)


# ----------------------------------------------------------------- networks

class ResnetBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), nn.InstanceNorm2d(c), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), nn.InstanceNorm2d(c))

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder (strided convs), transformer (residual blocks), decoder (transposed convs).

    Works on images scaled to [-1, 1]; the output passes through tanh.
    """

    def __init__(self, cfg: GeneratorConfig, in_channels: int = 1, out_channels: int = 1):
        super().__init__()
        c = cfg.base_channels
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, c, 7), nn.InstanceNorm2d(c),
                  nn.ReLU(True)]
        for i in range(cfg.encoder_downsamples):
            cin = c * 2 ** i
            layers += [nn.Conv2d(cin, cin * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(cin * 2),
                       nn.ReLU(True)]
        width = c * 2 ** cfg.encoder_downsamples
        layers += [ResnetBlock(width) for _ in range(cfg.residual_blocks)]
        for i in reversed(range(cfg.encoder_downsamples)):
            cout = c * 2 ** i
            layers += [nn.ConvTranspose2d(cout * 2, cout, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(cout), nn.ReLU(True)]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """``layers`` 4x4 convolutions; all but the last two stride by 2.

    Five layers give the classic 70x70 receptive field.
    """

    def __init__(self, cfg: DiscriminatorConfig, in_channels: int = 1):
        super().__init__()
        n = cfg.layers
        c = cfg.base_channels
        seq = []
        cin = in_channels
        for i in range(n - 1):
            cout = c * min(2 ** i, 8)
            stride = 2 if i < n - 2 else 1
            seq.append(nn.Conv2d(cin, cout, 4, stride=stride, padding=1))
            if i > 0:
                seq.append(nn.InstanceNorm2d(cout))
            seq.append(nn.LeakyReLU(0.2, True))
            cin = cout
        seq.append(nn.Conv2d(cin, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*seq)
        self.patch_mode = cfg.patch_mode

    def forward(self, x):
        out = self.model(x)
        if not self.patch_mode:
            out = out.mean(dim=(2, 3), keepdim=True)
        return out


def receptive_field(layers: int) -> int:
    rf, jump = 1, 1
    strides = [2 if i < layers - 2 else 1 for i in range(layers)]
    for s in strides:
        rf += 3 * jump
        jump *= s
    return rf


# ---------------------------------------------------------------- buffers

class ImagePool:
    """History of generated images fed to a discriminator."""

    def __init__(self, capacity: int = 50, seed: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.buffer: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.buffer)

    def query(self, fresh: torch.Tensor) -> torch.Tensor:
        fresh = fresh.detach().clone()
        if self.capacity == 0:
            return fresh
        if len(self.buffer) < self.capacity:
            self.buffer.append(fresh)
            return fresh
        if self.rng.random() < 0.5:
            return fresh
        idx = int(self.rng.integers(self.capacity))
        old = self.buffer[idx]
        self.buffer[idx] = fresh
        return old

    def state_dict(self):
        return {"capacity": self.capacity, "buffer": list(self.buffer),
                "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state):
        self.capacity = state["capacity"]
        self.buffer = list(state["buffer"])
        self.rng.bit_generator.state = state["rng"]


def lr_at(epoch: int, base_lr: float = 0.002, hold: int = 100, decay: int = 100) -> float:
    """Constant for ``hold`` epochs, then linear decay reaching zero at ``hold + decay``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < hold:
        return base_lr
    if decay <= 0:
        return 0.0
    return base_lr * max(0.0, 1.0 - (epoch - hold) / decay)


# ------------------------------------------------------------------ losses

def lsgan_losses(scores_real, scores_fake):
    """Least-squares adversarial losses with targets 1 (real) / 0 (fake).

    Returns ``(d_loss, g_loss)``; the discriminator term is halved.
    """
    if isinstance(scores_fake, torch.Tensor):
        g_loss = ((scores_fake - 1) ** 2).mean()
        d_loss = None
        if scores_real is not None:
            d_loss = 0.5 * (((scores_real - 1) ** 2).mean() + (scores_fake ** 2).mean())
        return d_loss, g_loss
    real = np.asarray(scores_real, dtype=np.float64)
    fake = np.asarray(scores_fake, dtype=np.float64)
    if not (np.isfinite(real).all() and np.isfinite(fake).all()):
        raise ValueError("score maps must be finite")
    d_loss = 0.5 * (np.mean((real - 1) ** 2) + np.mean(fake ** 2))
    return float(d_loss), float(np.mean((fake - 1) ** 2))


def cycle_loss(x_t, x_t_cyc, x_s, x_s_cyc):
    """Mean absolute error of each cycle, summed over the two cycles."""
    for a, b in ((x_t, x_t_cyc), (x_s, x_s_cyc)):
        if tuple(a.shape) != tuple(b.shape):
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if isinstance(x_t, torch.Tensor):
        return (x_t_cyc - x_t).abs().mean() + (x_s_cyc - x_s).abs().mean()
    return float(np.mean(np.abs(np.asarray(x_t_cyc) - x_t)) + np.mean(np.abs(np.asarray(x_s_cyc) - x_s)))


def semantic_losses(scores_real_mask, scores_fake_mask):
    """Mask-discriminator losses; same least-squares form as :func:`lsgan_losses`."""
    return lsgan_losses(scores_real_mask, scores_fake_mask)


def check_mask_channels(mask: torch.Tensor, num_classes: int = NUM_CLASSES):
    if mask.shape[1] != num_classes:
        raise ValueError(f"mask has {mask.shape[1]} channels, expected {num_classes}")


def smoothed_one_hot(labels: torch.Tensor, num_classes: int, smoothing: float,
                     dtype=torch.float32) -> torch.Tensor:
    """(N,H,W) ids -> (N,C,H,W); true class gets 1 - smoothing, the rest share it."""
    hot = F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(dtype)
    if smoothing == 0:
        return hot
    return hot * (1.0 - smoothing) + (1.0 - hot) * (smoothing / (num_classes - 1))


def total_objective(components, weights) -> float:
    """gan_st + alpha*gan_ts + beta*cyc + lambda_sem*sem.

    ``components`` is (gan_st, gan_ts, cyc, sem) or a mapping with those keys;
    ``weights`` is (alpha, beta, lambda_sem) or an :class:`AdaptationConfig`.
    """
    if isinstance(components, dict):
        components = (components["gan_st"], components["gan_ts"], components["cyc"],
                      components["sem"])
    if isinstance(weights, AdaptationConfig):
        weights = (weights.alpha, weights.beta, weights.lambda_sem)
    gan_st, gan_ts, cyc, sem = components
    alpha, beta, lam = weights
    return gan_st + alpha * gan_ts + beta * cyc + lam * sem


@dataclass
class LossReport:
    gan_st: float
    gan_ts: float
    cyc: float
    sem: float
    total: float
    d_s: float
    d_t: float
    d_m: float

    def as_dict(self):
        return asdict(self)


# ------------------------------------------------------------------- state

def to_unit(x: torch.Tensor) -> torch.Tensor:
    return x / 127.5 - 1.0


def from_unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 127.5


def _net_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class AdaptationState:
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    config: AdaptationConfig
    nets: dict[str, nn.Module]
    optimizers: dict[str, torch.optim.Adam]
    pools: dict[str, ImagePool]
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def semantic(self) -> bool:
        return "D_m" in self.nets

    @property
    def dtype(self):
        return next(self.nets["G_ts"].parameters()).dtype

    def parameters(self, name: str) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.nets[name].state_dict().items()}

    def set_lr(self, lr: float):
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr


def build_adaptation(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
                     weights: AdaptationConfig | None = None, seed: int | None = None,
                     semantic: bool = True, num_classes: int = NUM_CLASSES,
                     dtype=torch.float32, working_size: int | None = None) -> AdaptationState:
    """Initialise all networks, optimizers and pools.

    Every network, pool and the pairing shuffle draws from its own stream
    derived from ``seed``; ``semantic=False`` omits D_m and its mask pool
    without perturbing any other stream.
    """
    config = weights or AdaptationConfig()
    if seed is not None:
        config.seed = seed
    config.validate()
    gen_cfg.validate()
    disc_cfg.validate()
    if working_size is not None:
        if working_size % (2 ** gen_cfg.encoder_downsamples):
            raise ValueError(f"working size {working_size} not divisible by generator stride "
                             f"{2 ** gen_cfg.encoder_downsamples}")
        n_strided = max(disc_cfg.layers - 2, 0)
        if working_size // 2 ** n_strided < 3:
            raise ValueError(f"discriminator with {disc_cfg.layers} layers downsamples a "
                             f"{working_size}px input below one patch")
    s = config.seed
    nets: dict[str, nn.Module] = {
        "G_ts": Generator(gen_cfg), "G_st": Generator(gen_cfg),
        "D_s": PatchDiscriminator(disc_cfg), "D_t": PatchDiscriminator(disc_cfg)}
    if semantic:
        nets["D_m"] = PatchDiscriminator(disc_cfg, in_channels=num_classes)
    for name, net in nets.items():
        seeded_init(net, _net_seed(s, NETWORKS.index(name)), std=0.02)
        net.to(dtype)
    optimizers = {name: torch.optim.Adam(net.parameters(), lr=config.base_lr,
                                         betas=tuple(config.adam_betas))
                  for name, net in nets.items()}
    pools = {"fake_s": ImagePool(config.pool_size, _net_seed(s, 10)),
             "fake_t": ImagePool(config.pool_size, _net_seed(s, 11))}
    if semantic:
        pools["fake_mask"] = ImagePool(config.pool_size if config.mask_pool else 0,
                                       _net_seed(s, 12))
    return AdaptationState(gen_cfg, disc_cfg, config, nets, optimizers, pools,
                           np.random.default_rng(_net_seed(s, 20)))


def _set_requires_grad(nets, flag: bool):
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def generator_losses(state: AdaptationState, segmenter: SegmenterModel | None,
                     x_s: torch.Tensor, x_t: torch.Tensor) -> dict[str, torch.Tensor]:
    """Forward both cycles and return the generator-side loss components.

    Inputs are (N,1,H,W) tensors on the [0,255] scale. The returned dict also
    carries the intermediate images (``fake_s``, ``fake_t``) and the
    segmenter's prediction on ``fake_s`` when the semantic term is active.
    """
    nets = state.nets
    s, t = to_unit(x_s), to_unit(x_t)
    fake_s = nets["G_ts"](t)
    rec_t = nets["G_st"](fake_s)
    fake_t = nets["G_st"](s)
    rec_s = nets["G_ts"](fake_t)
    _, gan_ts = lsgan_losses(None, nets["D_s"](fake_s))
    _, gan_st = lsgan_losses(None, nets["D_t"](fake_t))
    cyc = cycle_loss(t, rec_t, s, rec_s)
    out = {"gan_st": gan_st, "gan_ts": gan_ts, "cyc": cyc,
           "fake_s": fake_s, "fake_t": fake_t}
    if state.config.lambda_sem > 0 and state.semantic:
        if segmenter is None:
            raise ValueError("the semantic term needs the frozen segmenter")
        fake_mask = segmenter.net(from_unit(fake_s))
        check_mask_channels(fake_mask, segmenter.config.num_classes)
        _, out["sem"] = semantic_losses(None, nets["D_m"](fake_mask))
        out["fake_mask"] = fake_mask
    else:
        out["sem"] = torch.zeros((), dtype=gan_st.dtype)
    # combine in float64 so the reported total matches the recombined parts
    out["total"] = total_objective({k: out[k].double() for k in ("gan_st", "gan_ts", "cyc", "sem")},
                                   state.config)
    return out


def _check_finite(values: dict[str, float]):
    for name, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite loss component {name!r}: {v}")


def train_step(state: AdaptationState, segmenter: SegmenterModel | None,
               x_s, y_s, x_t) -> tuple[AdaptationState, LossReport]:
    """One update: both generators jointly, then D_s, D_t and (if active) D_m."""
    semantic_active = state.semantic and state.config.lambda_sem > 0
    if segmenter is not None and not segmenter.frozen:
        raise ValueError("adaptation requires a frozen segmenter")
    if semantic_active and segmenter is None:
        raise ValueError("the semantic term needs the frozen segmenter")
    dtype = state.dtype
    x_s = image_tensor(x_s, dtype) if not isinstance(x_s, torch.Tensor) else x_s.to(dtype)
    x_t = image_tensor(x_t, dtype) if not isinstance(x_t, torch.Tensor) else x_t.to(dtype)
    y_s = torch.as_tensor(np.asarray(y_s)) if not isinstance(y_s, torch.Tensor) else y_s
    if y_s.dim() == 2:
        y_s = y_s[None]
    nets, opts, cfg = state.nets, state.optimizers, state.config
    discs = [nets[k] for k in ("D_s", "D_t", "D_m") if k in nets]

    # generators
    _set_requires_grad(discs, False)
    g = generator_losses(state, segmenter, x_s, x_t)
    parts = {k: g[k].item() for k in ("gan_st", "gan_ts", "cyc", "sem", "total")}
    _check_finite(parts)
    opts["G_ts"].zero_grad()
    opts["G_st"].zero_grad()
    g["total"].backward()
    opts["G_ts"].step()
    opts["G_st"].step()
    _set_requires_grad(discs, True)

    # image discriminators on pooled fakes
    s, t = to_unit(x_s), to_unit(x_t)
    d_losses = {}
    for name, real, fake, pool in (("D_s", s, g["fake_s"], "fake_s"),
                                   ("D_t", t, g["fake_t"], "fake_t")):
        pooled = state.pools[pool].query(fake)
        d_loss, _ = lsgan_losses(nets[name](real), nets[name](pooled))
        _check_finite({name: d_loss.item()})
        opts[name].zero_grad()
        d_loss.backward()
        opts[name].step()
        d_losses[name] = d_loss.item()

    d_losses["D_m"] = 0.0
    if semantic_active:
        real_mask = smoothed_one_hot(y_s, segmenter.config.num_classes, cfg.label_smoothing, dtype)
        pooled = state.pools["fake_mask"].query(g["fake_mask"])
        check_mask_channels(real_mask, segmenter.config.num_classes)
        d_loss, _ = semantic_losses(nets["D_m"](real_mask), nets["D_m"](pooled))
        _check_finite({"D_m": d_loss.item()})
        opts["D_m"].zero_grad()
        d_loss.backward()
        opts["D_m"].step()
        d_losses["D_m"] = d_loss.item()

    report = LossReport(parts["gan_st"], parts["gan_ts"], parts["cyc"], parts["sem"],
                        parts["total"], d_losses["D_s"], d_losses["D_t"], d_losses["D_m"])
    return state, report


def train_adaptation(state: AdaptationState, segmenter: SegmenterModel | None,
                     source: Dataset, target: Dataset, epochs: int,
                     step_callback=None) -> tuple[AdaptationState, list[dict]]:
    """Run ``epochs`` passes over the target set, batch size 1.

    Each target image is paired with a randomly drawn labeled source image.
    Target labels are never read.
    """
    for case in source:
        if case.label is None:
            raise ValueError(f"source item {case.case_id!r} is unlabeled")
    if epochs <= 0:
        return state, []
    src_x = image_tensor(source.images, state.dtype)
    src_y = torch.as_tensor(np.stack(source.labels).astype(np.int64))
    tgt_x = image_tensor(target.images, state.dtype)
    new_records = []
    for _ in range(epochs):
        cfg = state.config
        lr = lr_at(state.epoch, cfg.base_lr, cfg.hold_epochs, cfg.decay_epochs)
        state.set_lr(lr)
        t_order = state.rng.permutation(len(target))
        s_order = state.rng.integers(0, len(source), size=len(target))
        reports = []
        for ti, si in zip(t_order, s_order):
            state, rep = train_step(state, segmenter, src_x[si:si + 1], src_y[si:si + 1],
                                    tgt_x[ti:ti + 1])
            reports.append(rep)
            if step_callback is not None:
                step_callback(state, rep)
        record = {"epoch": state.epoch, "lr": lr}
        for f in fields(LossReport):
            record[f.name] = float(np.mean([getattr(r, f.name) for r in reports]))
        state.history.append(record)
        new_records.append(record)
        log.info("adaptation epoch %d lr %.5f total %.4f cyc %.4f sem %.4f", state.epoch, lr,
                 record["total"], record["cyc"], record["sem"])
        state.epoch += 1
    return state, new_records


def transform(state: AdaptationState, image) -> Image:
    """Map a preprocessed target image to source appearance."""
    x = image_tensor(image, state.dtype)
    with torch.no_grad():
        out = from_unit(state.nets["G_ts"](to_unit(x)))[0, 0]
    spacing = image.spacing_mm if isinstance(image, Image) else 1.0
    return Image(out.clamp(0.0, 255.0).double().numpy(), spacing, "transformed")


# -------------------------------------------------------------- checkpoints

def save_adaptation(state: AdaptationState, path: str | Path) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION, "kind": "adaptation",
        "gen_cfg": asdict(state.gen_cfg), "disc_cfg": asdict(state.disc_cfg),
        "config": asdict(state.config), "semantic": state.semantic,
        "nets": {k: v.state_dict() for k, v in state.nets.items()},
        "optimizers": {k: v.state_dict() for k, v in state.optimizers.items()},
        "pools": {k: v.state_dict() for k, v in state.pools.items()},
        "rng": state.rng.bit_generator.state, "epoch": state.epoch, "history": state.history,
    }, path)


def load_adaptation(path: str | Path) -> AdaptationState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing adaptation checkpoint: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "adaptation" or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} adaptation checkpoint")
    cfg = AdaptationConfig(**{**ckpt["config"], "adam_betas": tuple(ckpt["config"]["adam_betas"])})
    dtype = next(iter(ckpt["nets"]["G_ts"].values())).dtype
    state = build_adaptation(GeneratorConfig(**ckpt["gen_cfg"]),
                             DiscriminatorConfig(**ckpt["disc_cfg"]), cfg,
                             semantic=ckpt["semantic"], dtype=dtype)
    for k, net in state.nets.items():
        net.load_state_dict(ckpt["nets"][k])
    for k, opt in state.optimizers.items():
        opt.load_state_dict(ckpt["optimizers"][k])
    for k, pool in state.pools.items():
        pool.load_state_dict(ckpt["pools"][k])
    state.rng.bit_generator.state = ckpt["rng"]
    state.epoch = ckpt["epoch"]
    state.history = ckpt["history"]
    return state
