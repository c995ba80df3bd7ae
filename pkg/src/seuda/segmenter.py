"""Source-domain segmenter: dilated residual encoder with a four-branch
dilated-convolution head and bilinear upsampling."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NUM_CLASSES, Dataset, Image

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CE_EPS = 1e-7


class FrozenModelError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class SegmenterConfig:
    base_channels: int = 32
    stage_blocks: list[int] = field(default_factory=lambda: [3, 4, 23, 3])
    dilated_stage_rates: list[int] = field(default_factory=lambda: [2, 4])
    head_rates: list[int] = field(default_factory=lambda: [6, 12, 18, 24])
    num_classes: int = NUM_CLASSES
    working_size: int = 512

    def validate(self):
        if len(self.head_rates) != 4:
            raise ValueError("head_rates must list exactly 4 dilation rates")
        if any(r < 1 for r in list(self.head_rates) + list(self.dilated_stage_rates)):
            raise ValueError("dilation rates must be >= 1")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if not self.stage_blocks or any(b < 1 for b in self.stage_blocks):
            raise ValueError("stage_blocks must be a non-empty list of positive counts")
        if len(self.dilated_stage_rates) >= len(self.stage_blocks):
            raise ValueError("the first stage cannot be dilated")
        if self.working_size // self.output_stride < 2:
            raise ValueError(f"downsampling by {self.output_stride} exceeds input size "
                             f"{self.working_size}")

    @property
    def output_stride(self) -> int:
        n_strided = len(self.stage_blocks) - len(self.dilated_stage_rates) - 1
        return 2 ** n_strided


def toy_segmenter_config(working_size: int = 64) -> SegmenterConfig:
    return SegmenterConfig(base_channels=8, stage_blocks=[1, 1, 1, 1], dilated_stage_rates=[2, 4],
                           head_rates=[6, 12, 18, 24], working_size=working_size)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.norm1 = nn.InstanceNorm2d(cout, affine=True)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, padding=dilation, dilation=dilation, bias=False)
        self.norm2 = nn.InstanceNorm2d(cout, affine=True)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                      nn.InstanceNorm2d(cout, affine=True))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class SegmenterNet(nn.Module):
    """Maps a batch of [0,255] images (N,1,H,W) to class probabilities (N,C,H,W)."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Sequential(nn.Conv2d(1, c, 3, padding=1, bias=False),
                                  nn.InstanceNorm2d(c, affine=True), nn.ReLU())
        n_dilated = len(cfg.dilated_stage_rates)
        n_plain = len(cfg.stage_blocks) - n_dilated
        stages = []
        cin = c
        for i, blocks in enumerate(cfg.stage_blocks):
            if i == 0:
                stride, dilation, cout = 1, 1, c
            elif i < n_plain:
                stride, dilation, cout = 2, 1, cin * 2
            else:
                stride, dilation, cout = 1, cfg.dilated_stage_rates[i - n_plain], cin * 2
            layers = [ResBlock(cin, cout, stride, dilation)]
            layers += [ResBlock(cout, cout, 1, dilation) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.ModuleList(
            nn.Conv2d(cin, cfg.num_classes, 3, padding=r, dilation=r) for r in cfg.head_rates)

    def logits(self, x):
        size = x.shape[-2:]
        feats = self.stages(self.stem(x / 127.5 - 1.0))
        out = sum(branch(feats) for branch in self.head)
        return F.interpolate(out, size=size, mode="bilinear", align_corners=False)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def seeded_init(module: nn.Module, seed: int, std: float | None = None):
    """Draw conv weights from a private generator; ``std=None`` means He-normal."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            s = std if std is not None else (2.0 / m.weight[0].numel()) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * s)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass
class SegmenterModel:
    config: SegmenterConfig
    net: SegmenterNet
    frozen: bool = False

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def freeze(self) -> "SegmenterModel":
        self.frozen = True
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        return self

    def unfrozen_copy(self) -> "SegmenterModel":
        net = copy.deepcopy(self.net)
        for p in net.parameters():
            p.requires_grad_(True)
        return SegmenterModel(copy.deepcopy(self.config), net, frozen=False)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype


def build_segmenter(config: SegmenterConfig, seed: int = 0, dtype=torch.float32) -> SegmenterModel:
    config.validate()
    net = SegmenterNet(config)
    seeded_init(net, seed)
    return SegmenterModel(config, net.to(dtype))


def image_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack Images or arrays into an (N,1,H,W) tensor."""
    if isinstance(images, (Image, np.ndarray)):
        images = [images]
    arrs = [im.pixels if isinstance(im, Image) else np.asarray(im) for im in images]
    return torch.as_tensor(np.stack(arrs)[:, None], dtype=dtype)


def segment(model: SegmenterModel, image) -> np.ndarray:
    """Probability map (H, W, C) for one preprocessed image."""
    x = image_tensor(image, model.dtype)
    size = model.config.working_size
    if x.shape[-2:] != (size, size):
        raise ValueError(f"size mismatch: image {tuple(x.shape[-2:])}, model expects {size}x{size}")
    with torch.no_grad():
        probs = model.net(x)[0]
    return probs.permute(1, 2, 0).cpu().numpy()


def predict_labels(model: SegmenterModel, images, batch_size: int = 8) -> list[np.ndarray]:
    out = []
    for i in range(0, len(images), batch_size):
        x = image_tensor(images[i:i + batch_size], model.dtype)
        with torch.no_grad():
            probs = model.net(x)
        out += [p.argmax(0).numpy().astype(np.uint8) for p in probs]
    return out


def cross_entropy(prob, gt, eps: float = CE_EPS):
    """Mean over pixels of -log p(true class); probabilities are clipped to [eps, 1].

    Accepts numpy (H,W,C)/(H,W) or torch (N,C,H,W)/(N,H,W) inputs and returns
    a value of the same kind.
    """
    if isinstance(prob, torch.Tensor):
        if prob.dim() != 4 or prob.shape[:1] + prob.shape[2:] != gt.shape:
            raise ValueError(f"shape mismatch: probs {tuple(prob.shape)} vs labels {tuple(gt.shape)}")
        picked = prob.gather(1, gt.long().unsqueeze(1)).squeeze(1)
        return -torch.log(picked.clamp(eps, 1.0)).mean()
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt)
    if prob.shape[:2] != gt.shape:
        raise ValueError(f"shape mismatch: probs {prob.shape} vs labels {gt.shape}")
    picked = np.take_along_axis(prob, gt[..., None].astype(np.int64), axis=-1)[..., 0]
    return float(-np.log(np.clip(picked, eps, 1.0)).mean())


@dataclass
class TrainOptions:
    epochs: int = 60
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 1


def mean_foreground_dice(model: SegmenterModel, dataset: Dataset) -> float:
    from .metrics import evaluate

    preds = predict_labels(model, dataset.images)
    return evaluate(preds, dataset.labels, setting_tag="S-test").mean_dice()


def train_segmenter(model: SegmenterModel, train: Dataset, val: Dataset, opts: TrainOptions):
    """SGD with momentum on pixel-wise cross-entropy; returns the best-on-val model."""
    if model.frozen:
        raise FrozenModelError("cannot train a frozen segmenter")
    for ds in (train, val):
        for case in ds:
            if case.label is None:
                raise ValueError(f"unlabeled item {case.case_id!r} in segmenter training data")
    history = []
    if opts.epochs == 0:
        return model, history
    torch.manual_seed(opts.seed)
    rng = np.random.default_rng(opts.seed)
    net = model.net
    optim = torch.optim.SGD(net.parameters(), lr=opts.lr, momentum=opts.momentum)
    x_all = image_tensor(train.images, model.dtype)
    y_all = torch.as_tensor(np.stack(train.labels).astype(np.int64))
    best_dice, best_state = -1.0, copy.deepcopy(net.state_dict())
    for epoch in range(opts.epochs):
        net.train()
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), opts.batch_size):
            idx = torch.as_tensor(order[i:i + opts.batch_size])
            loss = cross_entropy(net(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite cross-entropy at epoch {epoch}, batch {i}")
            optim.zero_grad()
            loss.backward()
            optim.step()
            losses.append(loss.item())
        net.eval()
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        if (epoch + 1) % opts.eval_every == 0 or epoch == opts.epochs - 1:
            dice = mean_foreground_dice(model, val)
            record["val_dice"] = dice
            if dice > best_dice:
                best_dice, best_state = dice, copy.deepcopy(net.state_dict())
        history.append(record)
        log.info("segmenter epoch %d loss %.4f val_dice %s", epoch, record["loss"],
                 record.get("val_dice"))
    net.load_state_dict(best_state)
    net.eval()
    return model, history


def save_segmenter(model: SegmenterModel, path: str | Path) -> None:
    torch.save({"version": CHECKPOINT_VERSION, "kind": "segmenter",
                "config": asdict(model.config), "frozen": model.frozen,
                "state": model.net.state_dict()}, path)


def load_segmenter(path: str | Path) -> SegmenterModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing segmenter checkpoint: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "segmenter" or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} segmenter checkpoint")
    config = SegmenterConfig(**ckpt["config"])
    net = SegmenterNet(config).to(next(iter(ckpt["state"].values())).dtype)
    net.load_state_dict(ckpt["state"])
    net.eval()
    model = SegmenterModel(config, net)
    return model.freeze() if ckpt["frozen"] else model
