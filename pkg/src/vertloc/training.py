"""Training loops and checkpoints for both networks."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .nets import DetectionNet, IdentificationNet, detection_loss, identification_loss
from .sampler import DETECTION_SHAPE, IDENTIFICATION_SHAPE, Patch

log = logging.getLogger(__name__)

DEVICE_ENV = "VERTLOC_DEVICE"


class TrainingDiverged(RuntimeError):
    pass


class PatchShapeError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 50
    bn_momentum: float = 0.1
    class_weights: tuple[float, float] = (0.1, 0.9)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.channels = tuple(int(c) for c in self.channels)
        if self.learning_rate <= 0 or self.batch_size < 1 or self.bn_momentum <= 0:
            raise ValueError(f"non-positive hyperparameter in {self}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if min(self.class_weights) <= 0 or not math.isclose(sum(self.class_weights), 1.0):
            raise ValueError(f"class weights must be positive and sum to 1, got {self.class_weights}")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be positive")

    @classmethod
    def detection(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 16, "epochs": 50, "channels": (16, 32, 64, 128), **kw})

    @classmethod
    def identification(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 32, "epochs": 35, "channels": (32, 64, 128, 256), **kw})


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.epochs.append(record)

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            for record in self.epochs:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def dice(pred: np.ndarray | torch.Tensor, target: np.ndarray | torch.Tensor) -> float:
    """Foreground Dice of two binary maps; 1.0 when both are empty."""
    p = torch.as_tensor(pred).bool()
    t = torch.as_tensor(target).bool()
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2 * (p & t).sum() / denom)


def _set_bn_momentum(net: torch.nn.Module, momentum: float) -> None:
    for m in net.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.momentum = momentum


def _stack(patches: Sequence[Patch], kind: str, shape) -> tuple[torch.Tensor, torch.Tensor]:
    for p in patches:
        if p.kind != kind or p.image.shape != tuple(shape):
            raise PatchShapeError(
                f"{kind} training expects {kind} patches of image shape {tuple(shape)}, "
                f"got {p.kind} patch with shape {p.image.shape}")
    images = torch.from_numpy(np.stack([p.image for p in patches]).astype(np.float32))
    labels = torch.from_numpy(np.stack([p.label for p in patches]).astype(np.int64))
    if kind == "detection":
        images = images[:, None]
    return images, labels


def _fit(net, patches, cfg, kind, shape, loss_fn, metric_fn, start_epoch=0, optimizer_state=None):
    if not patches:
        raise ValueError("no training patches")
    torch.manual_seed(cfg.seed)
    dev = device()
    net.to(dev)
    _set_bn_momentum(net, cfg.bn_momentum)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    rng = np.random.default_rng(cfg.seed + start_epoch)
    train_log = TrainLog()
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        net.train()
        order = rng.permutation(len(patches))
        total, batches = 0.0, 0
        metrics: dict[str, float] = {}
        for b in range(0, len(order), cfg.batch_size):
            images, labels = _stack([patches[i] for i in order[b:b + cfg.batch_size]], kind, shape)
            images, labels = images.to(dev), labels.to(dev)
            out = net(images)
            loss = loss_fn(out, labels)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"{kind} loss became {loss.item()} at epoch {epoch}, batch {b // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            for k, v in metric_fn(out.detach(), labels).items():
                metrics[k] = metrics.get(k, 0.0) + v
            batches += 1
        record = {"epoch": epoch + 1, "loss": total / batches, **{k: v / batches for k, v in metrics.items()}}
        train_log.append(record)
        log.info("%s epoch %d: %s", kind, epoch + 1, record)
    net.eval()
    return net, train_log, opt


def _detection_metric(out, labels):
    return dict(dice=dice(out.argmax(1) == 1, labels == 1))


def _identification_metric(out, labels):
    return dict(masked_l1=float(identification_loss(out[:, 0], labels.float())))


def train_detection(patches: Sequence[Patch], cfg: TrainConfig | None = None, net: DetectionNet | None = None,
                    start_epoch: int = 0, optimizer_state=None, shape=None):
    """Train (or continue training) the detection net. Returns ``(net, log, optimizer)``."""
    cfg = cfg or TrainConfig.detection()
    torch.manual_seed(cfg.seed)
    net = net or DetectionNet(cfg.channels)
    shape = tuple(shape or (patches[0].image.shape if patches else DETECTION_SHAPE))
    w = cfg.class_weights
    return _fit(net, patches, cfg, "detection", shape,
                lambda out, lab: detection_loss(out, lab, w), _detection_metric, start_epoch, optimizer_state)


def train_identification(patches: Sequence[Patch], cfg: TrainConfig | None = None,
                         net: IdentificationNet | None = None, start_epoch: int = 0,
                         optimizer_state=None, shape=None):
    """Train (or continue training) the identification net on masked L1."""
    cfg = cfg or TrainConfig.identification()
    torch.manual_seed(cfg.seed)
    net = net or IdentificationNet(cfg.channels)
    shape = tuple(shape or (patches[0].image.shape if patches else IDENTIFICATION_SHAPE))
    return _fit(net, patches, cfg, "identification", shape,
                lambda out, lab: identification_loss(out[:, 0], lab.float()), _identification_metric,
                start_epoch, optimizer_state)


def save_checkpoint(path: str | Path, net, cfg: TrainConfig, which: str, epoch: int, optimizer=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "which": which,
        "state_dict": net.state_dict(),
        "config": asdict(cfg),
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "version": __version__,
    }, path)


def load_checkpoint(path: str | Path):
    """Returns ``(net, cfg, checkpoint_dict)`` with the net in eval mode."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig(**ckpt["config"])
    net = DetectionNet(cfg.channels) if ckpt["which"] == "detection" else IdentificationNet(cfg.channels)
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return net, cfg, ckpt
