"""Embedding backbones, the linear identity head and checkpoint I/O."""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointFormatError, DimMismatch, ShapeMismatch, UnknownArch

CHECKPOINT_VERSION = 1

_REGISTRY = {}


def register_backbone(name):
    """Class decorator adding a backbone to the registry under ``name``.

    A backbone is an ``nn.Module`` constructed as ``cls(cfg)`` whose forward
    maps ``(N, 1, S, S)`` images to raw ``(N, D)`` features; normalization is
    applied by :class:`EmbeddingNet`.
    """
    def deco(cls):
        _REGISTRY[name] = cls
        return cls
    return deco


def registered_backbones():
    return sorted(_REGISTRY)


@dataclass
class BackboneConfig:
    arch_name: str = "compact-cnn"
    embedding_dim: int = 128
    image_side: int = 128
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.image_side < 1:
            raise ValueError("image_side must be positive")
        # JSON hands sequences back as lists; keep configs comparable after a round trip
        self.params = {k: tuple(v) if isinstance(v, list) else v for k, v in self.params.items()}


@register_backbone("compact-cnn")
class CompactCNN(nn.Module):
    """Four conv blocks, global average pooling and a linear projection.

    ``params`` may set ``widths`` (four channel counts) and ``batch_norm``.
    """

    def __init__(self, cfg):
        super().__init__()
        widths = list(cfg.params.get("widths", (16, 32, 64, 64)))
        if len(widths) != 4:
            raise ValueError("compact-cnn expects four block widths")
        use_bn = bool(cfg.params.get("batch_norm", True))
        blocks, c_in = [], 1
        for c_out in widths:
            blocks += [nn.Conv2d(c_in, c_out, 3, padding=1, bias=not use_bn)]
            if use_bn:
                blocks.append(nn.BatchNorm2d(c_out))
            blocks += [nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c_in = c_out
        self.features = nn.Sequential(*blocks)
        self.proj = nn.Linear(c_in, cfg.embedding_dim)

    def forward(self, x):
        h = self.features(x)
        return self.proj(h.mean(dim=(2, 3)))


class EmbeddingNet(nn.Module):
    """Wraps a registered backbone and L2-normalizes its output."""

    def __init__(self, cfg):
        super().__init__()
        if cfg.arch_name not in _REGISTRY:
            raise UnknownArch(f"unknown backbone {cfg.arch_name!r}; "
                              f"registered: {', '.join(registered_backbones())}")
        self.cfg = cfg
        self.backbone = _REGISTRY[cfg.arch_name](cfg)

    def forward(self, x):
        return F.normalize(self.backbone(x), dim=1, eps=1e-12)


class ClassifierHead(nn.Module):
    """Bias-free linear head; ``weight`` is stored as a ``D x C`` matrix."""

    def __init__(self, embedding_dim, n_classes):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(embedding_dim, n_classes))
        nn.init.normal_(self.weight, std=embedding_dim ** -0.5)

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def forward(self, templates):
        return classify(self, templates)


def create_backbone(cfg, seed):
    """Build an :class:`EmbeddingNet` with parameters drawn from a private generator."""
    if cfg.arch_name not in _REGISTRY:
        raise UnknownArch(f"unknown backbone {cfg.arch_name!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EmbeddingNet(cfg)


def create_head(embedding_dim, n_classes, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ClassifierHead(embedding_dim, n_classes)


def _image_side(model):
    return model.cfg.image_side


def embed(model, images):
    """Embed a batch of preprocessed images into unit-norm templates.

    ``images`` is an ``(N, 1, S, S)`` tensor or a sequence of ``(S, S)``
    arrays. Gradients flow when called outside ``torch.no_grad``.
    """
    if not isinstance(images, torch.Tensor):
        arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
        images = torch.as_tensor(arr[:, None], dtype=next(model.parameters()).dtype)
    side = _image_side(model)
    if images.ndim != 4 or images.shape[1] != 1 or tuple(images.shape[2:]) != (side, side):
        raise ShapeMismatch(f"expected (N, 1, {side}, {side}) images, got {tuple(images.shape)}")
    return model(images)


def classify(head, templates):
    """Logits ``templates @ W`` for a ``D x C`` head."""
    if templates.ndim != 2 or templates.shape[1] != head.weight.shape[0]:
        raise DimMismatch(f"template dim {tuple(templates.shape)} does not match head "
                          f"dim {head.weight.shape[0]}")
    return templates @ head.weight


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: EmbeddingNet
    head: ClassifierHead
    labels: list
    train_config: dict = field(default_factory=dict)

    @property
    def backbone_config(self):
        return self.model.cfg


def save_checkpoint(ckpt, path):
    """Serialize to a single torch archive with a format version field."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "ccpv-checkpoint",
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(ckpt.model.cfg),
        "embedding_dim": ckpt.model.cfg.embedding_dim,
        "labels": list(ckpt.labels),
        "model_state": ckpt.model.state_dict(),
        "head_state": ckpt.head.state_dict(),
        "train_config": dict(ckpt.train_config),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise CheckpointFormatError(f"cannot load checkpoint {path}: {exc}") from exc
    if payload.get("format") != "ccpv-checkpoint":
        raise CheckpointFormatError(f"{path} is not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = BackboneConfig(**payload["backbone"])
    model = create_backbone(cfg, seed=0)
    model.load_state_dict(payload["model_state"])
    labels = list(payload["labels"])
    head = ClassifierHead(cfg.embedding_dim, len(labels))
    head.load_state_dict(payload["head_state"])
    model.eval()
    head.eval()
    return Checkpoint(model, head, labels, payload.get("train_config", {}))
