"""Training loop for CCPV and the comparison frameworks.

Frameworks:

* ``ccpv``: left/right pairs of one identity are flipped, all four views are
  embedded, and the loss is ``w_ce * CE + w_cc * CC``.
* ``naive``: same pairs, cross-entropy only, left and right share a label.
* ``traditional``: one hand only, cross-entropy with per-palm labels.
* ``lrpr``: right images are flipped to left orientation before CE training.
  This baseline is a comparison harness, not a faithful reproduction.
"""

import csv
import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .datasets import Chirality, epoch_pair_batches, load_image
from .errors import InvalidFrameworkData, NonFiniteLoss
from .losses import CCBatch, LossWeights, cc_terms, cross_entropy, total_loss
from .model import BackboneConfig, Checkpoint, classify, create_backbone, create_head, save_checkpoint
from .transforms import flip, preprocess

logger = logging.getLogger(__name__)


class Framework(str, enum.Enum):
    CCPV = "ccpv"
    NAIVE = "naive"
    TRADITIONAL = "traditional"
    LRPR = "lrpr"


CC_TERM_NAMES = ("l_fr", "fl_r", "r_l", "fr_fl")


@dataclass
class TrainConfig:
    framework: Framework = Framework.CCPV
    epochs: int = 50
    batch_identities: int = 64
    learning_rate: float = 1e-3
    tau: float = 0.07
    beta: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ce_on_all_views: bool = True
    as_written_denominator: bool = True
    cc_terms: tuple = CC_TERM_NAMES
    traditional_chirality: Chirality = Chirality.LEFT
    standardize: bool = False

    def __post_init__(self):
        self.framework = Framework(self.framework)
        self.traditional_chirality = Chirality.parse(self.traditional_chirality)
        self.cc_terms = tuple(self.cc_terms)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_identities < 2:
            raise ValueError("batch_identities must be >= 2")
        unknown = set(self.cc_terms) - set(CC_TERM_NAMES)
        if unknown:
            raise ValueError(f"unknown CC terms: {sorted(unknown)}")

    def to_flat(self):
        """Flat key-value form used for config files and checkpoints."""
        return {
            "framework": self.framework.value,
            "epochs": self.epochs,
            "batch_identities": self.batch_identities,
            "learning_rate": self.learning_rate,
            "tau": self.tau,
            "beta": self.beta,
            "w_ce": self.weights.w_ce,
            "w_cc": self.weights.w_cc,
            "seed": self.seed,
            "arch_name": self.backbone.arch_name,
            "embedding_dim": self.backbone.embedding_dim,
            "image_side": self.backbone.image_side,
            "arch_params": dict(self.backbone.params),
            "ce_on_all_views": self.ce_on_all_views,
            "as_written_denominator": self.as_written_denominator,
            "cc_terms": list(self.cc_terms),
            "traditional_chirality": self.traditional_chirality.value,
            "standardize": self.standardize,
        }

    @classmethod
    def from_flat(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)} | {
            "w_ce", "w_cc", "arch_name", "embedding_dim", "image_side", "arch_params"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        backbone = BackboneConfig(
            arch_name=d.pop("arch_name", "compact-cnn"),
            embedding_dim=int(d.pop("embedding_dim", 128)),
            image_side=int(d.pop("image_side", 128)),
            params=dict(d.pop("arch_params", {})),
        )
        weights = LossWeights(float(d.pop("w_ce", 1.0)), float(d.pop("w_cc", 1.0)))
        return cls(backbone=backbone, weights=weights, **d)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_flat(json.load(fh))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_flat(), indent=2) + "\n", encoding="utf-8")
        return path


@dataclass
class TrainReport:
    epochs: list
    steps: list
    checkpoint_path: Path = None
    log_path: Path = None
    wall_seconds: float = 0.0

    def write_log(self, path):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "l_ce", "l_cc", "total"])
            for r in self.steps:
                w.writerow([r["epoch"], r["step"], repr(r["l_ce"]), repr(r["l_cc"]), repr(r["total"])])
        return path


class ImageBank:
    """Preprocessed images cached by path, served as ``(N, 1, S, S)`` tensors."""

    def __init__(self, side, standardize=False, dtype=torch.float32):
        self.side = side
        self.standardize = standardize
        self.dtype = dtype
        self._cache = {}

    def array(self, sample):
        key = str(sample.image_path)
        if key not in self._cache:
            self._cache[key] = preprocess(load_image(sample.image_path), self.side, self.standardize)
        return self._cache[key]

    def tensor(self, samples):
        arr = np.stack([self.array(s) for s in samples])[:, None]
        return torch.as_tensor(arr, dtype=self.dtype)


def identity_labels(cfg, train_set):
    if cfg.framework is Framework.TRADITIONAL:
        side = cfg.traditional_chirality
        return sorted({f"{s.identity}_{side.value}" for s in train_set.samples if s.chirality is side})
    return sorted(train_set.identities())


def step_losses(cfg, model, head, x_l, x_r, y):
    """Loss components for one identity-paired batch.

    ``x_l``/``x_r`` are ``(n, 1, S, S)`` tensors and ``y`` the shared label
    indices. Each view is embedded in its own forward pass. Returns
    ``(l_ce, l_cc, total)`` tensors.
    """
    fw = cfg.framework
    zero = torch.zeros((), dtype=x_l.dtype)
    if fw is Framework.NAIVE:
        e_l, e_r = model(x_l), model(x_r)
        l_ce = cross_entropy(classify(head, torch.cat([e_l, e_r])), torch.cat([y, y]))
        return l_ce, zero, total_loss(l_ce, zero, cfg.weights)
    if fw is Framework.LRPR:
        e_l, e_rf = model(x_l), model(flip(x_r))
        l_ce = cross_entropy(classify(head, torch.cat([e_l, e_rf])), torch.cat([y, y]))
        return l_ce, zero, total_loss(l_ce, zero, cfg.weights)
    if fw is not Framework.CCPV:
        raise InvalidFrameworkData(f"{fw.value} does not train on identity pairs")

    x_fl, x_fr = flip(x_l), flip(x_r)
    e_l, e_r, e_fl, e_fr = model(x_l), model(x_r), model(x_fl), model(x_fr)
    if cfg.ce_on_all_views:
        l_ce = cross_entropy(classify(head, torch.cat([e_l, e_r, e_fl, e_fr])), y.repeat(4))
    else:
        l_ce = cross_entropy(classify(head, torch.cat([e_l, e_r])), torch.cat([y, y]))
    terms = cc_terms(CCBatch(e_l, e_r, e_fl, e_fr, y, cfg.tau, cfg.as_written_denominator))
    l_cc = sum(terms[k] for k in cfg.cc_terms) / 4.0 if cfg.cc_terms else zero
    return l_ce, l_cc, total_loss(l_ce, l_cc, cfg.weights)


def _traditional_batches(train_set, cfg, rng):
    side = cfg.traditional_chirality
    samples = [s for s in train_set.samples if s.chirality is side]
    size = 2 * cfg.batch_identities
    order = rng.permutation(len(samples))
    for start in range(0, len(order), size):
        yield [samples[i] for i in order[start:start + size]]


def _check_data(cfg, train_set):
    if cfg.framework is Framework.TRADITIONAL:
        side = cfg.traditional_chirality
        if not any(s.chirality is side for s in train_set.samples):
            raise InvalidFrameworkData(f"traditional training needs {side.name} samples")
        return
    bad = train_set.missing_hands()
    if bad:
        raise InvalidFrameworkData(
            f"{cfg.framework.value} training needs both hands per identity; missing for: "
            + ", ".join(bad[:10]) + (" ..." if len(bad) > 10 else ""))
    if len(train_set.identities()) < 2:
        raise InvalidFrameworkData("need at least two identities")


def train(cfg, train_set, out_dir=None):
    """Train an embedding model under ``cfg.framework``.

    Returns ``(Checkpoint, TrainReport)``. With ``out_dir`` set, writes
    ``checkpoint.pt``, ``train_log.csv`` and ``config.json`` there.
    """
    _check_data(cfg, train_set)
    t0 = time.perf_counter()
    labels = identity_labels(cfg, train_set)
    label_index = {k: i for i, k in enumerate(labels)}
    model = create_backbone(cfg.backbone, cfg.seed)
    head = create_head(cfg.backbone.embedding_dim, len(labels), cfg.seed + 1)
    model.train()
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=cfg.learning_rate)
    bank = ImageBank(cfg.backbone.image_side, cfg.standardize)
    rng = np.random.default_rng(cfg.seed)

    steps, epochs = [], []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        acc = {"l_ce": 0.0, "l_cc": 0.0, "total": 0.0}
        n_steps = 0
        if cfg.framework is Framework.TRADITIONAL:
            batches = _traditional_batches(train_set, cfg, rng)
        else:
            batches = epoch_pair_batches(train_set, cfg.batch_identities, rng)
        for batch in batches:
            if cfg.framework is Framework.TRADITIONAL:
                x = bank.tensor(batch)
                y = torch.tensor([label_index[f"{s.identity}_{s.chirality.value}"] for s in batch])
                l_ce = cross_entropy(classify(head, model(x)), y)
                l_cc = torch.zeros(())
                try:
                    total = total_loss(l_ce, l_cc, cfg.weights)
                except NonFiniteLoss as exc:
                    raise NonFiniteLoss(f"epoch {epoch} step {step}: {exc}") from exc
            else:
                if len(batch) < 2:
                    continue
                x_l = bank.tensor([t[0] for t in batch])
                x_r = bank.tensor([t[1] for t in batch])
                y = torch.tensor([label_index[t[2]] for t in batch])
                try:
                    l_ce, l_cc, total = step_losses(cfg, model, head, x_l, x_r, y)
                except NonFiniteLoss as exc:
                    raise NonFiniteLoss(f"epoch {epoch} step {step}: {exc}") from exc
            opt.zero_grad()
            total.backward()
            opt.step()
            row = {"epoch": epoch, "step": step, "l_ce": l_ce.item(), "l_cc": l_cc.item(),
                   "total": total.item()}
            steps.append(row)
            for k in acc:
                acc[k] += row[k]
            n_steps += 1
            step += 1
        epochs.append({"epoch": epoch, **{k: v / max(n_steps, 1) for k, v in acc.items()}})
        logger.info("epoch %d: l_ce=%.4f l_cc=%.4f total=%.4f", epoch,
                    epochs[-1]["l_ce"], epochs[-1]["l_cc"], epochs[-1]["total"])

    model.eval()
    head.eval()
    ckpt = Checkpoint(model, head, labels, cfg.to_flat())
    report = TrainReport(epochs, steps, wall_seconds=time.perf_counter() - t0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.checkpoint_path = save_checkpoint(ckpt, out_dir / "checkpoint.pt")
        report.log_path = report.write_log(out_dir / "train_log.csv")
        cfg.to_json(out_dir / "config.json")
    return ckpt, report


def losses_are_finite(report):
    return all(math.isfinite(r[k]) for r in report.epochs for k in ("l_ce", "l_cc", "total"))
