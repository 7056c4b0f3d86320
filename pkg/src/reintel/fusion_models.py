"""Text-branch variants, average fusion, sigmoid head and the training loop.

Variant 1 runs parallel convolutions (one per filter size), pools each and
concatenates. Variant 2 stacks the parallel conv outputs along the channel
axis and feeds them through three more conv layers before pooling. Variant 3
is variant 2 with a shortcut around each extra layer.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from reintel import ReintelError
from reintel.binfmt import read_checkpoint, write_checkpoint
from reintel.encoders import AttentionPool, MetadataEncoder, encode_image, text_summary
from reintel.eval_ensemble import roc_auc
from reintel.seeding import derive_seed

logger = logging.getLogger(__name__)

VARIANTS = (1, 2, 3)

# torch notes that even kernels under padding="same" pad asymmetrically; that is intended here
warnings.filterwarnings("ignore", message="Using padding='same' with even kernel")


class ModelError(ReintelError, ValueError):
    pass


class TrainingError(ReintelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    fc_width: int = 512
    dropout: float = 0.2
    pool_size: int = 5
    conv_filters: int = 256
    filter_sizes: tuple[int, ...] = (2, 3, 4, 5)
    learning_rate: float = 2e-5
    batch_size: int = 16
    extra_conv_layers: int = 3
    extra_kernel_size: int = 3
    attention_dim: int = 64
    epochs: int = 10
    patience: int | None = 3
    seed: int = 0

    def __post_init__(self):
        positive = ("fc_width", "pool_size", "conv_filters", "batch_size", "extra_conv_layers",
                    "extra_kernel_size", "attention_dim", "epochs")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if not self.filter_sizes or min(self.filter_sizes) <= 0:
            raise ModelError("filter_sizes must be non-empty and positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError("dropout must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ModelError("learning_rate must be positive")
        if self.patience is not None and self.patience <= 0:
            raise ModelError("patience must be positive or None")
        object.__setattr__(self, "filter_sizes", tuple(self.filter_sizes))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "filter_sizes" in kwargs:
            kwargs["filter_sizes"] = tuple(kwargs["filter_sizes"])
        return cls(**kwargs)


def _check_length(length: int, pool_size: int):
    if length < pool_size:
        raise ModelError(
            f"sequence length {length} is shorter than the pooling window {pool_size}; raise max_len"
        )


class _ProjectionHead(nn.Module):
    """Flattened features -> fc_width with batch norm, ReLU and dropout."""

    def __init__(self, in_features: int, cfg: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(in_features, cfg.fc_width)
        self.bn = nn.BatchNorm1d(cfg.fc_width)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        return self.dropout(torch.relu(self.bn(self.fc(x))))


class ParallelConvBranch(nn.Module):
    """Variant 1 text branch."""

    def __init__(self, text_dim: int, max_len: int, cfg: ModelConfig):
        super().__init__()
        _check_length(max_len, cfg.pool_size)
        self.pool_size = cfg.pool_size
        self.convs = nn.ModuleList(
            nn.Conv1d(text_dim, cfg.conv_filters, f, padding="same") for f in cfg.filter_sizes
        )
        pooled_len = max_len // cfg.pool_size
        self.concat_width = len(cfg.filter_sizes) * pooled_len * cfg.conv_filters
        self.head = _ProjectionHead(self.concat_width, cfg)

    def features(self, x):
        """(B, D, L) -> concatenated pooled maps (B, concat_width)."""
        outs = [F.max_pool1d(torch.relu(conv(x)), self.pool_size).flatten(1) for conv in self.convs]
        return torch.cat(outs, dim=1)

    def forward(self, x):
        return self.head(self.features(x))


class ShortcutConv(nn.Module):
    """conv -> ReLU, plus the input added back (projected by a 1x1 conv if widths differ)."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int):
        super().__init__()
        self.conv = nn.Conv1d(in_ch, out_ch, kernel_size, padding="same")
        self.proj = None if in_ch == out_ch else nn.Conv1d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        shortcut = x if self.proj is None else self.proj(x)
        return torch.relu(self.conv(x)) + shortcut


class PlainConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int):
        super().__init__()
        self.conv = nn.Conv1d(in_ch, out_ch, kernel_size, padding="same")

    def forward(self, x):
        return torch.relu(self.conv(x))


class StackedConvBranch(nn.Module):
    """Variants 2 and 3: channel-stacked parallel convs, then a deeper conv stack."""

    def __init__(self, text_dim: int, max_len: int, cfg: ModelConfig, residual: bool):
        super().__init__()
        _check_length(max_len, cfg.pool_size)
        self.pool_size = cfg.pool_size
        self.residual = residual
        self.convs = nn.ModuleList(
            nn.Conv1d(text_dim, cfg.conv_filters, f, padding="same") for f in cfg.filter_sizes
        )
        block = ShortcutConv if residual else PlainConv
        widths = [len(cfg.filter_sizes) * cfg.conv_filters] + [cfg.conv_filters] * cfg.extra_conv_layers
        self.extra = nn.ModuleList(
            block(widths[i], widths[i + 1], cfg.extra_kernel_size) for i in range(cfg.extra_conv_layers)
        )
        self.flat_width = (max_len // cfg.pool_size) * cfg.conv_filters
        self.head = _ProjectionHead(self.flat_width, cfg)

    def stacked(self, x):
        return torch.cat([torch.relu(conv(x)) for conv in self.convs], dim=1)

    def features(self, x):
        h = self.stacked(x)
        for layer in self.extra:
            h = layer(h)
        return F.max_pool1d(h, self.pool_size).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


def build_text_branch(variant: int, text_dim: int, max_len: int, cfg: ModelConfig) -> nn.Module:
    if variant == 1:
        return ParallelConvBranch(text_dim, max_len, cfg)
    if variant in (2, 3):
        return StackedConvBranch(text_dim, max_len, cfg, residual=(variant == 3))
    raise ModelError(f"variant must be one of {VARIANTS}, got {variant!r}")


def fuse(text_v: torch.Tensor, image_v: torch.Tensor, meta_v: torch.Tensor) -> torch.Tensor:
    """Elementwise mean of the three modality vectors."""
    if not (text_v.shape == image_v.shape == meta_v.shape):
        raise ModelError(
            f"modality widths differ: {tuple(text_v.shape)}, {tuple(image_v.shape)}, {tuple(meta_v.shape)}"
        )
    return (text_v + image_v + meta_v) / 3.0


class FusionModel(nn.Module):
    """Text branch + attention-pooled image regions + metadata MLP -> sigmoid."""

    def __init__(
        self,
        variant: int,
        cfg: ModelConfig,
        text_dim: int,
        region_dim: int,
        n_features: int,
        max_len: int,
        backbone: nn.Module | None = None,
    ):
        super().__init__()
        self.variant = variant
        self.cfg = cfg
        self.dims = {"text_dim": text_dim, "region_dim": region_dim, "n_features": n_features, "max_len": max_len}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, "init"))
            self.text_branch = build_text_branch(variant, text_dim, max_len, cfg)
            self.image_attention = AttentionPool(text_dim, region_dim, cfg.attention_dim, cfg.fc_width)
            self.metadata = MetadataEncoder(n_features, cfg.fc_width)
            self.head = nn.Linear(cfg.fc_width, 1)
        self.backbone = backbone

    def modality_vectors(self, emb, mask, regions, features):
        emb = emb * mask.unsqueeze(-1).to(emb.dtype)
        if regions.ndim == 4:
            if self.backbone is None:
                raise ModelError("got raw images but the model has no backbone")
            regions = encode_image(regions, self.backbone)
        text_v = self.text_branch(emb.transpose(1, 2))
        image_v, _ = self.image_attention(regions, text_summary(emb, mask))
        meta_v = self.metadata(features)
        return text_v, image_v, meta_v

    def forward(self, emb, mask, regions, features) -> torch.Tensor:
        """Logits of shape (B,)."""
        return self.head(fuse(*self.modality_vectors(emb, mask, regions, features))).squeeze(-1)

    def predict_proba(self, emb, mask, regions, features) -> torch.Tensor:
        return torch.sigmoid(self.forward(emb, mask, regions, features))


@dataclass
class FusionData:
    """Encoded inputs for a set of posts, aligned by row."""

    ids: tuple[str, ...]
    embeddings: torch.Tensor  # (N, L, D_t)
    mask: torch.Tensor  # (N, L)
    regions: torch.Tensor  # (N, R, D_v), or raw images (N, 3, H, W) with a trainable backbone
    features: torch.Tensor  # (N, K)
    labels: torch.Tensor | None = None  # (N,) float

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "FusionData":
        index = torch.as_tensor(index, dtype=torch.long)
        return FusionData(
            ids=tuple(self.ids[i] for i in index.tolist()),
            embeddings=self.embeddings[index],
            mask=self.mask[index],
            regions=self.regions[index],
            features=self.features[index],
            labels=None if self.labels is None else self.labels[index],
        )

    def inputs(self):
        return self.embeddings, self.mask, self.regions, self.features


def _batches(n: int, batch_size: int, order: torch.Tensor | None = None) -> list[torch.Tensor]:
    order = torch.arange(n) if order is None else order
    chunks = list(torch.split(order, batch_size))
    # batch norm cannot train on a single row
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = torch.cat([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


@torch.no_grad()
def predict(model: FusionModel, data: FusionData, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for idx in _batches(len(data), batch_size):
        part = data.subset(idx)
        out.append(model.predict_proba(*part.inputs()))
    model.train(was_training)
    if not out:
        return np.zeros(0)
    return torch.cat(out).double().numpy()


def forward(model: FusionModel, data: FusionData) -> np.ndarray:
    """Inference-mode probabilities for every post in ``data``."""
    return predict(model, data)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_auc: float | None
    val_auc: float | None


@dataclass
class TrainResult:
    model: FusionModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    initial_loss: float = float("nan")


def _safe_auc(labels, scores):
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return None
    return roc_auc(labels, scores)


@torch.no_grad()
def evaluation_loss(model: FusionModel, data: FusionData) -> float:
    model.eval()
    logits = torch.cat([model(*data.subset(idx).inputs()) for idx in _batches(len(data), 256)])
    return float(F.binary_cross_entropy_with_logits(logits.double(), data.labels.double()))


def train(
    model: FusionModel,
    train_data: FusionData,
    val_data: FusionData | None,
    cfg: ModelConfig | None = None,
    track_train_auc: bool = False,
) -> TrainResult:
    """Adam on binary cross-entropy, early-stopped on validation ROC-AUC.

    Without validation data the training AUC is monitored instead. The model
    is returned holding the weights of the best monitored epoch.
    """
    cfg = cfg or model.cfg
    if len(train_data) == 0 or train_data.labels is None:
        raise TrainingError("training data must be non-empty and labeled")
    if val_data is not None and (len(val_data) == 0 or val_data.labels is None):
        raise TrainingError("validation data must be non-empty and labeled")
    monitor_train = val_data is None or _safe_auc(val_data.labels.numpy(), np.zeros(len(val_data))) is None
    if val_data is not None and monitor_train:
        logger.warning("validation set has a single class; monitoring training AUC instead")

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    shuffle_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "shuffle"))
    labels = train_data.labels.float()

    result = TrainResult(model=model, initial_loss=evaluation_loss(model, train_data))
    best_score = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "dropout"))
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = torch.randperm(len(train_data), generator=shuffle_gen)
            total, count = 0.0, 0
            for batch_no, idx in enumerate(_batches(len(train_data), cfg.batch_size, order)):
                part = train_data.subset(idx)
                logits = model(*part.inputs())
                loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch_no} "
                        f"(posts {', '.join(part.ids[:5])}{'...' if len(part) > 5 else ''}); "
                        f"logit range [{logits.min().item():.3g}, {logits.max().item():.3g}]"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)

            train_auc = None
            if track_train_auc or monitor_train:
                train_auc = _safe_auc(train_data.labels.numpy(), predict(model, train_data))
            val_auc = None
            if val_data is not None:
                val_auc = _safe_auc(val_data.labels.numpy(), predict(model, val_data))
            result.history.append(EpochRecord(epoch, total / count, train_auc, val_auc))
            logger.info("epoch %d loss %.5f train_auc %s val_auc %s", epoch, total / count, train_auc, val_auc)

            score = train_auc if monitor_train else val_auc
            score = -math.inf if score is None else score
            if score > best_score:
                best_score, stale = score, 0
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    break
    model.load_state_dict(best_state)
    model.eval()
    return result


def write_history(path: str | Path, history: Sequence[EpochRecord]) -> None:
    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    lines = ["epoch,loss,train_auc,val_auc"]
    lines += [f"{r.epoch},{r.loss:.6f},{fmt(r.train_auc)},{fmt(r.val_auc)}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_model(path: str | Path, model: FusionModel, extra: dict | None = None) -> None:
    manifest = {"variant": model.variant, "cfg": model.cfg.to_dict(), **model.dims, **(extra or {})}
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    write_checkpoint(path, manifest, tensors)


def load_model(path: str | Path, backbone: nn.Module | None = None) -> tuple[FusionModel, dict]:
    manifest, tensors = read_checkpoint(path)
    model = FusionModel(
        manifest["variant"],
        ModelConfig.from_dict(manifest["cfg"]),
        manifest["text_dim"],
        manifest["region_dim"],
        manifest["n_features"],
        manifest["max_len"],
        backbone=backbone,
    )
    state = model.state_dict()
    for name, arr in tensors.items():
        if name.startswith("backbone.") and backbone is None:
            raise ModelError(f"{path}: checkpoint holds backbone weights; pass a matching backbone")
        if name not in state:
            raise ModelError(f"{path}: unexpected tensor {name!r}")
        state[name] = torch.from_numpy(arr).to(state[name].dtype).reshape(state[name].shape)
    model.load_state_dict(state)
    model.eval()
    return model, manifest
