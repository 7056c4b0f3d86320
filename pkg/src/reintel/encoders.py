"""Per-modality encoders: token embeddings, image regions, metadata.

Text encoders and image backbones are swappable. The hash-based text encoder
and the small convolutional backbone are deterministic stand-ins used for
desk-scale runs; ``HuggingFaceTextEncoder`` and ``VGG19Backbone`` wrap
pretrained models when those are available locally.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from reintel import ReintelError
from reintel.binfmt import read_matrix
from reintel.dataset_io import RawPost
from reintel.seeding import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 256
DEFAULT_TEXT_DIM = 768
DEFAULT_IMAGE_SIZE = (224, 224)
MODALITY_WIDTH = 512
ATTENTION_DIM = 64
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class EncoderError(ReintelError):
    def __init__(self, message: str, post_id: str | None = None):
        self.post_id = post_id
        if post_id is not None:
            message = f"post {post_id}: {message}"
        super().__init__(message)


@dataclass
class TokenEmbeddings:
    matrix: torch.Tensor  # (L, D_t); padded rows are zero
    mask: torch.Tensor  # (L,) bool, True for real tokens

    @property
    def length(self) -> int:
        return int(self.matrix.shape[0])


class TextEncoder(Protocol):
    dim: int

    def __call__(self, tokens: Sequence[str], post_id: str | None = None) -> np.ndarray | torch.Tensor:
        """Return one ``dim``-wide row per token."""
        ...


class HashTextEncoder:
    """Frozen token embeddings derived from a hash of each token.

    Every token maps to a fixed pseudo-random unit-scale vector; a light
    neighbour average gives each row some context. Identical tokens in
    identical contexts always produce identical rows.
    """

    def __init__(self, dim: int = DEFAULT_TEXT_DIM, seed: int = 0, context_weight: float = 0.25):
        self.dim = dim
        self.seed = seed
        self.context_weight = context_weight
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim).astype(np.float32)
            self._cache[token] = vec
        return vec

    def __call__(self, tokens, post_id=None) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim), dtype=np.float32)
        base = np.stack([self._vector(t) for t in tokens])
        if self.context_weight and len(tokens) > 1:
            padded = np.pad(base, ((1, 1), (0, 0)))
            neighbours = (padded[:-2] + padded[2:]) / 2.0
            base = base + self.context_weight * neighbours
        return base.astype(np.float32)


class PrecomputedTextEncoder:
    """Reads ``<directory>/<post_id>.rmat`` token-embedding matrices."""

    def __init__(self, directory: str | Path, dim: int):
        self.directory = Path(directory)
        self.dim = dim

    def __call__(self, tokens, post_id=None) -> np.ndarray:
        if post_id is None:
            raise EncoderError("precomputed embeddings are looked up by post id")
        matrix = read_matrix(self.directory / f"{post_id}.rmat")
        if matrix.shape[1] != self.dim:
            raise EncoderError(f"embedding width {matrix.shape[1]} != {self.dim}", post_id)
        return matrix


class HuggingFaceTextEncoder:
    """Contextual embeddings from a pretrained transformer (e.g. a Vietnamese BERT).

    Requires ``transformers`` and a locally cached model. With ``finetune``
    the model stays in train mode and gradients flow; otherwise it runs under
    ``torch.no_grad`` in eval mode.
    """

    def __init__(self, model_name: str, max_length: int = DEFAULT_MAX_LEN, finetune: bool = False):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name)
        self.dim = int(self.model.config.hidden_size)
        self.max_length = max_length
        self.finetune = finetune
        self.model.train(finetune)

    def __call__(self, tokens, post_id=None) -> torch.Tensor:
        enc = self.tokenizer(
            " ".join(tokens), truncation=True, max_length=self.max_length, return_tensors="pt"
        )
        with torch.set_grad_enabled(self.finetune):
            out = self.model(**enc).last_hidden_state[0]
        return out if self.finetune else out.detach()


def encode_text(
    tokens: Sequence[str], encoder: TextEncoder, max_len: int = DEFAULT_MAX_LEN, post_id: str | None = None
) -> TokenEmbeddings:
    """Embed and truncate/zero-pad to exactly ``max_len`` rows."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    try:
        rows = encoder(list(tokens), post_id=post_id)
    except EncoderError:
        raise
    except Exception as exc:
        raise EncoderError(f"text encoder failed: {exc}", post_id) from exc
    rows = torch.as_tensor(rows, dtype=torch.float32)
    if rows.ndim != 2 or rows.shape[1] != encoder.dim:
        raise EncoderError(f"encoder returned shape {tuple(rows.shape)}, expected (n, {encoder.dim})", post_id)
    n = min(rows.shape[0], max_len)
    matrix = torch.zeros(max_len, encoder.dim, dtype=torch.float32)
    matrix[:n] = rows[:n]
    mask = torch.zeros(max_len, dtype=torch.bool)
    mask[:n] = True
    return TokenEmbeddings(matrix, mask)


def text_summary(embeddings: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted mean over the token axis: (B, L, D), (B, L) -> (B, D)."""
    weights = mask.to(embeddings.dtype).unsqueeze(-1)
    total = (embeddings * weights).sum(dim=1)
    return total / weights.sum(dim=1).clamp(min=1.0)


def _load_image(path: Path, resolution: tuple[int, int]) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB").resize((resolution[1], resolution[0]), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def select_image(
    post: RawPost,
    resolution: tuple[int, int] = DEFAULT_IMAGE_SIZE,
    seed: int = 0,
    base_dir: str | Path | None = None,
) -> np.ndarray:
    """Pick one of the post's images and return it as a normalized (3, H, W) array.

    Posts without images (or whose chosen image cannot be read) get an
    all-zero blank image. The choice depends only on ``seed`` and the post id.
    """
    blank = np.zeros((3, resolution[0], resolution[1]), dtype=np.float32)
    if not post.image_paths:
        return blank
    rng = random.Random(derive_seed(seed, f"image-choice/{post.id}"))
    chosen = Path(post.image_paths[rng.randrange(len(post.image_paths))])
    if base_dir is not None and not chosen.is_absolute():
        chosen = Path(base_dir) / chosen
    try:
        return _load_image(chosen, resolution)
    except (OSError, ValueError) as exc:
        warnings.warn(f"post {post.id}: cannot read image {chosen} ({exc}); using blank image", RuntimeWarning)
        return blank


class StubBackbone(nn.Module):
    """Small seeded convolutional backbone standing in for a pretrained CNN.

    Three stride-2 conv layers; at 32x32 input the final map is 4x4, i.e. 16
    regions. Frozen unless ``finetune`` is set.
    """

    def __init__(self, resolution=(32, 32), channels=(16, 32, 64), seed: int = 0, finetune: bool = False):
        super().__init__()
        self.resolution = tuple(resolution)
        layers = []
        in_ch = 3
        for ch in channels:
            layers += [nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            in_ch = ch
        self.features = nn.Sequential(*layers)
        self.out_channels = in_ch
        gen = torch.Generator().manual_seed(derive_seed(seed, "backbone"))
        with torch.no_grad():
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    bound = math.sqrt(6.0 / (m.in_channels * 9))
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
        self.requires_grad_(finetune)
        self.finetune = finetune

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)


class VGG19Backbone(nn.Module):
    """VGG-19 convolutional trunk; a 224x224 input yields a 7x7x512 map.

    ``weights`` is passed to ``torchvision.models.vgg19`` (``None`` gives an
    untrained network, ``"DEFAULT"`` the ImageNet weights if cached).
    """

    def __init__(self, weights=None, finetune: bool = True):
        super().__init__()
        from torchvision.models import vgg19

        self.features = vgg19(weights=weights).features
        self.resolution = DEFAULT_IMAGE_SIZE
        self.out_channels = 512
        self.requires_grad_(finetune)
        self.finetune = finetune

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)


def encode_image(image, backbone: nn.Module) -> torch.Tensor:
    """Final conv map flattened to region vectors: (3,H,W) -> (R, D_v), batched too."""
    x = torch.as_tensor(image, dtype=torch.float32)
    single = x.ndim == 3
    if single:
        x = x.unsqueeze(0)
    if tuple(x.shape[-2:]) != tuple(backbone.resolution):
        raise EncoderError(
            f"image resolution {tuple(x.shape[-2:])} does not match backbone {tuple(backbone.resolution)}"
        )
    fmap = backbone(x)
    regions = fmap.flatten(2).transpose(1, 2)  # (B, h*w, C)
    return regions[0] if single else regions


class AttentionPool(nn.Module):
    """Text-conditioned scaled dot-product attention over image regions.

    query = W_q t, key_i = W_k r_i, weight = softmax(query . key_i / sqrt(d_a)),
    output = sum_i weight_i (W_v r_i + b_v). The output is a convex combination
    of the projected regions.
    """

    def __init__(self, text_dim: int, region_dim: int, attn_dim: int = ATTENTION_DIM, out_dim: int = MODALITY_WIDTH):
        super().__init__()
        self.query = nn.Linear(text_dim, attn_dim, bias=False)
        self.key = nn.Linear(region_dim, attn_dim, bias=False)
        self.value = nn.Linear(region_dim, out_dim)
        self.attn_dim = attn_dim

    def forward(self, regions: torch.Tensor, summary: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q = self.query(summary).unsqueeze(1)  # (B, 1, d_a)
        k = self.key(regions)  # (B, R, d_a)
        scores = (q * k).sum(-1) / math.sqrt(self.attn_dim)
        weights = torch.softmax(scores, dim=-1)
        pooled = torch.bmm(weights.unsqueeze(1), self.value(regions)).squeeze(1)
        return pooled, weights


def attention_pool(regions: torch.Tensor, summary: torch.Tensor, pool: AttentionPool):
    """Unbatched convenience wrapper: (R, D_v), (D_t,) -> ((out,), (R,))."""
    pooled, weights = pool(regions.unsqueeze(0), summary.unsqueeze(0))
    return pooled[0], weights[0]


class MetadataEncoder(nn.Module):
    """Fully-connected layer + batch norm + ReLU over the standardized features."""

    def __init__(self, n_features: int, out_dim: int = MODALITY_WIDTH):
        super().__init__()
        self.n_features = n_features
        self.fc = nn.Linear(n_features, out_dim)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.n_features:
            raise EncoderError(f"metadata width {features.shape[-1]} != {self.n_features}")
        return torch.relu(self.bn(self.fc(features)))


def encode_metadata(features, encoder: MetadataEncoder) -> torch.Tensor:
    x = torch.as_tensor(features, dtype=torch.float32)
    single = x.ndim == 1
    if single:
        x = x.unsqueeze(0)
    out = encoder(x)
    return out[0] if single else out
