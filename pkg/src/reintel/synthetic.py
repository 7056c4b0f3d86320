"""Synthetic posts with planted signal, for desk-scale end-to-end runs.

Unreliable posts lean towards alarm keywords, prolific unreliable users and
a bright image patch; reliable posts towards neutral keywords, reliable users
and a dark patch. Counts and timestamps are blanked at configurable rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from reintel.dataset_io import RawPost, write_dataset
from reintel.seeding import derive_seed

FILLER = (
    "hôm nay người dân thành phố đã nhận được thông tin về tình hình dịch bệnh "
    "mới nhất tại địa phương theo nguồn tin từ cơ quan chức năng và báo chí trong nước"
).split()
UNRELIABLE_WORDS = ("sốc", "khẩn_cấp", "lừa_đảo", "chia_sẻ_ngay", "bí_mật", "tin_đồn")
RELIABLE_WORDS = ("bộ_y_tế", "thông_báo", "chính_thức", "báo_cáo", "hướng_dẫn", "cập_nhật")
DECORATIONS = (":)", ":(", "=]]", "Coooool", "!!!", "???", "#tintuc", "http://t.co/x", "ncov", "NCoV", "*****")
EPOCH_2020 = 1577836800


@dataclass(frozen=True)
class SyntheticSpec:
    missing_rate_counts: float = 0.2
    missing_rate_timestamp: float = 0.2
    image_rate: float = 0.75
    max_images: int = 3
    image_size: int = 32
    signal: float = 0.85
    n_users: int | None = None
    words_per_post: tuple[int, int] = (8, 24)


def _make_image(rng: np.random.Generator, bright: bool, size: int) -> np.ndarray:
    img = rng.integers(60, 120, size=(size, size, 3), dtype=np.uint8)
    half = size // 2
    top, left = rng.integers(0, size - half + 1, size=2)
    value = 235 if bright else 10
    img[top:top + half, left:left + half] = value
    return img


def generate_posts(n: int, seed: int, spec: SyntheticSpec = SyntheticSpec(), prefix: str = "p"):
    """Return (posts, images) where images maps a relative path to an RGB array."""
    if n < 8:
        raise ValueError("need at least 8 posts")
    rng = np.random.default_rng(derive_seed(seed, "synthetic"))
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    rng.shuffle(labels)

    n_users = spec.n_users or max(4, n // 4)
    user_lean = np.arange(n_users) % 2  # odd users mostly post unreliable content
    posts, images = [], {}
    for i, label in enumerate(labels.tolist()):
        pid = f"{prefix}{i:05d}"
        agrees = rng.random() < spec.signal

        lean = label if rng.random() < spec.signal else 1 - label
        candidates = np.flatnonzero(user_lean == lean)
        user = f"u{int(rng.choice(candidates)):03d}"

        lo, hi = spec.words_per_post
        words = list(rng.choice(FILLER, size=int(rng.integers(lo, hi + 1))))
        keyword_pool = UNRELIABLE_WORDS if (label == 1) == agrees else RELIABLE_WORDS
        for _ in range(int(rng.integers(1, 3))):
            words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(keyword_pool)))
        if rng.random() < 0.5:
            words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(DECORATIONS)))
        text = " ".join(words)
        if rng.random() < 0.2:
            text = text.replace(" ", "\n", 1)

        base = 40 if label == 1 else 15
        likes, shares, comments = (int(v) for v in rng.poisson([base * 3, base, base * 2]))
        likes, shares, comments = (
            None if rng.random() < spec.missing_rate_counts else v for v in (likes, shares, comments)
        )
        ts = EPOCH_2020 + int(rng.integers(0, 365 * 86400))
        timestamp = None if rng.random() < spec.missing_rate_timestamp else float(ts)

        paths = []
        if rng.random() < spec.image_rate:
            bright = (label == 1) == (rng.random() < spec.signal)
            for k in range(int(rng.integers(1, spec.max_images + 1))):
                rel = f"images/{pid}_{k}.png"
                images[rel] = _make_image(rng, bright, spec.image_size)
                paths.append(rel)

        posts.append(
            RawPost(
                id=pid,
                user_id=user,
                text=text,
                timestamp=timestamp,
                num_likes=likes,
                num_shares=shares,
                num_comments=comments,
                image_paths=tuple(paths),
                label=int(label),
            )
        )
    return posts, images


def generate_synthetic(
    n: int,
    seed: int,
    out_dir: str | Path,
    spec: SyntheticSpec = SyntheticSpec(),
    filename: str = "posts.csv",
    prefix: str = "p",
) -> Path:
    """Write ``n`` posts to ``out_dir/filename`` with images under ``out_dir/images``.

    Image paths in the file are relative to ``out_dir``.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    posts, images = generate_posts(n, seed, spec, prefix)
    for rel, arr in images.items():
        Image.fromarray(arr).save(out_dir / rel, format="PNG")
    path = out_dir / filename
    write_dataset(path, posts)
    return path
