"""Stage orchestration: preprocess -> featurize -> train -> predict -> evaluate/ensemble.

Every stage reads its inputs from the dataset files or from earlier stages'
artifacts in ``out_dir`` and writes its own artifacts there. Re-running a
stage on unchanged inputs rewrites byte-identical files.

Configuration is a flat ``key = value`` text file. Values from the
environment (``REINTEL_<KEY>``) override the file, and command-line flags
override both.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from reintel import ReintelError
from reintel.dataset_io import (
    Prediction,
    RawPost,
    Schema,
    load_dataset,
    read_predictions,
    split_dataset,
    write_predictions,
)
from reintel.encoders import (
    HashTextEncoder,
    HuggingFaceTextEncoder,
    PrecomputedTextEncoder,
    StubBackbone,
    VGG19Backbone,
    encode_image,
    encode_text,
    select_image,
)
from reintel.eval_ensemble import ensemble_average, evaluation_report, write_report
from reintel.fusion_models import (
    FusionData,
    FusionModel,
    ModelConfig,
    load_model,
    predict as model_predict,
    save_model,
    train as train_model,
    write_history,
)
from reintel.seeding import derive_seed
from reintel.tabular_features import (
    FeatureConfig,
    build_feature_matrix,
    compute_user_histories,
    read_feature_matrix,
    standardize,
    write_feature_matrix,
    write_sidecar,
)
from reintel.text_preprocess import (
    HAPPY_TOKEN,
    SAD_TOKEN,
    EmoticonMap,
    SubprocessSegmenter,
    TextStats,
    preprocess,
    text_statistics,
    whitespace_segmenter,
)

logger = logging.getLogger(__name__)

STAGES = ("preprocess", "featurize", "train", "predict", "evaluate", "ensemble")
ENV_PREFIX = "REINTEL_"

PREPROCESSED = "preprocessed.csv"
FEATURES = "features.csv"
SIDECAR = "features.sidecar"
SPLITS = "splits.csv"


class ConfigError(ReintelError, ValueError):
    pass


class StageError(ReintelError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


@dataclass
class PipelineConfig:
    train_path: str = ""
    test_path: str = ""
    out_dir: str = "runs"
    seed: int = 0
    variant: int = 1
    train_fraction: float = 0.8
    # schema: comma-separated field=header pairs, e.g. "text=post_message,id=post_id"
    schema: str = ""
    delimiter: str = ","
    # preprocessing
    emoticon_path: str = ""
    happy_token: str = HAPPY_TOKEN
    sad_token: str = SAD_TOKEN
    segmenter_cmd: str = ""
    # features
    drop_columns: tuple[str, ...] = ()
    mice_rounds: int = 10
    # encoders
    text_encoder: str = "stub"  # stub | precomputed | hf:<model name>
    embeddings_dir: str = ""
    max_len: int = 256
    text_dim: int = 768
    image_backbone: str = "stub"  # stub | vgg19 | vgg19-pretrained
    image_size: int = 224
    finetune_backbone: bool = False
    # model
    fc_width: int = 512
    dropout: float = 0.2
    pool_size: int = 5
    conv_filters: int = 256
    filter_sizes: tuple[int, ...] = (2, 3, 4, 5)
    learning_rate: float = 2e-5
    batch_size: int = 16
    extra_conv_layers: int = 3
    epochs: int = 10
    patience: int = 3
    inputs: tuple[str, ...] = ()

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: f.type for f in dataclasses.fields(cls)}

    def updated(self, values: Mapping[str, str]) -> "PipelineConfig":
        """Return a copy with string values parsed into the fields' types."""
        kwargs = {}
        types = self.field_types()
        for key, raw in values.items():
            key = key.strip().lower().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                elif kind == "bool":
                    kwargs[key] = _parse_bool(raw)
                elif kind == "tuple[int, ...]":
                    kwargs[key] = tuple(int(v) for v in _parse_list(raw))
                elif kind == "tuple[str, ...]":
                    kwargs[key] = _parse_list(raw)
                else:
                    kwargs[key] = str(raw).strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        return dataclasses.replace(self, **kwargs)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            fc_width=self.fc_width,
            dropout=self.dropout,
            pool_size=self.pool_size,
            conv_filters=self.conv_filters,
            filter_sizes=self.filter_sizes,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            extra_conv_layers=self.extra_conv_layers,
            epochs=self.epochs,
            patience=self.patience,
            seed=derive_seed(self.seed, f"model-{self.variant}"),
        )

    def dataset_schema(self) -> Schema:
        columns = {}
        for pair in _parse_list(self.schema):
            name, _, header = pair.partition("=")
            columns[name.strip()] = header.strip()
        return Schema(columns=columns, delimiter=self.delimiter)


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    known = PipelineConfig.field_types()
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in known:
                out[name] = value
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    environ: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Defaults < config file < environment < explicit overrides.

    Relative dataset paths in a config file are resolved against the file's
    directory.
    """
    cfg = PipelineConfig()
    if path is not None:
        values = read_config_file(path)
        base = Path(path).resolve().parent
        for key in ("train_path", "test_path", "out_dir", "emoticon_path", "embeddings_dir"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
        cfg = cfg.updated(values)
    cfg = cfg.updated(env_overrides(environ))
    if overrides:
        cfg = cfg.updated({k: v for k, v in overrides.items() if v is not None})
    return cfg


def write_config_file(path: str | Path, values: Mapping[str, object]) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# helpers


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path.name}; run the '{stage}' stage first")
    return path


def _load(path: str, cfg: PipelineConfig, what: str) -> list[RawPost]:
    if not path:
        raise ConfigError(f"{what} is not set")
    if not Path(path).exists():
        raise StageError(f"{what} {path} does not exist")
    return load_dataset(path, cfg.dataset_schema())


def _segmenter(cfg: PipelineConfig):
    if cfg.segmenter_cmd:
        return SubprocessSegmenter(cfg.segmenter_cmd.split())
    return whitespace_segmenter


def _emoticons(cfg: PipelineConfig) -> EmoticonMap:
    if cfg.emoticon_path:
        return EmoticonMap.from_file(cfg.emoticon_path, cfg.happy_token, cfg.sad_token)
    return EmoticonMap.default(cfg.happy_token, cfg.sad_token)


def _text_encoder(cfg: PipelineConfig):
    if cfg.text_encoder == "stub":
        return HashTextEncoder(cfg.text_dim, seed=derive_seed(cfg.seed, "text-encoder"))
    if cfg.text_encoder == "precomputed":
        return PrecomputedTextEncoder(cfg.embeddings_dir, cfg.text_dim)
    if cfg.text_encoder.startswith("hf:"):
        return HuggingFaceTextEncoder(cfg.text_encoder[3:], max_length=cfg.max_len)
    raise ConfigError(f"unknown text_encoder {cfg.text_encoder!r}")


def _backbone(cfg: PipelineConfig):
    if cfg.image_backbone == "stub":
        return StubBackbone(
            (cfg.image_size, cfg.image_size), seed=derive_seed(cfg.seed, "backbone"), finetune=cfg.finetune_backbone
        )
    if cfg.image_backbone in ("vgg19", "vgg19-pretrained"):
        weights = "DEFAULT" if cfg.image_backbone == "vgg19-pretrained" else None
        return VGG19Backbone(weights=weights, finetune=cfg.finetune_backbone)
    raise ConfigError(f"unknown image_backbone {cfg.image_backbone!r}")


def _read_csv_rows(path: Path) -> list[dict[str, str]]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# stages


def stage_preprocess(cfg: PipelineConfig) -> Path:
    out = _out(cfg)
    splits = [("train", _load(cfg.train_path, cfg, "train_path"))]
    if cfg.test_path:
        splits.append(("test", _load(cfg.test_path, cfg, "test_path")))
    emoticons = _emoticons(cfg)
    segmenter = _segmenter(cfg)
    path = out / PREPROCESSED
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("id", "source", "text") + TextStats.FIELDS)
            for source, posts in splits:
                for p in posts:
                    clean = preprocess(p.text, segmenter, emoticons, text_id=p.id)
                    writer.writerow((p.id, source, clean) + text_statistics(p.text).as_tuple())
    finally:
        if isinstance(segmenter, SubprocessSegmenter):
            segmenter.close()
    return path


def _read_preprocessed(cfg: PipelineConfig) -> dict[str, dict[str, str]]:
    rows = _read_csv_rows(_require(Path(cfg.out_dir) / PREPROCESSED, "preprocess"))
    return {r["id"]: r for r in rows}


def stage_featurize(cfg: PipelineConfig) -> Path:
    out = _out(cfg)
    pre = _read_preprocessed(cfg)
    train_posts = _load(cfg.train_path, cfg, "train_path")
    test_posts = _load(cfg.test_path, cfg, "test_path") if cfg.test_path else []
    # a test file that repeats training posts (overfit checks) adds no new rows
    train_ids = {p.id for p in train_posts}
    test_posts = [p for p in test_posts if p.id not in train_ids]
    fit_posts, val_posts = split_dataset(train_posts, cfg.train_fraction, derive_seed(cfg.seed, "split"))
    fit_ids = {p.id for p in fit_posts}

    all_posts = train_posts + test_posts
    missing = [p.id for p in all_posts if p.id not in pre]
    if missing:
        raise StageError(f"posts {missing[:3]} are not in {PREPROCESSED}; re-run 'preprocess'")
    stats = [TextStats(*(int(pre[p.id][f]) for f in TextStats.FIELDS)) for p in all_posts]

    histories = compute_user_histories(fit_posts)
    feat_cfg = FeatureConfig(
        drop_columns=cfg.drop_columns, mice_rounds=cfg.mice_rounds, seed=derive_seed(cfg.seed, "mice")
    )
    raw = build_feature_matrix(all_posts, histories, stats, feat_cfg)
    fit_rows = np.array([p.id in fit_ids for p in all_posts])
    fitted = standardize(dataclasses.replace(raw, values=raw.values[fit_rows]), fit=True)
    scaled = standardize(raw, fit=False, params=fitted.standardization_params)

    write_feature_matrix(out / FEATURES, scaled)
    write_sidecar(out / SIDECAR, scaled.column_names, fitted.standardization_params, histories)
    with (out / SPLITS).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("id", "split"))
        for p in train_posts:
            writer.writerow((p.id, "train" if p.id in fit_ids else "val"))
        for p in test_posts:
            writer.writerow((p.id, "test"))
    return out / FEATURES


def encode_posts(
    posts: Sequence[RawPost],
    cfg: PipelineConfig,
    texts: Mapping[str, str],
    features: Mapping[str, np.ndarray],
    backbone,
    base_dir: Path,
) -> FusionData:
    """Turn posts into model-ready tensors (token embeddings, regions, features)."""
    encoder = _text_encoder(cfg)
    resolution = (cfg.image_size, cfg.image_size)
    embs, masks, images, feats = [], [], [], []
    for p in posts:
        te = encode_text(texts[p.id].split(), encoder, cfg.max_len, post_id=p.id)
        embs.append(te.matrix)
        masks.append(te.mask)
        images.append(torch.from_numpy(select_image(p, resolution, cfg.seed, base_dir)))
        feats.append(torch.as_tensor(features[p.id], dtype=torch.float32))
    image_batch = torch.stack(images) if images else torch.zeros(0, 3, *resolution)
    if backbone.finetune:
        regions = image_batch
    else:
        with torch.no_grad():
            regions = torch.cat([encode_image(chunk, backbone) for chunk in torch.split(image_batch, 32)])
    labels = None
    if all(p.label is not None for p in posts):
        labels = torch.tensor([float(p.label) for p in posts])
    return FusionData(
        ids=tuple(p.id for p in posts),
        embeddings=torch.stack(embs),
        mask=torch.stack(masks),
        regions=regions,
        features=torch.stack(feats),
        labels=labels,
    )


def _features_by_id(cfg: PipelineConfig):
    fm = read_feature_matrix(_require(Path(cfg.out_dir) / FEATURES, "featurize"))
    return {rid: row for rid, row in zip(fm.row_ids, fm.values)}, fm.column_names


def _splits(cfg: PipelineConfig) -> dict[str, str]:
    rows = _read_csv_rows(_require(Path(cfg.out_dir) / SPLITS, "featurize"))
    return {r["id"]: r["split"] for r in rows}


def stage_train(cfg: PipelineConfig) -> Path:
    out = _out(cfg)
    texts = {k: v["text"] for k, v in _read_preprocessed(cfg).items()}
    features, columns = _features_by_id(cfg)
    splits = _splits(cfg)
    posts = _load(cfg.train_path, cfg, "train_path")
    fit_posts = [p for p in posts if splits.get(p.id) == "train"]
    val_posts = [p for p in posts if splits.get(p.id) == "val"]
    if not fit_posts:
        raise StageError(f"no training rows in {SPLITS}; re-run 'featurize'")

    torch.set_num_threads(1)
    backbone = _backbone(cfg)
    base = Path(cfg.train_path).parent
    train_data = encode_posts(fit_posts, cfg, texts, features, backbone, base)
    val_data = encode_posts(val_posts, cfg, texts, features, backbone, base) if val_posts else None

    mcfg = cfg.model_config()
    region_dim = backbone.out_channels
    model = FusionModel(
        cfg.variant,
        mcfg,
        cfg.text_dim,
        region_dim,
        len(columns),
        cfg.max_len,
        backbone=backbone if backbone.finetune else None,
    )
    result = train_model(model, train_data, val_data, mcfg)
    ckpt = out / f"model_v{cfg.variant}.ckpt"
    save_model(
        ckpt,
        result.model,
        {"columns": list(columns), "seed": cfg.seed, "best_epoch": result.best_epoch, "text_encoder": cfg.text_encoder},
    )
    write_history(out / f"history_v{cfg.variant}.csv", result.history)
    return ckpt


def stage_predict(cfg: PipelineConfig) -> Path:
    out = _out(cfg)
    ckpt = _require(out / f"model_v{cfg.variant}.ckpt", "train")
    texts = {k: v["text"] for k, v in _read_preprocessed(cfg).items()}
    features, columns = _features_by_id(cfg)
    path = cfg.test_path or cfg.train_path
    posts = _load(path, cfg, "test_path")
    missing = [p.id for p in posts if p.id not in features or p.id not in texts]
    if missing:
        raise StageError(f"posts {missing[:3]} lack features; re-run 'preprocess' and 'featurize'")

    torch.set_num_threads(1)
    backbone = _backbone(cfg)
    model, manifest = load_model(ckpt, backbone=backbone if backbone.finetune else None)
    if manifest.get("columns") != list(columns):
        raise StageError("feature columns changed since training; re-run 'train'")
    data = encode_posts(posts, cfg, texts, features, backbone, Path(path).parent)
    scores = model_predict(model, data)
    pred_path = out / f"v{cfg.variant}.pred"
    write_predictions(pred_path, [Prediction(i, float(s)) for i, s in zip(data.ids, scores)])
    return pred_path


def _resolve_inputs(cfg: PipelineConfig, default: Sequence[str]) -> list[Path]:
    names = list(cfg.inputs) or list(default)
    paths = []
    for name in names:
        p = Path(name)
        if not p.is_absolute() and not p.exists():
            p = Path(cfg.out_dir) / name
        paths.append(_require(p, "predict"))
    return paths


def stage_evaluate(cfg: PipelineConfig) -> Path:
    out = _out(cfg)
    path = cfg.test_path or cfg.train_path
    labels = {p.id: p.label for p in _load(path, cfg, "test_path")}
    reports = []
    for pred_path in _resolve_inputs(cfg, [f"v{cfg.variant}.pred"]):
        preds = read_predictions(pred_path)
        unlabeled = [p.id for p in preds if labels.get(p.id) is None]
        if unlabeled:
            raise StageError(f"no labels for posts {unlabeled[:3]} in {path}")
        report = evaluation_report([labels[p.id] for p in preds], [p.score for p in preds])
        report_path = out / (pred_path.stem + ".eval")
        write_report(report_path, report)
        reports.append(report_path)
    return reports[-1]


def stage_ensemble(cfg: PipelineConfig) -> Path:
    out = _out(cfg)
    if not cfg.inputs:
        raise ConfigError("ensemble needs --inputs a.pred,b.pred")
    sets = [read_predictions(p) for p in _resolve_inputs(cfg, [])]
    ids = [p.id for p in sets[0]]
    aligned = []
    for s in sets:
        by_id = {p.id: p.score for p in s}
        if set(by_id) != set(ids) or len(s) != len(ids):
            raise StageError("prediction files cover different posts")
        aligned.append([by_id[i] for i in ids])
    mean = ensemble_average(aligned)
    path = out / "ensemble.pred"
    write_predictions(path, [Prediction(i, float(s)) for i, s in zip(ids, mean)])
    return path


STAGE_FUNCS = {
    "preprocess": stage_preprocess,
    "featurize": stage_featurize,
    "train": stage_train,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
    "ensemble": stage_ensemble,
}


def run_stage(stage: str, cfg: PipelineConfig) -> Path:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    logger.info("running stage %s", stage)
    return STAGE_FUNCS[stage](cfg)
