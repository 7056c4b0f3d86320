import dataclasses

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from finite_diff import max_relative_error
from reintel.fusion_models import (
    FusionData,
    FusionModel,
    ModelConfig,
    ModelError,
    ShortcutConv,
    StackedConvBranch,
    TrainingError,
    _batches,
    build_text_branch,
    fuse,
    load_model,
    predict,
    save_model,
    train,
    write_history,
)

TINY = ModelConfig(fc_width=8, conv_filters=4, dropout=0.0, attention_dim=2, batch_size=4, epochs=3, seed=1)


def random_data(n, L=10, D=6, R=3, Dv=4, K=5, seed=0, labels=True):
    g = torch.Generator().manual_seed(seed)
    mask = torch.ones(n, L, dtype=torch.bool)
    mask[:, L - 2:] = False
    emb = torch.randn(n, L, D, generator=g) * mask.unsqueeze(-1)
    y = (torch.arange(n) % 2).float() if labels else None
    return FusionData(
        ids=tuple(f"p{i}" for i in range(n)),
        embeddings=emb,
        mask=mask,
        regions=torch.randn(n, R, Dv, generator=g),
        features=torch.randn(n, K, generator=g),
        labels=y,
    )


def tiny_model(variant, cfg=TINY, L=10):
    return FusionModel(variant, cfg, text_dim=6, region_dim=4, n_features=5, max_len=L)


class TestTextBranchShapes:
    def test_variant1_shape_arithmetic(self):
        cfg = ModelConfig()
        branch = build_text_branch(1, 768, 100, cfg).eval()
        x = torch.randn(2, 768, 100)
        assert branch.convs[0](x).shape == (2, 256, 100)
        assert F.max_pool1d(branch.convs[0](x), 5).shape == (2, 256, 20)
        assert branch.features(x).shape == (2, 20480)
        assert branch(x).shape == (2, 512)

    def test_variant2_shape_arithmetic(self):
        branch = build_text_branch(2, 768, 100, ModelConfig()).eval()
        x = torch.randn(2, 768, 100)
        assert branch.stacked(x).shape == (2, 1024, 100)
        h = branch.stacked(x)
        for layer in branch.extra:
            h = layer(h)
        assert h.shape == (2, 256, 100)
        assert branch.features(x).shape == (2, 20 * 256)
        assert branch(x).shape == (2, 512)

    def test_variant3_projection_rule(self):
        branch = build_text_branch(3, 768, 100, ModelConfig())
        first, second, third = branch.extra
        assert isinstance(first, ShortcutConv)
        assert first.proj is not None and first.proj.kernel_size == (1,)
        assert (first.proj.in_channels, first.proj.out_channels) == (1024, 256)
        assert second.proj is None and third.proj is None

    @pytest.mark.parametrize("variant", [1, 2, 3])
    @pytest.mark.parametrize("L", [5, 32])
    def test_width_512(self, variant, L):
        branch = build_text_branch(variant, 16, L, ModelConfig()).eval()
        assert branch(torch.randn(3, 16, L)).shape == (3, 512)

    def test_short_sequence_rejected(self):
        with pytest.raises(ModelError, match="max_len"):
            build_text_branch(1, 16, 4, ModelConfig())

    def test_unknown_variant(self):
        with pytest.raises(ModelError):
            build_text_branch(4, 16, 10, ModelConfig())


def test_shortcut_identity_when_conv_zero():
    layer = ShortcutConv(8, 8, 3)
    with torch.no_grad():
        layer.conv.weight.zero_()
        layer.conv.bias.zero_()
    x = torch.randn(2, 8, 11)
    torch.testing.assert_close(layer(x), x)


def test_variant3_zero_extra_convs_reduce_to_projection():
    cfg = dataclasses.replace(TINY, conv_filters=4)
    branch = StackedConvBranch(6, 10, cfg, residual=True).eval()
    with torch.no_grad():
        for layer in branch.extra:
            layer.conv.weight.zero_()
            layer.conv.bias.zero_()
    x = torch.randn(3, 6, 10)
    stacked = branch.stacked(x)
    expected = branch.head(F.max_pool1d(branch.extra[0].proj(stacked), cfg.pool_size).flatten(1))
    torch.testing.assert_close(branch(x), expected)


def test_variant2_zero_embeddings_deterministic():
    branch = build_text_branch(2, 6, 10, TINY).eval()
    zeros = torch.zeros(2, 6, 10)
    assert torch.equal(branch(zeros), branch(zeros))


class TestFuse:
    def test_identical(self):
        v = torch.randn(512)
        torch.testing.assert_close(fuse(v, v, v), v)

    def test_basis(self):
        a, b, c = torch.zeros(3, 512)
        a[0], b[1], c[2] = 1, 1, 1
        out = fuse(a, b, c)
        torch.testing.assert_close(out[:3], torch.full((3,), 1 / 3))
        assert not out[3:].any()

    def test_zero(self):
        assert not fuse(*torch.zeros(3, 512)).any()

    def test_mismatch(self):
        with pytest.raises(ModelError):
            fuse(torch.zeros(512), torch.zeros(512), torch.zeros(256))

    def test_permutation_and_linearity(self):
        a, b, c = torch.randn(3, 512, dtype=torch.float64)
        torch.testing.assert_close(fuse(a, b, c), fuse(c, a, b))
        torch.testing.assert_close(fuse(2.5 * a, 2.5 * b, 2.5 * c), 2.5 * fuse(a, b, c))


class TestForward:
    def test_zero_head_gives_half(self):
        model = tiny_model(2).eval()
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        p = predict(model, random_data(6))
        np.testing.assert_array_equal(p, 0.5)

    @pytest.mark.parametrize("variant", [1, 2, 3])
    def test_probability_range_and_determinism(self, variant):
        model = tiny_model(variant)
        data = random_data(7)
        p1, p2 = predict(model, data), predict(model, data)
        assert np.all((p1 > 0) & (p1 < 1))
        assert np.array_equal(p1, p2)

    def test_batch_independent_inference(self):
        model = tiny_model(3)
        data = random_data(9)
        together = predict(model, data, batch_size=9)
        alone = np.array([predict(model, data.subset([i]))[0] for i in range(9)])
        np.testing.assert_allclose(alone, together, atol=1e-6)

    def test_masked_rows_ignored(self):
        model = tiny_model(1)
        data = random_data(4)
        noisy = dataclasses.replace(data, embeddings=data.embeddings + 5.0 * (~data.mask).unsqueeze(-1))
        np.testing.assert_array_equal(predict(model, data), predict(model, noisy))

    def test_raw_images_need_backbone(self):
        model = tiny_model(1)
        data = random_data(2)
        with pytest.raises(ModelError, match="backbone"):
            model(data.embeddings, data.mask, torch.zeros(2, 3, 8, 8), data.features)

    def test_same_seed_same_init(self):
        a, b = tiny_model(3), tiny_model(3)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)


@pytest.mark.parametrize("variant", [1, 2, 3])
def test_full_forward_gradients(variant):
    cfg = dataclasses.replace(TINY, conv_filters=4, fc_width=8)
    torch.manual_seed(variant)
    model = FusionModel(variant, cfg, text_dim=6, region_dim=4, n_features=5, max_len=8).double().train()
    data = random_data(4, L=8, D=6)
    emb, mask, regions, feats = data.embeddings.double(), data.mask, data.regions.double(), data.features.double()
    y = data.labels.double()

    def loss():
        return F.binary_cross_entropy_with_logits(model(emb, mask, regions, feats), y)

    errors = max_relative_error(loss, dict(model.named_parameters()))
    assert max(errors.values()) <= 1e-3, {k: v for k, v in errors.items() if v > 1e-3}


def test_batches_never_leave_single_row():
    sizes = [len(b) for b in _batches(33, 16)]
    assert sizes == [16, 17]
    assert [len(b) for b in _batches(32, 16)] == [16, 16]
    assert sum(len(b) for b in _batches(1, 16)) == 1


class TestTrain:
    def test_first_epoch_descends(self):
        data = random_data(32, seed=3)
        cfg = dataclasses.replace(TINY, learning_rate=2e-5, batch_size=16, epochs=1, patience=None)
        model = FusionModel(1, cfg, 6, 4, 5, 10)
        result = train(model, data, None, cfg)
        from reintel.fusion_models import evaluation_loss

        assert evaluation_loss(result.model, data) < result.initial_loss

    def test_deterministic(self):
        data = random_data(24, seed=5)
        val = random_data(8, seed=6)
        cfg = dataclasses.replace(TINY, dropout=0.2, epochs=4, patience=None)
        runs = [train(FusionModel(3, cfg, 6, 4, 5, 10), data, val, cfg) for _ in range(2)]
        assert runs[0].history == runs[1].history
        for (_, a), (_, b) in zip(runs[0].model.state_dict().items(), runs[1].model.state_dict().items()):
            assert torch.equal(a, b)

    def test_returns_best_checkpoint(self):
        data = random_data(24, seed=5)
        val = random_data(8, seed=6)
        cfg = dataclasses.replace(TINY, learning_rate=1e-2, epochs=6, patience=None)
        result = train(FusionModel(1, cfg, 6, 4, 5, 10), data, val, cfg)
        best = max(r.val_auc for r in result.history)
        assert result.history[result.best_epoch - 1].val_auc == best
        from reintel.eval_ensemble import roc_auc

        assert roc_auc(val.labels.numpy(), predict(result.model, val)) == pytest.approx(best)

    def test_early_stopping(self):
        data = random_data(16, seed=1)
        cfg = dataclasses.replace(TINY, learning_rate=1e-9, epochs=50, patience=2)
        result = train(FusionModel(1, cfg, 6, 4, 5, 10), data, random_data(8, seed=2), cfg)
        assert len(result.history) < 50

    def test_non_finite_loss_aborts(self):
        data = random_data(8)
        data.features[0, 0] = float("nan")
        cfg = dataclasses.replace(TINY, epochs=1)
        with pytest.raises(TrainingError, match="non-finite loss"):
            train(FusionModel(1, cfg, 6, 4, 5, 10), data, None, cfg)

    def test_requires_labels(self):
        with pytest.raises(TrainingError):
            train(tiny_model(1), random_data(4, labels=False), None)


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(3)
    train(model, random_data(16), None, dataclasses.replace(TINY, epochs=1))
    save_model(tmp_path / "m.ckpt", model, {"columns": ["a", "b"]})
    loaded, manifest = load_model(tmp_path / "m.ckpt")
    assert manifest["variant"] == 3 and manifest["columns"] == ["a", "b"]
    assert ModelConfig.from_dict(manifest["cfg"]) == TINY
    data = random_data(5)
    np.testing.assert_allclose(predict(loaded, data), predict(model, data), atol=1e-7)
    # identical bytes when saved again
    save_model(tmp_path / "m2.ckpt", loaded, {"columns": ["a", "b"]})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_history_log(tmp_path):
    from reintel.fusion_models import EpochRecord

    write_history(tmp_path / "h.csv", [EpochRecord(1, 0.5, None, 0.75)])
    assert (tmp_path / "h.csv").read_text() == "epoch,loss,train_auc,val_auc\n1,0.500000,,0.750000\n"


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ModelError):
        ModelConfig(filter_sizes=())
    assert ModelConfig().filter_sizes == (2, 3, 4, 5)
