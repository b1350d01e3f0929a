import pytest
import torch

from core.config import SyntheticConfig, TrainConfig
from core.errors import AlignmentError, CheckpointError, TrainingError
from core.tasks import Task
from data.synthetic import generate_synthetic
from losses.functional import loss_au, loss_expr, loss_multi, loss_va
from model.network import AffectFPN
from training.checkpoint import load_checkpoint, model_digest, save_checkpoint
from training.gradcheck import gradcheck_model_config, gradient_check, random_batch
from training.inference import evaluate_model, predict_manifest
from training.trainer import evaluate_loss, fit
from tests.helpers import keep_tasks


def snapshot(model):
    return {name: tensor.detach().clone() for name, tensor in model.state_dict().items()}


class TestFit:
    def test_zero_learning_rate_keeps_parameters(self, tiny_model_config, synthetic_train):
        model = AffectFPN(tiny_model_config)
        before = snapshot(model)
        fit(model, synthetic_train, config=TrainConfig(learning_rate=0.0, epochs=2, batch_size=16))
        after = model.state_dict()
        assert all(torch.equal(before[name], after[name]) for name in before)

    def test_loss_decreases(self, tiny_model_config, synthetic_train):
        model = AffectFPN(tiny_model_config)
        initial, _ = evaluate_loss(model, synthetic_train)
        config = TrainConfig(learning_rate=3e-3, epochs=8, batch_size=16, epoch_fraction=1.0)
        result = fit(model, synthetic_train, config=config)
        final, _ = evaluate_loss(result.model, synthetic_train)
        assert final < initial
        assert len(result.history) == 8
        assert all(record.samples == 70 for record in result.history.epochs)

    def test_same_seed_same_history(self, tiny_model_config, synthetic_train):
        config = TrainConfig(epochs=3, batch_size=16, seed=4)
        first = fit(AffectFPN(tiny_model_config), synthetic_train, config=config)
        second = fit(AffectFPN(tiny_model_config), synthetic_train, config=config)
        assert first.history.total_losses == second.history.total_losses
        assert model_digest(first.model) == model_digest(second.model)

    def test_limited_epochs_use_subsample(self, tiny_model_config, synthetic_train):
        result = fit(AffectFPN(tiny_model_config), synthetic_train, config=TrainConfig(epochs=2, batch_size=8))
        assert [record.samples for record in result.history.epochs] == [17, 17]

    def test_checkpoints_and_history_files(self, tmp_path, tiny_model_config, synthetic_train):
        val = synthetic_train.subset(synthetic_train.records[:14])
        result = fit(
            AffectFPN(tiny_model_config), synthetic_train, config=TrainConfig(epochs=2, batch_size=16),
            val_manifest=val, out_dir=tmp_path, checkpoint_prefix="run",
        )
        assert (tmp_path / "run_last.pt").is_file()
        assert (tmp_path / "run_best.pt").is_file()
        assert (tmp_path / "run_history.csv").read_text(encoding="utf-8").startswith("epoch,")
        assert result.best_epoch in (0, 1)
        assert all(record.val_report is not None for record in result.history.epochs)

    def test_unreadable_validation_image_is_skipped(self, tmp_path, tiny_model_config, synthetic_train):
        val = generate_synthetic(
            SyntheticConfig(num_samples=14, val_samples=0, image_size=32, seed=5), tmp_path / "val", split="val"
        )
        missing = val.records[3]
        val.resolve_path(missing).unlink()

        result = fit(
            AffectFPN(tiny_model_config), synthetic_train, config=TrainConfig(epochs=2, batch_size=16),
            val_manifest=val, out_dir=tmp_path / "run", checkpoint_prefix="run",
        )
        assert len(result.history) == 2
        for record in result.history.epochs:
            assert record.val_report.counts[Task.EXPR.value] == 13
            assert record.val_score is not None
        assert (tmp_path / "run" / "run_best.pt").is_file()

        with pytest.raises(AlignmentError):
            evaluate_model(result.model, val)

    def test_non_finite_loss_aborts(self, monkeypatch, tiny_model_config, synthetic_train):
        def broken(prediction, targets, weights):
            nan = torch.tensor(float("nan"))
            return nan, (nan, nan, nan)

        monkeypatch.setattr("training.trainer.loss_multi", broken)
        with pytest.raises(TrainingError) as excinfo:
            fit(AffectFPN(tiny_model_config), synthetic_train, config=TrainConfig(epochs=1, batch_size=4))
        assert len(excinfo.value.batch_ids) == 4

    def test_unsupervised_head_is_not_updated(self, tiny_model_config, synthetic_train):
        expr_only = synthetic_train.subset([keep_tasks(r, False, True, False) for r in synthetic_train.records])
        model = AffectFPN(tiny_model_config)
        before = snapshot(model)
        fit(model, expr_only, config=TrainConfig(epochs=1, batch_size=16, epoch_fraction=1.0))
        after = model.state_dict()
        for name in ("heads.va.weight", "heads.au.bias"):
            assert torch.equal(before[name], after[name])
        assert not torch.equal(before["heads.expr.weight"], after["heads.expr.weight"])

    def test_double_precision(self, tiny_model_config, synthetic_train):
        result = fit(
            AffectFPN(tiny_model_config), synthetic_train,
            config=TrainConfig(epochs=1, batch_size=16, precision="double"),
        )
        assert next(result.model.parameters()).dtype == torch.float64
        assert len(predict_manifest(result.model, synthetic_train)) == 70


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_model_config, synthetic_train):
        model = AffectFPN(tiny_model_config)
        digest = save_checkpoint(model, tmp_path / "m.pt", metadata={"epoch": 3})
        loaded, metadata = load_checkpoint(tmp_path / "m.pt", expected_config=tiny_model_config)
        assert metadata == {"epoch": 3}
        assert model_digest(loaded) == digest
        images = torch.randn(2, 3, 32, 32)
        model.eval()
        with torch.no_grad():
            assert torch.equal(model(images).va, loaded(images).va)
        assert evaluate_model(model, synthetic_train) == evaluate_model(loaded, synthetic_train)

    def test_digest_is_stable(self, tmp_path, tiny_model_config):
        model = AffectFPN(tiny_model_config)
        assert save_checkpoint(model, tmp_path / "a.pt") == save_checkpoint(model, tmp_path / "b.pt")
        assert model_digest(AffectFPN(tiny_model_config)) == model_digest(model)

    def test_config_mismatch(self, tmp_path, tiny_model_config):
        save_checkpoint(AffectFPN(tiny_model_config), tmp_path / "m.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.pt", expected_config=tiny_model_config.model_copy(update={"num_aus": 5}))
        load_checkpoint(tmp_path / "m.pt", expected_config=tiny_model_config.model_copy(update={"seed": 9}))

    def test_unsupported_version(self, tmp_path):
        torch.save({"format_version": 99}, tmp_path / "m.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.pt")

    def test_tampered_parameters(self, tmp_path, tiny_model_config):
        save_checkpoint(AffectFPN(tiny_model_config), tmp_path / "m.pt")
        payload = torch.load(tmp_path / "m.pt", weights_only=True)
        payload["state_dict"]["heads.va.bias"] += 1.0
        torch.save(payload, tmp_path / "m.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.pt")


class TestGradientCheck:
    def test_analytic_gradients_match_finite_differences(self):
        report = gradient_check(gradcheck_model_config())
        assert report.passed, report.to_text()
        assert report.max_relative_error < 1e-4
        assert report.failed_heads() == []

    def test_sign_flipped_va_loss_is_detected(self):
        def flipped(prediction, targets, weights):
            _, (l_va, l_expr, l_au) = loss_multi(prediction, targets, weights)
            return -weights.alpha * l_va + weights.beta * l_expr + weights.gamma * l_au

        report = gradient_check(gradcheck_model_config(), analytic_loss=flipped, elements_per_tensor=6)
        assert not report.passed
        assert report.failed_heads() == [Task.VA]

    def test_masked_head_receives_zero_gradient(self):
        config = gradcheck_model_config()
        model = AffectFPN(config).double()
        images, targets = random_batch(config, masks={Task.VA: [False, False]})
        loss_multi(model(images), targets)[0].backward()
        for param in model.head_parameters(Task.VA).values():
            assert param.grad is None or torch.count_nonzero(param.grad) == 0
        assert torch.count_nonzero(model.heads.expr.weight.grad) > 0

    def test_loss_components_are_reachable(self):
        config = gradcheck_model_config()
        model = AffectFPN(config).double()
        images, targets = random_batch(config)
        prediction = model(images)
        _, (l_va, l_expr, l_au) = loss_multi(prediction, targets)
        assert torch.allclose(l_va, loss_va(prediction.va, targets.va).mean())
        assert torch.allclose(l_expr, loss_expr(prediction.expr_logits, targets.expr).mean())
        assert torch.allclose(l_au, loss_au(prediction.au_logits, targets.au).mean())


def test_cosine_schedule_and_clipping(tiny_model_config, synthetic_train):
    config = TrainConfig(
        epochs=3, batch_size=16, epoch_fraction=1.0, learning_rate=2e-3,
        lr_schedule="cosine", grad_clip_norm=1.0, optimizer="adamw", weight_decay=1e-4,
    )
    result = fit(AffectFPN(tiny_model_config), synthetic_train, config=config)
    rates = [record.learning_rate for record in result.history.epochs]
    assert rates[0] == 2e-3
    assert rates[0] > rates[1] > rates[2]
    assert all(torch.isfinite(torch.tensor(result.history.total_losses)))


@pytest.fixture
def noise_free_64(tmp_path):
    return generate_synthetic(
        SyntheticConfig(num_samples=64, val_samples=0, image_size=32, noise=0.0), tmp_path / "clean", split="clean"
    )


def test_single_small_step_lowers_loss(tiny_model_config, synthetic_train):
    batch = synthetic_train.subset(synthetic_train.records[:16])
    config = TrainConfig(epochs=1, batch_size=16, epoch_fraction=1.0, learning_rate=1e-5, precision="double")
    for trial in range(20):
        model = AffectFPN(tiny_model_config.model_copy(update={"seed": trial})).double()
        before, _ = evaluate_loss(model, batch)
        fit(model, batch, config=config.model_copy(update={"seed": trial}))
        after, _ = evaluate_loss(model, batch)
        assert after < before, f"trial={trial} before={before} after={after}"


@pytest.mark.slow
def test_fit_reaches_tenth_of_initial_loss(tiny_model_config, noise_free_64):
    model = AffectFPN(tiny_model_config)
    initial, _ = evaluate_loss(model, noise_free_64)
    config = TrainConfig(epochs=50, batch_size=16, epoch_fraction=1.0, learning_rate=3e-3)
    result = fit(model, noise_free_64, config=config)
    final, _ = evaluate_loss(result.model, noise_free_64)
    assert final < 0.1 * initial


@pytest.mark.slow
def test_noise_free_data_is_fit_exactly(tiny_model_config, synthetic_train):
    config = TrainConfig(epochs=60, batch_size=16, epoch_fraction=1.0, learning_rate=3e-3)
    result = fit(AffectFPN(tiny_model_config), synthetic_train, config=config)
    report = evaluate_model(result.model, synthetic_train)
    assert report.expr_tacc == 1.0
