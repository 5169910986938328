import numpy as np
import pytest

from opstress import operators as ops
from opstress import synthdata as sd
from opstress import training as tr

SMALL = ops.ArchConfig(latent=8, hidden=16, decoder_hidden=(16,))


@pytest.fixture(scope="module")
def tiny():
    return sd.generate_dataset(24, 6, 6, 16, seed=1)


def test_relative_l2_examples():
    ref = np.array([[3.0, 0.0], [0.0, 4.0]])
    assert tr.relative_l2(ref, ref) == 0.0
    assert tr.relative_l2(1.3 * ref, ref) == pytest.approx(0.3, abs=1e-15)
    e = np.zeros_like(ref)
    e[0, 0] = np.linalg.norm(ref)
    assert tr.relative_l2(ref + e, ref) == pytest.approx(1.0, abs=1e-15)
    assert tr.relative_l2(ref * [1, 2], ref, channel=1) == pytest.approx(1.0)
    with pytest.raises(ZeroDivisionError):
        tr.relative_l2(ref, np.zeros_like(ref))


def test_two_plateau_events_quarter_the_rate():
    s = tr.PlateauScheduler(1e-3, 0.5, 10, 1e-7)
    lrs = []
    for _ in range(40):
        s.step(1.0)
        lrs.append(s.lr)
    # first epoch sets the best; reductions after 11 further stale epochs each
    assert lrs[10] == 1e-3 and lrs[11] == 5e-4
    assert lrs[22] == pytest.approx(2.5e-4, rel=0, abs=1e-18)


def test_scheduler_respects_floor():
    s = tr.PlateauScheduler(1e-6, 0.5, 1, 1e-6)
    for _ in range(10):
        assert not s.step(1.0)
    assert s.lr == 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(plateau_patience=0)


def test_constant_target_is_learned():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(16, 6))
    trunk = sd.make_grid(16) * 2 - 1
    y = np.full((16, 16, 4), 0.37)
    model = ops.build_model("sdeeponet", 6, 4, np.random.default_rng(1), SMALL)
    cfg = tr.TrainConfig(max_epochs=300, dropout=0.0, lr=3e-3, seed=0)
    _, rep = tr.fit(model, b, trunk, y, cfg)
    assert rep.train_mse[-1] < 1e-4 or min(rep.train_mse) < 1e-4
    assert float(np.mean((model.forward(b, trunk)[0] - y) ** 2)) < 1e-4


def test_restored_weights_are_best_validation(tiny):
    model, rep = tr.train("nomad", tiny, tr.TrainConfig(max_epochs=20, seed=3), SMALL)
    assert rep.epochs_run == 20
    assert rep.best_val_mse == min(rep.val_mse)
    s = tiny.standardized("train")
    val_b, val_y = s.b[-2:], s.targets_norm[-2:]
    again = float(np.mean((model.batch_evaluator(s.trunk_norm)(val_b) - val_y) ** 2))
    assert again == pytest.approx(rep.best_val_mse, rel=1e-12)
    assert all(v >= rep.best_val_mse for v in rep.val_mse)
    assert rep.metric_space == "normalized"


def test_early_stopping_stops(tiny):
    _, rep = tr.train("poddeeponet", tiny, tr.TrainConfig(max_epochs=500, early_stop_patience=3, seed=0), SMALL)
    assert rep.epochs_run == rep.best_epoch + 4


@pytest.mark.parametrize("arch", ops.ARCHS)
def test_training_is_byte_deterministic(arch, tiny, tmp_path):
    cfg = tr.TrainConfig(max_epochs=3, seed=7)
    m1, r1 = tr.train(arch, tiny, cfg, SMALL)
    m2, r2 = tr.train(arch, tiny, cfg, SMALL)
    a = ops.save_checkpoint(m1, tmp_path / "a.ckpt").read_bytes()
    b = ops.save_checkpoint(m2, tmp_path / "b.ckpt").read_bytes()
    assert a == b
    assert r1.to_dict() == r2.to_dict()


def test_training_reduces_loss(tiny):
    _, rep = tr.train("mimonet", tiny, tr.TrainConfig(max_epochs=30, seed=0), SMALL)
    assert rep.val_mse[-1] < rep.val_mse[0]
    assert all(v >= 0 for v in rep.train_mse)


def test_divergence_reported():
    b = np.zeros((4, 6))
    y = np.full((4, 16, 4), np.nan)
    model = ops.build_model("nomad", 6, 4, np.random.default_rng(0), SMALL)
    with pytest.raises(tr.TrainingDivergedError, match="epoch 0"):
        tr.fit(model, b, sd.make_grid(16), y, tr.TrainConfig(max_epochs=2))


def test_single_sample_rejected():
    model = ops.build_model("nomad", 6, 4, np.random.default_rng(0), SMALL)
    with pytest.raises(ValueError, match="validation"):
        tr.fit(model, np.zeros((1, 6)), sd.make_grid(16), np.zeros((1, 16, 4)), tr.TrainConfig())
