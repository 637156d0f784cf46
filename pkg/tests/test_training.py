import numpy as np
import pytest

from attnscene import numerics as nx
from attnscene.checkpoint import load_checkpoint, save_checkpoint
from attnscene.data import FeatureSource, index_dataset
from attnscene.errors import ConfigError, NumericError
from attnscene.model import ModelConfig, SceneModel
from attnscene.training import (TrainConfig, augment_policy, hyper_sweep, load_model, lr_at, model_gradcheck,
                                read_metrics, train, train_step)


@pytest.mark.parametrize("epoch,lr", [(0, 0.001), (6, 0.001), (7, 0.0005), (13, 0.0005), (14, 0.00025),
                                      (21, 0.000125)])
def test_lr_schedule(epoch, lr):
    assert lr_at(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


@pytest.mark.parametrize("bad", [dict(initial_lr=0), dict(batch_size=0), dict(lr_decay=1.5),
                                 dict(augment_prob=2.0), dict(patience=0)])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_repeated_batch_loss_decreases():
    m = SceneModel(ModelConfig.toy(seed=0, dropout_s=0.0, dropout_hidden=0.0))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 64, 32)).astype(np.float32)
    y = np.array([0, 3, 5, 8])
    adam = nx.AdamState()
    losses = [train_step(m, adam, X, y, 0.003, rng) for _ in range(20)]
    assert losses[-1] < 0.5 * losses[0]
    assert sum(b >= a for a, b in zip(losses, losses[1:])) <= 2


def test_non_finite_input_names_a_slot():
    m = SceneModel(ModelConfig.toy(seed=0))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2, 64, 32)).astype(np.float32)
    adam, diag = nx.AdamState(), {}
    train_step(m, adam, X, [0, 1], 0.001, rng, diag=diag)
    X[0, 3, 4] = np.nan
    with pytest.raises(NumericError) as info:
        train_step(m, adam, X, [0, 1], 0.001, rng, diag=diag)
    assert any(name in str(info.value) for name in m.params)


def test_clip_norm_bounds_update():
    m = SceneModel(ModelConfig.toy(seed=0))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2, 64, 32)).astype(np.float32)
    m.loss_and_grad(X, np.array([0, 1]), train=True, rng=np.random.default_rng(1))
    assert m.params.grad_norm() > 1e-3
    m.params.scale_grads(1e-3 / m.params.grad_norm())
    assert m.params.grad_norm() == pytest.approx(1e-3, rel=1e-5)


def quick(**kw):
    base = dict(batch_size=9, eval_period=1, max_epochs=2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_train_writes_metrics_and_checkpoints(tiny_splits, tmp_path):
    res = train(tiny_splits["train"].index, tiny_splits["dev"].index, ModelConfig.toy(), quick(), tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["epoch"] for r in rows] == [0, 1]
    assert all(r["dev_macro_f1"] is not None for r in rows)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    assert res.best_dev_f1 == pytest.approx(max(r["dev_macro_f1"] for r in rows), abs=1e-6)
    assert load_model(tmp_path / "best.ckpt").config == ModelConfig.toy()


def test_fixed_seed_reproducible_metrics(tiny_splits, tmp_path):
    args = (tiny_splits["train"].index, tiny_splits["dev"].index, ModelConfig.toy(), quick())
    train(*args, tmp_path / "a")
    train(*args, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()


def test_resume_is_bitwise(tiny_splits, tmp_path):
    tr, dev = tiny_splits["train"].index, tiny_splits["dev"].index
    train(tr, dev, ModelConfig.toy(), quick(max_epochs=3), tmp_path / "full")
    train(tr, dev, ModelConfig.toy(), quick(max_epochs=1), tmp_path / "part")
    # lift the epoch cap stored in the checkpoint, then continue
    ck = load_checkpoint(tmp_path / "part" / "last.ckpt")
    ck.config["train"]["max_epochs"] = 3
    save_checkpoint(ck, tmp_path / "part" / "last.ckpt")
    train(tr, dev, ModelConfig.toy(), quick(max_epochs=3), tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    full = load_checkpoint(tmp_path / "full" / "last.ckpt")
    part = load_checkpoint(tmp_path / "part" / "last.ckpt")
    assert full.tensors.keys() == part.tensors.keys()
    for k in full.tensors:
        assert full.tensors[k].tobytes() == part.tensors[k].tobytes(), k


def test_patience_stops_early(tiny_splits, tmp_path):
    # with a negligible learning rate dev F1 cannot keep improving
    cfg = quick(initial_lr=1e-12, patience=2, max_epochs=10)
    res = train(tiny_splits["train"].index, tiny_splits["dev"].index, ModelConfig.toy(), cfg, tmp_path)
    assert res.stopped_early
    assert res.epochs_run == 3


def test_patience_one_stops_at_second_eval(tiny_splits, tmp_path):
    cfg = quick(initial_lr=1e-12, patience=1, eval_period=2, max_epochs=10)
    res = train(tiny_splits["train"].index, tiny_splits["dev"].index, ModelConfig.toy(), cfg, tmp_path)
    assert res.stopped_early and res.epochs_run == 4
    assert [r["epoch"] for r in res.history if r["dev_macro_f1"] is not None] == [1, 3]


def test_target_f1_stops_training(tiny_splits, tmp_path):
    res = train(tiny_splits["train"].index, tiny_splits["dev"].index, ModelConfig.toy(),
                quick(target_dev_f1=1e-6, max_epochs=5), tmp_path)
    assert res.stopped_early and res.epochs_run == 1
    assert res.history[0]["elapsed"] > 0


def test_empty_split_rejected(tiny_splits, tmp_path):
    with pytest.raises(ConfigError):
        train(index_dataset([], 9), tiny_splits["dev"].index, ModelConfig.toy(), quick(), tmp_path)


def test_augment_policy_modes(tiny_splits):
    index, src = tiny_splits["train"].index, FeatureSource()
    assert augment_policy(index, TrainConfig(), src) is None  # balanced corpus: no minority class
    pol = augment_policy(index, TrainConfig(augment_classes="0,2"), src)
    assert pol.classes == {0, 2} and pol.segment_s == pytest.approx(1.0)
    assert augment_policy(index, TrainConfig(augment_classes="none"), src) is None
    with pytest.raises(ConfigError):
        augment_policy(index, TrainConfig(augment_classes="cooking"), src)


def test_hyper_sweep_two_tables(tiny_splits, tmp_path):
    rows = hyper_sweep(tiny_splits["train"].index, tiny_splits["dev"].index, ModelConfig.toy(),
                       quick(max_epochs=1), [1, 2], [0.5], tmp_path, fixed_sigma=0.5, fixed_M=2)
    assert [(r["sweep"], r["M"], r["sigma"]) for r in rows] == [("M", 1, 0.5), ("M", 2, 0.5), ("sigma", 2, 0.5)]
    # the shared (M=2, sigma=0.5) cell is trained once
    assert rows[1]["dev_macro_f1"] == rows[2]["dev_macro_f1"]
    assert sorted(p.name for p in tmp_path.iterdir() if p.is_dir()) == ["M1_sigma0.5", "M2_sigma0.5"]
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "sweep,M,sigma,dev_macro_f1" and len(lines) == 4


def test_gradcheck_detects_corrupted_slot():
    m = SceneModel(ModelConfig.toy(seed=2))
    X = np.random.default_rng(2).normal(size=(2, 64, 16))
    report = model_gradcheck(m, X, [0, 1], seed=2, max_coords=4, corrupt="out.weight")
    assert not report.passed
    assert "out.weight" in report.failures()
    with pytest.raises(ConfigError):
        model_gradcheck(m, X, [0, 1], corrupt="nope")
