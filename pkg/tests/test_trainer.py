import io
import json
import math

import numpy as np
import pytest
from helpers import SMALL_RANKS as SMALL, small_task

from microvlm.checkpoint import dumps, load_checkpoint, loads, model_metadata, save_checkpoint, state_items
from microvlm.errors import BadMagic, CheckpointIOError, DivergedLoss, EmptySplit, RankOutOfRange, ShapeMismatchOnLoad
from microvlm.fusion import generate
from microvlm.trainer import PlateauScheduler, Split, TrainConfig, evaluate_loss, train


def frozen_tensors(model):
    out = {}
    for path, layer in model.adapters():
        out[path + ".W0"] = np.array(layer.W0.q if layer.quantized else layer.W0, copy=True)
        out[path + ".A"] = layer.A.copy()
    for path, mod in model.vision.walk("vision"):
        for k, v in mod.params.items():
            out[f"{path}.{k}"] = v.copy()
    return out


def test_scheduler_flat_curve():
    s = PlateauScheduler(1e-3, 5, 0.5)
    halved_at = [e for e in range(1, 19) if s.step(1.0)]
    assert halved_at == [6, 12, 18]
    assert s.lr == pytest.approx(1.25e-4)


def test_scheduler_improvement_resets():
    s = PlateauScheduler(1e-3)
    vals = [5, 4, 4, 4, 4, 3, 3, 3, 3, 3, 3]
    assert [s.step(v) for v in vals].count(True) == 1
    assert s.lr == pytest.approx(5e-4)


def test_train_stagnant_validation_halves_lr():
    model, split, _, _ = small_task()
    cfg = TrainConfig(epochs=7, batch_size=4, early_stop_patience=50, **SMALL)
    res = train(model, split, split, cfg, validate=lambda m, e: 1.0)
    assert res.history[5]["lr_halved"] and res.history[5]["next_lr"] == pytest.approx(5e-4)
    assert res.history[6]["lr"] == pytest.approx(5e-4)
    lrs = [r["lr"] for r in res.history]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_early_stop_restores_best():
    model, split, _, _ = small_task()
    snapshots = {}

    def validate(m, epoch):
        snapshots[epoch] = m.blocks[0].cross.params["gate"].copy()
        return 1.0 if epoch == 2 else 2.0 + epoch

    cfg = TrainConfig(epochs=30, batch_size=2, early_stop_patience=10, **SMALL)
    res = train(model, split, split, cfg, validate=validate)
    assert res.stopped_early and res.best_epoch == 2 and len(res.history) == 12
    assert np.array_equal(model.blocks[0].cross.params["gate"], snapshots[2])


def test_frozen_tensors_unchanged():
    model, split, _, _ = small_task()
    before = frozen_tensors(model)
    train(model, split, split, TrainConfig(epochs=3, batch_size=2, **SMALL))
    after = frozen_tensors(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_deterministic(tmp_path):
    blobs = []
    for i in range(2):
        model, split, _, _ = small_task()
        log = io.StringIO()
        train(model, split, split, TrainConfig(epochs=3, batch_size=2, seed=5, **SMALL), log_file=log)
        save_checkpoint(model, tmp_path / f"{i}.ckpt")
        blobs.append(((tmp_path / f"{i}.ckpt").read_bytes(), log.getvalue()))
    assert blobs[0] == blobs[1]


def test_log_records():
    model, split, _, _ = small_task()
    log = io.StringIO()
    train(model, split, split, TrainConfig(epochs=2, batch_size=3, **SMALL), log_file=log)
    recs = [json.loads(line) for line in log.getvalue().splitlines()]
    assert [r["epoch"] for r in recs] == [1, 2]
    assert set(recs[0]) >= {"train_loss", "val_loss", "lr", "lr_halved", "rank_histogram"}
    assert sum(recs[0]["rank_histogram"].values()) == 2


def test_per_layer_rank_and_accumulation():
    model, split, _, _ = small_task()
    res = train(model, split, split, TrainConfig(epochs=2, batch_size=1, accum_steps=2, per_layer_rank=True,
                                                 rank_norm=True, r_min=2, r_max=8))
    assert all(math.isfinite(r["val_loss"]) for r in res.history)


def test_diverged_loss():
    model, split, _, _ = small_task()
    model.params["tok_emb"][3, 0] = np.nan
    with pytest.raises(DivergedLoss):
        train(model, split, split, TrainConfig(epochs=1, batch_size=4, **SMALL))


def test_empty_split():
    model, split, _, _ = small_task()
    with pytest.raises(EmptySplit):
        train(model, Split([], split.vision), split, TrainConfig(epochs=1, **SMALL))


def test_evaluate_rank_bounds():
    model, split, _, _ = small_task()
    with pytest.raises(RankOutOfRange):
        evaluate_loss(model, split, 9)
    with pytest.raises(RankOutOfRange):
        evaluate_loss(model, split, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(early_stop_patience=3)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_overfit_train_loss(overfit):
    assert overfit.result.history[-1]["train_loss"] < 0.05


def test_overfit_loss_every_rank(overfit):
    for b in range(4, 17):
        loss = evaluate_loss(overfit.model, overfit.split, b)
        assert math.isfinite(loss)
        if b in overfit.untrained_loss:
            assert loss < overfit.untrained_loss[b]


# --- checkpoints

def test_checkpoint_roundtrip_bytes(tmp_path):
    model, split, prompt, _ = small_task()
    train(model, split, split, TrainConfig(epochs=2, batch_size=2, **SMALL))
    save_checkpoint(model, tmp_path / "a.ckpt")
    back, meta = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert meta["vocab_sha256"] == model.vocab.digest()
    for i in range(len(split)):
        assert generate(model, prompt, split.vision[i], 6) == generate(back, prompt, split.vision[i], 6)


def test_checkpoint_corruption(tmp_path):
    model, _, _, _ = small_task()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    data = path.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises((BadMagic, CheckpointIOError)):
            load_checkpoint(path)
    path.write_bytes(b"XXXXXXX" + data[7:])
    with pytest.raises(BadMagic):
        load_checkpoint(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(CheckpointIOError):
        load_checkpoint(path)
    with pytest.raises(CheckpointIOError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_shape_mismatch():
    model, _, _, _ = small_task()
    meta, tensors = loads(dumps(model_metadata(model), state_items(model)))
    tensors["tok_emb"] = tensors["tok_emb"][:-1]
    other, _, _, _ = small_task()
    from microvlm.checkpoint import restore_state

    with pytest.raises(ShapeMismatchOnLoad):
        restore_state(other, tensors)


def test_quantized_payload_fraction():
    model, _, _, _ = small_task(quantize_base=False)
    dense = sum(a.nbytes for n, a in state_items(model) if n.endswith(".W0"))
    model.quantize()
    quant = sum(a.nbytes for n, a in state_items(model) if ".W0." in n)
    assert quant <= 0.3 * dense
