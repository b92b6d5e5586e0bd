import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bidcspell import numeric as nx
from bidcspell.corpus import CorpusConfig, generate_corpus
from bidcspell.errors import ConfigError, CorruptionError, FormatError, NumericError
from bidcspell.model import BiDCSpell
from bidcspell.training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adamw_step,
    clip_grads,
    load_checkpoint,
    make_batch,
    save_checkpoint,
    train,
)

from helpers import tiny_config


@pytest.fixture(scope="module")
def toy():
    cfg = CorpusConfig(n_symbols=18, length=(3, 5), sizes={"train": 48, "dev": 12, "test": 0}, error_rate=0.3)
    vocab, data, _ = generate_corpus(cfg)
    return vocab, data


def run(toy, epochs=2, mode="bidc", **kw):
    vocab, data = toy
    tcfg = TrainConfig(epochs=epochs, batch_size=16, learning_rate=3e-3, **kw)
    return train(tiny_config(mode=mode), data["train"], data["dev"], tcfg, vocab=vocab)


# -- AdamW ---------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), TrainConfig(weight_decay=0.0), 1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adamw_scalar_hand_step():
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, AdamState.zeros(p), TrainConfig(learning_rate=0.1, weight_decay=0.0), 1)
    assert p["w"][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_decay_is_decoupled_shrink():
    p = {"w": np.array([2.0, -4.0])}
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), cfg, 1)
    np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


def test_adamw_nan_gradient_names_parameter():
    p = {"enc.w": np.ones(2)}
    with pytest.raises(NumericError, match="enc.w"):
        adamw_step(p, {"enc.w": np.array([np.nan, 0.0])}, AdamState.zeros(p), TrainConfig(), 1)


def test_adamw_rejects_step_zero():
    p = {"w": np.ones(1)}
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.ones(1)}, AdamState.zeros(p), TrainConfig(), 0)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1})
    assert TrainConfig.FINETUNE_LR == 5e-5


# -- clipping -----------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, (2, 3), elements=st.floats(-1e3, 1e3)),
    st.floats(1e-3, 10.0),
)
def test_clipped_norm_within_threshold(a, b, max_norm):
    grads = {"a": a.copy(), "b": b.copy()}
    pre = clip_grads(grads, max_norm)
    post = nx.global_norm(grads.values())
    assert post <= max_norm + 1e-9
    if pre <= max_norm:
        np.testing.assert_array_equal(grads["a"], a)


# -- batching -----------------------------------------------------------------------


def test_make_batch_pads_and_masks(toy):
    _, data = toy
    samples = data["train"][:4]
    ids, mask, y_det, y_cor = make_batch(samples)
    assert ids.shape[1] == max(len(s) for s in samples)
    assert mask.sum() == sum(len(s) for s in samples)
    assert np.all(ids[~mask] == 0) and np.all(y_det[~mask] == 0)


# -- training loop ------------------------------------------------------------------


def test_zero_epochs_returns_initial_checkpoint(toy):
    res = run(toy, epochs=0)
    assert res.log.epochs == [] and res.log.steps == []
    init = BiDCSpell(tiny_config(), seed=0)
    for k, p in init.params.items():
        np.testing.assert_array_equal(res.best.params[k], p.value)


def test_training_is_deterministic(toy):
    a, b = run(toy), run(toy)
    assert a.last.to_bytes() == b.last.to_bytes()
    assert run(toy, seed=1).last.to_bytes() != a.last.to_bytes()


def test_loss_is_lambda_mix_every_step(toy):
    res = run(toy, epochs=1)
    for s in res.log.steps:
        assert abs(s["loss"] - (0.8 * s["loss_cor"] + 0.2 * s["loss_det"])) <= 1e-12
        assert s["clipped_norm"] <= 1.0 + 1e-9


def test_c_only_log_loss_equals_correction_loss(toy):
    res = run(toy, epochs=1, mode="c-only")
    assert all(s["loss"] == s["loss_cor"] and s["loss_det"] is None for s in res.log.steps)
    assert res.log.epochs[0]["loss_det"] is None


def test_one_log_record_per_epoch(toy, tmp_path):
    path = tmp_path / "log.jsonl"
    res = run(toy, epochs=3, log_path=str(path))
    lines = [json.loads(x) for x in path.read_text(encoding="utf-8").splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2, 3]
    assert len(res.log.epochs) == 3
    for r in lines:
        assert all(np.isfinite(r[k]) for k in ("loss", "loss_det", "loss_cor", "dev_cor_f1"))


def test_best_checkpoint_tracks_dev_f1(toy):
    res = run(toy, epochs=3)
    f1s = [r["dev_cor_f1"] for r in res.log.epochs]
    assert res.best.train_state["best_f1"] == max(f1s)
    assert res.best.train_state["epoch"] == 1 + int(np.argmax(f1s))


def test_empty_training_set_rejected(toy):
    with pytest.raises(ConfigError):
        train(tiny_config(), [], toy[1]["dev"], TrainConfig(epochs=1))


def test_divergence_reports_epoch_and_step(toy):
    vocab, data = toy
    ck = run(toy, epochs=0).last
    ck.params["head_cor.b"][:] = np.nan
    with pytest.raises(NumericError, match="epoch 1, step 0"):
        train(ck.config, data["train"], data["dev"], TrainConfig(epochs=1), resume=ck)


def test_resume_matches_uninterrupted(toy):
    vocab, data = toy
    full = run(toy, epochs=3)
    first = run(toy, epochs=1)
    blob = first.last.to_bytes()
    tcfg = TrainConfig(epochs=3, batch_size=16, learning_rate=3e-3)
    resumed = train(None, data["train"], data["dev"], tcfg, vocab=vocab,
                    resume=Checkpoint.from_bytes(blob), resume_best=first.best)
    for k, v in full.last.params.items():
        assert np.max(np.abs(resumed.last.params[k] - v)) <= 1e-12
    assert resumed.best.train_state == full.best.train_state


# -- checkpoints --------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["bidc", "d2c", "c-only", "two-head"])
def test_checkpoint_round_trip_is_byte_identical(toy, tmp_path, mode):
    ck = run(toy, epochs=1, mode=mode).last
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ck)
    loaded = load_checkpoint(path)
    assert loaded.to_bytes() == path.read_bytes()
    for k, v in ck.params.items():
        assert loaded.params[k].tobytes() == v.tobytes()
    assert loaded.optimizer.t == ck.optimizer.t
    assert loaded.config == ck.config


def test_checkpoint_without_optimizer(toy):
    ck = run(toy, epochs=0).best
    assert ck.optimizer is None
    assert Checkpoint.from_bytes(ck.to_bytes()).optimizer is None


def test_truncated_checkpoint_is_corruption(toy, tmp_path):
    blob = run(toy, epochs=0).last.to_bytes()
    for cut in (len(blob) - 8, len(blob) // 2, 10):
        with pytest.raises(CorruptionError):
            Checkpoint.from_bytes(blob[:cut])


def test_bad_magic_is_format_error():
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"NOTIT\n{}\n")


def test_header_shape_mismatch_is_corruption(toy):
    blob = run(toy, epochs=0).best.to_bytes()
    start = blob.index(b"\n") + 1
    end = blob.index(b"\n", start)
    header = json.loads(blob[start:end])
    # swap two same-size shapes so the payload length still matches
    header["params"][0][1] = list(reversed(header["params"][0][1]))
    bad = blob[:start] + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + blob[end:]
    with pytest.raises(CorruptionError):
        Checkpoint.from_bytes(bad)


def test_checkpoint_model_predicts_like_original(toy):
    res = run(toy, epochs=1)
    ids = np.array([[2, 5, 7, 3]])
    a = res.last.to_model().forward(ids).cor_logits.value
    b = Checkpoint.from_bytes(res.last.to_bytes()).to_model().forward(ids).cor_logits.value
    assert a.tobytes() == b.tobytes()
