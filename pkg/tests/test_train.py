from dataclasses import replace

import numpy as np
import pytest

from spatspark.data import build_sequences
from spatspark.masking import PatchGrid, TubeMask, make_tube_mask
from spatspark.model import ModelConfig, init_model
from spatspark.numcore import ContractError, Tensor, backward, lr_at
from spatspark.train import (PAPER_SETTINGS, Checkpoint, ConfigError,
                             CorruptCheckpointError, FingerprintError,
                             TrainConfig, config_fingerprint, epoch_lr,
                             load_checkpoint, loss_finetune, loss_pretrain,
                             normalized_patches, preset_config, run_finetune,
                             run_pretrain, save_checkpoint, trainable_names,
                             write_loss_csv)

T = 4
MCFG = ModelConfig.from_preset("nano", T, 64, 64)


@pytest.fixture(scope="module")
def samples(small_container, small_split):
    return build_sequences(small_split[0], T, 2, small_container)


def cfg(phase="pretrain", **kw):
    base = dict(batch_size=2, epochs=2, warmup_epochs=1, seed=5)
    base.update(kw)
    return preset_config("desk", phase, **base)


# -- losses


def test_loss_pretrain_hand_oracle():
    mask = TubeMask(np.array([[True]]), 1.0, 0, 2)
    target = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    loss = loss_pretrain(np.zeros((1, 2, 2)), target, mask, eps=1e-6)
    mu, var = 2.5, 1.25
    oracle = np.mean([((v - mu) / np.sqrt(var + 1e-6)) ** 2 for v in (1, 2, 3, 4)])
    assert abs(float(loss.data) - oracle) < 1e-12


def test_loss_pretrain_zero_and_locality(rng):
    grid = PatchGrid.for_image(64, 96)
    mask = make_tube_mask(grid, 0.5, 3)
    target = rng.random((T, 64, 96))
    from spatspark.masking import unpatchify
    perfect = unpatchify(normalized_patches(target, 32), 32, T, 64, 96)
    assert float(loss_pretrain(perfect, target, mask).data) == 0.0

    pred = rng.random((T, 64, 96))
    base = float(loss_pretrain(pred, target, mask).data)
    vis = ~np.kron(mask.masked, np.ones((32, 32), bool)).astype(bool)
    bumped = pred.copy()
    bumped[:, vis] += 3.0
    assert float(loss_pretrain(bumped, target, mask).data) == base

    p = Tensor(pred[None], requires_grad=True)
    backward(loss_pretrain(p, target[None], [mask]))
    assert not p.grad[0][:, vis].any()
    assert p.grad[0][:, ~vis].any()


def test_loss_pretrain_needs_masked_patch(rng):
    mask = make_tube_mask(PatchGrid.for_image(64, 64), 0.0, 0)
    with pytest.raises(ContractError):
        loss_pretrain(rng.random((T, 64, 64)), rng.random((T, 64, 64)), mask)


def test_loss_finetune_examples(rng):
    y = rng.random((2, T, 32, 32))
    assert float(loss_finetune(y, y).data) == 0
    assert abs(float(loss_finetune(y + 1, y).data) - 1) < 1e-12
    x = rng.random(y.shape)
    assert abs(float(loss_finetune(x, y).data) - ((x - y) ** 2).sum() / x.size) < 1e-12


# -- configuration


def test_presets():
    p = preset_config("paper", "pretrain")
    assert (p.batch_size, p.base_lr, p.epochs, p.warmup_epochs, p.mask_ratio, p.weight_decay) == \
        PAPER_SETTINGS["pretrain"] == (256, 2e-4, 1400, 40, 0.6, 0.04)
    f = preset_config("paper", "finetune")
    assert (f.batch_size, f.base_lr, f.epochs, f.warmup_epochs, f.mask_ratio, f.weight_decay) == \
        (196, 1.5e-4, 200, 40, 0.6, 0.05)
    d = preset_config("desk", "pretrain")
    assert d.batch_size < p.batch_size and d.epochs < p.epochs and d.mask_ratio == 0.6
    with pytest.raises(ConfigError):
        preset_config("huge", "pretrain")


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(warmup_epochs=5, epochs=5), dict(mask_ratio=1.5),
                                 dict(phase="eval"), dict(mask_ratio=0.0), dict(base_lr=-1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        replace(TrainConfig(), **bad).validate()


def test_everything_frozen_is_error():
    m = init_model(replace(MCFG, translation=False), 0)
    c = cfg("finetune", freeze_encoder=True, freeze_decoder=True, no_translation=True)
    with pytest.raises(ConfigError):
        trainable_names(m, c)


# -- loops


def test_one_epoch_one_batch(samples):
    ck = run_pretrain(cfg(epochs=1, warmup_epochs=0, batch_size=8), samples[:1], MCFG)
    assert len(ck.log) == 1 and ck.epoch == 1 and ck.phase == "pretrain"


def test_empty_dataset(samples):
    with pytest.raises(ConfigError):
        run_pretrain(cfg(), [], MCFG)


def test_pretrain_deterministic_and_isolated(samples, tmp_path):
    c = cfg(epochs=2)
    a = run_pretrain(c, samples[:6], MCFG)
    b = run_pretrain(c, samples[:6], MCFG)
    assert [r.loss for r in a.log] == [r.loss for r in b.log]
    save_checkpoint(a, tmp_path / "a.ckpt")
    save_checkpoint(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    fresh = init_model(MCFG, c.seed)
    for name, p in fresh.named_params().items():
        if name.startswith("translation."):
            assert np.array_equal(a.params[name], p.data)
    assert a.lrs == [lr_at(c.schedule(), e + 0.5) for e in range(c.epochs)]
    assert a.lrs == [epoch_lr(c, e) for e in range(c.epochs)]
    assert all(r.lr == a.lrs[r.epoch] for r in a.log)


def test_finetune_freeze_encoder(samples):
    pre = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:4], MCFG)
    ft = run_finetune(cfg("finetune", freeze_encoder=True), samples[:4], MCFG, init=pre)
    for name, value in pre.params.items():
        if name.startswith("encoder.") and not name.endswith(("running_mean", "running_var")):
            assert np.array_equal(ft.params[name], value), name
    assert not np.array_equal(ft.params["decoder.head.weight"], pre.params["decoder.head.weight"])


def test_finetune_freeze_decoder_and_fresh_theta(samples):
    pre = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:4], MCFG)
    c = cfg("finetune", freeze_decoder=True, epochs=1, warmup_epochs=0)
    m = init_model(MCFG, c.seed)
    ft = run_finetune(c, samples[:4], MCFG, init=pre)
    for name, value in pre.params.items():
        if name.startswith(("decoder.", "densify.")) and not name.endswith(("running_mean", "running_var")):
            assert np.array_equal(ft.params[name], value), name
    # theta starts from the seed's fresh init, not from the checkpoint
    assert not np.array_equal(ft.params["translation.theta1.weight"], m.named_params()["translation.theta1.weight"].data)


def test_no_translation_structure(samples):
    pre = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:4], MCFG)
    ft = run_finetune(cfg("finetune", no_translation=True, epochs=1, warmup_epochs=0), samples[:4], MCFG, init=pre)
    assert not any(k.startswith("translation.") for k in ft.params)
    m = ft.build_model()
    assert m.translation is None
    x = samples[0].input[None]
    mask = make_tube_mask(PatchGrid.for_image(64, 64), 0.6, 1)
    assert np.array_equal(m.forward_finetune(x, [mask]).data, m.forward_pretrain(x, [mask]).data)


def test_no_pretrain_rejects_init(samples):
    pre = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:2], MCFG)
    with pytest.raises(ConfigError):
        run_finetune(cfg("finetune", no_pretrain=True), samples[:2], MCFG, init=pre)


def test_init_fingerprint_mismatch(samples):
    pre = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:2], MCFG)
    other = ModelConfig.from_preset("nano", T, 64, 64, stem_channels=4)
    with pytest.raises(FingerprintError):
        run_finetune(cfg("finetune"), samples[:2], other, init=pre)


# -- checkpoints


def test_checkpoint_round_trip(samples, tmp_path):
    ck = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:4], MCFG, scaling=None)
    p = tmp_path / "x.ckpt"
    save_checkpoint(ck, p)
    back = load_checkpoint(p)
    assert back.params.keys() == ck.params.keys()
    assert all(np.array_equal(back.params[k], v) for k, v in ck.params.items())
    assert back.optimizer.step == ck.optimizer.step
    assert all(np.array_equal(back.optimizer.m[k], v) for k, v in ck.optimizer.m.items())
    assert back.fingerprint == ck.fingerprint == config_fingerprint(MCFG)
    assert back.epoch == 1 and back.phase == "pretrain"
    m = back.build_model()
    assert all(np.array_equal(p.data, ck.params[n]) for n, p in m.named_params().items())


def test_checkpoint_corruption(samples, tmp_path):
    ck = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:2], MCFG)
    p = tmp_path / "x.ckpt"
    save_checkpoint(ck, p)
    raw = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(raw)
    flipped[len(raw) // 3] ^= 1
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "f.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")


@pytest.mark.parametrize("phase", ["pretrain", "finetune"])
def test_resume_equals_uninterrupted(samples, tmp_path, phase):
    c = cfg(phase, epochs=4, warmup_epochs=1)
    run = run_pretrain if phase == "pretrain" else run_finetune
    full = run(c, samples[:5], MCFG)
    half = run(c, samples[:5], MCFG, stop_epoch=2)
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed = run(c, samples[:5], MCFG, resume=load_checkpoint(tmp_path / "half.ckpt"))
    save_checkpoint(full, tmp_path / "full.ckpt")
    save_checkpoint(resumed, tmp_path / "resumed.ckpt")
    assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()
    assert [r.loss for r in full.log[len(half.log):]] == [r.loss for r in resumed.log]


def test_resume_wrong_phase(samples):
    pre = run_pretrain(cfg(epochs=2, warmup_epochs=0), samples[:2], MCFG, stop_epoch=1)
    with pytest.raises(FingerprintError):
        run_finetune(cfg("finetune"), samples[:2], MCFG, resume=pre)


def test_loss_csv(samples, tmp_path):
    ck = run_pretrain(cfg(epochs=1, warmup_epochs=0), samples[:4], MCFG)
    write_loss_csv(ck.log, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss" and len(lines) == 1 + len(ck.log)


# -- desk overfitting harness


@pytest.fixture(scope="module")
def overfit_pretrain(samples):
    eight = samples[::2][:8]
    c = cfg(epochs=150, warmup_epochs=10, batch_size=4)  # 2 steps per epoch -> 300 steps
    return eight, run_pretrain(c, eight, MCFG)


def test_overfit_pretrain(overfit_pretrain):
    _, ck = overfit_pretrain
    losses = [r.loss for r in ck.log]
    assert len(losses) == 300
    assert np.mean(losses[-2:]) < 0.1 * losses[0]


def test_overfit_finetune(overfit_pretrain):
    eight, pre = overfit_pretrain
    c = cfg("finetune", epochs=150, warmup_epochs=10, batch_size=4)
    ck = run_finetune(c, eight, MCFG, init=pre)
    losses = [r.loss for r in ck.log]
    assert len(losses) == 300
    assert np.mean(losses[-2:]) < 0.2 * losses[0]
