import json
import math

import numpy as np
import pytest

from mcse import dsp
from mcse.autodiff import Tensor, ops, parameter, precision
from mcse.autodiff.tensor import ShapeError
from mcse.network import Generator, GeneratorOutput, ModelConfig
from mcse.trainer import (AdamW, CheckpointError, CleanTarget, TrainConfig, Trainer, TrainingAborted,
                          clip_grad_norm, load_checkpoint, phase_loss, save_checkpoint, total_loss, train_epoch)

TINY = dict(c_mid=4, n_tf_blocks=1, d_state=2)


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lr, c.betas, c.weight_decay, c.lr_decay_per_epoch, c.epochs, c.batch_size) == \
        (5e-4, (0.8, 0.99), 1e-2, 0.99, 50, 1)
    assert c.loss_weights == {"mag": 1.0, "phase": 0.3, "complex": 0.1, "time": 0.2}
    for bad in (dict(lr=0), dict(lr_decay_per_epoch=0), dict(lr_decay_per_epoch=1.1),
                dict(loss_weights={"mag": -1, "phase": 0, "complex": 0, "time": 0})):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_lr_schedule_exact():
    c = TrainConfig()
    assert c.lr_at(0) == 5e-4
    assert c.lr_at(10) == 5e-4 * 0.99 ** 10
    for e in range(50):
        assert c.lr_at(e) == 5e-4 * 0.99 ** e


# -- losses -------------------------------------------------------------------------


def _phase_oracle(p, q):
    d = p - q
    term = lambda x: float(np.mean(1 - np.cos(x)))
    return (term(d) + term(np.diff(d, axis=1)) + term(np.diff(d, axis=0))) / 3


def test_phase_loss_examples():
    rng = np.random.default_rng(0)
    phi = rng.uniform(-np.pi, np.pi, (6, 9))
    with precision(np.float64):
        assert float(phase_loss(Tensor(phi), Tensor(phi)).data) == 0.0
        assert float(phase_loss(Tensor(phi + 2 * np.pi), Tensor(phi)).data) == pytest.approx(0, abs=1e-12)
        other = rng.uniform(-np.pi, np.pi, (6, 9))
        assert float(phase_loss(Tensor(other), Tensor(phi)).data) == pytest.approx(_phase_oracle(other, phi), rel=1e-12)


def _target(seed=0, n=1600):
    wave = np.random.default_rng(seed).standard_normal(n) * 0.1
    pair = dsp.analyze(wave)
    return CleanTarget(pair.cmag, pair.pha, wave)


def _out(cmag, pha, mask=None):
    return GeneratorOutput(Tensor(cmag), Tensor(pha), Tensor(np.ones_like(cmag) if mask is None else mask))


def test_total_loss_perfect_output_is_zero():
    tgt = _target()
    with precision(np.float64):
        total, comps = total_loss(_out(tgt.cmag, tgt.pha), tgt, TrainConfig())
    assert comps["mag"] == comps["phase"] == comps["complex"] == 0.0
    assert comps["time"] < 1e-12 and float(total.data) < 1e-12


def test_total_loss_mag_only_weight():
    tgt = _target(1)
    cmag = tgt.cmag * 1.3 + 0.01
    cfg = TrainConfig(loss_weights={"mag": 1.0, "phase": 0.0, "complex": 0.0, "time": 0.0})
    with precision(np.float64):
        total, _ = total_loss(_out(cmag, tgt.pha), tgt, cfg)
    assert float(total.data) == np.mean((cmag - tgt.cmag) ** 2)


def test_total_loss_component_sum_oracle():
    tgt = _target(2)
    rng = np.random.default_rng(3)
    cmag = np.abs(tgt.cmag + 0.1 * rng.standard_normal(tgt.cmag.shape))
    pha = rng.uniform(-np.pi, np.pi, tgt.pha.shape)
    cfg = TrainConfig()
    with precision(np.float64):
        total, comps = total_loss(_out(cmag, pha), tgt, cfg)
    mag = np.mean((cmag - tgt.cmag) ** 2)
    ph = _phase_oracle(pha, tgt.pha)
    cx = 0.5 * (np.mean((cmag * np.cos(pha) - tgt.cmag * np.cos(tgt.pha)) ** 2)
                + np.mean((cmag * np.sin(pha) - tgt.cmag * np.sin(tgt.pha)) ** 2))
    wave = dsp.istft(cmag ** (1 / 0.3) * np.exp(1j * pha), dsp.StftConfig(), len(tgt.wave))
    tm = np.mean(np.abs(wave - tgt.wave))
    for k, v in dict(mag=mag, phase=ph, complex=cx, time=tm).items():
        assert comps[k] == pytest.approx(v, rel=1e-10)
    expected = 1.0 * mag + 0.3 * ph + 0.1 * cx + 0.2 * tm
    assert float(total.data) == pytest.approx(expected, rel=1e-12)


# -- optimizer ---------------------------------------------------------------------


def _scalar_adamw(w, grads, lr, b1, b2, eps, wd):
    w = list(w)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, start=1):
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            w[i] = w[i] * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return w


def test_adamw_matches_scalar_reference():
    with precision(np.float64):
        p = parameter(np.array([0.5, -1.0, 2.0]))
        opt = AdamW([p], lr=1e-2, betas=(0.8, 0.99), weight_decay=1e-2)
        target = np.array([1.0, 0.0, -1.0])
        grads = []
        start = p.data.copy()
        for _ in range(25):
            opt.zero_grad()
            ops.sum(ops.square(ops.sub(p, target))).backward()
            grads.append(p.grad.copy())
            opt.step()
    # replay the exact gradients through the scalar reference
    ref = _scalar_adamw(start, grads, 1e-2, 0.8, 0.99, 1e-8, 1e-2)
    np.testing.assert_allclose(p.data, ref, atol=1e-6, rtol=0)


def test_clip_grad_norm():
    p = parameter(np.zeros(4))
    p.grad = np.array([3.0, 4.0, 0.0, 0.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = Generator(ModelConfig.desk(2, reference_index=1, **TINY), seed=5)
    feats = np.random.default_rng(0).random((4, 6, 201)).astype(np.float32)
    before = model(feats)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    after = loaded(feats)
    np.testing.assert_array_equal(before.y_cmag.data, after.y_cmag.data)
    np.testing.assert_array_equal(before.y_pha.data, after.y_pha.data)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_header_layout(tmp_path):
    model = Generator(ModelConfig.desk(1, reference_index=0, **TINY))
    raw = save_checkpoint(model, tmp_path / "m.ckpt").read_bytes()
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + hlen])
    assert header["format_version"] == 1
    first = header["tensors"][0]
    assert first["name"] == "encoder.g_cnn.weight" and first["dtype"] == "f32" and first["offset"] == 0


def test_checkpoint_corrupt_header(tmp_path):
    model = Generator(ModelConfig.desk(1, reference_index=0, **TINY))
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[16] = ord("#")     # opening brace of the JSON header
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    model = Generator(ModelConfig.desk(1, reference_index=0, **TINY))
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    raw = path.read_bytes().replace(b'"format_version": 1', b'"format_version": 9')
    path.write_bytes(raw)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model = Generator(ModelConfig.desk(1, reference_index=0, **TINY))
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_mic_mismatch_names_tensor(tmp_path):
    path = save_checkpoint(Generator(ModelConfig.desk(6, **TINY)), tmp_path / "m.ckpt")
    with pytest.raises(ShapeError, match="encoder.g_cnn.weight"):
        load_checkpoint(path, ModelConfig.desk(4, **TINY))


# -- training loop ------------------------------------------------------------------


def _items(n=2, mics=2, samples=1600, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        clean = np.sin(2 * np.pi * rng.uniform(150, 400) * np.arange(samples) / 16000) * 0.3
        noisy = clean + 0.1 * rng.standard_normal((mics, samples))
        out.append({"id": f"item{i}", "noisy": noisy, "clean": clean})
    return out


def _trainer(tmp_path=None, seed=0):
    model = Generator(ModelConfig.desk(2, reference_index=1, **TINY), seed=seed)
    return Trainer(model, TrainConfig(seed=seed), tmp_path)


def test_train_epoch_log_and_checkpoints(tmp_path):
    tr = _trainer(tmp_path)
    items = _items()
    s0 = train_epoch(tr, items, items[:1])
    s1 = train_epoch(tr, items, items[:1])
    assert s0["lr"] == 5e-4 and s1["lr"] == 5e-4 * 0.99
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert {"epoch", "lr", "mag", "phase", "complex", "time", "val_si_sdr", "wall_seconds"} <= set(lines[0])
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()


def test_epoch_determinism():
    stats = []
    for _ in range(2):
        tr = _trainer(seed=3)
        s = tr.train_epoch(_items(3))
        stats.append({k: v for k, v in s.items() if k != "wall_seconds"})
    assert stats[0] == stats[1]


def test_non_finite_loss_aborts_naming_item():
    tr = _trainer()
    items = _items(1)
    items[0]["clean"] = items[0]["clean"].copy()
    items[0]["clean"][100] = np.nan
    with pytest.raises(TrainingAborted, match="item0"):
        tr.train_epoch(items)


def test_empty_manifest_rejected():
    with pytest.raises(ValueError):
        _trainer().train_epoch([])


@pytest.mark.slow
def test_single_item_overfit_loss_decreases_per_window():
    from mcse import arraysim
    src = arraysim.gen_source("harmonic_am", 1.0, 11)
    mix = arraysim.simulate_array(src, arraysim.rectangular_six(), noise={"kind": "white", "snr_db": 5.0}, seed=2)
    tr = Trainer(Generator(ModelConfig.desk(), seed=0), TrainConfig(seed=0))
    prepared = tr.prepare({"id": "one", "noisy": mix.noisy, "clean": mix.clean_ref}, np.random.default_rng(0))
    losses = [tr.step(prepared)["total"] for _ in range(200)]
    means = [np.mean(losses[i:i + 50]) for i in range(0, 200, 50)]
    assert all(b < a for a, b in zip(means, means[1:])), means
