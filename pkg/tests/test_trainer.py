import numpy as np
import pytest

from vtoff import trainer
from vtoff.config import ModelConfig, RunConfig
from vtoff.errors import CheckpointError, ConfigError, NumericsError
from vtoff.rng import RngState
from vtoff.synth import synth_pair
from vtoff.tensor import Tensor
from vtoff.trainer import (AdamW, Checkpoint, load_checkpoint, lr_at,
                           params_hash, read_log, save_checkpoint,
                           train_extractor, train_generator)


def small_cfg(**kw):
    base = dict(train_size=24, test_size=8, stage1_steps=6, stage2_steps=6,
                warmup=2, batch_size=4, train_dtype="float64", sampler_steps=4,
                layers=2, dim=32, heads=2, text_dim=16,
                pool_dim=16, ref_dim=24, ref_grid=2, aligner_block=1)
    base.update(kw)
    return RunConfig(**base).validate()


def make_samples(cfg, split="train"):
    rng = RngState(cfg.seed)
    count = cfg.train_size if split == "train" else cfg.test_size
    return [synth_pair(rng.child("synth", split, i), cfg, f"{split}-{i:05d}")
            for i in range(count)]


# -- optimizer -------------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step(0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_single_step_closed_form():
    g = 0.37
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW({"p": p}, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    p.grad = np.array([g])
    lr = 0.01
    opt.step(lr)
    # From zero moments: mhat = g, vhat = g^2, so the update is
    # -lr * g / (|g| + eps) = -lr * sign(g) up to the eps correction.
    want = -lr * g / (abs(g) + 1e-8)
    assert abs(p.data[0] - want) < 1e-15


def test_adamw_decay_only_scales_parameter():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.1)
    p.grad = np.array([0.0])
    opt.step(0.5)
    assert abs(p.data[0] - 2.0 * (1 - 0.5 * 0.1)) < 1e-15


def test_adamw_rejects_nonfinite_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"p": p})
    p.grad = np.array([np.inf])
    with pytest.raises(NumericsError, match="p"):
        opt.step(0.1)


# -- schedule -------------------------------------------------------------------


def test_lr_schedule_endpoints():
    assert lr_at(0, 100, 10, 1.0) == 0.0
    assert lr_at(10, 100, 10, 1.0) == 1.0
    assert lr_at(100, 100, 10, 1.0) == 0.0
    mid = 10 + (100 - 10) // 2
    assert abs(lr_at(mid, 100, 10, 1.0) - 0.5) < 1e-12


def test_lr_schedule_warmup_validation():
    with pytest.raises(ConfigError):
        lr_at(5, 10, 10, 1.0)


# -- checkpoint container ---------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = RngState(1)
    tensors = {"param.a": rng.normal((3, 4)), "param.b": rng.normal((2,))}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"module": "m", "stage": 1, "config_hash": "h"}, tensors)
    back = load_checkpoint(path)
    assert back.header["module"] == "m"
    for k in tensors:
        assert back.tensors[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"WRONG" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_config_hash_mismatch(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"config_hash": "deadbeef"}, {})
    with pytest.raises(CheckpointError, match="configuration"):
        load_checkpoint(path, expect_config=ModelConfig())


# -- training loops ----------------------------------------------------------------


def test_stage1_trains_and_logs(tmp_path):
    cfg = small_cfg()
    samples = make_samples(cfg)
    path = train_extractor(cfg, samples, tmp_path)
    assert path.is_file()
    log = read_log(tmp_path / "stage1_log.txt")
    assert log.shape == (cfg.stage1_steps, 5)
    assert np.all(np.isfinite(log))
    assert np.all(log[:, 2] > 0)  # loss positive every step
    ckpt = load_checkpoint(path, expect_config=cfg.model_config())
    assert ckpt.stage == 1 and ckpt.mode == "noise"


def test_stage2_requires_stage1(tmp_path):
    cfg = small_cfg()
    samples = make_samples(cfg)
    with pytest.raises(CheckpointError):
        train_generator(cfg, samples, tmp_path / "missing.ckpt", tmp_path)


def test_stage2_rejects_non_stage1_checkpoint(tmp_path):
    cfg = small_cfg()
    samples = make_samples(cfg)
    s1 = train_extractor(cfg, samples, tmp_path / "a")
    gen_path, _ = train_generator(cfg, samples, s1, tmp_path / "a")
    with pytest.raises(CheckpointError, match="stage-1"):
        train_generator(cfg, samples, gen_path, tmp_path / "b")


def test_stage2_loss_identity_and_frozen_extractor(tmp_path):
    cfg = small_cfg()
    samples = make_samples(cfg)
    s1 = train_extractor(cfg, samples, tmp_path)
    before = load_checkpoint(s1).header["params_hash"]
    train_generator(cfg, samples, s1, tmp_path)
    log = read_log(tmp_path / "stage2_log.txt")
    # loss_total == loss_dit + lambda * loss_align exactly as logged
    recomputed = log[:, 2] + cfg.lambda_align * log[:, 3]
    assert np.max(np.abs(log[:, 4] - recomputed)) <= 1e-12
    assert load_checkpoint(s1).header["params_hash"] == before


def test_stage2_lambda_zero_total_equals_dit(tmp_path):
    cfg = small_cfg(lambda_align=0.0)
    samples = make_samples(cfg)
    s1 = train_extractor(cfg, samples, tmp_path)
    train_generator(cfg, samples, s1, tmp_path)
    log = read_log(tmp_path / "stage2_log.txt")
    assert np.array_equal(log[:, 4], log[:, 2])
    assert not log[:, 3].any()


def test_training_continuation_bit_exact(tmp_path):
    # save -> load -> train k steps must equal training 2k steps straight.
    cfg = small_cfg(stage1_steps=8, warmup=2)
    samples = make_samples(cfg)
    full = train_extractor(cfg, samples, tmp_path / "full")
    half = train_extractor(cfg, samples, tmp_path / "half", steps=4)
    resumed = train_extractor(cfg, samples, tmp_path / "half", steps=4, resume=half)
    log_full = read_log(tmp_path / "full" / "stage1_log.txt")
    log_half = read_log(tmp_path / "half" / "stage1_log.txt")
    np.testing.assert_array_equal(log_full, log_half)
    a = load_checkpoint(full)
    b = load_checkpoint(resumed)
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes(), k


def test_stage2_continuation_bit_exact(tmp_path):
    cfg = small_cfg(stage2_steps=8, warmup=2)
    samples = make_samples(cfg)
    s1 = train_extractor(cfg, samples, tmp_path / "s1")
    gen_full, _ = train_generator(cfg, samples, s1, tmp_path / "full")
    _, state_half = train_generator(cfg, samples, s1, tmp_path / "half", steps=4)
    gen_resumed, _ = train_generator(cfg, samples, s1, tmp_path / "half", steps=4,
                                     resume=state_half)
    a = load_checkpoint(gen_full)
    b = load_checkpoint(gen_resumed)
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes(), k
    np.testing.assert_array_equal(read_log(tmp_path / "full" / "stage2_log.txt"),
                                  read_log(tmp_path / "half" / "stage2_log.txt"))


def test_cache_store_matches_fresh_capture(tmp_path):
    # The memoized stage-2 cache must be bit-identical to a fresh clean capture,
    # and a frozen extractor loaded from its checkpoint must reproduce the
    # stage-1 in-memory cache.
    cfg = small_cfg()
    samples = make_samples(cfg)
    mcfg = cfg.model_config()
    s1 = train_extractor(cfg, samples, tmp_path)
    from vtoff.aligner import ReferenceEncoder
    from vtoff.trainer import CacheStore, capture_batch, load_extractor, prepare_samples
    fe = load_extractor(s1, mcfg, np.dtype(cfg.train_dtype))
    fe.freeze()
    data = prepare_samples(samples, mcfg, ReferenceEncoder(mcfg), cfg.train_dtype)
    store = CacheStore(fe, data, cfg.batch_size)
    ids = np.array([0, 3, 7])
    fresh = capture_batch(fe, data, ids, 0.0, None)
    stored = store.gather(ids)
    for (k1, v1), (k2, v2) in zip(fresh, stored):
        assert k1.data.tobytes() == k2.data.tobytes()
        assert v1.data.tobytes() == v2.data.tobytes()
    fe2 = load_extractor(s1, mcfg, np.dtype(cfg.train_dtype))
    again = capture_batch(fe2, data, ids, 0.0, None)
    for (k1, v1), (k2, v2) in zip(fresh, again):
        assert k1.data.tobytes() == k2.data.tobytes()


def test_two_identical_runs_bit_identical(tmp_path):
    cfg = small_cfg()
    samples = make_samples(cfg)
    p1 = train_extractor(cfg, samples, tmp_path / "r1")
    p2 = train_extractor(cfg, samples, tmp_path / "r2")
    assert p1.read_bytes() == p2.read_bytes()


def test_heldout_loss_deterministic(tmp_path):
    cfg = small_cfg()
    samples = make_samples(cfg)
    test_samples = make_samples(cfg, "test")
    s1 = train_extractor(cfg, samples, tmp_path)
    gen_path, _ = train_generator(cfg, samples, s1, tmp_path)
    from vtoff.aligner import ReferenceEncoder
    from vtoff.trainer import (heldout_generator_loss, load_extractor,
                               load_generator, prepare_samples)
    mcfg = cfg.model_config()
    fe = load_extractor(s1, mcfg, np.dtype(cfg.train_dtype))
    fe.freeze()
    gen = load_generator(gen_path, mcfg, np.dtype(cfg.train_dtype))
    data = prepare_samples(test_samples, mcfg, ReferenceEncoder(mcfg), cfg.train_dtype)
    a = heldout_generator_loss(cfg, fe, gen, data)
    b = heldout_generator_loss(cfg, fe, gen, data)
    assert a == b and np.isfinite(a) and a > 0
