import numpy as np
import pytest
import torch

from argb.checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_tensors, read_manifest, save_checkpoint, save_tensors
from argb.training import AETrainConfig, new_checkpoint, train_autoencoder


def _cfg(**kw):
    base = dict(num_experts=2, embedding_dim=16, batch_size=1, patch_size=8, first_period=4, max_period=8, total_steps=20)
    base.update(kw)
    return AETrainConfig(**base)


def _patches(n=4, size=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size), dtype=np.float32)


def _assert_same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k


def test_round_trip_is_bit_exact(tmp_path):
    ckpt = train_autoencoder(_cfg(), _patches(), steps=3)
    path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(path)
    _assert_same_state(ckpt.model, back.model)
    assert back.step == 3
    assert back.config == ckpt.config
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_batchnorm_counters_survive(tmp_path):
    ckpt = train_autoencoder(_cfg(), _patches(), steps=2)
    back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.ckpt"))
    counters = {k: v for k, v in back.model.state_dict().items() if k.endswith("num_batches_tracked")}
    assert counters and all(int(v) == 2 for v in counters.values())


def test_resume_matches_uninterrupted_training(tmp_path):
    cfg = _cfg()
    patches = _patches()
    straight = train_autoencoder(cfg, patches, steps=6)
    first = train_autoencoder(cfg, patches, steps=3)
    resumed = load_checkpoint(save_checkpoint(first, tmp_path / "r.ckpt"))
    second = train_autoencoder(cfg, patches, resume=resumed, steps=3)
    assert second.step == 6
    _assert_same_state(straight.model, second.model)


def test_resume_log_appends(tmp_path):
    cfg = _cfg()
    log = tmp_path / "log.jsonl"
    first = train_autoencoder(cfg, _patches(), log_path=log, steps=2)
    train_autoencoder(cfg, _patches(), log_path=log, resume=first, steps=2)
    steps = [int(line.split('"step": ')[1].split(",")[0]) for line in log.read_text().splitlines()]
    assert steps == [0, 1, 2, 3]


def test_manifest_is_readable_json(tmp_path):
    ckpt = new_checkpoint(_cfg())
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    manifest, start = read_manifest(path)
    assert manifest["num_experts"] == 2 and manifest["embedding_dim"] == 16
    assert manifest["optimizer"] is None
    total = sum(e["nbytes"] for e in manifest["tensors"])
    assert path.stat().st_size == start + total


def test_bad_magic_raises(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_truncated_file_raises(tmp_path):
    path = save_checkpoint(new_checkpoint(_cfg()), tmp_path / "t.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_plain_tensor_container(tmp_path):
    t = {"w": torch.randn(3, 4), "b": torch.randn(5)}
    path = save_tensors(tmp_path / "t.bin", t, {"kind": "demo"})
    back, meta = load_tensors(path)
    assert meta == {"kind": "demo"}
    for k in t:
        assert torch.equal(back[k], t[k])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
