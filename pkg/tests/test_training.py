import math

import numpy as np
import pytest
import torch

from argb.model import top1_masks
from argb.training import (
    AETrainConfig,
    TrainingDiverged,
    balance_loss,
    balance_loss_printed,
    cosine_restart_lr,
    desk_config,
    evaluate_reconstruction,
    psnr,
    read_log,
    recon_loss,
    cycle_ends,
    restart_boundaries,
    sample_batch,
    train_autoencoder,
)
from conftest import make_model


def _onehot(idx, k):
    idx = torch.as_tensor(idx)
    return torch.nn.functional.one_hot(idx, k).movedim(-1, 0).float()


def test_balance_uniform_is_one():
    k, h, w = 4, 4, 4
    p = torch.full((k, h, w), 1.0 / k)
    masks = _onehot(torch.arange(h * w).reshape(h, w) % k, k)
    assert balance_loss(p, masks).item() == pytest.approx(1.0, abs=1e-6)


def test_balance_collapsed_is_k():
    k = 5
    masks = _onehot(torch.zeros(3, 3, dtype=torch.long), k)
    assert balance_loss(masks.clone(), masks).item() == pytest.approx(k, abs=1e-6)


def test_balance_matches_loop_oracle(rng):
    k = 3
    p = torch.softmax(torch.from_numpy(rng.normal(size=(2, k, 4, 5))), dim=1)
    masks = top1_masks(p)
    pn, mn = p.numpy(), masks.numpy()
    n = pn.shape[0] * pn.shape[2] * pn.shape[3]
    expected = 0.0
    for e in range(k):
        frac = mn[:, e].sum() / n
        mean_p = pn[:, e].sum() / n
        expected += frac * mean_p
    assert balance_loss(p, masks).item() == pytest.approx(k * expected, rel=1e-10)


def test_balance_gradient_flows_through_probabilities_only():
    logits = torch.randn(3, 4, 4, requires_grad=True)
    p = torch.softmax(logits, 0)
    balance_loss(p, top1_masks(p.detach())).backward()
    assert torch.count_nonzero(logits.grad) > 0


def test_balance_shape_mismatch():
    with pytest.raises(ValueError):
        balance_loss(torch.zeros(3, 2, 2), torch.zeros(2, 2, 2))


def test_printed_form_at_uniform():
    k, h, w = 4, 3, 5
    assert balance_loss_printed(torch.full((k, h, w), 1.0 / k)).item() == pytest.approx(k * h * w)


def test_recon_loss_matches_loop_oracle(small_model):
    x = torch.rand(3, 6, 6)
    with torch.no_grad():
        got = recon_loss(small_model, x, 0.0).item()
        xi = small_model.encode(x).double()
    eff = small_model.effective_decoder()
    A, b = eff.A.numpy(), eff.b.numpy()
    xn = x.double().numpy()
    total = 0.0
    for i in range(6):
        for j in range(6):
            out = A @ xi[:, i, j].numpy() + b
            total += np.abs(out - xn[:, i, j]).sum()
    assert got == pytest.approx(total / xn.size, rel=1e-5)


def test_recon_noise_is_seeded(small_model):
    x = torch.rand(3, 6, 6)
    with torch.no_grad():
        a = recon_loss(small_model, x, 1.0, torch.Generator().manual_seed(1))
        b = recon_loss(small_model, x, 1.0, torch.Generator().manual_seed(1))
        c = recon_loss(small_model, x, 1.0, torch.Generator().manual_seed(2))
        clean = recon_loss(small_model, x, 0.0)
    assert a == b and a != c and a != clean


def test_recon_negative_std(small_model):
    with pytest.raises(ValueError):
        recon_loss(small_model, torch.rand(3, 4, 4), -1.0)


@pytest.mark.parametrize(
    "step,expected",
    [(0, 5e-4), (500, 2.5e-4), (999, 2.5e-4 * (1 + math.cos(math.pi * 999 / 1000))), (1000, 5e-4), (2000, 2.5e-4), (3000, 5e-4)],
)
def test_schedule_values(step, expected):
    lr = cosine_restart_lr(step, 5e-4, 1000, 256000)
    assert lr == pytest.approx(expected, rel=1e-12)


def test_schedule_is_capped():
    cfg = desk_config()
    assert restart_boundaries(cfg) == [0, 250, 750, 1750, 3750, 5750, 7750, 9750]
    assert cosine_restart_lr(3750, 5e-4, 250, 2000) == pytest.approx(5e-4)
    assert cosine_restart_lr(4750, 5e-4, 250, 2000) == pytest.approx(2.5e-4)


def test_full_scale_boundaries():
    b = restart_boundaries(AETrainConfig())
    assert b == [1000 * (2**i - 1) for i in range(9)]
    assert b[-1] + 256000 == 511000
    assert cycle_ends(AETrainConfig())[-1] == 511000


def test_desk_cycle_ends_stop_short_of_total():
    assert cycle_ends(desk_config()) == [250, 750, 1750, 3750, 5750, 7750, 9750]


def test_cycle_end_snapshot_equals_stopped_run():
    from argb.model import parameter_hash

    cfg = _tiny_cfg(first_period=2, max_period=3, total_steps=6, batch_size=1)
    snaps = []
    full = train_autoencoder(cfg, _smooth_patches(), on_cycle_end=snaps.append)
    assert [s.step for s in snaps] == [2, 5]
    stopped = train_autoencoder(cfg, _smooth_patches(), steps=5)
    assert parameter_hash(snaps[-1].model) == parameter_hash(stopped.model)
    assert parameter_hash(full.model) != parameter_hash(snaps[-1].model)
    # a snapshot is a valid resume point
    resumed = train_autoencoder(cfg, _smooth_patches(), resume=snaps[-1])
    assert parameter_hash(resumed.model) == parameter_hash(full.model)


def test_config_validation():
    with pytest.raises(ValueError):
        AETrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        AETrainConfig(balance_form="other")
    with pytest.raises(KeyError):
        AETrainConfig.from_dict({"nope": 1})
    cfg = AETrainConfig(seed=3)
    assert AETrainConfig.from_dict(cfg.to_dict()) == cfg


def test_sample_batch_is_deterministic():
    cfg = AETrainConfig(batch_size=3, patch_size=4)
    patches = np.random.default_rng(0).random((5, 3, 8, 8), dtype=np.float32)
    a, b = sample_batch(patches, cfg, 7), sample_batch(patches, cfg, 7)
    assert torch.equal(a, b) and a.shape == (3, 3, 4, 4)
    assert not torch.equal(a, sample_batch(patches, cfg, 8))


def _tiny_cfg(**kw):
    base = dict(num_experts=2, embedding_dim=16, batch_size=2, patch_size=16, first_period=200, max_period=200, total_steps=200, seed=0)
    base.update(kw)
    return AETrainConfig(**base)


def _smooth_patches(n=8, size=16):
    # low-frequency colour fields keep the short run easy
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        c0, c1, c2 = rng.random((3, 3, 1, 1))
        out.append(np.clip(c0 + (c1 - c0) * xx + (c2 - c0) * yy * 0.5, 0, 1))
    return np.stack(out).astype(np.float32)


def test_short_run_decreases_loss(tmp_path):
    records = []
    train_autoencoder(_tiny_cfg(), _smooth_patches(), log_path=tmp_path / "log.jsonl", on_step=records.append)
    recon = np.array([r["l_recon"] for r in records])
    assert len(recon) == 200
    assert recon[-20:].mean() < 0.5 * recon[:20].mean()
    assert read_log(tmp_path / "log.jsonl") == records


def test_lambda_zero_leaves_router_untouched():
    ckpt = train_autoencoder(_tiny_cfg(lambda_balance=0.0), _smooth_patches(), steps=3)
    torch.manual_seed(0)
    from argb.model import ARGBModel

    fresh = ARGBModel(2, 16)
    for (n, a), (_, b) in zip(ckpt.model.router.named_parameters(), fresh.router.named_parameters()):
        assert torch.equal(a, b), n


def test_single_patch_dataset_runs():
    ckpt = train_autoencoder(_tiny_cfg(batch_size=1), _smooth_patches(n=1), steps=2)
    assert ckpt.step == 2


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_autoencoder(_tiny_cfg(), np.zeros((0, 3, 16, 16), np.float32))


def test_divergence_is_reported():
    cfg = _tiny_cfg(initial_lr=1e30)
    with pytest.raises(TrainingDiverged) as info:
        train_autoencoder(cfg, _smooth_patches() * 1e30, steps=50)
    assert "step" in info.value.snapshot


def test_psnr_values():
    a = np.zeros((3, 4, 4))
    assert psnr(a, a) == 100.0
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(a + 1e-9, a) == 100.0


def test_evaluate_reconstruction_restores_mode(small_model):
    small_model.train()
    out = evaluate_reconstruction(small_model, [np.random.default_rng(0).random((3, 8, 8), dtype=np.float32)])
    assert small_model.training
    assert out["count"] == 1 and math.isfinite(out["psnr"])
