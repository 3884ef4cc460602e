import numpy as np
import pytest
import torch

from argb.analysis import (
    InversionConfig,
    box_blur,
    cpwl_second_difference,
    decompose,
    expert_map,
    export_embeddings,
    invert,
    jacobian_block_fd,
    maximize_filter,
    metric_sweep,
    mix_embeddings,
    nullspace_invariance,
    read_embeddings,
    self_reference,
    write_rows,
)
from conftest import make_model


def _identity_model(num_experts=1):
    """Experts copy RGB into channels 0..2 (inputs stay positive), decoder reads them back."""
    model = make_model(num_experts=num_experts)
    with torch.no_grad():
        for e in model.experts:
            for conv in e.body:
                if isinstance(conv, torch.nn.Conv2d):
                    conv.weight.zero_()
                    conv.bias.zero_()
                    for c in range(3):
                        conv.weight[c, c, 1, 1] = 1.0
        C = model.embedding_dim
        w1 = torch.zeros(64, C)
        w1[:3, :3] = torch.eye(3)
        w2 = torch.zeros(32, 64)
        w2[:3, :3] = torch.eye(3)
        w3 = torch.zeros(3, 32)
        w3[:, :3] = torch.eye(3)
        for layer, w in zip(model.decoder.layers, (w1, w2, w3)):
            layer.weight.copy_(w.view(*w.shape, 1, 1))
        model.decoder.layers[2].bias.zero_()
    return model


def test_identity_stub_reconstructs():
    model = _identity_model()
    x = 0.1 + 0.8 * torch.rand(3, 8, 8)
    with torch.no_grad():
        torch.testing.assert_close(model.decode(model(x)), x)


def test_decompose_invariants(small_model):
    eff = small_model.effective_decoder()
    xi = torch.randn(128, 5, 6)
    d = decompose(xi, eff)
    assert (d.xi_par + d.xi_perp - xi.double()).abs().max() < 1e-5
    assert eff.project(eff.A, d.xi_perp).abs().max() < 1e-4
    assert (d.xi_par * d.xi_perp).sum(0).abs().max() < 1e-4


def test_decompose_row_space_vector(small_model):
    eff = small_model.effective_decoder()
    v = torch.randn(3, 4, 4, dtype=torch.float64)
    xi = eff.project(eff.A_pinv, v)
    assert decompose(xi, eff).xi_perp.abs().max() < 1e-6


def test_decode_uses_only_parallel_part(small_model):
    eff = small_model.effective_decoder()
    xi = torch.randn(128, 4, 4)
    d = decompose(xi, eff)
    with torch.no_grad():
        full = small_model.decode(xi).double()
    assert (full - small_model.decode((d.xi_par + d.xi_perp).float()).double()).abs().max() < 1e-5
    assert (full - eff.apply(d.xi_par)).abs().max() < 1e-5


def test_decompose_channel_mismatch(small_model):
    with pytest.raises(ValueError):
        decompose(torch.zeros(64, 2, 2), small_model.effective_decoder())


def test_nullspace_invariance(small_model):
    xi = torch.randn(128, 4, 4)
    assert nullspace_invariance(small_model, xi, torch.zeros_like(xi)) == 0.0
    g = torch.Generator().manual_seed(0)
    worst = max(nullspace_invariance(small_model, xi, torch.randn(xi.shape, generator=g)) for _ in range(100))
    assert worst < 1e-4


def test_row_space_perturbation_changes_output(small_model):
    eff = small_model.effective_decoder()
    xi = torch.randn(128, 4, 4)
    zeta = eff.project(eff.A_pinv, torch.randn(3, 4, 4, dtype=torch.float64)).float()
    with torch.no_grad():
        change = (small_model.decode(xi + zeta) - small_model.decode(xi)).abs().max()
    assert change > 1e-3


def test_mix_properties(small_model):
    eff = small_model.effective_decoder()
    a, b = torch.randn(128, 4, 4, dtype=torch.float64), torch.randn(128, 4, 4, dtype=torch.float64)
    assert (mix_embeddings(a, a, eff) - a).abs().max() < 1e-5
    m = mix_embeddings(a, b, eff)
    assert (mix_embeddings(m, b, eff) - m).abs().max() < 1e-5
    assert (eff.apply(m) - eff.apply(a)).abs().max() < 1e-4
    with pytest.raises(ValueError):
        mix_embeddings(a, b[:, :2], eff)


def test_invert_fixed_point(small_model):
    x = torch.rand(3, 8, 8)
    with torch.no_grad():
        target = small_model.encode(x)
    res = invert(small_model, target, InversionConfig(init="provided"), init=x)
    assert res.losses[0] == 0.0
    assert torch.equal(res.image, x)


def test_invert_descends(small_model):
    x = torch.rand(3, 12, 12)
    with torch.no_grad():
        target = small_model.encode(x)
    res = invert(small_model, target, InversionConfig(seed=1))
    assert len(res.losses) == 51
    assert res.losses[-1] < res.losses[0]


def test_invert_validation(small_model):
    with pytest.raises(ValueError):
        InversionConfig(steps=0)
    with pytest.raises(ValueError):
        invert(small_model, torch.full((128, 4, 4), float("nan")))
    with pytest.raises(ValueError):
        invert(small_model, torch.zeros(128, 4, 4), InversionConfig(init="provided"))


def test_invert_leaves_model_flags(small_model):
    flags = [p.requires_grad for p in small_model.parameters()]
    invert(small_model, torch.zeros(128, 6, 6), InversionConfig(steps=2))
    assert flags == [p.requires_grad for p in small_model.parameters()]
    assert all(p.grad is None for p in small_model.parameters())


def test_self_reference_identity_stub_is_one():
    model = _identity_model()
    x = 0.1 + 0.8 * torch.rand(3, 12, 12)
    m = self_reference(model, x)
    np.testing.assert_allclose(m.rms, 1.0, atol=1e-6)
    np.testing.assert_allclose(m.blocks, np.broadcast_to(np.eye(3), m.blocks.shape), atol=1e-6)


def _block_by_single_pixel_autodiff(model, x, py, px):
    eff = model.effective_decoder()
    z = x.clone().requires_grad_(True)
    xi = model.encode(z)[:, py, px]
    out = torch.zeros(3, 3, dtype=torch.float64)
    for i in range(3):
        (g,) = torch.autograd.grad((eff.A[i].float() * xi).sum(), z, retain_graph=True)
        out[i] = g[:, py, px].double()
    return out.numpy()


def test_self_reference_lattice_matches_per_pixel_autodiff(small_model):
    x = torch.rand(3, 11, 13)
    m = self_reference(small_model, x)
    for py, px in [(0, 0), (5, 6), (10, 12), (3, 9)]:
        np.testing.assert_allclose(m.blocks[py, px], _block_by_single_pixel_autodiff(small_model, x, py, px), atol=1e-6)
    assert np.all(np.isfinite(m.rms)) and np.all(m.rms >= 0)


def test_self_reference_matches_finite_differences():
    # untrained weights give a tiny, kink-dense Jacobian; a small float64 step stays on one linear piece
    model = make_model(num_experts=2).double()
    x = torch.rand(3, 10, 10, dtype=torch.float64)
    m = self_reference(model, x)
    for py, px in [(4, 4), (1, 7)]:
        fd = jacobian_block_fd(model, x, py, px, step=1e-6)
        assert np.linalg.norm(m.blocks[py, px] - fd) / np.linalg.norm(fd) < 1e-2


def test_self_reference_stride_marks_skipped_pixels(small_model):
    m = self_reference(small_model, torch.rand(3, 10, 10), pixel_stride=2)
    assert np.isnan(m.rms[1, 1]) and np.isfinite(m.rms[2, 4])
    assert m.meta["pixel_stride"] == 2


def test_cpwl_second_difference(small_model):
    x = torch.rand(3, 10, 10)
    d = torch.randn(3, 10, 10)
    second, unchanged = cpwl_second_difference(small_model, x, d, 1e-7)
    assert unchanged
    assert second < 1e-4


def test_metric_sweep_zero_sigma_and_rgb_moment(small_model):
    x = 0.25 + 0.5 * torch.rand(3, 16, 16)  # far from the clip bounds
    rows = metric_sweep(small_model, x, [0.0, 0.02], n_samples=20)
    assert rows[0]["rgb_mean"] == rows[0]["argb_mean"] == 0.0
    assert rows[1]["rgb_mean"] == pytest.approx(0.02**2, rel=0.05)


def test_metric_sweep_rejects_negative(small_model):
    with pytest.raises(ValueError):
        metric_sweep(small_model, torch.rand(3, 4, 4), [-0.1])


def test_write_rows_round_trip(tmp_path):
    rows = [{"sigma": 0.1, "v": 1 / 3}]
    text = write_rows(tmp_path / "r.csv", rows).read_text().splitlines()
    assert text[0] == "sigma,v" and float(text[1].split(",")[1]) == 1 / 3


def test_expert_map_constant_interior_and_definition(small_model):
    idx = expert_map(small_model, torch.full((3, 12, 12), 0.4))
    interior = idx[4:-4, 4:-4]
    assert (interior == interior[0, 0]).all()
    x = torch.rand(3, 9, 9)
    idx = expert_map(small_model, x)
    with torch.no_grad():
        assert np.array_equal(idx, small_model.route(x).argmax(0).numpy())
    assert idx.min() >= 0 and idx.max() < small_model.num_experts


def test_export_embeddings(tmp_path, small_model):
    x = torch.rand(3, 8, 8)
    path = export_embeddings(small_model, x, 1, tmp_path / "e.csv")
    ints, emb = read_embeddings(path)
    assert ints.shape == (64, 3) and emb.shape == (64, 128)
    with torch.no_grad():
        xi = small_model.encode(x)
    for (px, py, k), row in zip(ints, emb):
        assert np.array_equal(row, xi[:, py, px].numpy())
    emap = expert_map(small_model, x)
    assert all(emap[py, px] == k for px, py, k in ints)
    ints, _ = read_embeddings(export_embeddings(small_model, x, 3, tmp_path / "s.csv"))
    assert len(ints) == 9
    with pytest.raises(ValueError):
        export_embeddings(small_model, x, 0, tmp_path / "z.csv")


def test_maximize_filter_ascends_and_clamps(small_model):
    res = maximize_filter(small_model, 1, 5, size=16, steps=30)
    assert res.trace[-1] > res.trace[0]
    assert res.image.min() >= 0 and res.image.max() <= 1
    with pytest.raises(IndexError):
        maximize_filter(small_model, 9, 0)
    with pytest.raises(IndexError):
        maximize_filter(small_model, 0, 128)


def test_box_blur_matches_loop():
    x = torch.rand(3, 6, 7, dtype=torch.float64)
    out = box_blur(x, 3).numpy()
    pad = np.pad(x.numpy(), ((0, 0), (1, 1), (1, 1)), mode="edge")
    ref = np.zeros_like(out)
    for i in range(6):
        for j in range(7):
            ref[:, i, j] = pad[:, i : i + 3, j : j + 3].mean(axis=(1, 2))
    np.testing.assert_allclose(out, ref, atol=1e-12)
