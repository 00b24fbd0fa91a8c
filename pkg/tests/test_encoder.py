import numpy as np
import pytest
import torch
import torch.nn as nn

from mos.encoder import (
    EncoderState,
    HeadConfig,
    NumericError,
    ViT,
    ViTConfig,
    ema_update,
    encode,
    forward_all,
    patchify,
    predict_head,
    project_head,
)

MICRO = ViTConfig(image_size=8, patch_size=2, embed_dim=16, depth=2, heads=2, mlp_ratio=2.0)
HEAD = HeadConfig(hidden_dim=32, out_dim=16)


def _state(seed=0, dtype=torch.float64):
    return EncoderState(MICRO, HEAD, seed=seed, dtype=dtype)


def test_patchify_shapes():
    assert patchify(torch.rand(1, 3, 32, 32), 2).shape == (1, 256, 12)


def test_patchify_constant_image():
    tokens = patchify(torch.full((1, 3, 8, 8), 0.7), 2)[0]
    assert torch.all(tokens == tokens[0])


def test_patchify_order():
    img = torch.arange(3 * 4 * 4, dtype=torch.float32).view(1, 3, 4, 4)
    tok = patchify(img, 2)[0]
    # second token is the top-right patch; channel runs fastest
    assert tok[1, :3].tolist() == [img[0, 0, 0, 2], img[0, 1, 0, 2], img[0, 2, 0, 2]]
    assert tok[2, 0] == img[0, 0, 2, 0]


def test_patchify_bad_size():
    with pytest.raises(ValueError):
        patchify(torch.rand(1, 3, 32, 32), 5)


def test_config_validation():
    with pytest.raises(ValueError):
        ViTConfig(image_size=32, patch_size=5)
    with pytest.raises(ValueError):
        ViTConfig(embed_dim=30, heads=4)


def test_encode_batch_equivariance():
    vit = ViT(MICRO).double()
    x = torch.randn(6, 3, 8, 8, dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    torch.testing.assert_close(encode(x[perm], vit), encode(x, vit)[perm], atol=1e-12, rtol=0)


def test_encode_deterministic():
    torch.manual_seed(0)
    vit = ViT(MICRO)
    x = torch.randn(4, 3, 8, 8)
    assert torch.equal(encode(x, vit), encode(x, vit))


def test_zeroed_residual_branches_are_identity():
    blk = ViT(MICRO).double().blocks[-1]
    with torch.no_grad():
        for lin in (blk.attn.proj, blk.fc2):
            lin.weight.zero_()
            lin.bias.zero_()
    x = torch.randn(2, 17, 16, dtype=torch.float64)
    assert torch.equal(blk(x), x)


def test_non_finite_activation_names_layer():
    vit = ViT(MICRO)
    with torch.no_grad():
        vit.blocks[1].fc2.bias.fill_(float("inf"))
    with pytest.raises(NumericError, match="block 1"):
        encode(torch.randn(2, 3, 8, 8), vit)


def test_heads_zero_input_zero_output():
    proj, pred = project_head(MICRO, HEAD), predict_head(HEAD)
    assert torch.all(proj(torch.zeros(3, 16)) == 0)
    assert torch.all(pred(torch.zeros(3, 16)) == 0)


@pytest.mark.parametrize("n", [1, 5, 32])
def test_head_output_dims(n):
    proj, pred = project_head(MICRO, HEAD), predict_head(HEAD)
    z = proj(torch.randn(n, 16))
    assert z.shape == (n, 16) and pred(z).shape == (n, 16)
    with pytest.raises(RuntimeError):
        proj(torch.randn(n, 7))


def test_head_structure():
    proj, pred = project_head(MICRO, HEAD), predict_head(HEAD)
    assert sum(isinstance(m, nn.Linear) for m in proj) == 3
    assert sum(isinstance(m, nn.Linear) for m in pred) == 2
    assert isinstance(proj[-1], nn.Linear)  # unnormalized output


def test_heads_gradient_finite_differences():
    torch.manual_seed(1)
    proj, pred = project_head(MICRO, HEAD).double(), predict_head(HEAD).double()
    # well-conditioned random point away from ReLU kinks
    with torch.no_grad():
        for p in list(proj.parameters()) + list(pred.parameters()):
            p.copy_(torch.randn_like(p) * (p.shape[-1] ** -0.5 if p.dim() == 2 else 0.3))
    x = torch.randn(4, 16, dtype=torch.float64)
    probe = torch.randn(4, 16, dtype=torch.float64)

    def f():
        return (pred(proj(x)) * probe).sum()

    f().backward()
    h, worst = 1e-4, 0.0
    for p in list(proj.parameters()) + list(pred.parameters()):
        flat = p.data.view(-1)
        for k in range(0, flat.numel(), 7):
            orig = float(flat[k])
            flat[k] = orig + h
            with torch.no_grad():
                up = float(f())
            flat[k] = orig - h
            with torch.no_grad():
                down = float(f())
            flat[k] = orig
            fd, a = (up - down) / (2 * h), float(p.grad.view(-1)[k])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    assert worst < 1e-4


def test_ema_examples():
    xi, theta = [torch.tensor([1.0])], [torch.tensor([0.0])]
    ema_update(xi, theta, 0.99)
    assert float(xi[0]) == pytest.approx(0.99)
    xi = [torch.randn(3, 4)]
    theta = [torch.randn(3, 4)]
    before, tb = xi[0].clone(), theta[0].clone()
    ema_update(xi, theta, 1.0)
    assert torch.equal(xi[0], before)
    ema_update(xi, theta, 0.0)
    assert torch.equal(xi[0], theta[0]) and torch.equal(theta[0], tb)


def test_ema_geometric_convergence():
    g = torch.Generator().manual_seed(0)
    theta = [torch.randn(5, generator=g, dtype=torch.float64)]
    xi = [torch.randn(5, generator=g, dtype=torch.float64)]
    gap0 = xi[0] - theta[0]
    for _ in range(20):
        ema_update(xi, theta, 0.9)
    torch.testing.assert_close(xi[0] - theta[0], gap0 * 0.9 ** 20, atol=1e-9, rtol=0)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update([torch.zeros(3)], [torch.zeros(4)], 0.5)


def test_state_momentum_copy():
    st = _state()
    for a, b in zip(st.base.parameters(), st.momentum.parameters()):
        assert torch.equal(a, b) and not b.requires_grad
    names = [n for n, _ in st.trainable()]
    assert not any(n.startswith("momentum.") for n in names)
    assert any(n.startswith("projector.") for n in names) and any(n.startswith("predictor.") for n in names)


def _views(n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, 3, 8, 8, generator=g, dtype=torch.float64) for _ in range(4)]


def test_forward_all_shapes():
    b = forward_all(*_views(), _state())
    for name in ("p_mul1", "p3", "z_mul2", "z3", "z4"):
        assert getattr(b, name).shape == (6, 16)


def test_momentum_branch_is_gradient_free():
    st = _state()
    for p in st.momentum.parameters():
        p.requires_grad_(True)
    b = forward_all(*_views(), st)
    assert not b.z3.requires_grad and not b.z_mul2.requires_grad and not b.z4.requires_grad
    b.p3.sum().backward()
    for p in st.momentum.parameters():
        assert p.grad is None or not p.grad.any()


def test_z3_scalar_has_zero_gradient_everywhere():
    st = _state()
    b = forward_all(*_views(), st)
    assert b.z3.grad_fn is None
    params = [p for _, p in st.trainable()]
    grads = torch.autograd.grad(b.p3.sum() * 0 + b.z3.sum(), params, allow_unused=True)
    assert all(g is None or not g.any() for g in grads)


def test_identity_predictor_path_equality():
    st = _state()
    st.predictor = nn.Identity()
    b = forward_all(*_views(), st)
    torch.testing.assert_close(b.p3.detach(), b.z3, atol=1e-12, rtol=0)


def test_batch_norm_heads_run_views_separately():
    st = EncoderState(MICRO, HeadConfig(32, 16, norm="batch"), dtype=torch.float64)
    b = forward_all(*_views(), st)
    assert b.p_mul1.shape == (6, 16)
