import pytest
import torch

from sud2.denoisers import linear_schedule
from sud2.errors import ConfigError
from sud2.losses import correlation_loss
from sud2.models import (UNetConfig, build_autoencoder, build_diffusion_net, build_mlp_denoiser, build_unet,
                         count_parameters, forward_with_latent, load_checkpoint, parameter_hash, save_checkpoint)


def small(depth=4, width=4, **kw):
    return UNetConfig(base_width=width, depth=depth, **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(depth=0)
    with pytest.raises(ConfigError):
        UNetConfig(base_width=0)
    assert UNetConfig(base_width=8, depth=3).widths() == [8, 16, 32]


@pytest.mark.parametrize("residual", [True, False])
def test_unet_shapes_and_latent(residual):
    net = build_unet(small(), seed=0, residual=residual)
    net.eval()
    y = torch.rand(2, 3, 64, 64) * 2 - 1
    out, lat = forward_with_latent(net, y)
    assert out.shape == y.shape
    # base_width * 2**(depth-1) channels at (64 / 2**4)^2 positions
    assert lat.shape == (2, 4 * 2**3 * 4 * 4)
    assert torch.equal(out, net(y))


def test_unet_bad_spatial_size():
    net = build_unet(small(), seed=0)
    with pytest.raises(ConfigError):
        net(torch.zeros(1, 3, 40, 40))


def test_unet_seed_determinism_and_zero_input():
    a, b = build_unet(small(), seed=3), build_unet(small(), seed=3)
    assert parameter_hash(a) == parameter_hash(b)
    assert parameter_hash(a) != parameter_hash(build_unet(small(), seed=4))
    a.eval()
    out = a(torch.zeros(1, 3, 32, 32))
    assert torch.isfinite(out).all()


def test_output_range():
    y = torch.rand(4, 3, 32, 32) * 4 - 2
    for residual in (True, False):
        net = build_unet(small(), seed=0, residual=residual)
        net.eval()
        out = net(y)
        assert out.min() >= -1 and out.max() <= 1


def test_identical_inputs_give_identical_latents():
    net = build_unet(small(), seed=0)
    net.eval()
    y = (torch.rand(1, 3, 32, 32) * 2 - 1).repeat(3, 1, 1, 1)
    _, lat = forward_with_latent(net, y)
    assert torch.equal(lat[0], lat[1]) and torch.equal(lat[0], lat[2])
    # rescaled copies so the PCC is not dominated by its stabilizing epsilon
    assert correlation_loss(lat / lat.std()).item() == pytest.approx(1.0, abs=1e-5)


def test_autoencoder_contracts():
    cfg = small(width=8)
    ae = build_autoencoder(cfg, seed=0)
    assert parameter_hash(ae) == parameter_hash(build_autoencoder(cfg, seed=0))
    assert count_parameters(ae) < count_parameters(build_unet(cfg, seed=0))
    for size in (32, 64):
        x = torch.rand(2, 3, size, size)
        assert ae(x).shape == x.shape
    ae.eval()
    assert torch.isfinite(ae(torch.zeros(1, 3, 32, 32))).all()


def test_diffusion_net_contracts():
    net = build_diffusion_net(small(depth=3, width=8, use_attention=True), 20, seed=0)
    net.eval()
    x = torch.randn(2, 3, 16, 16)
    t1 = torch.tensor([1, 1])
    t2 = torch.tensor([15, 15])
    o1, o2 = net(x, t1), net(x, t2)
    assert o1.shape == x.shape
    assert not torch.allclose(o1, o2)
    assert torch.isfinite(net(torch.zeros_like(x), t2)).all()
    again = build_diffusion_net(small(depth=3, width=8, use_attention=True), 20, seed=0)
    again.eval()
    assert torch.equal(o1, again(x, t1))
    with pytest.raises(ValueError):
        net(x, torch.tensor([20, 0]))


@pytest.mark.parametrize("builder", ["unet", "autoencoder", "diffusion"])
def test_every_parameter_receives_gradient(builder):
    cfg = small(depth=2, width=4, use_attention=builder == "diffusion")
    torch.manual_seed(0)
    x = torch.randn(4, 3, 16, 16)
    target = torch.randn(4, 3, 16, 16)
    if builder == "unet":
        # non-residual so the head is not initialized near zero
        net = build_unet(cfg, seed=0, residual=False)
        out = net(x)
    elif builder == "autoencoder":
        net = build_autoencoder(cfg, seed=0, residual=False)
        out = net(x)
    else:
        net = build_diffusion_net(cfg, 10, seed=0)
        out = net(x, torch.tensor([0, 3, 6, 9]))
    (out - target).pow(2).mean().backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or torch.count_nonzero(p.grad) == 0]
    assert dead == []


def test_checkpoint_roundtrip(tmp_path):
    cfg = small(depth=2)
    net = build_unet(cfg, seed=1, residual=False)
    net.train()
    net(torch.rand(4, 3, 16, 16))  # move running statistics
    save_checkpoint(tmp_path / "u.pt", net, "unet", cfg, step=7, extra={"residual": False})
    back, rec = load_checkpoint(tmp_path / "u.pt")
    assert rec["step"] == 7 and rec["kind"] == "unet"
    assert parameter_hash(back) == parameter_hash(net)
    net.eval()
    back.eval()
    y = torch.rand(2, 3, 16, 16)
    assert torch.equal(net(y), back(y))

    s = linear_schedule(12)
    dn = build_diffusion_net(small(depth=2, width=4, use_attention=True), len(s), seed=0)
    save_checkpoint(tmp_path / "d.pt", dn, "diffusion", small(depth=2, width=4, use_attention=True), s)
    back, rec = load_checkpoint(tmp_path / "d.pt")
    assert rec["schedule"] == s
    assert parameter_hash(back) == parameter_hash(dn)

    mlp = build_mlp_denoiser(2, hidden=16, layers=2, seed=0)
    save_checkpoint(tmp_path / "m.pt", mlp, "mlp_denoiser", extra={"dim": 2, "hidden": 16, "layers": 2})
    back, _ = load_checkpoint(tmp_path / "m.pt")
    assert parameter_hash(back) == parameter_hash(mlp)


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.pt")
