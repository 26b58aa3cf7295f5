import copy

import numpy as np
import pytest
import torch
from torch import nn

from canonpose.errors import ConfigError, ShapeError
from canonpose.models import Critic, Generator, Stage1Config, Stage1Net, Stage2Config
from canonpose.models.blocks import UpPath, transpose_padding
from canonpose.models.stage2 import squash

from oracles import central_fd


def _x(b=2, hw=(64, 64), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 2, *hw, generator=g)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return Stage1Net(Stage1Config()).eval()


# --- stage one ---

def test_stage1_shapes_and_range(net):
    x = _x()
    lf, msf, c = net(x)
    assert lf.shape == msf.shape == (2, 1, 64, 64)
    assert c.shape == (2, 2, 64, 64)
    assert c.min() >= 0 and c.max() <= 1
    assert torch.equal(net(x)[2], c)


def test_stage1_range_on_extreme_inputs(net):
    x = torch.randn(2, 2, 64, 64) * 1e3
    c = net(x)[2]
    assert torch.isfinite(c).all() and c.min() >= 0 and c.max() <= 1


def test_latent_and_fuse_shapes(net):
    x = _x()
    lf = net.local_features(x)
    z = [net.encode(x, lf, d) for d in (1, 2, 3)]
    assert all(v.shape == (2, 256) for v in z)
    assert net.fuse(*z).shape == (2, 1, 64, 64)
    with pytest.raises(ConfigError):
        net.encode(x, lf, 4)
    with pytest.raises(ShapeError):
        net.fuse(z[0], z[1], z[2][:, :100])
    with pytest.raises(ShapeError):
        net(_x(hw=(32, 32)))
    with pytest.raises(ShapeError):
        net.canonical(x, lf, torch.zeros(2, 2, 64, 64))


def test_fuser_zero_propagation():
    torch.manual_seed(1)
    m = Stage1Net(Stage1Config())
    with torch.no_grad():
        for mod in m.fuser.modules():
            if hasattr(mod, "bias") and mod.bias is not None:
                mod.bias.zero_()
    z = torch.zeros(1, 256)
    assert torch.count_nonzero(m.fuse(z, z, z)) == 0


@pytest.mark.parametrize("flag", ["enable_lfe", "enable_msfe"])
def test_ablation_stub_keeps_shapes(flag):
    torch.manual_seed(0)
    m = Stage1Net(Stage1Config(**{flag: False})).eval()
    lf, msf, c = m(_x())
    stub = lf if flag == "enable_lfe" else msf
    assert stub.shape == (2, 1, 64, 64) and torch.count_nonzero(stub) == 0
    assert c.shape == (2, 2, 64, 64)


def test_dilation_widens_first_layer_footprint(net):
    extents = {}
    for d in (1, 3):
        conv = net.encoders[(1, 2, 3).index(d)].down[0][0]
        x = torch.zeros(1, 3, 32, 32, requires_grad=True)
        conv(x)[0, :, 16, 16].sum().backward()
        rows, cols = np.nonzero(x.grad[0].abs().sum(0).numpy())
        extents[d] = (rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
    assert extents[1] == (5, 5) and extents[3] == (13, 13)


def test_every_stage1_parameter_gets_gradient():
    torch.manual_seed(0)
    m = Stage1Net(Stage1Config())
    c = m(_x())[2]
    ((c - 0.3) ** 2).mean().backward()
    missing = [n for n, p in m.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert not missing


def test_paper_scale_dimensions():
    with torch.device("meta"):
        m = Stage1Net(Stage1Config.paper())
        x = torch.empty(1, 2, 500, 500)
        lf, msf, c = m(x)
        z = m.encode(x, lf, 2)
    assert z.shape == (1, 1600)
    first = m.fuser.mlp[0]
    assert (first.in_features, first.out_features) == (4800, 500)
    assert m.fuser.mlp[2].out_features == 500
    assert lf.shape == msf.shape == (1, 1, 500, 500) and c.shape == (1, 2, 500, 500)


def test_up_path_layout():
    cfg = Stage1Config()
    kernels = [layer.kernel_size[0] for layer in Stage1Net(cfg).reconstruct.up.net if isinstance(layer, nn.ConvTranspose2d)]
    assert kernels == [5, 3, 2, 5, 3]
    convs = [layer for layer in Stage1Net(cfg).fuser.up.net if isinstance(layer, nn.ConvTranspose2d)]
    assert len(convs) == 6
    with pytest.raises(ConfigError):
        transpose_padding(2, 1, 8, 8)
    with pytest.raises(ConfigError):
        UpPath([4, 4], [3], (16, 16), 2)


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigError):
        Stage1Config(dilations=(1, 2, 4))
    with pytest.raises(ConfigError):
        Stage1Config(encoder_latent_dim=0)
    cfg = Stage1Config(enable_lfe=False)
    assert Stage1Config.from_dict(cfg.to_dict()) == cfg
    assert cfg.fingerprint() != Stage1Config().fingerprint()


def _fd_check(model32, loss_fn, n_params=24, seed=0):
    """Analytic float32 gradient vs float64 central differences on a parameter subset."""
    model64 = copy.deepcopy(model32).double()
    rng = np.random.default_rng(seed)
    named32 = dict(model32.named_parameters())
    named64 = dict(model64.named_parameters())
    names = list(named32)
    coords = [(n, i) for n in names for i in range(named32[n].numel())]
    picks = [coords[j] for j in rng.choice(len(coords), n_params, replace=False)]
    model32.zero_grad()
    loss_fn(model32, torch.float32).backward()
    analytic = np.array([named32[n].grad.reshape(-1)[i].item() for n, i in picks])

    def f(theta):
        with torch.no_grad():
            for (n, i), v in zip(picks, theta):
                named64[n].view(-1)[i] = v
            return loss_fn(model64, torch.float64).item()

    theta0 = np.array([named64[n].detach().reshape(-1)[i].item() for n, i in picks])
    numeric = central_fd(f, theta0, h=1e-6)
    f(theta0)
    return np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)


def test_stage1_finite_differences():
    torch.manual_seed(0)
    cfg = Stage1Config(input_resolution=(16, 16), encoder_latent_dim=16, fused_latent_dim=16)
    m = Stage1Net(cfg)
    x = _x(hw=(16, 16), seed=3)
    w = torch.randn(2, 2, 16, 16, generator=torch.Generator().manual_seed(4))

    def loss(model, dtype):
        return (model(x.to(dtype))[2] * w.to(dtype)).sum()

    assert _fd_check(m, loss) < 1e-3


# --- stage two ---

@pytest.fixture(scope="module")
def gen():
    torch.manual_seed(0)
    return Generator(Stage2Config()).eval()


def test_generator_shapes_and_range(gen):
    x, c = _x(), _x(seed=1)
    assert gen.encode_pose(x).shape == (2, 128)
    assert gen.encode_shape(c).shape == (2, 128)
    y = gen(x, c)
    assert y.shape == (2, 32, 32, 32)
    assert y.min() > 0 and y.max() < 1
    assert torch.equal(gen(x, c), y)
    assert not torch.equal(gen.encode_pose(x[:1]), gen.encode_pose(x[1:]))


def test_logits_path_matches_forward(gen):
    x, c = _x(), _x(seed=1)
    assert torch.equal(squash(gen.logits(x, c)), gen(x, c))


def test_decoder_output_never_saturates(gen):
    z = torch.full((1, 128), 1e4)
    y = gen.decode(z, -z)
    assert y.min() > 0 and y.max() < 1


def test_shape_encoder_ablation():
    torch.manual_seed(0)
    g = Generator(Stage2Config(enable_shape_encoder=False))
    assert torch.count_nonzero(g.encode_shape(_x())) == 0
    assert g.shape_encoder is None
    assert g(_x(), _x(seed=1)).shape == (2, 32, 32, 32)


def test_generator_shape_errors(gen):
    with pytest.raises(ShapeError):
        gen.encode_pose(_x(hw=(32, 32)))
    with pytest.raises(ShapeError):
        gen.decode(torch.zeros(1, 128), torch.zeros(1, 64))


def test_gradient_reaches_both_encoders():
    torch.manual_seed(0)
    g = Generator(Stage2Config())
    g(_x(), _x(seed=1)).mean().backward()
    for part in (g.pose_encoder, g.shape_encoder, g.decoder):
        assert all(p.grad is not None and torch.any(p.grad != 0) for p in part.parameters())


def test_critic_contract():
    torch.manual_seed(0)
    d = Critic(Stage2Config())
    y = torch.rand(2, 32, 32, 32)
    out = d(y, _x())
    assert out.shape == (2, 16) and torch.isfinite(out).all()
    with pytest.raises(ShapeError):
        d(torch.rand(2, 16, 16, 16), _x())
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    assert torch.count_nonzero(d(y, _x())) == 0
    assert not any(isinstance(m, (nn.BatchNorm3d, nn.InstanceNorm3d, nn.LayerNorm)) for m in d.modules())


def test_critic_input_finite_differences():
    torch.manual_seed(0)
    cfg = Stage2Config(voxel_resolution=8, seed_resolution=4)
    d32 = Critic(cfg)
    d64 = copy.deepcopy(d32).double()
    x = _x(b=1)
    rng = np.random.default_rng(0)
    y = rng.random((1, 8, 8, 8))
    yt = torch.tensor(y, dtype=torch.float32, requires_grad=True)
    d32(yt, x).mean().backward()
    analytic = yt.grad.numpy().astype(np.float64)

    def f(v):
        with torch.no_grad():
            return d64(torch.from_numpy(v), x.double()).mean().item()

    numeric = central_fd(f, y, h=1e-6)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-3


def test_stage2_paper_scale():
    with torch.device("meta"):
        cfg = Stage2Config.paper()
        g = Generator(cfg)
        y = g(torch.empty(1, 2, 500, 500), torch.empty(1, 2, 500, 500))
        out = Critic(cfg)(y, torch.empty(1, 2, 500, 500))
    assert y.shape == (1, 256, 256, 256)
    assert out.shape == (1, 16)


def test_stage2_config_validation():
    with pytest.raises(ConfigError):
        Stage2Config(voxel_resolution=48)
    with pytest.raises(ConfigError):
        Stage2Config(disc_output_dim=1)
    with pytest.raises(ConfigError):
        Stage2Config(pose_latent_dim=0)


@pytest.mark.parametrize("seed", range(10))
def test_multi_scale_map_starts_alive(seed):
    torch.manual_seed(seed)
    m = Stage1Net(Stage1Config())
    x = _x(seed=seed)
    msf = m.multi_scale_features(x, m.local_features(x))
    assert torch.all(msf > 0)
