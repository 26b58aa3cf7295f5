"""Measurement routines shared by the unit tests and the acceptance suite.

Each returns the raw quantity a criterion thresholds, so the caller decides
pass/fail and can print the number.
"""

import numpy as np
import torch
from torch import nn

from canonpose import losses
from canonpose.losses import Stage1LossWeights

from oracles import central_fd, linear_critic_penalty_ref


class TinyCritic(nn.Module):
    """Smooth two-layer critic on 4^3 grids, (B, K) output."""

    def __init__(self, k=3, hidden=6, side=4):
        super().__init__()
        self.fc1 = nn.Linear(side ** 3 + 2, hidden)
        self.fc2 = nn.Linear(hidden, k)

    def forward(self, y, x):
        feats = torch.cat([y.flatten(1), x.flatten(1).mean(1, keepdim=True).expand(-1, 2)], 1)
        return self.fc2(torch.tanh(self.fc1(feats)))


class LinearCritic(nn.Module):
    """D_k(y) = <w_k, y>; the component mean has gradient mean_k w_k."""

    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(w)

    def forward(self, y, x):
        return torch.einsum("kxyz,bxyz->bk", self.w, y)


class ConstantCritic(nn.Module):
    def forward(self, y, x):
        return torch.full((y.shape[0], 4), 3.0)


def _rel(analytic, numeric):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = np.linalg.norm(numeric)
    return np.linalg.norm(analytic - numeric) / scale if scale > 0 else np.linalg.norm(analytic)


def _fd_rel(fn, inputs, wrt):
    """Relative error of float32 autograd vs float64 central differences.

    ``fn(*tensors)`` returns a scalar; ``inputs`` are float64 numpy arrays;
    gradients are taken with respect to the indices in ``wrt``.
    """
    t32 = [torch.tensor(a, dtype=torch.float32, requires_grad=i in wrt) for i, a in enumerate(inputs)]
    fn(*t32).backward()
    errs = []
    for i in wrt:
        def f(v, i=i):
            args = [torch.from_numpy(v) if j == i else torch.from_numpy(a) for j, a in enumerate(inputs)]
            return fn(*args).item()

        errs.append(_rel(t32[i].grad.numpy().astype(np.float64), central_fd(f, inputs[i], h=1e-6)))
    return max(errs)


def _gp_fd_rel(rng):
    torch.manual_seed(int(rng.integers(2 ** 31)))
    c32 = TinyCritic()
    c64 = TinyCritic().double()
    c64.load_state_dict({k: v.double() for k, v in c32.state_dict().items()})
    y_fake, y_real = rng.random((2, 4, 4, 4)), rng.random((2, 4, 4, 4))
    x = rng.random((2, 2, 4, 4))
    seed = int(rng.integers(2 ** 31))

    def gp(critic, dtype):
        g = torch.Generator().manual_seed(seed)
        args = (torch.tensor(a, dtype=dtype) for a in (y_fake, y_real, x))
        return losses.gradient_penalty(critic, *args, generator=g)

    gp(c32, torch.float32).backward()
    # a random subset of parameter coordinates, pooled into one relative error
    names = [n for n, _ in c32.named_parameters()]
    params32 = dict(c32.named_parameters())
    flat64 = dict(c64.named_parameters())
    coords = [(n, i) for n in names for i in range(params32[n].numel())]
    picks = [coords[j] for j in rng.choice(len(coords), 12, replace=False)]
    analytic = np.array([0.0 if params32[n].grad is None else params32[n].grad.reshape(-1)[i].item()
                         for n, i in picks])

    def f(theta):
        with torch.no_grad():
            for (n, i), v in zip(picks, theta):
                flat64[n].view(-1)[i] = v
        return gp(c64, torch.float64).item()

    theta0 = np.array([flat64[n].detach().reshape(-1)[i].item() for n, i in picks])
    numeric = central_fd(f, theta0, h=1e-6)
    f(theta0)
    return _rel(analytic, numeric)


def loss_fd_errors(trials=100, seed=0):
    """Worst relative gradient error per loss over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    w = Stage1LossWeights(alpha=10.0, beta=1000.0)
    for _ in range(trials):
        img = lambda: rng.random((2, 4, 4))  # noqa: E731
        note("depth_loss", _fd_rel(losses.depth_loss, [img(), img(), img(), img()], (0, 1)))
        note("mask_loss", _fd_rel(losses.mask_loss, [img(), img()], (0,)))
        pair = lambda: rng.random((2, 2, 4, 4))  # noqa: E731
        note("stage1_loss", _fd_rel(lambda p, g: losses.stage1_loss(p, g, w)[0], [pair(), pair()], (0,)))
        gt = (rng.random((2, 4, 4, 4)) < 0.3).astype(np.float64)
        pred = rng.uniform(0.05, 0.95, (2, 4, 4, 4))
        a_bce = float(rng.uniform(0.1, 2.0))
        note("weighted_bce", _fd_rel(lambda p, g: losses.weighted_bce(p, g, a_bce), [pred, gt], (0,)))
        note("gen_loss", _fd_rel(losses.gen_loss, [rng.normal(size=(2, 5))], (0,)))
        lam = float(rng.uniform(0, 20))
        note("disc_loss", _fd_rel(lambda f, r, g: losses.disc_loss(f, r, g, lam),
                                  [rng.normal(size=(2, 5)), rng.normal(size=(2, 5)), rng.random(())], (0, 1, 2)))
        gamma = float(rng.random())
        note("stage2_gen_objective", _fd_rel(lambda b, g: losses.stage2_gen_objective(b, g, gamma),
                                             [rng.random(()), rng.normal(size=())], (0, 1)))
        note("gradient_penalty", _gp_fd_rel(rng))
    return worst


def masked_depth_change(n=1000, seed=0):
    """Largest |change| of L_Depth under perturbations confined to pixels with pm * gm == 0."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        shape = (int(rng.integers(1, 4)), 8, 8)
        pd, gd = (torch.tensor(rng.random(shape), dtype=torch.float32) for _ in range(2))
        pm = torch.tensor(rng.random(shape) * (rng.random(shape) < 0.6), dtype=torch.float32)
        gm = torch.tensor((rng.random(shape) < 0.5).astype(np.float32))
        base = losses.depth_loss(pd, pm, gd, gm)
        off = (pm * gm) == 0
        noise = torch.tensor(rng.normal(scale=10.0, size=shape), dtype=torch.float32)
        moved = losses.depth_loss(torch.where(off, pd + noise, pd), pm, gd, gm)
        worst = max(worst, abs(moved.item() - base.item()))
    return worst


def gp_analytics(seed=0):
    """(unit-gradient penalty, constant-critic penalty, max |linear - oracle| on 8^3)."""
    rng = np.random.default_rng(seed)
    side = 8
    y = [torch.tensor(rng.random((3, side, side, side)), dtype=torch.float32) for _ in range(2)]
    x = torch.zeros(3, 2, 4, 4)
    g = torch.Generator().manual_seed(seed)
    unit = torch.full((1, side, side, side), 1.0 / side ** 1.5)
    p_unit = losses.gradient_penalty(LinearCritic(unit), y[0], y[1], x, generator=g).item()
    p_const = losses.gradient_penalty(ConstantCritic(), y[0], y[1], x, generator=g).item()
    worst = 0.0
    for _ in range(20):
        w = rng.normal(scale=float(rng.uniform(0.001, 0.2)), size=(4, side, side, side))
        got = losses.gradient_penalty(LinearCritic(torch.tensor(w, dtype=torch.float32)), y[0], y[1], x, generator=g)
        worst = max(worst, abs(got.item() - linear_critic_penalty_ref(w.mean(0))))
    return p_unit, p_const, worst
