"""Tensor substrate: convolution, differentiation bookkeeping, gradient checks and Lion.

Tensors are ``torch.Tensor`` (float32 by default). Autodiff is torch's tape; this
module adds the contract the rest of the package relies on: finite-value checks,
single-use backward passes, zero gradients for parameters off the path, and a
central-difference checker used by the test-suite and the ``gradcheck`` command.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim.optimizer import Optimizer

DTYPE = torch.float32


class NumericalError(ArithmeticError):
    """Raised when a NaN/Inf shows up or a numeric contract is broken."""


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def check_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NumericalError(f"{where}: {bad} non-finite value(s)")
    return t


def conv2d(x: torch.Tensor, kernels: torch.Tensor, padding: str = "same", bias=None) -> torch.Tensor:
    """Cross-correlate ``x`` ([C_in,H,W] or [B,C_in,H,W]) with ``kernels`` [C_out,C_in,kh,kw]."""
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kernels.dim() != 4:
        raise ValueError(f"kernels must be 4-D [C_out,C_in,kh,kw], got shape {tuple(kernels.shape)}")
    kh, kw = kernels.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"input must be [C,H,W] or [B,C,H,W], got shape {tuple(x.shape)}")
    if x.shape[1] != kernels.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}"
        )
    pad = (kh // 2, kw // 2) if padding == "same" else 0
    out = F.conv2d(x, kernels, bias=bias, padding=pad)
    return out[0] if unbatched else out


def backward(loss: torch.Tensor, parameters: Iterable[torch.Tensor] = ()) -> None:
    """Back-propagate a scalar loss once.

    Gradients are written to ``.grad`` (overwriting, not accumulating). Any
    parameter listed in ``parameters`` that did not take part in the loss gets
    an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not attached to a differentiation recording")
    if getattr(loss, "_cwflow_consumed", False):
        raise RuntimeError("backward already ran on this recording; rebuild the loss first")
    check_finite(loss.detach(), "loss")
    params = list(parameters)
    for p in params:
        p.grad = None
    loss.backward()
    loss._cwflow_consumed = True
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def grad_check(
    f: Callable[[], torch.Tensor],
    parameters: Sequence[torch.Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is re-evaluated after in-place perturbation of each parameter entry,
    so it must close over ``parameters``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_coords`` limits the number of
    coordinates probed per parameter (chosen at random).
    """
    params = list(parameters)
    loss = f()
    if not torch.isfinite(loss):
        raise NumericalError("grad_check: f is not finite at the base point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and idx.size > max_coords:
                idx = rng.choice(idx, size=max_coords, replace=False)
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + eps
                up = f().item()
                flat[j] = orig - eps
                down = f().item()
                flat[j] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericalError("grad_check: f is not finite at a perturbed point")
                num = (up - down) / (2 * eps)
                ana = gflat[j].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, rel)
    return worst


def lion_step(params, grads, momenta, lr=1e-4, beta1=0.9, beta2=0.99, weight_decay=1e-5):
    """Functional Lion update on lists of tensors; returns (new_params, new_momenta)."""
    new_p, new_m = [], []
    for p, g, m in zip(params, grads, momenta):
        if not (p.shape == g.shape == m.shape):
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, momentum {tuple(m.shape)}")
        update = torch.sign(beta1 * m + (1 - beta1) * g)
        new_p.append(p - lr * (update + weight_decay * p))
        new_m.append(beta2 * m + (1 - beta2) * g)
    return new_p, new_m


class Lion(Optimizer):
    """Sign-momentum optimizer with decoupled weight decay.

    update = sign(beta1*m + (1-beta1)*g); p -= lr*(update + wd*p);
    m = beta2*m + (1-beta2)*g.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.99), weight_decay=1e-5):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, wd = group["lr"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["exp_avg"] = torch.zeros_like(p)
                m = state["exp_avg"]
                update = torch.sign(m * beta1 + p.grad * (1 - beta1))
                p.sub_(lr * (update + wd * p))
                m.mul_(beta2).add_(p.grad, alpha=1 - beta2)
        return loss
