"""Muon optimizer and the Muon/AdamW parameter split.

Muon keeps a momentum buffer per parameter, orthogonalizes the (Nesterov)
update with five quintic Newton-Schulz iterations and scales it by
sqrt(max(1, size(-2)/size(-1))) of the unflattened gradient. Conv kernels
are flattened to (c_out, fan_in) for the orthogonalization and restored
afterwards; their scale reads the trailing kernel dims and is therefore 1.

Weight matrices (names ending in ".w": conv kernels, attention projections,
MLPs, the head) go to Muon; everything else (biases, residual rates, rotation
rates, prompt embeddings) belongs in AdamW.
"""

from __future__ import annotations

import torch

NS_COEFFS = (3.4445, -4.775, 2.0315)


@torch.no_grad()
def newton_schulz(g: torch.Tensor, steps: int = 5) -> torch.Tensor:
    """Approximate orthogonalization (zeroth matrix power) of each matrix.

    Accepts (r, c) or a batched (..., r, c) stack; matrices are independent,
    batching only amortizes dispatch overhead.
    """
    if g.ndim < 2:
        raise ValueError(f"expected a matrix, got {g.ndim}D")
    a, b, c = NS_COEFFS
    x = g.float()
    transposed = x.shape[-2] > x.shape[-1]
    if transposed:
        x = x.mT
    # per-matrix Frobenius normalization brings the spectral norm under 1
    x = x / (x.norm(dim=(-2, -1), keepdim=True) + 1e-7)
    for _ in range(steps):
        aa = x @ x.mT
        bb = b * aa + c * (aa @ aa)
        x = a * x + bb @ x
    return x.mT if transposed else x


class Muon(torch.optim.Optimizer):
    def __init__(self, params, lr: float = 0.002, momentum: float = 0.95,
                 nesterov: bool = True, ns_steps: int = 5):
        if lr < 0:
            raise ValueError(f"invalid learning rate: {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"invalid momentum: {momentum}")
        defaults = dict(lr=lr, momentum=momentum, nesterov=nesterov, ns_steps=ns_steps)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta = group["momentum"]
            buckets: dict[tuple, list] = {}
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if "momentum_buffer" not in state:
                    state["momentum_buffer"] = torch.zeros_like(p)
                buf = state["momentum_buffer"]
                buf.lerp_(grad, 1.0 - beta)
                update = grad.lerp(buf, beta) if group["nesterov"] else buf.clone()
                flat = update if update.ndim == 2 else update.reshape(update.shape[0], -1)
                # aspect scale from the pre-flatten trailing dims
                dims = update.shape if update.ndim >= 2 else flat.shape
                scale = max(1.0, dims[-2] / dims[-1]) ** 0.5
                buckets.setdefault(tuple(flat.shape), []).append((p, flat, scale))
            for items in buckets.values():
                ortho = newton_schulz(
                    torch.stack([f for _, f, _ in items]), group["ns_steps"]
                )
                for (p, _, scale), u in zip(items, ortho):
                    p.add_(u.view_as(p), alpha=-group["lr"] * scale)
        return loss


def split_param_groups(net) -> tuple[list, list]:
    """(muon_params, adamw_params) for a net exposing named_weights()."""
    muon, adamw = [], []
    for name, p in net.named_weights():
        (muon if name.endswith(".w") else adamw).append(p)
    return muon, adamw
