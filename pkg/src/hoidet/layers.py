"""Shared differentiable building blocks and the gradient-checking facility.

Everything learned in this package is built from the pieces here: linear
stacks, from-scratch multi-head attention that exposes its weights, 2-D
sinusoidal positional encodings, a deterministic fan-in initializer, and
finite-difference verification utilities. Checkpoint save/load also lives
here since it only deals in named parameter tensors.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``heads`` subspaces of width d/heads.

    Returns both the attended output and the (heads, n_q, n_k) weight tensor
    so callers can dump attention maps.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, query: torch.Tensor, key: torch.Tensor,
                value: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n_q, n_k = query.shape[0], key.shape[0]
        q = self.q_proj(query).reshape(n_q, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).reshape(n_k, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(value).reshape(n_k, self.heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        attended = weights @ v  # (heads, n_q, head_dim)
        out = attended.transpose(0, 1).reshape(n_q, self.d)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    """Affine stack with ReLU between layers and a linear final layer.

    ``widths`` lists every layer size including input and output, e.g.
    (d, 4d, d) for a transformer FFN or (d, d, d, out) for a 3-layer head.
    """

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        self.widths = tuple(widths)
        self.layers = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(len(widths) - 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} != expected {self.widths[0]}")
        for layer in self.layers[:-1]:
            x = torch.relu(layer(x))
        return self.layers[-1](x)


def positional_encoding_2d(height: int, width: int, d: int,
                           dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, shape (height*width, d).

    The first d/2 channels encode the row index, the rest the column index;
    within each half, sine/cosine pairs run over d/4 geometric frequencies.
    Every row has norm exactly sqrt(d/2).
    """
    if d % 4 != 0:
        raise ValueError(f"encoding width {d} must be divisible by 4")
    half = d // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half // 2, dtype=torch.float64) * 2 / half)
    rows = torch.arange(height, dtype=torch.float64)[:, None] * freq  # (H, d/4)
    cols = torch.arange(width, dtype=torch.float64)[:, None] * freq  # (W, d/4)

    def interleave(angles: torch.Tensor) -> torch.Tensor:
        return torch.stack([angles.sin(), angles.cos()], dim=-1).flatten(1)

    row_enc = interleave(rows)  # (H, d/2)
    col_enc = interleave(cols)  # (W, d/2)
    out = torch.empty(height, width, d, dtype=torch.float64)
    out[..., :half] = row_enc[:, None, :]
    out[..., half:] = col_enc[None, :, :]
    return out.reshape(height * width, d).to(dtype)


def gradients(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss, aligned with ``params``.

    Parameters unused by the loss get explicit zero gradients.
    """
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]


def _relative_error(analytic: float, numeric: float,
                    atol: float = 1e-8) -> float:
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic) + abs(numeric), atol)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng_seed: int = 0,
) -> dict:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values on every call. Parameters should be double precision. When
    ``max_coords_per_tensor`` is set, that many coordinates per tensor are
    probed (seeded choice); otherwise every coordinate is. Returns a dict
    with the worst relative error and per-tensor detail.
    """
    params = list(params)
    loss = loss_fn()
    analytic = gradients(loss, params)

    gen = torch.Generator().manual_seed(rng_seed)
    worst = 0.0
    detail = []
    for p, grad in zip(params, analytic):
        flat = p.detach().reshape(-1)
        n = flat.numel()
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            idx = torch.randperm(n, generator=gen)[:max_coords_per_tensor].tolist()
        else:
            idx = range(n)
        tensor_worst = 0.0
        g = grad.reshape(-1)
        for i in idx:
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
            numeric = (plus - minus) / (2 * h)
            err = _relative_error(g[i].item(), numeric)
            tensor_worst = max(tensor_worst, err)
        worst = max(worst, tensor_worst)
        detail.append(tensor_worst)
    return {"max_rel_err": worst, "per_tensor": detail, "n_tensors": len(params)}


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic scaled-uniform fan-in init for every learned map.

    Linear/conv/embedding weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    with a generator seeded once; biases are zeroed; normalization layers get
    identity scale. Walk order is module registration order, which is fixed
    by construction, so the same seed always yields the same parameters.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = 1.0 / math.sqrt(sub.in_features)
                sub.weight.uniform_(-bound, bound, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.Conv2d):
                fan_in = sub.in_channels * sub.kernel_size[0] * sub.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                sub.weight.uniform_(-bound, bound, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.Embedding):
                bound = 1.0 / math.sqrt(sub.embedding_dim)
                sub.weight.uniform_(-bound, bound, generator=gen)
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()


def config_hash(config: dict) -> str:
    """Stable sha256 over a JSON-serializable config dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor],
                    config: dict, extra: dict | None = None) -> None:
    """Self-describing checkpoint: parameter tensors + config + config hash."""
    bundle = {
        "state": state,
        "config": config,
        "config_hash": config_hash(config),
        "extra": extra or {},
    }
    torch.save(bundle, str(path))


def load_checkpoint(path: str | Path) -> dict:
    """Load a checkpoint and verify its config hash. Returns the bundle dict."""
    bundle = torch.load(str(path), weights_only=False)
    expected = bundle.get("config_hash")
    actual = config_hash(bundle["config"])
    if expected != actual:
        raise ValueError(f"checkpoint config hash mismatch: {expected} != {actual}")
    return bundle


def parameter_vector(params: Iterable[torch.Tensor]) -> torch.Tensor:
    """Flatten parameters into one detached vector (for comparisons in tests)."""
    return torch.cat([p.detach().reshape(-1) for p in params])
