"""Per-class causal context pool and the feature enhancement it drives.

The pool ``Q`` keeps one standardized ``h x w`` context map per class.  Each
training image folds the activation map of its top predicted class ``pi``
into slot ``pi``::

    Q[pi] <- standardize(Q[pi] + lam * standardize(M[pi]))

and the second CAM branch sees ``X + X * conv1x1(Q[pi])``.  ``Q`` is a
statistics buffer: it never carries gradient.
"""

from __future__ import annotations

import torch
import torch.nn as nn

AGGREGATES = ("predicted", "all-classes")


def standardize(m: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Zero-mean, unit-variance rescaling over the last two axes (population variance)."""
    mean = m.mean(dim=(-2, -1), keepdim=True)
    var = ((m - mean) ** 2).mean(dim=(-2, -1), keepdim=True)
    return (m - mean) / torch.sqrt(var + eps)


class ContextPool:
    def __init__(self, num_classes: int, height: int, width: int, lam: float = 0.01, eps: float = 1e-5,
                 dtype: torch.dtype = torch.float32):
        if lam < 0:
            raise ValueError(f"update rate must be >= 0, got {lam}")
        self.Q = torch.zeros(num_classes, height, width, dtype=dtype)
        self.lam = float(lam)
        self.eps = float(eps)
        self.updates = 0

    @property
    def num_classes(self) -> int:
        return self.Q.shape[0]

    def copy(self) -> "ContextPool":
        other = ContextPool.__new__(ContextPool)
        other.Q = self.Q.clone()
        other.lam, other.eps, other.updates = self.lam, self.eps, self.updates
        return other

    @torch.no_grad()
    def update_(self, maps: torch.Tensor, pi: int) -> None:
        """In-place update of slot ``pi`` from the ``n x h x w`` activation maps."""
        if not 0 <= pi < self.num_classes:
            raise IndexError(f"class index {pi} out of range for {self.num_classes} slots")
        if maps.shape != self.Q.shape:
            raise ValueError(f"maps shape {tuple(maps.shape)} does not match pool {tuple(self.Q.shape)}")
        m = maps[pi].detach().to(self.Q.dtype)
        self.Q[pi] = standardize(self.Q[pi] + self.lam * standardize(m, self.eps), self.eps)
        self.updates += 1

    def context(self, pi: int | torch.Tensor, aggregate: str = "predicted") -> torch.Tensor:
        """Context map(s) fed to the enhancement; ``pi`` may be a batch of indices."""
        if aggregate == "predicted":
            return self.Q[pi]
        if aggregate == "all-classes":
            mean = self.Q.mean(dim=0)
            if isinstance(pi, torch.Tensor) and pi.ndim:
                return mean.expand(len(pi), *mean.shape)
            return mean
        raise ValueError(f"aggregate must be one of {AGGREGATES}, got {aggregate!r}")


def update_pool(pool: ContextPool, maps: torch.Tensor, pi: int) -> ContextPool:
    """Functional form of :meth:`ContextPool.update_`; the input pool is untouched."""
    new = pool.copy()
    new.update_(maps, pi)
    return new


class Enhancer(nn.Module):
    """Pointwise conv on the context map; ``per_channel`` gives one (w, beta) per feature channel."""

    def __init__(self, channels: int, per_channel: bool = False):
        super().__init__()
        out = channels if per_channel else 1
        self.weight = nn.Parameter(torch.zeros(out))
        self.bias = nn.Parameter(torch.zeros(out))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return enhance_features(x, context, self.weight, self.bias)


def enhance_features(x: torch.Tensor, context: torch.Tensor, weight: torch.Tensor,
                     bias: torch.Tensor) -> torch.Tensor:
    """``x + x * (weight * context + bias)``, with ``context`` treated as a constant.

    ``x`` is ``(..., c, h, w)`` and ``context`` is ``(..., h, w)``; ``weight`` and
    ``bias`` have either one entry (broadcast over channels) or ``c`` entries.
    """
    if x.shape[-2:] != context.shape[-2:]:
        raise ValueError(f"feature size {tuple(x.shape[-2:])} does not match context {tuple(context.shape[-2:])}")
    ctx = context.detach().unsqueeze(-3)
    attn = weight[:, None, None] * ctx + bias[:, None, None]
    return x + x * attn
