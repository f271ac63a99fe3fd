"""Bottleneck adapters and the fusion attention layer over a set of adapters.

One :class:`AdapterParams`/:class:`FusionParams` object spans every insertion
point of the host transformer (one weight set per encoder and decoder layer,
applied after the feed-forward residual). All projections use the row-vector
convention ``y = x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, bottleneck_residual, fusion_attention

INIT_STD = 0.02


@dataclass
class AdapterPoint:
    down_w: Tensor   # (d_model, r)
    down_b: Tensor   # (r,)
    up_w: Tensor     # (r, d_model)
    up_b: Tensor     # (d_model,)


class AdapterParams:
    """Per-task bottleneck weights, one :class:`AdapterPoint` per layer."""

    def __init__(self, points: list[AdapterPoint], d_model: int, bottleneck: int):
        if bottleneck < 1:
            raise ValueError("bottleneck width must be >= 1")
        self.points = points
        self.d_model = d_model
        self.bottleneck = bottleneck

    @property
    def n_points(self) -> int:
        return len(self.points)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, p in enumerate(self.points):
            out += [(f"point{i}/down_w", p.down_w), (f"point{i}/down_b", p.down_b),
                    (f"point{i}/up_w", p.up_w), (f"point{i}/up_b", p.up_b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def copy(self, requires_grad: bool = True) -> "AdapterParams":
        pts = [AdapterPoint(*(Tensor(getattr(p, f).data.copy(), requires_grad)
                              for f in ("down_w", "down_b", "up_w", "up_b")))
               for p in self.points]
        return AdapterParams(pts, self.d_model, self.bottleneck)


@dataclass
class FusionPoint:
    q_w: Tensor   # (d_model, d_model)
    k_w: Tensor   # (d_model, d_model)
    v_w: Tensor   # (d_model, d_model)


class FusionParams:
    """Query/key/value maps attending over an ordered list of adapters."""

    def __init__(self, points: list[FusionPoint], d_model: int, n_adapters: int):
        if n_adapters < 1:
            raise ValueError("fusion requires at least one adapter")
        self.points = points
        self.d_model = d_model
        self.n_adapters = n_adapters

    @property
    def n_points(self) -> int:
        return len(self.points)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, p in enumerate(self.points):
            out += [(f"point{i}/q_w", p.q_w), (f"point{i}/k_w", p.k_w),
                    (f"point{i}/v_w", p.v_w)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def copy(self, requires_grad: bool = True) -> "FusionParams":
        pts = [FusionPoint(*(Tensor(getattr(p, f).data.copy(), requires_grad)
                             for f in ("q_w", "k_w", "v_w")))
               for p in self.points]
        return FusionParams(pts, self.d_model, self.n_adapters)


def init_adapter(d_model: int, n_points: int, bottleneck: int, rng: Rng) -> AdapterParams:
    """Fresh adapter: small random down-projection, zero up path.

    Zero up-projection and biases make every insertion point an exact
    identity at initialization.
    """
    pts = []
    for i in range(n_points):
        r = rng.split(f"adapter-point-{i}")
        pts.append(AdapterPoint(
            down_w=Tensor(r.normal((d_model, bottleneck), INIT_STD), requires_grad=True),
            down_b=Tensor(np.zeros(bottleneck), requires_grad=True),
            up_w=Tensor(np.zeros((bottleneck, d_model)), requires_grad=True),
            up_b=Tensor(np.zeros(d_model), requires_grad=True),
        ))
    return AdapterParams(pts, d_model, bottleneck)


def init_fusion(d_model: int, n_points: int, n_adapters: int, rng: Rng) -> FusionParams:
    """Fresh fusion: identity value map, small random query/key maps.

    With V = I the initial fusion output is a softmax-weighted average of the
    raw adapter outputs, so already-learned adapter behavior is preserved.
    """
    if n_adapters < 1:
        raise ValueError("fusion requires at least one adapter")
    pts = []
    for i in range(n_points):
        r = rng.split(f"fusion-point-{i}")
        pts.append(FusionPoint(
            q_w=Tensor(r.split("q").normal((d_model, d_model), INIT_STD), requires_grad=True),
            k_w=Tensor(r.split("k").normal((d_model, d_model), INIT_STD), requires_grad=True),
            v_w=Tensor(np.eye(d_model), requires_grad=True),
        ))
    return FusionParams(pts, d_model, n_adapters)


def adapter_forward(point: AdapterPoint, x: Tensor) -> Tensor:
    """Residual bottleneck: x + Up(relu(Down(x))). Last axis must be d_model."""
    return bottleneck_residual(x, point.down_w, point.down_b,
                               point.up_w, point.up_b)


def fusion_forward(point: FusionPoint, x: Tensor,
                   adapter_outputs: Sequence[Tensor],
                   return_weights: bool = False):
    """Attention over adapter outputs at every position.

    Per position t: q = x_t Q, key_i = a_i(t) K, val_i = a_i(t) V,
    weights = softmax_i(q . key_i / sqrt(d)), output_t = sum_i w_i val_i.
    No residual is added here; the adapter outputs already carry it.
    """
    out, alpha = fusion_attention(x, list(adapter_outputs),
                                  point.q_w, point.k_w, point.v_w)
    if return_weights:
        return out, Tensor(alpha)
    return out


def count_params(obj) -> int:
    """Exact scalar count by enumerating every stored tensor."""
    if isinstance(obj, FusionParams) and obj.n_adapters < 1:
        raise ValueError("fusion over an empty adapter list has no parameter count")
    if not hasattr(obj, "named_tensors"):
        raise TypeError(f"cannot count parameters of {type(obj).__name__}")
    return sum(t.data.size for _, t in obj.named_tensors())
