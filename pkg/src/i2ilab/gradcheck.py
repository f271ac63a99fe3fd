"""Central finite-difference gradient verification.

This is the independent oracle for every analytic backward rule in the lab:
it only ever calls the loss function forward, never the tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tape, Tensor, backward

# Above this many coordinates per parameter, check a seeded sample instead of
# every coordinate.
SAMPLE_THRESHOLD = 256


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, sample_seed: int = 0,
               max_coords: int = SAMPLE_THRESHOLD) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a pure scalar function of `params` (re-evaluated many times).
    Relative error is |a - n| / max(|a|, |n|, 1e-8) per coordinate.
    """
    params = list(params)
    with Tape():
        loss = f()
        if loss.data.size != 1:
            raise ValueError("grad_check needs a scalar function")
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    rng = Rng(sample_seed).split("grad-check-coords")
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else np.sort(rng.choice(n, size=max_coords, replace=False)))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("non-finite loss during grad_check")
            num = (hi - lo) / (2.0 * eps)
            ana = a.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


def full_suite_report(seed: int = 0) -> list[tuple[str, float, float]]:
    """Gradient verification over every primitive plus one full model loss.

    Returns (name, max relative error, threshold) rows; callers compare the
    two to decide pass/fail.
    """
    from . import tensor as T
    from .adapters import adapter_forward, fusion_forward, init_adapter, init_fusion
    from .backbone import BackboneConfig, forward, init_backbone, init_head, pack_batch
    from .tasks import QATask, generate_task
    from .training import answer_loss

    rng = Rng(seed)
    rows: list[tuple[str, float, float]] = []

    x = T.Tensor(rng.split("x").normal((3, 4)) + 0.2, requires_grad=True)
    w = T.Tensor(rng.split("w").normal((4, 4)), requires_grad=True)
    y = T.Tensor(rng.split("y").normal((3, 4)))
    gain = T.Tensor(1.0 + rng.split("g").normal(4, std=0.1), requires_grad=True)
    bias = T.Tensor(rng.split("b").normal(4, std=0.1), requires_grad=True)
    targets = np.array([1, 3, 0])

    def lin():
        return T.tsum(T.mul(T.matmul(x, w), y))

    rows.append(("matmul (linear map)", grad_check(lin, [x, w]), 1e-10))
    rows.append(("softmax", grad_check(
        lambda: T.tsum(T.mul(T.softmax(x, axis=-1), y)), [x]), 1e-4))
    rows.append(("layernorm", grad_check(
        lambda: T.tsum(T.mul(T.layernorm(x, gain, bias), y)), [x, gain, bias]), 1e-4))
    rows.append(("softmax cross-entropy", grad_check(
        lambda: T.cross_entropy(T.matmul(x, w), targets), [x, w]), 1e-6))
    rows.append(("mse", grad_check(lambda: T.mse(x, y), [x]), 1e-4))
    rows.append(("relu mlp", grad_check(
        lambda: T.tsum(T.mul(T.relu(T.matmul(x, w)), y)), [x, w]), 1e-4))

    ad = init_adapter(4, 1, 2, rng.split("ad"))
    ad.points[0].up_w.data[:] = rng.split("adu").normal((2, 4))
    ad.points[0].down_b.data[:] = 0.3
    rows.append(("adapter bottleneck", grad_check(
        lambda: T.tsum(T.mul(adapter_forward(ad.points[0], x), y)),
        ad.tensors()), 1e-4))

    fu = init_fusion(4, 1, 2, rng.split("fu"))
    outs_src = [T.Tensor(rng.split(f"o{i}").normal((3, 4)), requires_grad=True)
                for i in range(2)]
    rows.append(("fusion attention", grad_check(
        lambda: T.tsum(T.mul(fusion_forward(fu.points[0], x, outs_src), y)),
        fu.tensors() + outs_src), 1e-4))

    # one full model loss: tiny unfrozen backbone with an adapter, one batch
    cfg = BackboneConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                         d_ff=24, feature_dim=8)
    params = init_backbone(cfg, rng.split("bb"))
    head = init_head(cfg, rng.split("head"))
    model_ad = init_adapter(cfg.d_model, cfg.n_insertion_points, 2, rng.split("mad"))
    model_ad.points[0].up_w.data[:] = rng.split("madu").normal((2, 16), 0.05)
    task = QATask(task_id="probe", query="count", args=("red",), train_size=8,
                  val_size=4, seed=3, codebook_seed=3, feature_dim=8)
    train, _ = generate_task(task)
    batch = pack_batch(train.examples[:3], cfg)

    def model_loss():
        return answer_loss(forward(params, head, batch, adapter=model_ad), batch)

    trainable = params.tensors() + head.tensors() + model_ad.tensors()
    rows.append(("full model loss", grad_check(
        model_loss, trainable, max_coords=12, sample_seed=seed), 1e-4))
    return rows
