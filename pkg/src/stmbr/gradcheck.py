"""Finite-difference verification of recorded gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad


def _projected_loss(out: Tensor, proj: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(proj)))


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
    coords: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The (possibly non-scalar) output of ``op`` is reduced to a scalar with a
    fixed random projection so every output element contributes.  Error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.  Only inputs with
    ``requires_grad`` are probed; ``coords`` limits the probe to that many
    randomly chosen coordinates in total.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.zero_grad()
    out = op(*inputs)
    proj = rng.standard_normal(out.shape)
    loss = _projected_loss(out, proj)
    probed = [t for t in inputs if t.requires_grad]
    analytic = backward(loss, probed)

    targets = [(k, i) for k, t in enumerate(probed) for i in range(t.data.size)]
    if coords is not None and coords < len(targets):
        pick = rng.choice(len(targets), size=coords, replace=False)
        targets = [targets[p] for p in sorted(pick)]

    def f() -> float:
        with no_grad():
            return float(_projected_loss(op(*inputs), proj).data)

    worst = 0.0
    for k, i in targets:
        flat = probed[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# suite over every primitive and composite block


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    from . import blocks
    from .ops import ConvSpec

    f64 = np.float64
    x = _leaf(rng, 2, 3, 6, 6)
    cases: dict[str, tuple[Callable[..., Tensor], list[Tensor]]] = {
        "add": (ops.add, [_leaf(rng, 2, 3, 4, 4), _leaf(rng, 1, 3, 1, 1)]),
        "mul": (ops.mul, [_leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4)]),
        "sum": (ops.sum, [_leaf(rng, 3, 4)]),
        "mean": (ops.mean, [_leaf(rng, 3, 4)]),
        "reshape": (lambda a: ops.reshape(a, (3, 8)), [_leaf(rng, 2, 3, 4)]),
        "global_avg_pool": (ops.global_avg_pool, [_leaf(rng, 2, 3, 4, 4)]),
        "slice_channels": (lambda a: ops.slice_channels(a, 1, 3), [_leaf(rng, 2, 4, 3, 3)]),
        "relu": (ops.relu, [_leaf(rng, 2, 3, 4, 4)]),
        "sigmoid": (ops.sigmoid, [_leaf(rng, 2, 3, 4, 4, scale=3.0)]),
        "softmax": (ops.softmax, [_leaf(rng, 4, 5, 2, 2, scale=2.0)]),
        "log_clamped": (ops.log_clamped, [Tensor(rng.uniform(0.1, 2.0, (3, 4)), requires_grad=True)]),
        "dropout": (
            lambda a: ops.dropout(a, 0.5, np.random.default_rng(3), True),
            [_leaf(rng, 4, 6)],
        ),
        "dense": (ops.dense, [_leaf(rng, 3, 5), _leaf(rng, 5, 4), _leaf(rng, 4)]),
        "concat_channels": (lambda a, b: ops.concat_channels([a, b]), [_leaf(rng, 2, 2, 3, 3), _leaf(rng, 2, 3, 3, 3)]),
        "max_pool": (lambda a: ops.pool2d(a, 2, 2, "max")[0], [_leaf(rng, 2, 2, 6, 6)]),
        "max_pool_overlap": (lambda a: ops.pool2d(a, 3, 1, "max", (1, 1, 1, 1))[0], [_leaf(rng, 1, 2, 5, 5)]),
        "avg_pool": (lambda a: ops.pool2d(a, 2, 2, "avg")[0], [_leaf(rng, 2, 2, 6, 6)]),
        "avg_pool_smooth": (lambda a: ops.pool2d(a, 2, 1, "avg", blocks.SMOOTH_PAD)[0], [_leaf(rng, 1, 2, 5, 5)]),
    }
    targets = rng.integers(0, 2, (3, 2, 2))
    weights = np.array([0.7, 1.6])
    cases["cross_entropy"] = (lambda z: ops.cross_entropy(ops.softmax(z), targets, weights), [_leaf(rng, 3, 2, 2, 2)])

    vals, idx = ops.pool2d(Tensor(rng.standard_normal((2, 2, 6, 6))), 2, 2, "max")
    cases["max_unpool"] = (lambda v: ops.max_unpool2d(v, idx), [_leaf(rng, *vals.shape)])

    for stride in (1, 2):
        for dil in (1, 2):
            k, b = _leaf(rng, 4, 3, 3, 3, scale=0.5), _leaf(rng, 4)
            pad = ops.same_padding(3, dil)
            cases[f"conv2d_s{stride}_d{dil}"] = (
                lambda a, kk, bb, s=stride, d=dil, p=pad: ops.conv2d(a, ConvSpec(kk, bb, stride=s, dilation=d, padding=p)),
                [x, k, b],
            )

    stm = blocks.StmBlockParams.init(rng, 3, 2, 5, dtype=f64)
    aux = rng.standard_normal((2, 2, 3, 3))
    stm_t = list(stm.tensors().values())

    def stm_op(a, *ws):
        return blocks.stm_block(a, stm, aux)

    cases["stm_block"] = (stm_op, [_leaf(rng, 2, 3, 6, 6)] + stm_t)

    gate = blocks.SaGateParams.init(rng, 3, 4, dtype=f64)
    cases["sa_gate"] = (
        lambda s, g, *ws: blocks.sa_gate(s, g, gate),
        [_leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 4, 4, 4)] + list(gate.tensors().values()),
    )

    enc = blocks.EncDecBlockParams.init(rng, 2, 3, dtype=f64)
    cases["encoder_block"] = (
        lambda a, *ws: blocks.encoder_block(a, enc)[0],
        [_leaf(rng, 2, 2, 6, 6)] + list(enc.tensors().values()),
    )

    dec = blocks.DecoderBlockParams.init(rng, 3, 2, 2, 3, attention=True, dtype=f64)
    _, didx = ops.pool2d(Tensor(rng.standard_normal((2, 3, 6, 6))), 2, 2, "max")
    daux = rng.standard_normal((2, 2, 6, 6))
    cases["boosted_decoder_block"] = (
        lambda a, s, *ws: blocks.boosted_decoder_block(a, didx, s, daux, dec),
        [_leaf(rng, 2, 3, 3, 3), _leaf(rng, 2, 2, 6, 6)] + list(dec.tensors().values()),
    )
    return cases


def run_suite(seeds=(0, 1, 2, 3, 4), eps: float = 1e-5, coords: int = 80) -> dict[str, float]:
    """Worst relative error per op over ``seeds`` (64-bit inputs)."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (op, inputs) in _cases(rng).items():
            err = grad_check(op, inputs, eps=eps, seed=seed, coords=coords)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
