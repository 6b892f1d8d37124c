"""Finite-difference verification suite for every differentiable path.

Each item perturbs one input tensor of a scalar-valued function and
compares the taped gradient against f64 central differences (see
``autodiff.finite_diff_check``). The reduced-network item walks every
parameter of a narrow attention U-Net, so the whole composed
forward/backward graph is certified, not just the individual ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import rng
from .losses import LossConfig, combined_loss, dice_loss, focal_loss
from .model import ModelConfig, forward, init_params

OP_TOL = 1e-4
BN_TOL = 1e-3
NET_TOL = 1e-3

REDUCED_FEATURES = (4, 8, 16, 32)


@dataclass
class CheckItem:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


def _t(seed, stream, shape, scale=1.0, dtype=np.float64):
    data = rng.normals(seed, stream, int(np.prod(shape))).reshape(shape) * scale
    return ad.Tensor(data.astype(dtype))


def _rand_probs(seed, stream, shape):
    logits = rng.normals(seed, stream, int(np.prod(shape))).reshape(shape)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return ad.Tensor(z / z.sum(axis=1, keepdims=True))


def _rand_labels(seed, stream, shape, k):
    u = rng.uniforms(seed, stream, int(np.prod(shape))).reshape(shape)
    return (u * k).astype(np.uint8)


def _linear_probe(seed, stream, shape):
    w = rng.normals(seed, stream, int(np.prod(shape))).reshape(shape)
    probe = ad.Tensor(w)

    def f(y):
        return ad.sum_all(ad.mul(y, probe))

    return f


def corrupt_conv2d_backward():
    """Test hook: wrap conv2d so its input gradient is scaled by 1.01."""
    original = ad.conv2d

    def broken(x, w, b=None, stride=1, padding="same"):
        out = original(x, w, b, stride=stride, padding=padding)
        tape = ad._ACTIVE_TAPES[-1] if ad._ACTIVE_TAPES else None
        if tape is not None and tape.nodes and tape.nodes[-1].op == "conv2d":
            node = tape.nodes[-1]
            inner = node.backward

            def bad(g):
                grads = list(inner(g))
                grads[0] = grads[0] * 1.01
                return grads

            node.backward = bad
        return out

    return broken


def _op_items(seed: int, conv_op) -> list:
    items = []

    def check(name, tol, f, x, step=1e-4):
        items.append(CheckItem(name, ad.finite_diff_check(f, x, step=step), tol))

    a = _t(seed, 1, (2, 3, 4, 4))
    b = _t(seed, 2, (2, 3, 4, 4))
    bias = _t(seed, 3, (1, 3, 1, 1))
    probe = _linear_probe(seed, 4, (2, 3, 4, 4))
    check("add", OP_TOL, lambda t: probe(ad.add(t, b)), a)
    check("add_bias", OP_TOL, lambda t: probe(ad.add(a, t)), bias)
    check("mul", OP_TOL, lambda t: probe(ad.mul(t, b)), a)
    alpha = _t(seed, 5, (2, 1, 4, 4))
    check("mul_broadcast", OP_TOL, lambda t: probe(ad.mul(a, t)), alpha)
    check("mul_scalar", OP_TOL, lambda t: probe(ad.mul_scalar(t, 1.7)), a)

    c1 = _t(seed, 6, (1, 3, 2, 2))
    c2 = _t(seed, 7, (1, 4, 2, 2))
    probe_c = _linear_probe(seed, 8, (1, 7, 2, 2))
    check("concat_lhs", OP_TOL, lambda t: probe_c(ad.concat_channels(t, c2)), c1,
          step=1e-3)
    check("concat_rhs", OP_TOL, lambda t: probe_c(ad.concat_channels(c1, t)), c2,
          step=1e-3)

    xc = _t(seed, 9, (2, 3, 8, 8))
    wc = _t(seed, 10, (4, 3, 3, 3), scale=0.3)
    bc = _t(seed, 11, (4,), scale=0.1)
    check("conv2d_dx", OP_TOL,
          lambda t: ad.sum_all(ad.sigmoid(conv_op(t, wc, bc))), xc)
    check("conv2d_dw", OP_TOL,
          lambda t: ad.sum_all(ad.sigmoid(conv_op(xc, t, bc))), wc)
    check("conv2d_db", OP_TOL,
          lambda t: ad.sum_all(ad.sigmoid(conv_op(xc, wc, t))), bc)

    rv = _t(seed, 12, (2, 3, 4, 4)).data
    relu_in = ad.Tensor(np.sign(rv) * (np.abs(rv) + 0.05))  # keep clear of the kink
    check("relu", OP_TOL, lambda t: probe(ad.relu(t)), relu_in, step=1e-3)
    check("sigmoid", OP_TOL, lambda t: probe(ad.sigmoid(t)), a)
    sx = _t(seed, 13, (2, 5, 4, 4))
    probe_s = _linear_probe(seed, 14, (2, 5, 4, 4))
    check("softmax_channel", OP_TOL, lambda t: probe_s(ad.softmax_channel(t)), sx)

    # spaced values keep finite differences away from argmax ties
    perm = rng.permutation(seed, 15, 2 * 2 * 4 * 4)
    mp_in = ad.Tensor((perm.astype(np.float64) * 0.1).reshape(2, 2, 4, 4))
    probe_m = _linear_probe(seed, 16, (2, 2, 2, 2))
    check("maxpool2d", OP_TOL, lambda t: probe_m(ad.maxpool2d(t)), mp_in)
    probe_u = _linear_probe(seed, 17, (2, 3, 8, 8))
    check("upsample_nearest2", OP_TOL,
          lambda t: probe_u(ad.upsample_nearest2(t)), _t(seed, 18, (2, 3, 4, 4)))

    xb = _t(seed, 19, (4, 3, 5, 5))
    gamma = _t(seed, 20, (3,), scale=0.2)
    gamma = ad.Tensor(gamma.data + 1.0)
    beta = _t(seed, 21, (3,), scale=0.1)
    probe_b = _linear_probe(seed, 22, (4, 3, 5, 5))

    def bn_train(x, g, bt):
        state = ad.BatchNormState(3)
        return ad.batchnorm2d(x, g, bt, state, "train")

    check("batchnorm_train_dx", BN_TOL,
          lambda t: probe_b(bn_train(t, gamma, beta)), xb)
    check("batchnorm_train_dgamma", BN_TOL,
          lambda t: probe_b(bn_train(xb, t, beta)), gamma)
    check("batchnorm_train_dbeta", BN_TOL,
          lambda t: probe_b(bn_train(xb, gamma, t)), beta)
    eval_state = ad.BatchNormState(3)
    eval_state.running_mean = rng.normals(seed, 23, 3).astype(np.float32)
    eval_state.running_var = (rng.uniforms(seed, 24, 3) + 0.5).astype(np.float32)
    check("batchnorm_eval_dx", OP_TOL,
          lambda t: probe_b(ad.batchnorm2d(t, gamma, beta, eval_state, "eval")), xb)

    check("dropout_train", OP_TOL,
          lambda t: probe(ad.dropout(t, 0.3, seed=seed, mode="train", stream=9)), a)
    return items


def _loss_items(seed: int) -> list:
    items = []
    cfg = LossConfig()
    shape = (2, 4, 4, 4)
    labels = _rand_labels(seed, 30, (2, 4, 4), 4)
    mask = rng.uniforms(seed, 31, 2 * 4 * 4).reshape(2, 4, 4) > 0.2
    probs = _rand_probs(seed, 32, shape)

    items.append(CheckItem("focal_loss_dprobs", ad.finite_diff_check(
        lambda t: focal_loss(t, labels, mask, cfg), probs, step=1e-5), OP_TOL))
    items.append(CheckItem("dice_loss_dprobs", ad.finite_diff_check(
        lambda t: dice_loss(t, labels, mask, cfg), probs, step=1e-5), OP_TOL))

    logits = _t(seed, 33, shape)
    items.append(CheckItem("focal_loss_dlogits", ad.finite_diff_check(
        lambda t: focal_loss(ad.softmax_channel(t), labels, mask, cfg),
        logits, step=1e-4), OP_TOL))
    items.append(CheckItem("combined_loss_dlogits", ad.finite_diff_check(
        lambda t: combined_loss(ad.softmax_channel(t), labels, mask, cfg)[0],
        logits, step=1e-4), OP_TOL))
    return items


def reduced_net_item(seed: int) -> CheckItem:
    """Check every parameter of a width-reduced network against f64
    central differences on a 2-sample batch.

    Each coordinate is probed with step 1e-5; coordinates whose relative
    error is not clearly inside tolerance are re-probed with step 1e-3 and
    the better-conditioned estimate wins. The small step controls
    truncation on curved directions, the large one keeps near-zero
    gradients (nearly dead paths) above the f64 ulp resolution of the
    loss.
    """
    config = ModelConfig(in_channels=2, num_classes=3,
                         encoder_features=REDUCED_FEATURES,
                         dropout_p=0.0, patch_size=8)
    params = init_params(config, seed=rng.derive(seed, 77))
    for name, t in params.named():
        t.data = t.data.astype(np.float64)
    x = _t(seed, 40, (2, config.in_channels, 8, 8))
    labels = _rand_labels(seed, 41, (2, 8, 8), config.num_classes)
    cfg = LossConfig()

    def loss_fn():
        probs = forward(params, x, "train")
        return combined_loss(probs, labels, None, cfg)[0]

    with ad.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: t.grad.copy() for name, t in params.named()}

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        return (hi - lo) / (2 * step)

    def rel_err(a, numeric):
        return abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))

    worst = 0.0
    for name, t in params.named():
        flat = t.data.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            err = rel_err(a[i], central(flat, i, 1e-5))
            if err >= NET_TOL / 2:
                err = min(err, rel_err(a[i], central(flat, i, 1e-3)))
            worst = max(worst, err)
    return CheckItem("reduced_attention_unet", worst, NET_TOL)


def run_suite(seed: int = 0, corrupt: Optional[str] = None,
              items: Optional[list] = None) -> list:
    """Run the verification suite; returns the list of CheckItems.

    ``corrupt`` injects a deliberate backward fault (currently only
    "conv2d") so the harness itself can be exercised. ``items`` filters by
    item name.
    """
    conv_op = ad.conv2d
    if corrupt == "conv2d":
        conv_op = corrupt_conv2d_backward()
    elif corrupt is not None:
        raise ValueError(f"unknown corruption target {corrupt!r}")

    results = _op_items(seed, conv_op) + _loss_items(seed)
    results_map = {i.name: i for i in results}
    if items is not None:
        selected = []
        for name in items:
            if name == "reduced_attention_unet":
                selected.append(reduced_net_item(seed))
            elif name in results_map:
                selected.append(results_map[name])
            else:
                raise ValueError(f"unknown gradcheck item {name!r}")
        return selected
    results.append(reduced_net_item(seed))
    return results


def format_report(results: list) -> str:
    lines = []
    for item in results:
        status = "ok" if item.ok else "FAIL"
        lines.append(f"{item.name:28s} max_rel_err={item.error:.3e} "
                     f"tol={item.tolerance:.0e} {status}")
    failed = [i.name for i in results if not i.ok]
    lines.append(f"checked {len(results)} items, "
                 f"{'all passed' if not failed else 'FAILED: ' + ', '.join(failed)}")
    return "\n".join(lines)
