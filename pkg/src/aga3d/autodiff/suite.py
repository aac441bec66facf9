"""Finite-difference verification of every differentiable op and the full model.

Each case builds a scalar by contracting the op's output with a fixed random
tensor, so every output entry contributes to the checked gradient.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .gradcheck import grad_check
from .mlstm import init_mlstm_layer, mlstm_block, mlstm_core, mlstm_layer

__all__ = ["OP_TOL", "MODEL_TOL", "op_cases", "check_ops", "check_model", "run_suite"]

OP_TOL = 1e-6
MODEL_TOL = 1e-5


def _project(out, r):
    return ops.sum(ops.mul(out, r))


def op_cases(rng):
    """``{name: (fn, params)}`` with shapes drawn from ``rng``."""
    def shape(nd=2, lo=2, hi=5):
        return tuple(int(s) for s in rng.integers(lo, hi, size=nd))

    cases = {}
    s = shape(3)
    a, b = rng.normal(size=s), rng.normal(size=s)
    bcast = rng.normal(size=(1,) + s[1:])

    def unary(f, x, out_shape=None):
        r = rng.normal(size=out_shape or x.shape)
        return (lambda p: _project(f(p["x"]), r)), {"x": x}

    def binary(f, x, y, out_shape):
        r = rng.normal(size=out_shape)
        return (lambda p: _project(f(p["a"], p["b"]), r)), {"a": x, "b": y}

    cases["add"] = binary(ops.add, a, bcast, s)
    cases["sub"] = binary(ops.sub, a, bcast, s)
    cases["mul"] = binary(ops.mul, a, b, s)
    cases["div"] = binary(ops.div, a, np.abs(b) + 0.5, s)
    cases["exp"] = unary(ops.exp, a)
    cases["log"] = unary(ops.log, np.abs(a) + 0.5)
    cases["sigmoid"] = unary(ops.sigmoid, 2 * a)
    cases["log_sigmoid"] = unary(ops.log_sigmoid, 3 * a)
    cases["relu"] = unary(ops.relu, a)
    cases["pow_scalar"] = unary(lambda x: ops.pow_scalar(x, 2.5), np.abs(a) + 0.5)
    cases["clip"] = unary(lambda x: ops.clip(x, -0.5, 0.5), a)
    cases["sum"] = unary(lambda x: ops.sum(x, axis=1), a, (s[0], s[2]))
    cases["mean"] = unary(lambda x: ops.mean(x, axis=(0, 2)), a, (s[1],))
    mask = rng.random(s) < 0.7
    mask[..., 0] = True
    cases["logsumexp"] = unary(lambda x: ops.logsumexp(x, axis=-1, mask=mask), a, s[:2])
    cases["reshape"] = unary(lambda x: ops.reshape(x, (s[0], -1)), a, (s[0], s[1] * s[2]))
    cases["transpose"] = unary(lambda x: ops.transpose(x, (2, 0, 1)), a, (s[2], s[0], s[1]))
    cases["concat"] = binary(lambda x, y: ops.concat([x, y], axis=1), a, b, (s[0], 2 * s[1], s[2]))
    cases["narrow"] = unary(lambda x: ops.narrow(x, 1, 1, s[1] - 1), a, (s[0], s[1] - 1, s[2]))
    m, k, n = shape(3)
    cases["matmul"] = binary(ops.matmul, rng.normal(size=(2, m, k)), rng.normal(size=(k, n)), (2, m, n))
    din, dout = shape(2)
    x = rng.normal(size=(3, din))
    w, bias = rng.normal(size=(dout, din)), rng.normal(size=dout)
    r_lin = rng.normal(size=(3, dout))
    cases["linear"] = (lambda p: _project(ops.linear(p["x"], p["w"], p["b"]), r_lin),
                       {"x": x, "w": w, "b": bias})
    g, beta = rng.normal(size=din) + 1.0, rng.normal(size=din)
    r_ln = rng.normal(size=(3, din))
    cases["layer_norm"] = (lambda p: _project(ops.layer_norm(p["x"], p["g"], p["b"]), r_ln),
                           {"x": x, "g": g, "b": beta})
    cases["l2_normalize"] = unary(ops.l2_normalize, x)

    cin, cout = (int(c) for c in rng.integers(1, 4, size=2))
    vol = rng.normal(size=(2, cin) + shape(3, 3, 7))
    kern = rng.normal(size=(cout, cin, 3, 3, 3))
    cbias = rng.normal(size=cout)
    stride = int(rng.integers(1, 3))
    out = ops.conv3d(vol, kern, cbias, stride=stride, padding=1).shape
    r_conv = rng.normal(size=out)
    cases["conv3d"] = (lambda p: _project(ops.conv3d(p["x"], p["w"], p["b"], stride=stride, padding=1), r_conv),
                       {"x": vol, "w": kern, "b": cbias})
    target = shape(3, 2, 5)
    cases["adaptive_avg_pool3d"] = unary(lambda t: ops.adaptive_avg_pool3d(t, target), vol,
                                         vol.shape[:2] + target)

    bsz, steps, d = 2, int(rng.integers(2, 6)), int(rng.integers(2, 5))
    q, kk, v = (rng.normal(size=(bsz, steps, d)) for _ in range(3))
    ig, fg = rng.normal(size=(bsz, steps)), -np.abs(rng.normal(size=(bsz, steps)))
    r_core = rng.normal(size=(bsz, steps, d))
    cases["mlstm_core"] = (lambda p: _project(mlstm_core(p["q"], p["k"], p["v"], p["i"], p["f"]), r_core),
                           {"q": q, "k": kk, "v": v, "i": ig, "f": fg})
    layer = init_mlstm_layer(rng, d, d)
    seq = rng.normal(size=(bsz, steps, d))
    r_layer = rng.normal(size=(bsz, steps, d))
    cases["mlstm_layer"] = (lambda p: _project(mlstm_layer(p["x"], p), r_layer), {"x": seq, **layer})
    cases["mlstm_block"] = (lambda p: _project(mlstm_block(p["x"], p), r_layer), {"x": seq, **layer})

    from ..objective import ContrastiveBatch, FocalParams, focal_loss, supcon_loss

    logits = rng.normal(size=6)
    labels = np.array([0, 1, 1, 0, 1, 0])
    cases["focal_loss"] = ((lambda p: focal_loss(ops.sigmoid(p["x"]), labels, FocalParams(0.25, 2.0))),
                           {"x": logits})
    emb = rng.normal(size=(6, 5))
    cases["supcon_loss"] = ((lambda p: supcon_loss(ContrastiveBatch(ops.l2_normalize(p["z"]), labels, 0.5))),
                            {"z": emb})
    return cases


def check_ops(seed=0, names=None):
    """``{op: GradCheckResult}`` for one random draw of every case."""
    cases = op_cases(np.random.default_rng(seed))
    return {name: grad_check(fn, params)
            for name, (fn, params) in cases.items() if names is None or name in names}


def check_model(seed=0, per_tensor=2, input_dims=(16, 16, 8)):
    """Gradient check of the full objective through the whole network.

    ``per_tensor`` entries are sampled from every parameter tensor.
    """
    from ..net import NetConfig, forward, init_params
    from ..objective import ContrastiveBatch, LossWeights, combined_loss, focal_loss, supcon_loss

    rng = np.random.default_rng(seed)
    cfg = NetConfig(input_dims=input_dims, seed=seed)
    params = init_params(cfg)
    x = rng.normal(size=(3, 2) + tuple(input_dims))
    y = np.array([0, 1, 1])

    def loss(p):
        prob, _, z_unit = forward(x, p, cfg)
        return combined_loss(focal_loss(prob, y), supcon_loss(ContrastiveBatch(z_unit, y, 0.07)),
                             LossWeights(0.5))

    worst = None
    checked = skipped = 0
    for i, key in enumerate(params):
        res = grad_check(loss, params, keys=[key], max_entries=per_tensor,
                         rng=np.random.default_rng([seed, i]))
        checked += res.checked
        skipped += res.skipped_kinks
        if res.checked and (worst is None or res.max_rel_err > worst[1]):
            worst = (key, res.max_rel_err)
    return {"max_rel_err": worst[1] if worst else float("nan"), "worst_tensor": worst[0] if worst else None,
            "checked": checked, "skipped_kinks": skipped, "n_tensors": len(params)}


def run_suite(seeds=(0,), model=True):
    """Worst relative error per op over ``seeds``, plus the full-model check."""
    report = {}
    for seed in seeds:
        for name, res in check_ops(seed).items():
            prev = report.get(name)
            if prev is None or res.max_rel_err > prev["max_rel_err"]:
                report[name] = {"max_rel_err": res.max_rel_err, "checked": res.checked,
                                "skipped_kinks": res.skipped_kinks, "tol": OP_TOL}
    if model:
        report["full_model"] = {**check_model(seeds[0]), "tol": MODEL_TOL}
    for entry in report.values():
        entry["passed"] = bool(entry["checked"] > 0 and entry["max_rel_err"] < entry["tol"])
    return report
