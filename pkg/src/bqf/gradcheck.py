"""Finite-difference verification of every differentiable op plus the full
soft-binarization composite.

Each check runs at several random points. Points are sampled away from the
kinks of piecewise ops (abs, leaky_relu, clip, l1_norm, max pooling) so the
central-difference probes stay on one smooth piece. Tolerances: 1e-6 per op
at f64 (1e-2 at f32), 1e-5 for the end-to-end quantizer composite.
"""

from __future__ import annotations

import numpy as np

from bqf import tensor as T
from bqf.layers import BatchNorm, Dense
from bqf.quantnet import QuantNet
from bqf.tensor import DType, Tensor, finite_diff_check

OP_TOL = {DType.f64: 1e-6, DType.f32: 1e-2}
COMPOSITE_TOL = {DType.f64: 1e-5, DType.f32: 1e-2}


def _away_from(rng, shape, kinks, margin=1e-3, lo=-2.0, hi=2.0):
    """Uniform samples with every coordinate at least ``margin`` from each kink."""
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        bad = np.abs(x - k) < margin
        while bad.any():
            x[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
            bad = np.abs(x - k) < margin
    return x


def _distinct(rng, shape, min_gap=1e-3):
    """Values with pairwise gaps > min_gap (safe argmax under FD probes)."""
    n = int(np.prod(shape))
    base = np.linspace(0.0, 1.0, n) * 2.0 - 1.0
    jit = rng.uniform(-0.2, 0.2, size=n) / max(n, 1)
    return rng.permutation(base + jit).reshape(shape)


def _checks(dtype: DType, rng: np.random.Generator):
    dt = dtype.np_dtype

    def t(arr, **kw):
        return Tensor(np.asarray(arr, dtype=dt), **kw)

    def probed(op):
        """Generic linear functional of the op output: every input coordinate
        keeps an O(1) gradient, so relative FD error is well conditioned."""
        probe = {}

        def f(*args):
            out = op(*args)
            key = out.shape
            if key not in probe:
                probe_rng = np.random.default_rng(12345)
                probe[key] = Tensor(probe_rng.uniform(0.5, 1.5, size=key).astype(dt))
            return (out * probe[key]).sum()

        return f

    v = t(_away_from(rng, (7,), []))
    v2 = t(_away_from(rng, (7,), []))
    vpos = t(rng.uniform(0.3, 2.0, size=(7,)))
    vk = t(_away_from(rng, (7,), [0.0]))
    vclip = t(_away_from(rng, (9,), [-0.8, 0.8]))
    a = t(rng.normal(size=(4, 3)))
    b = t(rng.normal(size=(3, 5)))
    bias = t(rng.normal(size=(5,)))
    img = t(rng.normal(size=(2, 3, 6, 6)))
    ker = t(rng.normal(size=(3, 3, 3, 4)) * 0.4)
    simg = t(rng.normal(size=(1, 2, 5, 5)))
    sker = t(rng.normal(size=(3, 3, 2, 2)))
    pimg = t(_distinct(rng, (2, 2, 4, 4)))
    xs = t(rng.normal(size=(6, 4)))
    gam = t(rng.uniform(0.5, 1.5, size=(4,)))
    bet = t(rng.normal(size=(4,)) * 0.3)
    logits = t(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)

    bn = BatchNorm(4, dtype=dt)

    def bn_fn(x, g, bb):
        bn.gamma, bn.beta = g, bb
        return bn.forward(x, "train", update_running=False)

    checks = [
        ("add", probed(T.add), (v, v2)),
        ("sub", probed(T.sub), (v, v2)),
        ("mul", probed(T.mul), (v, v2)),
        ("div", probed(T.div), (v, vpos)),
        ("tanh", probed(T.tanh), (v,)),
        ("leaky_relu", probed(lambda x: T.leaky_relu(x, 0.01)), (vk,)),
        ("abs", probed(T.abs_), (vk,)),
        ("sqrt", probed(T.sqrt), (vpos,)),
        ("square", probed(T.square), (v,)),
        ("clip", probed(lambda x: T.clip(x, -0.8, 0.8)), (vclip,)),
        ("matmul", probed(T.matmul), (a, b)),
        ("broadcast_bias", probed(lambda x, c: T.matmul(a, x) + c), (b, bias)),
        ("conv2d", probed(lambda x, k: T.conv2d(x, k, stride=1, pad=1)), (img, ker)),
        ("conv2d_stride2", probed(lambda x, k: T.conv2d(x, k, stride=2, pad=1)),
         (simg, sker)),
        ("avg_pool2x2", probed(T.avg_pool2x2), (pimg,)),
        ("max_pool2x2", probed(T.max_pool2x2), (pimg,)),
        ("reshape", probed(lambda x: x.reshape(3, 4)), (a,)),
        ("transpose", probed(lambda x: T.transpose(x, (1, 0))), (a,)),
        ("concat", probed(lambda x, y: T.concat([x, y], axis=0)), (v, v2)),
        ("sum", lambda x: x.sum(), (v,)),
        ("sum_axis", probed(lambda x: x.sum(axis=0)), (a,)),
        ("mean", lambda x: x.mean(), (v,)),
        ("mean_axis", probed(lambda x: x.mean(axis=1, keepdims=True)), (a,)),
        ("l1_norm", T.l1_norm, (vk,)),
        ("l2_norm", T.l2_norm, (v,)),
        ("batchnorm_train", probed(bn_fn), (xs, gam, bet)),
        ("softmax_cross_entropy",
         lambda z: T.softmax_cross_entropy(z, labels), (logits,)),
    ]
    return checks


def quantnet_composite_check(dtype: DType, rng: np.random.Generator) -> float:
    """FD error of a scalar loss through tanh(Q(W)) w.r.t. W and every
    quantizer parameter group jointly."""
    dt = dtype.np_dtype
    qn = QuantNet(2, rng=rng, warm_start=False, dtype=dt)
    w = Tensor(rng.normal(0, 0.6, size=(2, 2, 2, 3)).astype(dt), requires_grad=True)
    probe = Tensor(rng.normal(size=(2, 2, 2, 3)).astype(dt))
    params = list(qn.named_params().items())
    originals = [p for _, p in params]

    # finite_diff_check evaluates f on its own copies of the points; wire each
    # copy into the quantizer before running the forward pass.
    def f(wt, *theta):
        for (name, _), fresh in zip(params, theta):
            obj, attr = _locate(qn, name)
            setattr(obj, attr, fresh)
        return (qn.forward(wt) * probe).sum()

    try:
        return finite_diff_check(f, w, *originals)
    finally:
        for (name, _), orig in zip(params, originals):
            obj, attr = _locate(qn, name)
            setattr(obj, attr, orig)


def _locate(qn: QuantNet, dotted: str):
    unit_name, attr = dotted.split(".")
    unit = {"encoder": qn.encoder, "enc_norm": qn.enc_norm,
            "compressor": qn.compressor, "comp_norm": qn.comp_norm,
            "decoder": qn.decoder}[unit_name]
    attr_map = {"W": "W", "b": "b", "gamma": "gamma", "beta": "beta"}
    return unit, attr_map[attr]


def run_gradcheck(dtype: DType = DType.f64, points: int = 10, seed: int = 0) -> list[dict]:
    """Run the whole suite; one result dict per (op, point)-aggregated check."""
    results = []
    tol = OP_TOL[dtype]
    for p in range(points):
        rng = np.random.default_rng(seed + p)
        for name, fn, args in _checks(dtype, rng):
            err = finite_diff_check(fn, *args)
            results.append({"name": name, "point": p, "error": err, "tol": tol,
                            "ok": err <= tol})
    ctol = COMPOSITE_TOL[dtype]
    for p in range(points):
        rng = np.random.default_rng(1000 + seed + p)
        err = quantnet_composite_check(dtype, rng)
        results.append({"name": "quantnet_composite", "point": p, "error": err,
                        "tol": ctol, "ok": err <= ctol})
    return results


def summarize(results: list[dict]) -> list[str]:
    """One line per op: worst error across points."""
    worst: dict[str, dict] = {}
    for r in results:
        w = worst.setdefault(r["name"], {"error": 0.0, "tol": r["tol"], "ok": True})
        w["error"] = max(w["error"], r["error"])
        w["ok"] = w["ok"] and r["ok"]
    lines = []
    for name in sorted(worst):
        w = worst[name]
        status = "ok" if w["ok"] else "FAIL"
        lines.append(f"{status:4s} {name:24s} max_rel_err={w['error']:.3e} tol={w['tol']:.0e}")
    return lines
