"""Finite-difference gradient suite and scalar-loop oracles.

Shared by the ``selftest`` CLI command and the test suite.  Everything here
runs in double precision.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import charbonnier_loss, epe, inverse_warp, mssim_loss, psnr_loss
from .nn import ConvLSTMParams, ConvLSTMState, convlstm_step, spp, spp_broadcast

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _unit(rng, *shape):
    return _t(rng, *shape, lo=0.0, hi=1.0)


def _away_from_zero(rng, *shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x)


def _readout(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Random linear functional so every output element matters."""
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: ad.sum(ad.mul(y, r))


def _with_readout(op, rng, inputs):
    with ad.no_grad():
        probe = op(*inputs)
    read = _readout(probe, rng)
    return lambda *xs: read(op(*xs)), inputs


def _non_integer_flow(rng, n, h, w, margin=0.01):
    """Flow whose sample points stay inside the image and >= margin away from integers."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    frac = rng.uniform(margin, 1 - margin, size=(n, 2, h, w))
    bx = np.clip(xs + rng.integers(-1, 2, size=(n, h, w)), 0, w - 2)
    by = np.clip(ys + rng.integers(-1, 2, size=(n, h, w)), 0, h - 2)
    return Tensor(np.stack([bx + frac[:, 0] - xs, by + frac[:, 1] - ys], axis=1))


def _grad_cases() -> dict[str, Callable]:
    def conv(rng):
        return _with_readout(lambda x, w, b: ad.conv2d(x, w, b, 1, 1), rng,
                             [_t(rng, 1, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)])

    def conv_strided(rng):
        return _with_readout(lambda x, w, b: ad.conv2d(x, w, b, 2, 2, 2), rng,
                             [_t(rng, 2, 2, 6, 7), _t(rng, 2, 2, 3, 3), _t(rng, 2)])

    def unary(f, positive=False):
        def case(rng):
            x = _t(rng, 1, 2, 3, 4, lo=0.2, hi=2.0) if positive else _away_from_zero(rng, 1, 2, 3, 4)
            return _with_readout(f, rng, [x])
        return case

    def binary(f, positive=False):
        def case(rng):
            lo, hi = (0.5, 2.0) if positive else (-1.0, 1.0)
            return _with_readout(f, rng, [_t(rng, 1, 2, 3, 3, lo=lo, hi=hi), _t(rng, 1, 2, 3, 3, lo=lo, hi=hi)])
        return case

    def channel_ops(rng):
        return _with_readout(lambda x, w, b: ad.channel_add(ad.channel_mul(x, w), b), rng,
                             [_t(rng, 2, 3, 2, 2), _t(rng, 3), _t(rng, 3)])

    def pool(rng):
        return _with_readout(lambda x: ad.avg_pool2d(x, 2, 2), rng, [_t(rng, 1, 2, 5, 4)])

    def pool_overlap(rng):
        return _with_readout(lambda x: ad.avg_pool2d(x, 3, 1), rng, [_t(rng, 1, 1, 5, 5)])

    def upsample(rng):
        return _with_readout(ad.upsample2x_bilinear, rng, [_t(rng, 1, 2, 3, 4)])

    def concat(rng):
        return _with_readout(lambda a, b: ad.concat_channels([a, b]), rng, [_t(rng, 1, 2, 3, 3), _t(rng, 1, 1, 3, 3)])

    def spp_case(rng):
        return _with_readout(lambda x: spp_broadcast(spp(x), 5, 6), rng, [_t(rng, 1, 2, 5, 6)])

    def warp(rng):
        img = _t(rng, 1, 2, 5, 6, lo=0.0, hi=1.0)
        flow = _non_integer_flow(rng, 1, 5, 6)
        return _with_readout(inverse_warp, rng, [img, flow])

    def convlstm(rng):
        p = ConvLSTMParams(2, 2, 3, rng=rng, dtype=np.float64)
        for t in (p.w_ci, p.w_cf, p.w_co):
            t.data = rng.uniform(-1, 1, size=t.shape)
        p.b.data = rng.uniform(-1, 1, size=p.b.shape)
        x, h0, c0 = _t(rng, 1, 2, 4, 4), _t(rng, 1, 2, 4, 4), _t(rng, 1, 2, 4, 4)
        leaves = [x, h0, c0, p.w_x, p.w_h, p.b, p.w_ci, p.w_cf, p.w_co]

        def op(x, h0, c0, *params):
            s = convlstm_step(x, ConvLSTMState(h0, c0), p)
            return ad.concat_channels([s.h, s.c])

        return _with_readout(op, rng, leaves)

    def charbonnier(rng):
        return (lambda a, b: charbonnier_loss(a, b, 0.4, 1e-6)), [_unit(rng, 1, 3, 4, 4), _unit(rng, 1, 3, 4, 4)]

    def psnr(rng):
        return psnr_loss, [_unit(rng, 1, 3, 4, 4), _unit(rng, 1, 3, 4, 4)]

    def mssim(rng):
        return (lambda a, b: mssim_loss(a, b, 3)), [_unit(rng, 1, 2, 6, 7), _unit(rng, 1, 2, 6, 7)]

    def epe_case(rng):
        return epe, [_t(rng, 2, 2, 3, 4), _t(rng, 2, 2, 3, 4)]

    return {
        "conv2d": conv,
        "conv2d_stride_dilation": conv_strided,
        "sigmoid": unary(ad.sigmoid),
        "tanh": unary(ad.tanh),
        "leaky_relu": unary(ad.leaky_relu),
        "power": unary(lambda x: ad.power(x, 0.4), positive=True),
        "log": unary(ad.log, positive=True),
        "sqrt": unary(ad.sqrt, positive=True),
        "square": unary(ad.square),
        "scale": unary(lambda x: ad.add_scalar(ad.scale(x, -1.7), 0.3)),
        "add": binary(ad.add),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul),
        "div": binary(ad.div, positive=True),
        "channel_mul_add": channel_ops,
        "avg_pool2d": pool,
        "avg_pool2d_overlap": pool_overlap,
        "upsample2x_bilinear": upsample,
        "concat_channels": concat,
        "spp_broadcast": spp_case,
        "inverse_warp": warp,
        "convlstm_step": convlstm,
        "charbonnier_loss": charbonnier,
        "psnr_loss": psnr,
        "mssim_loss": mssim,
        "epe": epe_case,
    }


GRAD_CASES = _grad_cases()


def gradient_suite(seeds=range(5), tol: float = GRAD_TOL, eps: float = 1e-5, names=None) -> list[CheckResult]:
    results = []
    for name, build in GRAD_CASES.items():
        if names is not None and name not in names:
            continue
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, inputs = build(rng)
            results.append(CheckResult(name, seed, ad.grad_check(fn, inputs, eps, tol), tol))
    return results


# -- scalar-loop oracles -------------------------------------------------------


def conv2d_loop(x, w, b=None, stride=1, padding=0, dilation=1) -> np.ndarray:
    """Direct summation over every output element and kernel tap."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b_ in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for i in range(kh):
                            yy = y * stride + i * dilation - padding
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(kw):
                                xj = xx * stride + j * dilation - padding
                                if 0 <= xj < wd:
                                    acc += float(x[b_, ch, yy, xj]) * float(w[o, ch, i, j])
                    out[b_, o, y, xx] = acc
    return out


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def convlstm_loop(x, h_prev, c_prev, p: ConvLSTMParams):
    """Per-pixel evaluation of the five ConvLSTM update equations."""
    n, _, hh, ww = x.shape
    hid, k = p.hidden, p.k
    pad = k // 2
    wx = {g: p.kernel(g, "x") for g in "ifco"}
    wh = {g: p.kernel(g, "h") for g in "ifco"}
    bias = {g: p.b.data[i * hid : (i + 1) * hid] for i, g in enumerate("ifco")}
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp = np.pad(h_prev, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_new = np.zeros((n, hid, hh, ww))
    c_new = np.zeros((n, hid, hh, ww))
    for b in range(n):
        for y in range(hh):
            for xx in range(ww):
                xpatch = xp[b, :, y : y + k, xx : xx + k]
                hpatch = hp[b, :, y : y + k, xx : xx + k]
                for o in range(hid):
                    pre = {g: float((wx[g][o] * xpatch).sum() + (wh[g][o] * hpatch).sum() + bias[g][o]) for g in "ifco"}
                    cp = float(c_prev[b, o, y, xx])
                    i_g = _sig(pre["i"] + p.w_ci.data[o] * cp)
                    f_g = _sig(pre["f"] + p.w_cf.data[o] * cp)
                    c = f_g * cp + i_g * math.tanh(pre["c"])
                    o_g = _sig(pre["o"] + p.w_co.data[o] * c)
                    c_new[b, o, y, xx] = c
                    h_new[b, o, y, xx] = o_g * math.tanh(c)
    return h_new, c_new


def oracle_suite(seeds=range(5)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 10)), int(rng.integers(3, 10))
        co, k = int(rng.integers(1, 4)), int(rng.choice([1, 3]))
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        if h + 2 * pad < dil * (k - 1) + 1 or w + 2 * pad < dil * (k - 1) + 1:
            pad = dil * (k - 1)
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((co, c, k, k))
        b = rng.standard_normal(co)
        got = ad.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad, dil).data
        want = conv2d_loop(x, wt, b, stride, pad, dil)
        results.append(CheckResult(f"conv2d[{n}x{c}x{h}x{w},k{k},s{stride},p{pad},d{dil}]", seed,
                                   float(np.abs(got - want).max()), ORACLE_TOL))

        cin, hid = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        hh, ww = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        p = ConvLSTMParams(cin, hid, 3, rng=rng, dtype=np.float64)
        for t in (p.w_ci, p.w_cf, p.w_co, p.b):
            t.data = rng.uniform(-1, 1, size=t.shape)
        xs = rng.standard_normal((1, cin, hh, ww))
        h0 = rng.uniform(-1, 1, (1, hid, hh, ww))
        c0 = rng.uniform(-1, 1, (1, hid, hh, ww))
        with ad.no_grad():
            st = convlstm_step(Tensor(xs), ConvLSTMState(Tensor(h0), Tensor(c0)), p)
        hw, cw = convlstm_loop(xs, h0, c0, p)
        err = max(float(np.abs(st.h.data - hw).max()), float(np.abs(st.c.data - cw).max()))
        results.append(CheckResult(f"convlstm_step[1x{cin}x{hh}x{ww},hidden{hid}]", seed, err, ORACLE_TOL))
    return results


def run_all(seeds=range(5), echo=print) -> bool:
    ok = True
    for title, fn in (("gradient", gradient_suite), ("oracle", oracle_suite)):
        t0 = time.perf_counter()
        results = fn(seeds)
        for r in results:
            ok &= r.passed
            echo(f"{'PASS' if r.passed else 'FAIL'} {title} {r.name} seed={r.seed} err={r.error:.3e} tol={r.tol:.0e}")
        echo(f"{title} suite: {sum(r.passed for r in results)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return ok
