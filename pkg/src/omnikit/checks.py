"""Finite-difference gradient checks for every network block and a tiny full model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from . import nn, objective
from .autodiff import Tensor


@dataclass
class CheckResult:
    name: str
    report: ad.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        worst = max(self.report.max_rel_error.values(), default=0.0)
        n = sum(self.report.checked.values())
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22s} max_rel={worst:.2e} coords={n} ({self.seconds:.1f}s)"


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def block_cases(seed: int = 0) -> dict:
    """name -> (scalar function, inputs) for each network block.

    Block outputs are read out through a fixed random weighting so that
    symmetric gradient errors cannot cancel in the sum.
    """
    rng = np.random.default_rng(seed)
    cases = {}

    x = _param(rng, 1, 2, 6, 8)
    w, b = _param(rng, 3, 2, 3, 3), _param(rng, 3)
    ro = np.random.default_rng(seed + 1)
    r1 = Tensor(ro.normal(size=(1, 3, 6, 8)))
    cases["conv2d"] = (lambda: ad.sum_(nn.conv2d(x, nn.Conv2dParams(w, b)) * r1), {"x": x, "weight": w, "bias": b})

    x2 = _param(rng, 1, 2, 6, 8)
    w2, b2 = _param(rng, 3, 2, 3, 3), _param(rng, 3)
    r2 = Tensor(ro.normal(size=(1, 3, 3, 4)))
    cases["conv2d_stride2"] = (lambda: ad.sum_(nn.conv2d(x2, nn.Conv2dParams(w2, b2, stride=2)) * r2),
                               {"x": x2, "weight": w2, "bias": b2})

    x3 = _param(rng, 1, 3, 6, 8)
    dw, pw, pb = _param(rng, 3, 1, 3, 3), _param(rng, 4, 3, 1, 1), _param(rng, 4)
    r3 = Tensor(ro.normal(size=(1, 4, 6, 8)))
    cases["separable_conv2d"] = (
        lambda: ad.sum_(nn.separable_conv2d(x3, nn.SeparableConv2dParams(dw, pw, pb)) * r3),
        {"x": x3, "depthwise": dw, "pointwise": pw, "bias": pb},
    )

    x4 = _param(rng, 1, 2, 6, 8)
    r4 = Tensor(ro.normal(size=(1, 2, 3, 4)))
    cases["aa_maxpool"] = (lambda: ad.sum_(nn.aa_maxpool(x4) * r4), {"x": x4})

    x5 = _param(rng, 1, 2, 3, 4)
    r5 = Tensor(ro.normal(size=(1, 2, 6, 8)))
    cases["bilinear_upsample2x"] = (lambda: ad.sum_(nn.bilinear_upsample2x(x5) * r5), {"x": x5})

    x6 = _param(rng, 2, 8, 3, 4)
    g6, b6 = _param(rng, 8), _param(rng, 8)
    r6 = Tensor(ro.normal(size=(2, 8, 3, 4)))
    cases["group_norm"] = (lambda: ad.sum_(nn.group_norm(x6, g6, b6, groups=4) * r6), {"x": x6, "gamma": g6, "beta": b6})

    C, Hb, Wb, h = 8, 2, 3, 2
    x7 = _param(rng, 1, C, Hb, Wb)
    mp = {k: _param(rng, C, C, scale=C**-0.5) for k in ("wq", "wk", "wv", "wo")}
    rh, rw = _param(rng, 2 * Hb - 1, C // h, scale=0.5), _param(rng, 2 * Wb - 1, C // h, scale=0.5)
    r7 = Tensor(ro.normal(size=(1, C, Hb, Wb)))
    cases["mhsa2d"] = (
        lambda: ad.sum_(nn.mhsa2d(x7, nn.MhsaParams(**mp, rel_h=rh, rel_w=rw, heads=h)) * r7),
        {"x": x7, **mp, "rel_h": rh, "rel_w": rw},
    )

    p8 = Tensor(rng.uniform(0.05, 0.95, size=(2, 2)), requires_grad=True)
    g8 = rng.uniform(0.05, 0.95, size=(2, 2))
    cases["berhu"] = (lambda: objective.berhu(p8, g8), {"pred": p8})

    p9 = Tensor(rng.uniform(0.05, 0.95, size=(1, 3, 4, 8)), requires_grad=True)
    g9 = rng.uniform(0.05, 0.95, size=(1, 3, 4, 8))
    v9 = rng.random((1, 4, 8)) < 0.8
    v9[0, 0, 0] = True
    cases["l1_normal"] = (lambda: objective.l1_normal(p9, g9, v9), {"pred": p9})
    return cases


def run_block_checks(seed: int = 0, tol: float = 1e-4, floor: float = 1e-6) -> list[CheckResult]:
    out = []
    with ad.precision(64):
        for name, (f, inputs) in block_cases(seed).items():
            eps = 1e-3 if name == "berhu" else 1e-6
            t = time.perf_counter()
            rep = ad.grad_check(f, inputs, eps=eps, tol=tol, floor=floor)
            out.append(CheckResult(name, rep, time.perf_counter() - t))
    return out


def tiny_model_config() -> M.ModelConfig:
    return M.ModelConfig(variant="ubotnet", base_channels=8, levels=3, height=16, width=32, seed=0)


def run_model_check(seed: int = 0, max_coords: int | None = 24, tol: float = 1e-4, floor: float = 1e-6,
                    eps: float = 1e-5, config: M.ModelConfig | None = None) -> CheckResult:
    """Full forward + total loss on a 1 x 3 x 16 x 32 input, every parameter tensor and the input.

    ``max_coords`` samples that many coordinates per tensor (all when None).
    Relative tables, biases and shifts are set to random values so their
    gradients are exercised.  The default step 1e-5 keeps the finite-difference
    rounding noise (about ulp(loss) / 2 eps) well under ``tol * floor`` for
    parameters whose true gradient is zero, such as biases feeding a norm.
    """
    cfg = config or tiny_model_config()
    rng = np.random.default_rng(seed)
    with ad.precision(64):
        m = M.build(cfg)
        for name, p in m.params.items():
            if ".rel_" in name or name.endswith(".beta") or name.endswith(".bias"):
                m.params[name] = Tensor(rng.normal(0, 0.1, size=p.shape), requires_grad=True)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, cfg.height, cfg.width)), requires_grad=True)
        target = {
            "depth01": rng.uniform(0.05, 1.0, size=(1, 1, cfg.height, cfg.width)),
            "normal01": rng.uniform(0, 1, size=(1, 3, cfg.height, cfg.width)),
            "normal_valid": rng.random((1, cfg.height, cfg.width)) < 0.7,
        }

        def f():
            return objective.total_loss(M.forward(m, x), target).total

        inputs = {"input": x, **m.params}
        t = time.perf_counter()
        rep = ad.grad_check(f, inputs, eps=eps, tol=tol, floor=floor, max_coords=max_coords, seed=seed)
    return CheckResult("tiny_ubotnet+loss", rep, time.perf_counter() - t)
