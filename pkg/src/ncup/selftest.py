"""Built-in invariant suites, runnable from the command line without pytest."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .nconv import NConvKernel, conf_pool, nconv_forward
from .sparsify import forward_map, read_back
from .tensor import BatchNormParams, Tensor, batch_norm, conv2d, resize, square
from .upsampler import NCUPModel, audit_param_counts, load_model, ncup_upsample

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-10


def _fd_check(loss: Callable[..., Tensor], arrays: list[np.ndarray], rng: np.random.Generator,
              h: float = 1e-5, probes: int = 6) -> float:
    """Worst relative error of analytic vs central-difference gradients on sampled entries."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss(*leaves).backward()
    num, ana = [], []
    for leaf, a in zip(leaves, arrays):
        flat = a.reshape(-1)
        grad = np.zeros_like(a) if leaf.grad is None else leaf.grad
        for idx in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = loss(*map(Tensor, arrays)).item()
            flat[idx] = old - h
            down = loss(*map(Tensor, arrays)).item()
            flat[idx] = old
            num.append((up - down) / (2 * h))
            ana.append(grad.reshape(-1)[idx])
    num, ana = np.array(num), np.array(ana)
    scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-8)
    return float(np.max(np.abs(num - ana)) / scale)


def _pipeline_check(seed: int, rng: np.random.Generator, h: float = 1e-5, probes: int = 2) -> float:
    model = NCUPModel(2, seed=seed)
    flow, guide = rng.uniform(-1, 1, size=(2, 2, 4, 4)), rng.uniform(-1, 1, size=(2, 3, 4, 4))
    weight = rng.normal(size=(2, 2, 8, 8))

    def loss():
        return (ncup_upsample(flow, guide, model) * weight).sum()

    loss().backward()
    num, ana = [], []
    for p in model.parameters().values():
        flat = p.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = loss().item()
            flat[idx] = old - h
            down = loss().item()
            flat[idx] = old
            num.append((up - down) / (2 * h))
            ana.append(p.grad.reshape(-1)[idx])
    num, ana = np.array(num), np.array(ana)
    return float(np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-8))


def suite_gradients(seeds=range(5)) -> tuple[bool, str]:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 2, 6, 6))
        conf = rng.uniform(0.1, 1, size=(1, 1, 6, 6))
        w3, w6, w12 = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 1, 12, 12))
        bn = BatchNormParams(2)
        checks = [
            (lambda a, k: (conv2d(a, k, pad=1) * w3).sum(), [x, rng.normal(size=(3, 2, 3, 3))]),
            (lambda d, c, r: (nconv_forward(d, c, NConvKernel(r))[0] * x[:1, :1]).sum(),
             [x[:1, :1].copy(), conf.copy(), rng.normal(size=(1, 1, 3, 3))]),
            (lambda d, c: (conf_pool(d, c, 2)[0] * w6).sum(), [x[:1, :1].copy(), conf.copy()]),
            (lambda d, c: (forward_map(d, c, 2).data * w12).sum(), [x[:1, :1].copy(), conf.copy()]),
            (lambda a: square(resize(a, 2, "bilinear")).sum(), [x.copy()]),
            (lambda a: (batch_norm(a, bn, "train", True) * x).sum(), [rng.normal(size=(2, 2, 6, 6))]),
        ]
        for fn, arrays in checks:
            worst = max(worst, _fd_check(fn, arrays, rng))
        worst = max(worst, _pipeline_check(seed, rng))
    return bool(worst < GRAD_TOL), f"max_rel_err={worst:.6g}"


def _nconv_reference(data, conf, a):
    kh, kw = a.shape
    ph, pw = kh // 2, kw // 2
    h, w = data.shape
    out_d, out_c = np.zeros((h, w)), np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            num = den = 0.0
            for i in range(kh):
                for j in range(kw):
                    yy, xx = y + i - ph, x + j - pw
                    if 0 <= yy < h and 0 <= xx < w:
                        num += a[i, j] * data[yy, xx] * conf[yy, xx]
                        den += a[i, j] * conf[yy, xx]
            out_d[y, x] = num / den if den > 0 else 0.0
            out_c[y, x] = den / a.sum()
    return out_d, out_c


def suite_nconv_oracle(instances: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        h, w = rng.integers(1, 8, size=2)
        k = int(rng.choice([1, 3, 5]))
        data = rng.normal(size=(h, w))
        conf = rng.uniform(size=(h, w)) * (rng.uniform(size=(h, w)) > 0.3)
        raw = rng.normal(size=(1, 1, k, k))
        d, c = nconv_forward(Tensor(data[None, None]), Tensor(conf[None, None]), NConvKernel(raw))
        rd, rc = _nconv_reference(data, conf, NConvKernel(raw).effective().data[0, 0])
        worst = max(worst, np.max(np.abs(d.data[0, 0] - rd)), np.max(np.abs(c.data[0, 0] - rc)))
    return bool(worst < ORACLE_TOL), f"max_abs_diff={worst:.6g}"


def suite_sparsify(scales=(1, 2, 3, 4, 8), seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    ok = True
    for s in scales:
        x = rng.normal(size=(1, 1, 5, 7))
        c = rng.uniform(0.1, 1, size=x.shape)
        grid = forward_map(Tensor(x), Tensor(c), s)
        mask = grid.conf.data != 0
        ok &= grid.populated == x.size == int(mask.sum())
        ok &= grid.data.data[mask].sum() == x.ravel().sum()
        ok &= bool(np.array_equal(read_back(grid, s).data, x))
    return bool(ok), f"scales={','.join(map(str, scales))}"


def suite_param_audit(model_path=None) -> tuple[bool, str]:
    try:
        model = NCUPModel() if model_path is None else load_model(model_path, strict=False)
    except (OSError, ValueError, KeyError) as err:
        return False, f"unreadable checkpoint ({err})"
    counts = audit_param_counts(model)
    ok = counts["weights_net"] == counts["expected_weights_net"] and counts["interp_net"] == counts["expected_interp_net"]
    return ok, (
        f"weights_net={counts['weights_net']} expected={counts['expected_weights_net']} "
        f"interp_net={counts['interp_net']} expected={counts['expected_interp_net']} total={counts['total']}"
    )


def run_all(model_path=None) -> list[tuple[str, bool, str]]:
    suites = [
        ("gradients", suite_gradients),
        ("nconv_oracle", suite_nconv_oracle),
        ("sparsify", suite_sparsify),
        ("param_audit", lambda: suite_param_audit(model_path)),
    ]
    return [(name, *fn()) for name, fn in suites]
