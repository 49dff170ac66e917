"""Fast oracle checks run by ``bivit selftest``; no test framework needed."""

from __future__ import annotations

import itertools
import time

import numpy as np

from . import autodiff as ad
from .bitops import available_backends, pack_signs, set_backend, get_backend, xnor_popcount_gemm
from .diagnostics import extreme_dot_range_check, ops_size_calc, parse_bits
from .distill import psi, ranking_loss
from .layers import PrecisionConfig, TinyViT, ViTArch


def _naive(a, b):
    return np.array([[int(sum(x * y for x, y in zip(r, c))) for c in b] for r in a])


def check_kernel(rng) -> bool:
    saved = get_backend()
    try:
        for backend in available_backends():
            set_backend(backend)
            for k in (1, 3, 8):
                rows = np.array(list(itertools.product((-1.0, 1.0), repeat=k)))
                if not np.array_equal(xnor_popcount_gemm(pack_signs(rows), pack_signs(rows)),
                                      rows.astype(int) @ rows.T.astype(int)):
                    return False
            for k in (7, 64, 65, 130):
                a = rng.choice((-1.0, 1.0), (5, k))
                b = rng.choice((-1.0, 1.0), (4, k))
                if not np.array_equal(xnor_popcount_gemm(pack_signs(a), pack_signs(b)), _naive(a, b)):
                    return False
    finally:
        set_backend(saved)
    return True


def check_ste(rng) -> bool:
    x = ad.Tensor(np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]), True)
    with ad.Tape() as tape:
        y = ad.sign_ste(x, 1.0)
        loss = ad.tsum(y)
    g = ad.backward(tape, loss)[x]
    return np.array_equal(g, (np.abs(x.data) <= 1.0).astype(float)) and np.all(np.abs(y.data) == 1)


def check_gradients(rng) -> bool:
    arch = ViTArch(image_size=4, patch=2, dim=8, depth=1, heads=2, mlp_ratio=1.0, classes=3)
    model = TinyViT(arch, PrecisionConfig.full(), seed=1)
    images = rng.normal(size=(2, 1, 4, 4))
    target = rng.normal(size=(2, 3))

    def loss_fn():
        logits, _ = model(images)
        d = logits - ad.Tensor(target)
        return ad.tsum(d * d)

    params = model.trainable()
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = ad.backward(tape, loss)
    for name in ("blocks.0.attn.q.weight", "blocks.0.fc1.weight", "pos_embed"):
        t = params[name]
        num = ad.numerical_grad(lambda: loss_fn().item(), t)
        if ad.relative_error(grads[t], num) >= 1e-4:
            return False
    return True


def check_ranking(rng) -> bool:
    a, b = rng.normal(size=(2, 2, 5, 5))
    lin = np.allclose(psi(2 * a - 3 * b), 2 * psi(a) - 3 * psi(b), atol=1e-12)
    circ = np.allclose(psi(a).sum(axis=-2), 0.0, atol=1e-12)
    zero = ranking_loss([a], [a + 1.0]).item() < 1e-12  # constant shift of all rows keeps psi
    return lin and circ and zero


def check_ops(rng) -> bool:
    tiny = ops_size_calc("deit-tiny", parse_bits("1-1"))
    swin = ops_size_calc("swin-tiny", parse_bits("1-1"))
    return tiny.summary() == "1.0 MB, 0.2e8 OPs, 61.5x" and (swin.ops_1e8, swin.accel_ratio) == (0.8, 56.1)


def check_dot_range(rng) -> bool:
    return extreme_dot_range_check(4).attained == {-4, -2, 0, 2, 4} and extreme_dot_range_check(64).ok


CHECKS = {
    "packed kernel vs integer matmul": check_kernel,
    "sign STE mask": check_ste,
    "finite-difference gradients": check_gradients,
    "circular difference and ranking loss": check_ranking,
    "size/OPs arithmetic": check_ops,
    "dot-product range": check_dot_range,
}


def run(out=print) -> bool:
    rng = np.random.default_rng(0)
    ok_all = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok = bool(fn(rng))
        except Exception as e:  # report and keep going
            out(f"ERROR {name}: {type(e).__name__}: {e}")
            ok = False
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name} ({time.perf_counter() - t0:.2f}s)")
    return ok_all
