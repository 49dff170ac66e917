"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import filecmp
import itertools
import time

import numpy as np
import pytest

from bivit import autodiff as ad
from bivit import bitops
from bivit.ablation import COMPONENTS, run_components
from bivit.data import DatasetSpec, load_dataset
from bivit.diagnostics import ops_size_calc, parse_bits
from bivit.distill import TeacherBundle, psi, ranking_loss
from bivit.layers import BinarizedMHSA, PrecisionConfig, TinyViT, ViTArch, mhsa_forward_binary, ste_grad_fraction
from bivit.train import TrainConfig, state_dict, train_student, train_teacher, write_metrics

from conftest import report


def test_kernel_oracle_equivalence():
    rng = np.random.default_rng(2024)
    cases = []
    for k in range(1, 9):
        rows = np.array(list(itertools.product((-1.0, 1.0), repeat=k)))
        cases.append((rows, rows))
    for _ in range(1000):
        m, n = rng.integers(1, 65, size=2)
        k = int(rng.integers(1, 513))
        cases.append((rng.choice((-1.0, 1.0), (m, k)), rng.choice((-1.0, 1.0), (n, k))))
    assert any(a.shape[1] % 64 for a, _ in cases[8:]) and max(a.shape[1] for a, _ in cases) > 448
    saved = bitops.get_backend()
    details, ok = [], True
    try:
        for backend in bitops.available_backends():
            bitops.set_backend(backend)
            bitops.xnor_popcount_gemm(bitops.pack_signs(cases[0][0]), bitops.pack_signs(cases[0][1]))  # warm-up
            t0 = time.perf_counter()
            mismatches = 0
            for a, b in cases:
                got = bitops.xnor_popcount_gemm(bitops.pack_signs(a), bitops.pack_signs(b))
                # integer matmul oracle, exact in int64
                mismatches += not np.array_equal(got, a.astype(np.int64) @ b.astype(np.int64).T)
            secs = time.perf_counter() - t0
            ok &= mismatches == 0 and secs < 10
            details.append(f"{backend}: {len(cases)} cases, {mismatches} mismatches, {secs:.2f}s")
    finally:
        bitops.set_backend(saved)
    report("kernel oracle equivalence", ok, "; ".join(details))


def test_compression_arithmetic():
    expect = {
        "deit-tiny": ((22.8, 12.3), (1.0, 0.2), 61.5),
        "deit-small": ((88.2, 45.5), (3.4, 0.8), None),
        "swin-tiny": ((None, 44.9), (None, 0.8), 56.1),
    }
    bad = []
    for arch, (fp, q, accel) in expect.items():
        full, binary = ops_size_calc(arch, parse_bits("32-32")), ops_size_calc(arch, parse_bits("1-1"))
        got = ((full.size_mb, full.ops_1e8), (binary.size_mb, binary.ops_1e8), binary.accel_ratio)
        for g, e in zip(got[0] + got[1] + (got[2],), fp + q + (accel,)):
            if e is not None and g != e:
                bad.append(f"{arch}: got {got}")
                break
    tiny = ops_size_calc("deit-tiny", parse_bits("1-1")).summary()
    report("compression arithmetic", not bad, "; ".join(bad) or f"deit-tiny {tiny}")


def test_ste_contract():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(200):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        alpha = float(rng.choice([rng.uniform(1e-3, 5.0), 1.0, 0.25]))
        x = rng.uniform(-2 * alpha, 2 * alpha, shape)
        # force exact boundary and zero entries into the grid
        flat = x.reshape(-1)
        flat[rng.random(flat.size) < 0.2] = alpha
        flat[rng.random(flat.size) < 0.2] = -alpha
        flat[rng.random(flat.size) < 0.1] = 0.0
        xt = ad.Tensor(x, True, "x")
        g_out = rng.normal(size=shape)
        with ad.Tape() as tape:
            y = ad.sign_ste(xt, alpha)
            loss = ad.tsum(y * ad.Tensor(g_out))
        g = ad.backward(tape, loss)[xt]
        if not (np.array_equal(g, g_out * (np.abs(x) <= alpha)) and np.array_equal(y.data, np.where(x >= 0, 1.0, -1.0))):
            report("STE contract", False, f"mismatch at alpha={alpha}")
        checked += x.size
    report("STE contract", True, f"{checked} entries over 200 random (x, alpha) grids, boundary included")


def test_full_model_gradients():
    rng = np.random.default_rng(3)
    arch = ViTArch(image_size=4, patch=2, dim=8, depth=2, heads=2, mlp_ratio=2.0, classes=3)
    model = TinyViT(arch, PrecisionConfig.full(), seed=3)
    for t in model.parameters().values():
        t.data[...] += rng.normal(scale=0.1, size=t.shape)
    images = rng.normal(size=(2, 1, 4, 4))
    target = rng.normal(size=(2, 3))

    def loss_fn():
        logits, _ = model(images)
        d = logits - ad.Tensor(target)
        return ad.tsum(d * d)

    t0 = time.perf_counter()
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = ad.backward(tape, loss)
    worst, worst_name, entries, zero_ok = 0.0, "", 0, True
    for name, t in model.trainable().items():
        num = ad.numerical_grad(lambda: loss_fn().item(), t)
        entries += t.data.size
        if name.endswith("attn.k.bias"):
            # adding a vector to every key shifts each score row by a constant,
            # which softmax ignores: the exact gradient is zero and the
            # difference quotient is pure rounding noise, so compare absolutely
            zero_ok &= np.abs(grads[t]).max() < 1e-12 and np.abs(num).max() < 1e-8
            continue
        err = ad.relative_error(grads[t], num)
        if err > worst:
            worst, worst_name = err, name
    secs = time.perf_counter() - t0
    report("gradient correctness", worst < 1e-4 and zero_ok and secs < 60,
           f"max rel err {worst:.2e} ({worst_name}) over {entries} entries, "
           f"key-bias gradients zero: {zero_ok}, {secs:.1f}s")


def test_ranking_machinery():
    rng = np.random.default_rng(11)
    worst = 0.0
    ok = True
    for _ in range(200):
        h, n = int(rng.integers(1, 4)), int(rng.integers(2, 9))
        A, B = rng.normal(size=(2, h, n, n)) * rng.uniform(0.1, 10)
        a, b = rng.normal(size=2)
        worst = max(worst, np.abs(psi(A).sum(axis=-2)).max(),
                    np.abs(psi(a * A + b * B) - (a * psi(A) + b * psi(B))).max())
        # same psi-image: a column profile added to every row leaves psi unchanged
        shifted = A + rng.normal(size=(h, 1, n))
        ok &= ranking_loss([A], [shifted]).item() <= 1e-12
        ok &= ranking_loss([A], [A]).item() == 0.0
        # different psi-image: strictly positive
        C = A.copy()
        C[0, int(rng.integers(n)), int(rng.integers(n))] += rng.uniform(0.01, 1.0)
        ok &= ranking_loss([A], [C]).item() > 1e-12
    report("ranking machinery", ok and worst <= 1e-12, f"max residual {worst:.1e} over 200 random maps")


def test_attention_ranking_invariance():
    rng = np.random.default_rng(5)
    rows = 0
    ok = True
    for trial in range(100):
        heads, hd, tokens = int(rng.integers(1, 5)), int(rng.integers(2, 17)), int(rng.integers(2, 18))
        m = BinarizedMHSA(heads * hd, heads, PrecisionConfig.binary(), n_tokens=tokens, rng=rng)
        for t in (m.alpha_q, m.alpha_k, m.alpha_v):
            t.data[:] = rng.uniform(0.1, 3.0, heads)
        x = ad.Tensor(rng.normal(size=(2, tokens, heads * hd)))
        _, A0, _ = mhsa_forward_binary(x, m)
        head = int(rng.integers(heads))
        target = m.alpha_q if rng.random() < 0.5 else m.alpha_k
        target.data[head] *= float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
        _, A1, _ = mhsa_forward_binary(x, m)
        for r0, r1 in zip(A0.data.reshape(-1, tokens), A1.data.reshape(-1, tokens)):
            ok &= np.array_equal(np.argsort(r0, kind="stable"), np.argsort(r1, kind="stable"))
            rows += 1
    report("attention ranking invariance", ok, f"{rows} rows over 100 random modules and inputs")


def test_gradient_reactivation():
    data = load_dataset(DatasetSpec())
    model = TinyViT(ViTArch(), PrecisionConfig.binary(), seed=0)
    batch = data.x_train[:64]
    model.calibrate(batch)
    factors = np.geomspace(0.1, 10.0, 9)
    ok, details = True, []
    for b, blk in enumerate(model.blocks):
        calibrated = blk.attn.alpha_q.data.copy()
        fracs = []
        for f in factors:
            blk.attn.alpha_q.data[:] = f * calibrated
            with ad.Tape() as tape:
                logits, _ = model(batch)
                loss = ad.tsum(logits * logits)
            ad.backward(tape, loss)
            fracs.append(float(ste_grad_fraction(model)[b]["q"].mean()))
        blk.attn.alpha_q.data[:] = calibrated
        ok &= all(x >= y for x, y in zip(fracs, fracs[1:])) and fracs[0] > fracs[-1]
        details.append(f"b{b} {fracs[0]:.3f}->{fracs[-1]:.3f}")
    report("gradient reactivation", ok, ", ".join(details))


@pytest.fixture(scope="module")
def desk_data():
    return load_dataset(DatasetSpec())


@pytest.fixture(scope="module")
def component_ablation(desk_data):
    base = TrainConfig()
    a = base.arch
    assert (a.depth, a.dim) == (4, 64) and base.epochs <= 20 and base.lam == 10.0
    log = []
    result = run_components(base, desk_data, seeds=(0, 1, 2), configs=COMPONENTS, log=log.append)
    print("\n".join(log))
    print(result.format())
    return result


@pytest.mark.slow
def test_directional_ablation(component_ablation):
    r = component_ablation
    base, lsf, rd, both = (100 * r.mean(k) for k in ("baseline", "+LSF", "+RD", "+LSF+RD"))
    checks = {
        "baseline < +RD": base < rd,
        "baseline < +LSF": base < lsf,
        "+LSF+RD >= max(single) - 0.5": both >= max(lsf, rd) - 0.5,
        "runtime <= 45 min": r.seconds <= 45 * 60,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"baseline {base:.2f} / +LSF {lsf:.2f} / +RD {rd:.2f} / both {both:.2f} "
              f"(teachers {', '.join(f'{100 * t:.1f}' for t in r.teacher_accs)}; {r.seconds / 60:.1f} min)")
    if failed:
        detail += "; violated: " + ", ".join(failed)
    report("directional ablation", not failed, detail)


@pytest.mark.slow
def test_lambda_sensitivity(component_ablation):
    # lambda=0 and lambda=10 with learnable scales are the +LSF and +LSF+RD runs above
    r = component_ablation
    acc0, acc10 = 100 * r.mean("+LSF"), 100 * r.mean("+LSF+RD")
    report("lambda sensitivity", acc10 >= acc0, f"lambda=10 {acc10:.2f} vs lambda=0 {acc0:.2f}")


def test_determinism_and_resume(tmp_path, desk_data):
    cfg = TrainConfig(epochs=2, teacher_epochs=2)
    teacher, _ = train_teacher(cfg, desk_data)
    teacher2, _ = train_teacher(cfg, desk_data)
    same_teacher = all(np.array_equal(a, b) for a, b in zip(state_dict(teacher).values(),
                                                               state_dict(teacher2).values()))
    bundle = TeacherBundle(teacher, cfg.ranking_stage)
    bundle.precompute(desk_data.x_train)
    full, rows_a = train_student(cfg, bundle, desk_data)
    _, rows_b = train_student(cfg, bundle, desk_data)
    write_metrics(tmp_path / "a.csv", rows_a)
    write_metrics(tmp_path / "b.csv", rows_b)
    same_csv = filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    train_student(cfg, bundle, desk_data, ckpt_dir=tmp_path / "ck", stop_after_epoch=1)
    resumed, rows_r = train_student(cfg, bundle, desk_data, resume=tmp_path / "ck" / "epoch001.ckpt")
    write_metrics(tmp_path / "r.csv", rows_r)
    same_resume = filecmp.cmp(tmp_path / "a.csv", tmp_path / "r.csv", shallow=False) and all(
        np.array_equal(a, b) for a, b in zip(state_dict(full).values(), state_dict(resumed).values()))
    report("determinism and checkpoint round-trip", same_teacher and same_csv and same_resume,
           f"teacher {same_teacher}, metrics CSV {same_csv}, resume {same_resume}")
