"""Acceptance suite: one test per release criterion.

Each test prints a single PASS/FAIL line (visible with `pytest -s`, or in
captured output on failure) so the release checklist can be read straight
off the run log.
"""

import json
import math
import time

import numpy as np
import pytest

from mmnet import autodiff as ad
from mmnet.arch import (
    MMNetConfig,
    build_mmnet,
    forward,
    init_weights,
    param_count,
    shape_trace,
)
from mmnet.autodiff import Parameter, grad_check
from mmnet.cli import main as cli_main
from mmnet.data import Sample, AugmentConfig, augment, sample_rng, save_sample, synth_fixtures
from mmnet.losses import (
    loss_alpha,
    loss_aux,
    loss_combined,
    loss_compositional,
    loss_gradient,
    loss_kl,
    metric_gradient_error,
    metric_mad,
)
from mmnet.ops import (
    ConvSpec,
    bilinear_resize,
    conv2d,
    gaussian_derivative_kernels,
    naive_conv2d,
    softmax2,
)
from mmnet.quant import (
    LUT_SCALE,
    QuantParams,
    build_softmax_lut,
    fold_batch_norm,
    quantize_model,
    run_quantized,
)
from mmnet.train import AdamState, TrainConfig, make_parameters, train_step


def report(number: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] criterion {number}: {description}{suffix}")
    assert ok, f"criterion {number} failed: {description}{suffix}"


# ---------------------------------------------------------------------------


def test_criterion_01_parameter_counts():
    reported = {0.5: 69_000, 0.75: 127_000, 1.0: 199_000, 1.4: 369_000}
    details = []
    ok = True
    for mult, want in reported.items():
        graph = build_mmnet(MMNetConfig(width_multiplier=mult))
        got = param_count(init_weights(graph))
        dev = abs(got - want) / want
        details.append(f"x{mult}: {got} ({dev:+.1%})")
        ok = ok and dev <= 0.05
    report(1, "parameter counts within 5% at 4 width multipliers", ok,
           "; ".join(details))


def test_criterion_02_shape_trace():
    expected = [
        ("Initial Block", 128, 128, 32),
        ("Encoder 1", 64, 64, 16),
        ("Encoder 2", 64, 64, 24),
        ("Encoder 3", 64, 64, 24),
        ("Encoder 4", 64, 64, 24),
        ("Encoder 5", 32, 32, 40),
        ("Encoder 6", 32, 32, 40),
        ("Encoder 7", 32, 32, 40),
        ("Encoder 8", 32, 32, 40),
        ("Encoder 9", 16, 16, 80),
        ("Encoder 10", 16, 16, 80),
        ("Decoder 1", 32, 32, 128),
        ("Decoder 2", 64, 64, 80),
        ("Enhancement 1", 64, 64, 40),
        ("Enhancement 2", 64, 64, 40),
        ("Decoder 3", 256, 256, 16),
        ("Final Block", 256, 256, 2),
    ]
    graph = build_mmnet(MMNetConfig(width_multiplier=1.0, input_size=256))
    got = [(t, h, w, c) for t, _, (h, w, c) in shape_trace(graph)]
    ok = len(got) == 17 and got == expected
    report(2, "all 17 output-size rows reproduced at width 1.0 / 256 px", ok,
           f"{len(got)} rows")


def test_criterion_03_convolution_oracle():
    rng = np.random.default_rng(42)
    cases, max_err = 0, 0.0
    covered = set()
    while cases < 200 or len(covered) < 16:
        stride = int(rng.choice([1, 2]))
        dilation = int(rng.choice([1, 2, 4, 8]))
        k = int(rng.choice([1, 3]))
        cin = int(rng.integers(1, 5))
        depthwise = bool(rng.random() < 0.5)
        cout = cin if depthwise else int(rng.integers(1, 5))
        groups = cin if depthwise else 1
        wshape = (cin, 1, k, k) if depthwise else (cout, cin, k, k)
        x = rng.standard_normal((int(rng.integers(1, 3)), cin,
                                 int(rng.integers(4, 12)), int(rng.integers(4, 12))))
        w = rng.standard_normal(wshape)
        b = rng.standard_normal(cout) if rng.random() < 0.5 else None
        spec = ConvSpec(k, k, stride=stride, dilation=dilation, groups=groups)
        err = np.abs(conv2d(x, w, b, spec) - naive_conv2d(x, w, b, spec)).max()
        max_err = max(max_err, float(err))
        covered.add((stride, dilation, depthwise))
        cases += 1
    ok = max_err <= 1e-5 and cases >= 200
    report(3, "vectorized conv matches nested-loop oracle within 1e-5", ok,
           f"{cases} cases, max |err| {max_err:.2e}")


def test_criterion_04_gradient_checks():
    rng = np.random.default_rng(0)
    checked_total, max_rel, all_ok = 0, 0.0, True
    cases = []

    # every differentiable op on random 8x8 instances
    x = Parameter("x", rng.standard_normal((1, 2, 8, 8)))
    y = Parameter("y", rng.standard_normal((1, 2, 8, 8)))
    w_full = Parameter("w_full", rng.standard_normal((3, 2, 3, 3)) * 0.5)
    w_dw = Parameter("w_dw", rng.standard_normal((2, 1, 3, 3)) * 0.5)
    gamma = Parameter("gamma", rng.uniform(0.5, 1.5, 2))
    beta = Parameter("beta", rng.standard_normal(2) * 0.1)
    single = Parameter("single", rng.uniform(0.1, 0.9, (1, 1, 8, 8)))
    target = rng.standard_normal((1, 2, 8, 8))
    target_big = rng.standard_normal((1, 2, 16, 16))
    rmean = rng.standard_normal(2) * 0.1
    rvar = rng.uniform(0.5, 1.5, 2)

    cases += [
        ("add/mul/sub", lambda: ad.mean(ad.mul(ad.add(x, y), ad.sub(x, y))), [x, y]),
        ("absolute", lambda: ad.mean(ad.absolute(ad.add(x, 0.123))), [x]),
        ("log/clamp", lambda: ad.mean(ad.log(ad.clamp(ad.mul(x, 0.05), 1e-3, 2.0))), [x]),
        ("relu6", lambda: ad.mean(ad.relu6(ad.mul(x, 2.7))), [x]),
        ("sum", lambda: ad.mul(ad.sum_all(ad.mul(x, x)), 0.01), [x]),
        ("concat/slice", lambda: ad.mean(
            ad.slice_channels(ad.concat_channels(x, y), 1, 3)), [x, y]),
        ("conv2d", lambda: ad.mean(ad.conv2d(x, w_full, spec=ConvSpec(3, 3))),
         [x, w_full]),
        ("conv2d s2 d2 dw", lambda: ad.mean(
            ad.conv2d(x, w_dw, spec=ConvSpec(3, 3, stride=2, dilation=2, groups=2))),
         [x, w_dw]),
        ("batch_norm", lambda: ad.mean(ad.mul(ad.batch_norm(
            x, gamma, beta, rmean.copy(), rvar.copy(), training=True), x)),
         [x, gamma, beta]),
        ("bilinear_resize", lambda: ad.mean(ad.mul(
            ad.bilinear_resize(x, 16, 16), ad.Node(target_big))), [x]),
        ("softmax2", lambda: ad.mean(ad.mul(ad.softmax2(x), ad.Node(target))), [x]),
        ("sobel", lambda: ad.mean(ad.mul(ad.sobel_gradients(single),
                                         ad.Node(target))), [single]),
    ]

    # every loss term and the weighted combination
    pred = Parameter("pred", rng.uniform(0.1, 0.9, (1, 1, 8, 8)))
    gt = rng.uniform(0.0, 1.0, (1, 1, 8, 8))
    pred.value = np.where(np.abs(pred.value - gt) < 0.02, gt + 0.1, pred.value)
    image = rng.uniform(0.0, 1.0, (1, 3, 8, 8))
    logits = Parameter("logits", rng.standard_normal((1, 2, 8, 8)))
    gt_zero = np.zeros((1, 1, 8, 8))
    cases += [
        ("loss_alpha", lambda: loss_alpha(pred, gt), [pred]),
        ("loss_compositional", lambda: loss_compositional(pred, gt, image), [pred]),
        ("loss_kl", lambda: loss_kl(pred, gt), [pred]),
        ("loss_gradient", lambda: loss_gradient(pred, gt_zero), [pred]),
        ("loss_aux", lambda: loss_aux(logits, gt), [logits]),
        ("loss_combined", lambda: loss_combined(pred, logits, gt, image).total_node,
         [pred, logits]),
    ]

    failed_names = []
    for name, f, params in cases:
        rep = grad_check(f, params, tol=1e-3, max_coords=50)
        checked_total += rep.checked
        max_rel = max(max_rel, rep.max_rel_error)
        per_param_min = min(min(50, p.value.size) for p in params)
        if not rep.passed or rep.checked < per_param_min:
            all_ok = False
            failed_names.append(name)
    report(4, "analytic gradients match central differences within 1e-3", all_ok,
           f"{len(cases)} cases, {checked_total} coords, max rel err "
           f"{max_rel:.2e}" + (f"; failed: {failed_names}" if failed_names else ""))


def test_criterion_05_loss_identities():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (2, 1, 8, 8))
    checks = []
    checks.append(("L_alpha(a,a)=0", float(loss_alpha(a, a).value) == 0.0))
    black = np.zeros((2, 3, 8, 8))
    checks.append(("L_c=0 on black image",
                   float(loss_compositional(a, rng.uniform(0, 1, a.shape), black).value) == 0.0))
    half = np.full((1, 1, 8, 8), 0.5)
    kl_half = float(loss_kl(half, half).value)
    checks.append(("L_KL(0.5,0.5)=ln 2 +/- 1e-6",
                   abs(kl_half - math.log(2)) <= 1e-6))
    const_a = np.full((1, 1, 8, 8), 0.3)
    const_b = np.full((1, 1, 8, 8), 0.9)
    ga = ad.sobel_gradients(ad.Node(const_a)).value[:, :, 1:-1, 1:-1]
    gb = ad.sobel_gradients(ad.Node(const_b)).value[:, :, 1:-1, 1:-1]
    # summation-order rounding can leave ~1e-17 on the 0.9-valued matte
    checks.append(("L_grad=0 for constant pairs (interior)",
                   float(np.abs(ga - gb).mean()) <= 1e-12
                   and float(loss_gradient(const_a, const_a).value) == 0.0))
    ok = all(c for _, c in checks)
    failed = [n for n, c in checks if not c]
    report(5, "loss identities hold", ok,
           f"kl(0.5)={kl_half:.8f} vs ln2={math.log(2):.8f}"
           + (f"; failed: {failed}" if failed else ""))


def test_criterion_06_metric_oracle():
    # soft-edge fixture: sigmoid edge plus mild noise on the reference
    size = 32
    xs = np.arange(size, dtype=np.float64)
    edge = 1.0 / (1.0 + np.exp(-(xs - size / 2) / 1.5))
    pred = np.broadcast_to(edge, (size, size)).copy()[None, None]
    rng = np.random.default_rng(2)
    gt = np.clip(pred + rng.normal(0, 0.05, pred.shape), 0, 1)

    kx, ky = gaussian_derivative_kernels(1.4)
    k = kx.shape[0]
    w = np.stack([kx, ky])[:, None]
    gp = naive_conv2d(pred, w, spec=ConvSpec(k, k))
    gg = naive_conv2d(gt, w, spec=ConvSpec(k, k))
    dense_grad = float(np.sqrt((gp - gg)[:, 0] ** 2 + (gp - gg)[:, 1] ** 2).mean())
    got_grad = metric_gradient_error(pred, gt)

    from mmnet.ops import sobel_kernel_weights

    sw = sobel_kernel_weights(np.float64)
    dense_sobel = float(np.abs(
        naive_conv2d(pred, sw, spec=ConvSpec(3, 3))
        - naive_conv2d(gt, sw, spec=ConvSpec(3, 3))).mean())
    got_sobel = float(loss_gradient(pred, gt).value)

    zero_ok = metric_gradient_error(pred, pred) == 0.0 and metric_mad(pred, pred) == 0.0
    ok = (abs(got_grad - dense_grad) <= 1e-6
          and abs(got_sobel - dense_sobel) <= 1e-6 and zero_ok)
    report(6, "metrics match dense naive recomputation within 1e-6", ok,
           f"|d_grad|={abs(got_grad - dense_grad):.2e}, "
           f"|d_sobel|={abs(got_sobel - dense_sobel):.2e}")


@pytest.mark.slow
def test_criterion_07_overfit():
    cfg = MMNetConfig(width_multiplier=0.35, input_size=64)
    graph = build_mmnet(cfg)
    weights = init_weights(graph, seed=0)
    data = synth_fixtures(4, 64, seed=0)
    tc = TrainConfig(lr=1e-4, weight_decay=4e-7, batch_size=4, max_steps=2000, seed=0)
    params = make_parameters(weights)
    running = {k: v for k, v in weights.items() if k not in params}
    state = AdamState()
    images = np.stack([s.image for s in data]).astype(np.float32)
    alphas = np.stack([s.alpha for s in data]).astype(np.float32)

    start = time.monotonic()
    reached, last = None, float("inf")
    for step in range(2000):
        b = train_step(graph, params, running, images, alphas, state, tc)
        last = b.terms["alpha"]
        if last < 0.05:
            reached = step + 1
            break
    elapsed = time.monotonic() - start
    ok = reached is not None and elapsed <= 15 * 60
    report(7, "overfits 4 fixtures to L_alpha < 0.05 within 2000 steps", ok,
           f"reached {last:.4f} at step {reached or 2000}, {elapsed:.0f}s")


def test_criterion_08_quantization():
    # (a) exhaustive LUT agreement with direct quantized softmax
    lp = QuantParams.from_range(-7.5, 7.5)
    lut = build_softmax_lut(lp)
    q0, q1 = np.meshgrid(np.arange(256), np.arange(256), indexing="ij")
    logits = np.stack([(q0 - lp.zero_point) * lp.scale,
                       (q1 - lp.zero_point) * lp.scale])[None]
    direct = np.clip(np.round(softmax2(logits)[0, 1] / LUT_SCALE), 0, 255).astype(np.uint8)
    lut_ok = bool(np.array_equal(lut, direct))

    # (b) BN folding preserves the float forward within 1e-5
    cfg = MMNetConfig(width_multiplier=0.35, input_size=32)
    graph = build_mmnet(cfg)
    weights = init_weights(graph, seed=0)
    rng = np.random.default_rng(3)
    for k in weights:  # off-identity stats make folding non-trivial
        if k.endswith(".rmean"):
            weights[k] = rng.normal(0, 0.05, weights[k].shape).astype(np.float32)
        elif k.endswith(".rvar"):
            weights[k] = rng.uniform(0.5, 1.5, weights[k].shape).astype(np.float32)
    folded, fweights = fold_batch_norm(graph, weights)
    img = rng.random((1, 3, 32, 32)).astype(np.float32)
    fold_err = float(np.abs(forward(graph, weights, img)
                            - forward(folded, fweights, img)).max())

    # (c) quantized full model tracks the float model on fixtures
    fixtures = synth_fixtures(4, 32, seed=4)
    batches = [s.image[None] for s in fixtures]
    qm = quantize_model(graph, weights, batches)
    diffs = [
        float(np.abs(run_quantized(qm, b) - forward(graph, weights, b)).mean())
        for b in batches
    ]
    mean_diff = float(np.mean(diffs))
    ok = lut_ok and fold_err <= 1e-5 and mean_diff <= 0.05
    report(8, "LUT exact, BN fold 1e-5, int8 alpha within 0.05 of float", ok,
           f"lut_exact={lut_ok}, fold_err={fold_err:.2e}, "
           f"mean |dalpha|={mean_diff:.4f}")


def test_criterion_09_benchmark_protocol(tmp_path, capsys):
    cfg = MMNetConfig(width_multiplier=0.35, input_size=32)
    graph = build_mmnet(cfg)
    weights = init_weights(graph, seed=0)
    from mmnet.train import save_checkpoint

    path = tmp_path / "bench.mmnf"
    save_checkpoint(path, graph, weights, AdamState())
    rc = cli_main(["bench", str(path), "--runs", "100", "--warmup", "10"])
    out = capsys.readouterr().out
    protocol_ok = (rc == 0 and "runs=100 warmup=10 threads=1" in out
                   and "mean_ms=" in out and "std_ms=" in out)

    img = np.random.default_rng(5).random((1, 3, 32, 32)).astype(np.float32)
    a = forward(graph, weights, img)
    b = forward(graph, weights, img)
    det_ok = a.tobytes() == b.tobytes()
    ok = protocol_ok and det_ok
    report(9, "bench reports mean±std over 100 single-thread runs; "
              "inference is deterministic", ok,
           f"protocol={protocol_ok}, deterministic={det_ok}")


def test_criterion_10_augmentation_contract():
    size = 32
    alpha = synth_fixtures(1, size, seed=6)[0].alpha
    s = Sample(image=np.repeat(alpha, 3, axis=0), alpha=alpha)
    cfg = AugmentConfig(target_size=size)
    worst, in_range, ok_repro = 0.0, True, True
    for i in range(12):
        out = augment(s, cfg, sample_rng(7, i))
        again = augment(s, cfg, sample_rng(7, i))
        ok_repro = ok_repro and (out.image.tobytes() == again.image.tobytes()
                                 and out.alpha.tobytes() == again.alpha.tobytes())
        in_range = in_range and out.alpha.min() >= 0 and out.alpha.max() <= 1
        # registration, on pixels whose bilinear footprint stayed in frame
        ones = Sample(image=np.ones_like(s.image), alpha=np.ones_like(alpha))
        mask = augment(ones, cfg, sample_rng(7, i)).alpha >= 0.999
        diff = np.abs(out.image[0:1] - out.alpha)[mask]
        worst = max(worst, float(diff.max()))
    ok = worst <= 2 / 255 and in_range and ok_repro
    report(10, "augmentation keeps image/alpha registered within 2/255", ok,
           f"worst misregistration {worst:.5f} "
           f"(limit {2 / 255:.5f}), alpha in range={in_range}, "
           f"reproducible={ok_repro}")


def test_criterion_11_cmd_eval_end_to_end(tmp_path, capsys):
    """Full evaluation pipeline on a dataset in the documented layout at
    600x800, reporting in the x1e-3 / x1e-2 conventions."""
    fixtures = synth_fixtures(2, 64, seed=8)
    ds = tmp_path / "ds"
    for s in fixtures:
        big_img = bilinear_resize(s.image[None], 600, 800)[0]
        big_alpha = bilinear_resize(s.alpha[None], 600, 800)[0]
        save_sample(ds, Sample(image=big_img, alpha=big_alpha,
                               source_id=s.source_id))

    cfg = MMNetConfig(width_multiplier=0.35, input_size=32)
    graph = build_mmnet(cfg)
    weights = init_weights(graph, seed=0)
    from mmnet.train import save_checkpoint

    path = tmp_path / "eval.mmnf"
    save_checkpoint(path, graph, weights, AdamState())
    rc = cli_main(["eval", str(path), str(ds)])
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    ok = (rc == 0 and len(lines) == 3
          and all("gradient_error_x1e3=" in ln and "mad_x1e2=" in ln
                  for ln in lines)
          and lines[-1].startswith("mean:"))
    report(11, "cmd_eval runs end to end at 600x800 with scaled reporting", ok,
           lines[-1] if lines else "no output")
