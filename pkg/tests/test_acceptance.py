"""Acceptance criteria 1-9.  Each test records a PASS/FAIL line that is
printed in the terminal summary; the assertion then gates the test."""
import math
import time

import numpy as np
import pytest

from ltcfnet import ModelConfig, build, colorspace as cs, core, count_params, estimate_flops
from ltcfnet import losses as L
from ltcfnet.blocks import CdBlock, FbpBlock, MhsaBlock, MsefBlock
from ltcfnet.checkpoint import load_checkpoint, save_checkpoint
from ltcfnet.cli import main as cli_main
from ltcfnet.colorspace import ImagePlanes, Space
from ltcfnet.core import ComplexTensor, Tensor
from ltcfnet.data import DegradationConfig, synthetic_dataset, write_image
from ltcfnet.gradcheck import gradcheck, leaf
from ltcfnet.metrics import psnr, ssim
from ltcfnet.model import cast
from ltcfnet.optim import ScheduleConfig
from ltcfnet.training import train

from oracles import direct_dft, naive_attention


def test_criterion_1_color_roundtrips(report_criterion):
    rng = np.random.default_rng(1)
    x = rng.random((1000, 1, 3))
    start = time.perf_counter()
    rgb = ImagePlanes(Space.RGB, Tensor(x, dtype=np.float64))
    lab_err = np.abs(cs.lab_to_rgb(cs.rgb_to_lab(rgb)).numpy() - x).max()
    yuv_err = np.abs(cs.yuv_to_rgb(cs.rgb_to_yuv(rgb)).numpy() - x).max()
    elapsed = time.perf_counter() - start

    def conv(rgb_triple, fn):
        return fn(ImagePlanes(Space.RGB, Tensor(np.array([[rgb_triple]], float), dtype=np.float64))).numpy().ravel()

    white, black = conv([1, 1, 1], cs.rgb_to_lab), conv([0, 0, 0], cs.rgb_to_lab)
    gray = conv([0.5, 0.5, 0.5], cs.rgb_to_lab)
    ywhite, yblack = conv([1, 1, 1], cs.rgb_to_yuv), conv([0, 0, 0], cs.rgb_to_yuv)
    anchors = (abs(white[0] - 100) < 1e-2 and np.abs(white[1:]).max() < 1e-2 and np.all(black == 0)
               and np.abs(gray[1:]).max() < 1e-3 and abs(ywhite[0] - 1) < 1e-12
               and np.abs(ywhite[1:]).max() < 1e-4 and np.all(yblack == 0))
    ok = lab_err <= 1e-4 and yuv_err <= 1e-5 and anchors and elapsed < 1.0
    report_criterion(1, ok, f"lab max err {lab_err:.2e}, yuv max err {yuv_err:.2e}, anchors {anchors}, "
                            f"{elapsed * 1e3:.1f} ms")
    assert ok


def _gradient_cases(rng):
    """(name, fn, arrays, skip[, params]) for every op, block and loss on 4x4-8x8 instances."""
    n = rng.standard_normal
    cases = []

    def add(name, fn, *arrays, skip=None):
        cases.append((name, fn, arrays, skip))

    def weighted(shape):
        t = Tensor(n(shape), dtype=np.float64)
        return lambda y: (y * t).sum()

    a = n((4, 4))
    add("add/sub/mul/div", lambda x, y: ((x + y) * (x - y) / y).sum(), a, rng.uniform(0.5, 2, (4,)))
    add("exp/log/sqrt/pow", lambda x: (core.exp(x * 0.5) + core.log(x) + core.sqrt(x) + x ** 3.0).sum(),
        rng.uniform(0.5, 2, (4, 4)))
    k = n((6, 6))
    add("abs/relu/leaky_relu",
        lambda x: (core.tabs(x) + core.relu(x) + core.leaky_relu(x)).sum(), k,
        skip=lambda _, i: abs(k.reshape(-1)[i]) < 1e-3)
    add("tanh", lambda x: core.tanh(x).sum(), n((4, 4)))
    add("clamp", lambda x: (core.clamp(x, 0.0, 1.0) ** 2.0).sum(), rng.uniform(0.1, 0.9, (4, 4)))
    add("sum/mean/reshape/transpose/index",
        lambda x: (core.reshape(core.transpose(x, (1, 0, 2)), (16, 2)).mean(axis=0) ** 2.0).sum()
        + x[1, :, 0].sum(), n((4, 4, 2)))
    add("concat", lambda x, y: (core.concat([x, y], axis=-1) ** 2.0).sum(), n((4, 2)), n((4, 3)))
    add("matmul", lambda x, y: (core.matmul(x, y) ** 2.0).sum(), n((4, 5)), n((5, 4)))
    add("linear", lambda x, w: core.tanh(core.linear(x, w)).sum(), n((4, 4, 3)), n((3, 5)))
    sm = weighted((4, 6))
    add("softmax_rows", lambda x: sm(core.softmax_rows(x)), n((4, 6)))
    ln = weighted((4, 4, 4))
    add("layer_norm", lambda x, g, b: ln(core.layer_norm(x, g, b)), n((4, 4, 4)), n(4), n(4))
    add("global_avg_pool", lambda x: (core.global_avg_pool(x) ** 2.0).sum(), n((1, 6, 6, 3)))
    cv = weighted((1, 4, 4, 3))
    add("conv2d", lambda x, w, b: cv(core.conv2d(x, w, b, stride=2)), n((1, 8, 8, 2)), n((3, 3, 2, 3)), n(3))
    dc = weighted((1, 8, 8, 2))
    add("deconv2d", lambda x, w, b: dc(core.deconv2d(x, w, b)), n((1, 4, 4, 3)), n((3, 3, 3, 2)), n(2))
    dw = weighted((1, 6, 6, 3))
    add("depthwise_conv2d", lambda x, w: dw(core.depthwise_conv2d(x, w)), n((1, 6, 6, 3)), n((3, 3, 3)))
    mh, mw = n((3, 6)), n((5, 6))
    sl = weighted((1, 3, 5, 2))
    add("spatial_linear", lambda x: sl(core.spatial_linear(x, mh, mw)), n((1, 6, 6, 2)))
    tr, ti = n((1, 6, 5, 1)), n((1, 6, 5, 1))

    def fft_fn(x):
        spec = core.fft2(x, axes=(-3, -2))
        z = ComplexTensor(spec.real * Tensor(tr), spec.imag * Tensor(ti) + spec.real * 0.5)
        return (core.ifft2(z, axes=(-3, -2)) ** 2.0).sum() + (spec.real * spec.imag).sum()
    add("fft2/ifft2", fft_fn, n((1, 6, 5, 1)))
    cl = weighted((4, 4, 3))
    add("rgb2lab", lambda x: cl(cs.rgb2lab(x)), rng.uniform(0.05, 0.95, (4, 4, 3)))
    add("lab2rgb", lambda x: cl(cs.lab2rgb(x)),
        cs.rgb2lab(Tensor(rng.uniform(0.05, 0.95, (4, 4, 3)), dtype=np.float64)).data)
    add("rgb2yuv/yuv2rgb", lambda x: cl(cs.yuv2rgb(cs.rgb2yuv(x) ** 2.0)), rng.random((4, 4, 3)))

    def block(name, module, shape):
        # module cases also probe every live parameter
        cast(module, np.float64)
        w = weighted(shape)
        cases.append((name, lambda x, *_: w(module(x)), (n(shape),), None, module.parameters()))

    block("MhsaBlock", MhsaBlock(8, heads=2, rng=rng), (1, 4, 4, 8))
    block("CdBlock", CdBlock(widths=(2, 4, 4, 4), heads=2, rng=rng), (1, 8, 8, 1))
    block("MsefBlock", MsefBlock(8, reduction=2, rng=rng), (1, 4, 4, 8))
    block("FbpBlock", FbpBlock(width=4, rng=rng), (1, 8, 8, 1))

    t = rng.uniform(0.1, 0.9, (1, 8, 8, 3))
    p = np.clip(t + rng.normal(0, 0.15, t.shape), 0.02, 0.98)
    d = (t - p).reshape(-1)
    add("smooth_l1", lambda y: L.smooth_l1(Tensor(t), y), p, skip=lambda _, i: abs(abs(d[i]) - 1) < 1e-3)
    add("psnr_loss", lambda y: L.psnr_loss(Tensor(t), y), p)
    add("color_loss", lambda y: L.color_loss(Tensor(t), y), p)
    add("hist_loss", lambda y: L.hist_loss(Tensor(t), y, bins=32), p)
    ext = cast(L.FeatureExtractor(widths=(4, 4), seed=2), np.float64)
    add("perceptual_loss", lambda y: L.perceptual_loss(ext, Tensor(t), y), p)
    t12 = rng.random((1, 12, 12, 3))
    add("ssim_loss", lambda y: L.ssim_loss(Tensor(t12), y), rng.random((1, 12, 12, 3)))
    return cases


def test_criterion_2_gradient_suite(report_criterion):
    start = time.perf_counter()
    failed, rates = [], []
    with core.check_mode():
        for case in _gradient_cases(np.random.default_rng(2)):
            name, fn, arrays, skip = case[:4]
            inputs = [leaf(a) for a in arrays] + (case[4] if len(case) == 5 else [])
            rep = gradcheck(fn, inputs, n_samples=16, rng=np.random.default_rng(0), skip=skip)
            rates.append(rep.pass_rate)
            if not rep.ok(0.95):
                failed.append(f"{name} ({rep.pass_rate:.2f})")
    elapsed = time.perf_counter() - start
    ok = not failed and elapsed < 120
    report_criterion(2, ok, f"{len(rates)} ops/blocks/losses, min pass rate {min(rates):.3f}, "
                            f"failed {failed or 'none'}, {elapsed:.1f} s")
    assert ok


def test_criterion_3_fft(report_criterion):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_rt = worst_pv = worst_dft = 0.0
    sizes = [(4, 4), (5, 7), (8, 8), (9, 6), (12, 10), (16, 16), (17, 13), (24, 31), (32, 32), (31, 32)]
    for h, w in sizes:
        x = rng.standard_normal((h, w)).astype(np.float32)
        spec = core.fft2(Tensor(x))
        worst_rt = max(worst_rt, float(np.abs(core.ifft2(spec).data - x).max()))
        x64 = x.astype(np.float64)
        energy = float((spec.real.data.astype(np.float64) ** 2 + spec.imag.data.astype(np.float64) ** 2).sum())
        worst_pv = max(worst_pv, abs(energy / (h * w) - (x64 ** 2).sum()) / (x64 ** 2).sum())
        ref = direct_dft(x64)
        scale = max(1.0, np.abs(ref).max())
        worst_dft = max(worst_dft, float(np.abs(spec.real.data - ref.real).max() / scale),
                        float(np.abs(spec.imag.data - ref.imag).max() / scale))
    elapsed = time.perf_counter() - start
    ok = worst_rt <= 1e-4 and worst_pv <= 1e-3 and worst_dft <= 1e-4 and elapsed < 30
    report_criterion(3, ok, f"{len(sizes)} sizes 4x4..32x32, roundtrip {worst_rt:.2e}, parseval {worst_pv:.2e}, "
                            f"direct DFT rel {worst_dft:.2e}, {elapsed:.2f} s")
    assert ok


def test_criterion_4_attention(report_criterion):
    rng = np.random.default_rng(4)
    blk = MhsaBlock(8, heads=4, rng=rng)
    attn, _ = blk.attention(Tensor(rng.standard_normal((2, 5, 6, 8)) * 4))
    row_err = float(np.abs(attn.data.sum(axis=-1) - 1).max())

    zero = MhsaBlock(8, heads=2, rng=rng)
    zero.wq.data[:] = 0
    zero.wk.data[:] = 0
    za, _ = zero.attention(Tensor(rng.standard_normal((1, 3, 4, 8))))
    uniform_err = float(np.abs(za.data - 1 / 12).max())

    oracle_err = 0.0
    for _ in range(5):
        small = MhsaBlock(4, heads=2, rng=rng)
        x = rng.standard_normal((2, 2, 4)).astype(np.float32)
        ref, _ = naive_attention(x.astype(np.float64), small.wq.data, small.wk.data, small.wv.data,
                                 small.proj.data, small.pos.weight.data)
        oracle_err = max(oracle_err, float(np.abs(small(Tensor(x)).data - ref).max()))
    ok = row_err <= 1e-5 and uniform_err <= 1e-6 and oracle_err <= 1e-5
    report_criterion(4, ok, f"row sum err {row_err:.1e}, uniform err {uniform_err:.1e}, "
                            f"naive oracle err {oracle_err:.1e}")
    assert ok


def test_criterion_5_identity_collapses(report_criterion):
    rng = np.random.default_rng(5)
    msef = MsefBlock(16, rng=rng)
    msef.w2.weight.data[:] = 0
    x = rng.standard_normal((2, 8, 8, 16)).astype(np.float32)
    msef_ok = msef(Tensor(x)).data.tobytes() == x.tobytes()

    fbp = FbpBlock(rng=rng)
    for conv in fbp.real + fbp.imag:
        conv.weight.data[:] = 0
    lum = rng.random((1, 8, 8, 1)).astype(np.float32)
    fbp_ok = fbp(Tensor(lum)).data.tobytes() == lum.tobytes()

    img = rng.random((16, 16, 3)).astype(np.float32)
    flags_ok = True
    for flag in ("use_msef", "use_fbp"):
        full = build(ModelConfig(seed=6))
        for b in full.branches():
            if flag == "use_msef":
                b.msef.w2.weight.data[:] = 0
            else:
                for conv in b.fbp.real + b.fbp.imag:
                    conv.weight.data[:] = 0
        bare = build(ModelConfig(seed=6, **{flag: False}))
        src = dict(full.named_parameters())
        for name, p in bare.named_parameters():
            p.data = src[name].data.copy()
        flags_ok &= full.enhance(img).tobytes() == bare.enhance(img).tobytes()
    ok = msef_ok and fbp_ok and flags_ok
    report_criterion(5, ok, f"MSEF W2=0 exact {msef_ok}, FBP zero stacks exact {fbp_ok}, "
                            f"disabled flags bit-exact {flags_ok}")
    assert ok


def _window_means(steps, window=50):
    return [float(np.mean(steps[i:i + window])) for i in range(0, len(steps) - window + 1, window)]


def _train_psnr(net, dataset):
    return float(np.mean([psnr(net.enhance(lo), hi) for lo, hi in zip(dataset.low, dataset.normal)]))


@pytest.mark.slow
def test_criterion_6_overfit(report_criterion):
    ds = synthetic_dataset(4, 64, DegradationConfig((2.0, 4.0), (0.01, 0.01), seed=0))
    raw = float(np.mean([psnr(lo, hi) for lo, hi in zip(ds.low, ds.normal)]))
    start = time.perf_counter()
    net, hist = train(build(ModelConfig(seed=0)), ds, L.LossWeights(), ScheduleConfig(total_epochs=500),
                      batch_size=4, patch=64, seed=0)
    elapsed = time.perf_counter() - start
    final = _train_psnr(net, ds)
    windows = _window_means(hist.steps)
    monotone = all(b <= a for a, b in zip(windows, windows[1:]))
    ok = len(hist.steps) == 500 and final >= 30.0 and final > raw and monotone and elapsed <= 600
    report_criterion(6, ok, f"train PSNR {final:.2f} dB (raw input {raw:.2f} dB), 50-step window means "
                            f"monotone {monotone}, {len(hist.steps)} steps in {elapsed:.0f} s")
    assert ok


def test_criterion_7_complexity(report_criterion):
    full, star = build(), build(ModelConfig(use_fbp=False))
    p, f = count_params(full), estimate_flops(full, 256, 256)
    ps, fs = count_params(star), estimate_flops(star, 256, 256)
    ok = 0.10e6 <= p <= 0.25e6 and 5e9 <= f <= 20e9 and ps < p and fs < f
    report_criterion(7, ok, f"full {p / 1e6:.4f} M / {f / 1e9:.3f} G, no-FBP {ps / 1e6:.4f} M / {fs / 1e9:.3f} G "
                            f"at 256x256")
    assert ok


LATTICE = {
    "lab": dict(branches="lab", use_msef=False, use_fbp=False),
    "yuv": dict(branches="yuv", use_msef=False, use_fbp=False),
    "lab+msef": dict(branches="lab", use_msef=True, use_fbp=False),
    "yuv+msef": dict(branches="yuv", use_msef=True, use_fbp=False),
    "lab+yuv": dict(branches="both", use_msef=False, use_fbp=False),
    "lab+yuv+msef": dict(branches="both", use_msef=True, use_fbp=False),
    "full": dict(branches="both", use_msef=True, use_fbp=True),
}


@pytest.mark.slow
def test_criterion_8_ablation_lattice(report_criterion, tmp_path):
    ds = synthetic_dataset(2, 16, DegradationConfig(seed=8))
    ext = L.FeatureExtractor()
    probe = ds.low[0]
    problems = []
    for name, flags in LATTICE.items():
        net, hist = train(build(ModelConfig(seed=1, **flags)), ds, schedule=ScheduleConfig(total_epochs=50),
                          batch_size=2, patch=16, extractor=ext)
        if len(hist.steps) != 50 or not all(math.isfinite(s) for s in hist.steps):
            problems.append(f"{name}: non-finite or short run")
        path = save_checkpoint(net, tmp_path / f"{name}.ckpt")
        back = load_checkpoint(path)
        same = all(a.data.tobytes() == b.data.tobytes() for a, b in zip(net.parameters(), back.parameters()))
        if not same or back.enhance(probe).tobytes() != net.enhance(probe).tobytes():
            problems.append(f"{name}: checkpoint roundtrip not bit-exact")

    # directional, reported only: full vs no-MSEF, scaled-down overfit task, 3 seeds
    scores = {"full": [], "no-MSEF": []}
    for seed in range(3):
        small = synthetic_dataset(4, 32, DegradationConfig((2.0, 4.0), (0.01, 0.01), seed=seed))
        for label, flags in (("full", {}), ("no-MSEF", {"use_msef": False})):
            net, _ = train(build(ModelConfig(seed=seed, **flags)), small, schedule=ScheduleConfig(total_epochs=100),
                           batch_size=4, patch=32, seed=seed, extractor=ext)
            scores[label].append(_train_psnr(net, small))
    full, bare = np.mean(scores["full"]), np.mean(scores["no-MSEF"])
    direction = "holds" if full >= bare else "does not hold"
    ok = not problems
    report_criterion(8, ok, f"{len(LATTICE)} configs x 50 steps, finite and bit-exact roundtrip: "
                            f"{problems or 'all'}; directional (reported only, 3 seeds, 32x32, 100 steps): "
                            f"full {full:.2f} dB vs no-MSEF {bare:.2f} dB, {direction}")
    assert ok


def test_criterion_9_metrics(report_criterion, tmp_path):
    worst = 0.0
    for d in (0.5, 0.2, 0.05, 0.01, 0.004):
        t = np.full((16, 16, 3), 0.3)
        worst = max(worst, abs(psnr(t + d, t) - 20 * math.log10(1 / d)))

    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    write_image(gt / "x.png", np.full((16, 16, 3), 60 / 255))
    write_image(pred / "x.png", np.full((16, 16, 3), 72 / 255))
    code = cli_main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "out")])
    row = (tmp_path / "out" / "eval.csv").read_text().splitlines()[1].split(",")
    d = 12 / 255
    cli_err = abs(float(row[1]) - 20 * math.log10(1 / d))

    img = np.random.default_rng(9).random((16, 16, 3)).astype(np.float32)
    ssim_err = abs(ssim(img, img) - 1.0)
    ok = code == 0 and worst <= 0.01 and cli_err <= 0.01 and ssim_err <= 1e-6
    report_criterion(9, ok, f"PSNR err {worst:.1e} dB (direct), {cli_err:.1e} dB (eval command), "
                            f"SSIM(x, x) err {ssim_err:.1e}")
    assert ok
