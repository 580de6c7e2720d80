"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The lines are collected into an "acceptance criteria" section of the pytest
terminal summary. Criteria 9 to 11 share two full training runs (about eight
minutes each on one core) and are marked ``slow``.
"""
import math
import time

import numpy as np
import pytest

from dlaplan import cli
from dlaplan.adversarial import (AdvWeights, NoiseConfig, ResidualBlock, disc_loss_grad,
                                 loss_d1, loss_d2, loss_generator_total, loss_seg, patch_noise_forward)
from dlaplan.blocks import InceptionBlock, SegModel
from dlaplan.checkpoint import load_checkpoint, save_checkpoint
from dlaplan.data import Dataset, FloorPlanSpec, generate_samples
from dlaplan.dla import (OFF_PATTERN, DLAKernel, branch_additivity_fuse, dla_grad_mask, fold_batchnorm,
                         materialize, materialize_weights)
from dlaplan.metrics import HeadMetrics
from dlaplan.tensor import (ACTIVATIONS, BatchNormParams, ConvKernel, activation, activation_backward,
                            batchnorm, batchnorm_train, batchnorm_train_backward, conv2d, conv2d_backward,
                            softmax_channels)
from dlaplan.train import TrainConfig, adam_init, adam_step, build_networks, smoothed, train
from oracles import brute_force_metrics, numeric_grad, rel_error


def _random_bn(r, c):
    return BatchNormParams(r.normal(size=c), r.random(c) + 0.2, r.normal(size=c), r.normal(size=c))


def _randomize_block_bn(blk, r):
    blk.buffers["running_mean"][...] = r.normal(size=blk.cout)
    blk.buffers["running_std"][...] = r.random(blk.cout) + 0.2
    blk.params["gamma"][...] = r.normal(size=blk.cout)
    blk.params["beta"][...] = r.normal(size=blk.cout)


# -- 1. fusion soundness -------------------------------------------------------------

def test_criterion_01_fusion_soundness(record):
    r = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_kernel = worst_block = 0.0
    for _ in range(100):
        cin, cout, stride = int(r.integers(1, 6)), int(r.integers(1, 6)), int(r.integers(1, 3))
        blk = InceptionBlock(cin, cout, stride=stride, act=str(r.choice(["relu", "identity"])), rng=r)
        for name in ("b13", "b31", "b33", "bdla"):
            blk.params[name][...] = r.normal(size=cout)
        _randomize_block_bn(blk, r)
        x = r.normal(size=(2, cin) + tuple(int(v) for v in r.integers(3, 12, 2)))
        branch_sum = sum(conv2d(x, materialize(k) if isinstance(k, DLAKernel) else k)
                         for k in blk.branches())
        fused = conv2d(x, branch_additivity_fuse(blk.branches()))
        worst_kernel = max(worst_kernel, float(np.abs(fused - branch_sum).max()))
        reference = activation(batchnorm(branch_sum, blk.bn_params()), blk.act)
        worst_block = max(worst_block, float(np.abs(blk.fuse().forward(x) - reference).max()))
    dt = time.perf_counter() - t0
    ok = worst_kernel < 1e-10 and worst_block < 1e-10 and dt < 10
    record(1, ok, f"fused kernel vs branch sum max dev {worst_kernel:.2e}, fused block {worst_block:.2e} "
                  f"(< 1e-10), {dt:.2f}s (< 10s)")


# -- 2. batch-norm folding ------------------------------------------------------------

def test_criterion_02_bn_fold(record):
    r = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        cin, cout = int(r.integers(1, 6)), int(r.integers(1, 6))
        kh, kw = (int(v) for v in r.choice([1, 3], 2))
        k = ConvKernel(r.normal(size=(cout, cin, kh, kw)), r.normal(size=cout),
                       ((kh - 1) // 2, (kw - 1) // 2), int(r.integers(1, 3)))
        bn = _random_bn(r, cout)
        x = r.normal(size=(2, cin, 7, 9))
        worst = max(worst, float(np.abs(conv2d(x, fold_batchnorm(k, bn)) - batchnorm(conv2d(x, k), bn)).max()))
    dt = time.perf_counter() - t0
    record(2, worst < 1e-10 and dt < 10, f"folded vs unfolded max dev {worst:.2e} (< 1e-10), {dt:.2f}s (< 10s)")


# -- 3. network-scope fused equivalence -----------------------------------------------

def test_criterion_03_fused_checkpoint(record, tmp_path):
    r = np.random.default_rng(303)
    t0 = time.perf_counter()
    model = SegModel(seed=3)
    for blk in model.enc + model.dec_b + model.dec_r:
        _randomize_block_bn(blk, r)
    src, fused = tmp_path / "model.ckpt", tmp_path / "fused.ckpt"
    save_checkpoint(src, model)
    data = tmp_path / "data"
    assert cli.main(["generate", "--count", "6", "--seed", "3", "--out", str(data)]) == 0
    assert cli.main(["fuse", "--checkpoint", str(src), "--out", str(fused)]) == 0

    a, b = load_checkpoint(src).model, load_checkpoint(fused).model
    assert b.fused and not a.fused
    x = r.random((10, 3, 64, 64))
    dev = max(float(np.abs(p - q).max()) for p, q in zip(a.forward(x), b.forward(x)))
    for ck, name in ((src, "a.json"), (fused, "b.json")):
        assert cli.main(["eval", "--checkpoint", str(ck), "--dataset", str(data),
                         "--out", str(tmp_path / name)]) == 0
    same = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    dt = time.perf_counter() - t0
    record(3, dev < 1e-8 and same and dt < 60,
           f"fused vs unfused checkpoint max dev {dev:.2e} on 10 inputs of 64x64 (< 1e-8), "
           f"metric JSON identical={same}, {dt:.1f}s (< 60s)")


# -- 4. gradient correctness ------------------------------------------------------------

def _grad_errors(r):
    errs = {}

    for kh, kw in ((1, 3), (3, 1), (3, 3)):
        k = ConvKernel(r.normal(size=(3, 2, kh, kw)), r.normal(size=3), ((kh - 1) // 2, (kw - 1) // 2), 2)
        x = r.normal(size=(2, 2, 6, 7))
        g = r.normal(size=conv2d(x, k).shape)

        def loss():
            return float((conv2d(x, k) * g).sum())

        gx, gw, gb = conv2d_backward(x, k, g)
        errs[f"conv {kh}x{kw}"] = max(rel_error(gx, numeric_grad(loss, x)),
                                      rel_error(gw, numeric_grad(loss, k.weights)),
                                      rel_error(gb, numeric_grad(loss, k.bias)))

    params, bias = r.normal(size=(3, 2, 6)), r.normal(size=3)
    x = r.normal(size=(2, 2, 5, 5))
    g = r.normal(size=(2, 3, 5, 5))

    def dla_loss():
        return float((conv2d(x, materialize(DLAKernel(params, bias))) * g).sum())

    gx, gw, _ = conv2d_backward(x, materialize(DLAKernel(params, bias)), g)
    errs["dla kernel"] = max(rel_error(dla_grad_mask(gw), numeric_grad(dla_loss, params)),
                             rel_error(gx, numeric_grad(dla_loss, x)))

    x = r.normal(size=(3, 2, 3, 4))
    scale, shift = r.normal(size=2), r.normal(size=2)
    g = r.normal(size=x.shape)

    def bn_run():
        return batchnorm_train(x, BatchNormParams(np.zeros(2), np.ones(2), scale, shift))

    def bn_loss():
        return float((bn_run()[0] * g).sum())

    gx, gs, gsh = batchnorm_train_backward(g, bn_run()[1])
    errs["batch norm"] = max(rel_error(gx, numeric_grad(bn_loss, x)),
                             rel_error(gs, numeric_grad(bn_loss, scale)),
                             rel_error(gsh, numeric_grad(bn_loss, shift)))

    for kind in ACTIVATIONS:
        x = r.normal(size=(2, 3, 3, 3))
        x[np.abs(x) < 1e-3] = 0.5

        def act_loss():
            return float((activation(x, kind) * g3).sum())

        g3 = r.normal(size=x.shape)
        errs[f"activation {kind}"] = rel_error(activation_backward(g3, x, activation(x, kind), kind),
                                               numeric_grad(act_loss, x))

    blk = ResidualBlock(3, 5, 2, r)
    x = r.normal(size=(2, 3, 4, 4))
    g = r.normal(size=(2, 5, 4, 4))

    def res_loss():
        return float((blk.forward(x, train=True) * g).sum())

    res_loss()
    gx = blk.backward(g)
    grads = dict(blk.named_grads())
    errs["residual block"] = max([rel_error(gx, numeric_grad(res_loss, x))]
                                 + [rel_error(grads[n], numeric_grad(res_loss, a)) for n, a in blk.named_params()])

    # both decoders at width 2: every decoder/context parameter, sampled entries
    m = SegModel((2, 2, 2, 2), seed=4)
    x = r.random((2, 3, 16, 16))
    gb, gr = r.normal(size=(2, 3, 16, 16)), r.normal(size=(2, 7, 16, 16))

    def seg_loss():
        pb, pr = m.forward(x, train=True)
        return float((pb * gb).sum() + (pr * gr).sum())

    seg_loss()
    m.backward(gb, gr)
    grads = dict(m.named_grads())
    for head in ("dec_b", "dec_r"):
        worst = 0.0
        for name, arr in m.named_params():
            if name.startswith(head) or (head == "dec_r" and name.startswith(("ctx", "head_r"))) \
                    or (head == "dec_b" and name.startswith("head_b")):
                k = r.choice(arr.size, size=min(arr.size, 4), replace=False)
                worst = max(worst, rel_error(grads[name].reshape(-1)[k], numeric_grad(seg_loss, arr, index=k)))
        errs[f"decoder {head}"] = worst
    return errs


def test_criterion_04_gradients(record):
    t0 = time.perf_counter()
    errs = _grad_errors(np.random.default_rng(404))
    dt = time.perf_counter() - t0
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    record(4, worst < 1e-5 and dt < 120,
           f"{len(errs)} layer checks, worst relative error {worst:.2e} ({name}) (< 1e-5), {dt:.1f}s (< 120s)")


# -- 5. DLA pattern under Adam --------------------------------------------------------

def test_criterion_05_dla_pattern(record):
    r = np.random.default_rng(505)
    t0 = time.perf_counter()
    m = SegModel((4, 4, 8, 8), seed=5)
    params = dict(m.named_params())
    state = adam_init(params)
    for _ in range(200):
        x = r.random((2, 3, 16, 16))
        pb, pr = m.forward(x, train=True)
        m.backward(r.normal(size=pb.shape), r.normal(size=pr.shape))
        adam_step(params, dict(m.named_grads()), state, lr=1e-2)
    dla = {n: a for n, a in params.items() if n.endswith(".dla")}
    off = sum(int(np.count_nonzero(materialize_weights(a)[:, :, rr, cc])) for a in dla.values()
              for rr, cc in OFF_PATTERN)
    moved = all(np.abs(a).max() > 0 for a in dla.values())
    dt = time.perf_counter() - t0
    record(5, off == 0 and moved and dt < 30,
           f"{len(dla)} DLA kernels after 200 Adam steps, {off} nonzero off-pattern entries (== 0), {dt:.1f}s (< 30s)")


# -- 6. loss analytics ------------------------------------------------------------------

def test_criterion_06_loss_values(record):
    half = np.full(4, 0.5)
    e1 = abs(loss_d1(half, half) - 2 * math.log(2))
    e2 = abs(loss_d2(half, half) - 2 * math.log(2))
    r = np.random.default_rng(606)
    labels = np.eye(4)[r.integers(0, 4, (3, 5, 5))].transpose(0, 3, 1, 2)
    e_seg = abs(loss_seg(np.full((3, 4, 5, 5), 0.25), labels) - math.log(4))
    l_seg = 0.8123456789
    exact = (loss_generator_total(l_seg, None, None, AdvWeights(0.0, 0.0)) == l_seg
             and loss_generator_total(l_seg, r.random(3), r.random(3), AdvWeights(0.0, 0.0)) == l_seg)
    ok = e1 <= 1e-12 and e2 <= 1e-12 and e_seg <= 1e-10 and exact
    record(6, ok, f"|L_D1 - 2ln2| {e1:.1e}, |L_D2 - 2ln2| {e2:.1e} (<= 1e-12), "
                  f"|L_seg - ln4| {e_seg:.1e} (<= 1e-10), lambda=0 total exact={exact}")


# -- 7. metric oracle -------------------------------------------------------------------

def test_criterion_07_metric_oracle(record):
    r = np.random.default_rng(707)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        c = int(r.integers(2, 8))
        gt, pred = r.integers(0, c, (16, 16)), r.integers(0, c, (16, 16))
        acc, overall, miou = brute_force_metrics(pred, gt, c)
        hm = HeadMetrics(tuple(str(i) for i in range(c))).add(pred, gt)
        if [hm.class_accuracy(i) for i in range(c)] != acc or hm.overall_accuracy != overall \
                or hm.mean_iou != miou:
            mismatches += 1
    dt = time.perf_counter() - t0
    record(7, mismatches == 0 and dt < 10, f"1000 random 16x16 pairs, {mismatches} mismatches with the "
                                           f"brute-force counter (== 0), {dt:.2f}s (< 10s)")


# -- 8. noise module contract -----------------------------------------------------------

def test_criterion_08_noise_simplex(record):
    r = np.random.default_rng(808)
    worst_sum = 0.0
    in_range = True
    for _ in range(100):
        c = int(r.integers(2, 9))
        p = softmax_channels(r.normal(size=(int(r.integers(1, 4)), c) + tuple(int(v) for v in r.integers(3, 20, 2)))
                             * r.choice([0.1, 1.0, 10.0, 100.0]))
        cfg = NoiseConfig(patch_size=int(r.integers(1, 10)), gaussian_std=float(r.choice([0.0, 0.05, 1.0, 5.0])),
                          uniform_halfwidth=float(r.choice([0.0, 0.1, 2.0])), gaussian_prob=float(r.random()))
        q, _ = patch_noise_forward(p, cfg, np.random.default_rng(int(r.integers(2**32))))
        worst_sum = max(worst_sum, float(np.abs(q.sum(axis=1) - 1.0).max()))
        in_range &= bool(((q >= 0) & (q <= 1)).all())
    zero = NoiseConfig(gaussian_std=0.0, uniform_halfwidth=0.0)
    maps = [softmax_channels(r.normal(size=(2, 4, 8, 8))) for _ in range(10)]
    identity = all(np.array_equal(patch_noise_forward(p, zero, np.random.default_rng(i))[0], p)
                   for i, p in enumerate(maps))
    ok = worst_sum <= 1e-12 and in_range and identity
    record(8, ok, f"100 noisy maps: max |sum - 1| {worst_sum:.1e} (<= 1e-12), entries in [0,1]={in_range}, "
                  f"zero config identity={identity}")


# -- 9 to 11. desk-scale training -------------------------------------------------------

TRAIN_SEED = 42
SNAPSHOT_AT = 250


@pytest.fixture(scope="module")
def desk_data():
    samples = generate_samples(FloorPlanSpec(), 250, TRAIN_SEED)
    return Dataset.from_samples(samples[:200]), Dataset.from_samples(samples[200:])


def _run(data, keep_snapshot):
    train_set, held = data
    snap = {}

    def cb(it, res):
        if keep_snapshot and it == SNAPSHOT_AT:
            snap["state"] = {k: v.copy() for k, v in res.model.state_dict().items()}

    t0 = time.perf_counter()
    res = train(TrainConfig(), train_set, eval_dataset=held, callback=cb)
    return res, time.perf_counter() - t0, snap.get("state")


@pytest.fixture(scope="module")
def desk_run(desk_data):
    return _run(desk_data, keep_snapshot=True)


@pytest.mark.slow
def test_criterion_09_desk_training(record, desk_run):
    res, dt, _ = desk_run
    s = smoothed(res.column("l_seg"))
    ratio = s[-1] / s[0]
    final = res.evals[-1][1]
    b_acc, r_acc = final.boundary.overall_accuracy, final.room.overall_accuracy
    ok = ratio <= 0.5 and b_acc >= 0.85 and r_acc >= 0.70 and dt <= 15 * 60
    record(9, ok, f"smoothed L_seg {s[0]:.3f} -> {s[-1]:.3f} (ratio {ratio:.3f} <= 0.5), held-out overall "
                  f"accuracy boundary {b_acc:.3f} (>= 0.85) room {r_acc:.3f} (>= 0.70), {dt:.0f}s (<= 900s)")


@pytest.mark.slow
def test_criterion_10_noise_discriminator_separates(record, desk_data, desk_run):
    train_set, held = desk_data
    cfg = TrainConfig()
    model = SegModel(cfg.model.channels, 3, train_set.n_boundary, train_set.n_room)
    model.load_state_dict(desk_run[2])
    _, _, d2 = build_networks(cfg, train_set.n_boundary, train_set.n_room)
    params = dict(d2.named_params())
    state = adam_init(params)
    r = np.random.default_rng(1010)
    noise_rng = np.random.default_rng(1011)

    def noisy_and_real(ds, idx):
        x, yb, yr = ds.batch(idx)
        pb, pr = model.forward(x)  # frozen: inference mode, no parameter updates
        noisy = np.concatenate([patch_noise_forward(pb, cfg.noise, noise_rng)[0],
                                patch_noise_forward(pr, cfg.noise, noise_rng)[0]], axis=1)
        return noisy, np.concatenate([yb, yr], axis=1)

    t0 = time.perf_counter()
    for _ in range(200):
        noisy, real = noisy_and_real(train_set, np.sort(r.choice(len(train_set), cfg.batch_size, replace=False)))
        d = d2.forward(np.concatenate([noisy, real]), train=True)
        gf, gr = disc_loss_grad(d[:len(noisy)], d[len(noisy):])
        d2.backward(np.concatenate([gf, gr]))
        adam_step(params, dict(d2.named_grads()), state, lr=cfg.learning_rate)
    noisy, real = noisy_and_real(held, np.arange(len(held)))
    correct = int((d2.forward(noisy) < 0.5).sum() + (d2.forward(real) >= 0.5).sum())
    acc = correct / (2 * len(held))
    dt = time.perf_counter() - t0
    record(10, acc >= 0.9 and dt < 300,
           f"generator frozen at iteration {SNAPSHOT_AT}, 200 D2 steps, held-out real-vs-noisy accuracy "
           f"{acc:.3f} (>= 0.9), {dt:.0f}s (< 300s)")


@pytest.mark.slow
def test_criterion_11_determinism(record, desk_data, desk_run):
    first = desk_run[0].history
    second = _run(desk_data, keep_snapshot=False)[0].history
    same = np.asarray(first).tobytes() == np.asarray(second).tobytes()
    record(11, same, f"two seeded runs of criterion 9: {len(first)} history rows bit-identical={same}")
