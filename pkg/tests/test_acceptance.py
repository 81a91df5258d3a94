"""Acceptance suite: one PASS/FAIL line per criterion, printed straight to the terminal.

Run alone with ``pytest tests/test_acceptance.py -v``.  The two training
criteria train three desk-scale networks for 2000 iterations each, which
takes roughly half an hour on one CPU core.
"""

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

import oracles
from hierseg import autodiff as ad
from hierseg.architectures import NetConfig, build_network
from hierseg.autodiff import Tensor, finite_diff_check
from hierseg.classifier import decision_masks, hierarchical_decide, hierarchical_decide_array
from hierseg.data import (
    PhantomConfig,
    background_tumor_ratio,
    generate_phantom,
    generate_set,
    read_bvol,
    slice_and_filter,
    slice_pool,
    write_bvol,
)
from hierseg.losses import (
    LossParams,
    aggregate_hierarchy,
    bootstrap_loss,
    compute_loss,
    dice_loss,
    hdice_loss,
    softmax_ce,
    ss_loss,
    weighted_ce,
)
from hierseg.metrics import Confusion, binary_confusion, eval_table, region_masks, region_scores
from hierseg.trainer import (
    Checkpoint,
    TrainConfig,
    adam_step,
    initial_checkpoint,
    lr_at,
    sample_batch,
    train,
    train_step,
    worker_step,
)

EPS = 1e-5

# Frozen qualitative-run protocol, calibrated once at the default learning rate.
TRAIN_SEEDS, TEST_SEED = 0, 1000
N_TRAIN, N_TEST = 16, 4
ITERATIONS = 2000
LEARNING_RATE = 5e-5
ENHANCING_FLOOR = 0.3
COMPLETE_FLOOR = 0.85
CE_CEILING = 0.05


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
        assert ok, f"{name}: {detail}"

    return emit


# gradient suite ---------------------------------------------------------------


def _weighted_sum(r, shape):
    w = Tensor(r.normal(size=shape))
    return lambda t: ad.tsum(t * w)


def _op_cases(r):
    """(name, build, inputs) triples; each build maps leaves to a scalar."""
    n, c, h = 2, 3, 4
    x = r.normal(size=(n, c, h, h))
    k3 = r.normal(size=(2, c, 3, 3))
    kt = r.normal(size=(c, 2, 2, 2))
    s_conv = _weighted_sum(r, (n, 2, 4, 4))
    s_conv_s2 = _weighted_sum(r, (n, 2, 2, 2))
    s_t = _weighted_sum(r, (n, 2, 8, 8))
    s_x = _weighted_sum(r, (n, c, h, h))
    s_pool = _weighted_sum(r, (n, c, 2, 2))
    s_cat = _weighted_sum(r, (n, 2 * c, h, h))
    s_crop = _weighted_sum(r, (n, c, 2, 3))
    s_sum = _weighted_sum(r, (12,))
    state = ad.BatchNormState.fresh(c)
    labels = r.integers(0, 5, size=12)
    s_pick = _weighted_sum(r, (12,))
    s_last = _weighted_sum(r, (n * h * h, c))
    return [
        ("conv2d", lambda a, b: s_conv(ad.conv2d(a, b, padding=1)), [x, k3]),
        ("conv2d stride 2", lambda a, b: s_conv_s2(ad.conv2d(a, b, stride=2, padding=1)), [x, k3]),
        ("transposed_conv2d", lambda a, b: s_t(ad.transposed_conv2d(a, b, 2)), [x, kt]),
        ("maxpool2d", lambda a: s_pool(ad.maxpool2d(a, 2)), [x]),
        ("batch_norm", lambda a, g, b: s_x(ad.batch_norm(a, g, b, state=state.copy())),
         [x, r.normal(size=c), r.normal(size=c)]),
        ("relu", lambda a: s_x(ad.relu(a)), [x]),
        ("softmax", lambda a: s_x(ad.softmax_channels(a)), [x]),
        ("log_softmax", lambda a: s_x(ad.log_softmax_channels(a)), [x]),
        ("concat", lambda a, b: s_cat(ad.concat_channels(a, b)), [x, r.normal(size=x.shape)]),
        ("crop2d", lambda a: s_crop(ad.crop2d(a, 1, 0, 2, 3)), [x]),
        ("channel_sum", lambda a: s_sum(ad.channel_sum(a, [1, 3, 4])), [r.normal(size=(12, 5))]),
        ("channels_last", lambda a: s_last(ad.channels_last(a)), [x]),
        ("pick", lambda a: s_pick(ad.pick(a, labels)), [r.normal(size=(12, 5))]),
        ("mul/div/add/sub", lambda a, b: s_x((a * b - a) / (b * b + 1.0) + b), [x, r.normal(size=x.shape)]),
        ("exp/log/square", lambda a: s_x(ad.log(ad.exp(a) + 1.0) + ad.square(a)), [x]),
        ("mean/reshape/index", lambda a: ad.reshape(a, (n, -1))[1].mean() * 3.0, [x]),
    ]


def _loss_cases(r):
    n = int(r.integers(2, 17))
    logits = r.normal(size=(n, 5))
    y = r.integers(0, 5, n)
    p = r.uniform(0.05, 0.95, size=n)
    rb = (r.uniform(size=n) < 0.5).astype(float)
    w = r.dirichlet(np.ones(5))
    t = float(r.uniform(0.3, 1.0))
    lam = float(r.uniform())
    image_labels = r.integers(0, 5, size=(1, 2, 2))
    sm = ad.softmax_channels
    return [
        ("softmax_ce", lambda a: softmax_ce(a, y), [logits]),
        ("weighted_ce", lambda a: weighted_ce(a, y, w), [logits]),
        ("bootstrap", lambda a: bootstrap_loss(sm(a), y, t).loss, [logits]),
        ("ss", lambda a: ss_loss(a, rb, lam, EPS), [p]),
        ("dice", lambda a: dice_loss(a, rb, EPS), [p]),
        ("hdice", lambda a: hdice_loss(aggregate_hierarchy(sm(a), y), EPS).total, [logits]),
        ("compute_loss image", lambda a: compute_loss("hdice", a, image_labels, LossParams())[0],
         [r.normal(size=(1, 5, 2, 2))]),
    ]


def test_gradient_suite(report):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        r = np.random.default_rng(seed)
        for name, build, inputs in _op_cases(r) + _loss_cases(r):
            err = finite_diff_check(build, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    report("gradient suite", not bad and elapsed < 60,
           f"{len(worst)} ops/losses x 20 instances, worst {max(worst.values()):.2e}, {elapsed:.1f}s"
           + (f", failing {bad}" if bad else ""))


# loss oracle suite ------------------------------------------------------------


def _oracle_agreement():
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(10_000 + seed)
        n = int(r.integers(1, 17))
        logits = r.normal(size=(n, 5)) * 2
        y = r.integers(0, 5, n)
        q = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        p = r.uniform(size=n)
        rb = (r.uniform(size=n) < 0.4).astype(float)
        w = r.dirichlet(np.ones(5))
        t = float(r.uniform(0.2, 1.0))
        lam = float(r.uniform())
        pairs = [
            (softmax_ce(Tensor(logits), y).item(), oracles.mean_ce(logits.tolist(), y.tolist())),
            (weighted_ce(Tensor(logits), y, w).item(), oracles.mean_ce(logits.tolist(), y.tolist(), w.tolist())),
            (bootstrap_loss(Tensor(q), y, t).loss.item(), oracles.bootstrap(q.tolist(), y.tolist(), t)),
            (ss_loss(Tensor(p), rb, lam, EPS).item(), oracles.ss(p.tolist(), rb.tolist(), lam, EPS)),
            (dice_loss(Tensor(p), rb, EPS).item(), oracles.dice(p.tolist(), rb.tolist(), EPS)),
        ]
        got = hdice_loss(aggregate_hierarchy(Tensor(q), y), EPS)
        pairs += list(zip([v.item() for v in got], oracles.hdice(q.tolist(), y.tolist(), EPS)))
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    return worst


def _hdice_pixel(q, label):
    return hdice_loss(aggregate_hierarchy(Tensor([q]), [label]), EPS).total.item()


def test_loss_oracle_suite(report):
    worst = _oracle_agreement()
    edema = _hdice_pixel([0, 0, 1, 0, 0], 2)
    half = (1 + EPS) / (2 + EPS)
    examples = [
        abs(softmax_ce(Tensor(np.zeros((1, 5))), [0]).item() - np.log(5)) < 1e-15,
        abs(bootstrap_loss(Tensor([[0.95, .0125, .0125, .0125, .0125], [0.5, .125, .125, .125, .125],
                                   [0.8, .05, .05, .05, .05]]), [0, 0, 0], 0.9).loss.item()
            - (-np.log(0.5) - np.log(0.8)) / 2) < 1e-15,
        abs(dice_loss(Tensor(np.ones(4)), np.ones(4), EPS).item() - (1 - (4 + EPS) / (8 + EPS) - 1)) < 1e-15,
        abs(edema - (-2 * half - 1) / 3) < 1e-15,
        abs(_hdice_pixel([1, 0, 0, 0, 0], 0) - (-half - 2) / 3) < 1e-15,
    ]
    report("loss oracle suite", worst < 1e-10 and all(examples),
           f"max |engine - oracle| {worst:.1e} over 100 inputs x 8 quantities; closed-form examples {sum(examples)}/5")


def test_loss_oracle_printed_hdice_example(report):
    # the printed example asks for -2/3 within 1e-6 at eps = 1e-5; the exact
    # value with eps included is -2/3 - eps/(3 (2 + eps)), about 1.7e-6 away
    edema = _hdice_pixel([0, 0, 1, 0, 0], 2)
    report("loss oracle: perfect edema pixel DL_H ~ -2/3 within 1e-6", abs(edema + 2 / 3) < 1e-6,
           f"DL_H = {edema:.10f}, |DL_H + 2/3| = {abs(edema + 2 / 3):.2e}")


# classifier suite -------------------------------------------------------------


def test_classifier_suite(report):
    start = time.perf_counter()
    grid = [round(0.05 * i, 2) for i in range(21)]
    points = [(a, b, c) for a, b, c in itertools.product(grid, repeat=3) if c <= b <= a]
    mismatches = compared = 0
    for p0, p1, p2 in points:
        tie = any(abs(u - v) < 1e-12 for u, v in ((p0, 1 - p0), (p1, p0 - p1), (p2, p1 - p2)))
        if not tie:
            compared += 1
            mismatches += oracles.decide(p0, p1, p2) != int(hierarchical_decide(p0, p1, p2))
    arr = np.array(points)
    complete, core, enh = decision_masks(hierarchical_decide_array(arr[:, 0], arr[:, 1], arr[:, 2]))
    nested = bool(np.all(enh <= core) and np.all(core <= complete))
    elapsed = time.perf_counter() - start
    report("classifier suite", mismatches == 0 and nested and elapsed < 1.0,
           f"{compared} non-tie grid points, {mismatches} mismatches, nested={nested}, {elapsed:.2f}s")


# metrics suite ----------------------------------------------------------------


def test_metrics_suite(report):
    exact = True
    miou_ok = True
    for seed in range(100):
        r = np.random.default_rng(seed)
        truth = r.integers(0, 5, size=(8, 8))
        pred = r.integers(0, 5, size=(8, 8))
        table = eval_table([pred], [truth]).table
        for i, (pm, tm) in enumerate(zip(region_masks(pred), region_masks(truth))):
            tp = sum(1 for a, b in zip(pm.ravel(), tm.ravel()) if a and b)
            fp = sum(1 for a, b in zip(pm.ravel(), tm.ravel()) if a and not b)
            fn = sum(1 for a, b in zip(pm.ravel(), tm.ravel()) if b and not a)
            tn = pm.size - tp - fp - fn
            exact &= binary_confusion(pm, tm) == Confusion(tp, fp, fn, tn)
            exact &= tuple(table[i]) == region_scores(Confusion(tp, fp, fn, tn))
            miou_ok &= table[i, 2] <= table[i, 3]
    example = region_scores(Confusion(3, 3, 1, 0)) == (0.5, 0.75, 3 / 7, 0.6)
    report("metrics suite", exact and miou_ok and example,
           f"brute-force agreement={exact}, miou<=dice={miou_ok}, (3,3,1) example={example}")


# bilinear ---------------------------------------------------------------------


def test_bilinear_constant_interior(report):
    worst = 0.0
    for stride in range(1, 9):
        kernel = Tensor(ad.bilinear_kernel(ad.BilinearSpec(2 * stride, stride), 2))
        out = ad.transposed_conv2d(Tensor(np.full((1, 2, 6, 6), 2.5)), kernel, stride).data
        interior = out[:, :, stride:-stride, stride:-stride]
        worst = max(worst, float(np.abs(interior - 2.5).max()))
    report("bilinear upsampling preserves constants", worst <= 1e-6, f"strides 1..8, max deviation {worst:.1e}")


# qualitative training runs ----------------------------------------------------


@pytest.fixture(scope="module")
def phantom_sets():
    train_set = generate_set(N_TRAIN, TRAIN_SEEDS)
    test_set = generate_set(N_TEST, TEST_SEED)
    return slice_pool(train_set), test_set


@pytest.fixture(scope="module")
def trained_scores(phantom_sets):
    pool, test_set = phantom_sets
    from hierseg.trainer import evaluate

    cache = {}

    def get(loss):
        if loss not in cache:
            cfg = TrainConfig(base_lr=LEARNING_RATE, max_iterations=ITERATIONS, loss=loss, seed=0,
                              loss_params=LossParams(threshold=0.9))
            start = time.perf_counter()
            res = train(cfg, pool)
            cache[loss] = (evaluate(res.checkpoint, test_set), time.perf_counter() - start)
        return cache[loss]

    return get


@pytest.mark.slow
def test_ce_collapses_on_enhancing(trained_scores, report):
    scores, seconds = trained_scores("ce")
    dice = scores["enhancing", "dice"]
    report("cross-entropy enhancing dice < 0.05", dice < CE_CEILING and seconds < 1800,
           f"enhancing dice {dice:.4f}, complete dice {scores['complete', 'dice']:.4f}, {seconds / 60:.1f} min")


@pytest.mark.slow
@pytest.mark.parametrize("loss", ["hdice", "bootstrap"])
def test_imbalance_aware_losses_recover_enhancing(trained_scores, report, loss):
    scores, seconds = trained_scores(loss)
    enh, comp = scores["enhancing", "dice"], scores["complete", "dice"]
    report(f"{loss}: enhancing dice >= {ENHANCING_FLOOR} and complete dice >= {COMPLETE_FLOOR}",
           enh >= ENHANCING_FLOOR and comp >= COMPLETE_FLOOR and seconds < 1800,
           f"enhancing {enh:.4f}, complete {comp:.4f}, {seconds / 60:.1f} min")


# filter effect ----------------------------------------------------------------


def test_filter_effect(report):
    ratios = []
    for seed in range(4):
        vol, lab = generate_phantom(PhantomConfig(seed=seed))
        kept = slice_and_filter(vol, lab)
        ratios.append((background_tumor_ratio(lab), background_tumor_ratio(np.stack([l for _, l in kept]))))
    ok = all(after < before for before, after in ratios)
    report("slice filtering lowers background:tumor ratio", ok,
           ", ".join(f"{b:.0f}:1 -> {a:.0f}:1" for b, a in ratios))


# data-parallel equivalence ----------------------------------------------------


def test_data_parallel_equivalence(report):
    r = np.random.default_rng(0)
    labels = np.zeros((6, 16, 16), np.uint8)
    labels[:, 4:12, 4:12] = 2
    labels[:, 6:10, 6:10] = 3
    labels[:, 7:9, 7:9] = 4
    images = (r.normal(size=(6, 4, 16, 16)) + labels[:, None] * 0.5).astype(np.float32)
    cfg = TrainConfig(net=NetConfig(depth=2, base_width=4, input_size=16), workers=3, batch_per_worker=2,
                      base_lr=1e-3, max_iterations=3)
    spec = build_network(cfg.net, seed=0)

    threaded = initial_checkpoint(cfg)
    with ThreadPoolExecutor(3) as pool:
        train_step(spec, threaded, images, labels, cfg, pool)
    ref = initial_checkpoint(cfg)
    per = [worker_step(spec, ref.params, ref.stats, images[i], labels[i], cfg)
           for i in (sample_batch(len(images), cfg, w, 0) for w in range(3))]
    mean = {k: (sum(p.grads[k].astype(np.float64) for p in per) / 3).astype(np.float32) for k in ref.params}
    adam_step(ref.params, mean, ref.adam, lr_at(0, cfg))
    rel = max(float(np.max(np.abs(threaded.params[k] - ref.params[k]) / np.maximum(1.0, np.abs(ref.params[k]))))
              for k in ref.params)

    single = replace(cfg, workers=1)
    a, b = train(single, (images, labels)), train(single, (images, labels))
    same = a.history == b.history and all(x.tobytes() == y.tobytes()
                                          for (_, x), (_, y) in zip(a.checkpoint.records(), b.checkpoint.records()))
    report("data-parallel equivalence", rel <= 1e-5 and same,
           f"W=3 vs mean-gradient W=1 step: max rel diff {rel:.1e}; W=1 bit-reproducible={same}")


# round trips ------------------------------------------------------------------


def test_round_trips(report, tmp_path):
    vol, lab = generate_phantom(PhantomConfig(seed=2))
    write_bvol(tmp_path / "v.bvol", vol)
    write_bvol(tmp_path / "l.bvol", lab)
    bvol_ok = (read_bvol(tmp_path / "v.bvol").tobytes() == vol.tobytes()
               and np.array_equal(read_bvol(tmp_path / "l.bvol"), lab))

    r = np.random.default_rng(1)
    labels = np.zeros((4, 16, 16), np.uint8)
    labels[:, 5:11, 5:11] = 2
    labels[:, 7:9, 7:9] = 4
    images = (r.normal(size=(4, 4, 16, 16)) + labels[:, None]).astype(np.float32)
    cfg = TrainConfig(net=NetConfig(depth=2, base_width=4, input_size=16), batch_per_worker=2,
                      base_lr=1e-3, max_iterations=6)
    full = train(cfg, (images, labels))
    part = train(cfg, (images, labels), iterations=3)
    part.checkpoint.save(tmp_path / "c.hnck")
    loaded = Checkpoint.load(tmp_path / "c.hnck")
    ckpt_ok = all(x.tobytes() == y.tobytes() and x.dtype == y.dtype
                  for (_, x), (_, y) in zip(part.checkpoint.records(), loaded.records()))
    rest = train(cfg, (images, labels), resume=loaded)
    trace_ok = part.history + rest.history == full.history
    report("round trips", bvol_ok and ckpt_ok and trace_ok,
           f"bvol bit-exact={bvol_ok}, checkpoint bit-exact={ckpt_ok}, resumed trace continues={trace_ok}")
