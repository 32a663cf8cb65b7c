"""Release acceptance checks, one test per shipping criterion.

Every test carries an `acceptance` marker; the terminal summary prints one
PASS/FAIL line per criterion (see conftest). Checks that train do so with
small deterministic budgets, so their numbers are reproducible bit for bit.
"""

import numpy as np
import pytest

from hdnet.autograd import (
    Tensor,
    concat_channels,
    conv2d,
    activation_elu,
    grad_check,
    resample,
    softmax,
    tensor_sum,
)
from hdnet.data import (
    generate_sample,
    load_image,
    load_mask,
    load_samples,
    make_manifest_entries,
    save_image,
    save_mask,
    write_manifest,
)
from hdnet.metrics import compute_report, fmse, mean_report, mse, psnr, ssim
from hdnet.model import (
    LDParams,
    LossConfig,
    MGDParams,
    Mask,
    adaptive_fuse,
    compose_image,
    cosine_similarity_map,
    count_parameters,
    foreground_mse_loss,
    fuse_reference,
    generator_forward,
    init_generator_params,
    knn_select,
    ld_forward,
    mgd_forward,
    split_locals,
)
from hdnet.train import (
    TrainerConfig,
    fit_samples,
    harmonize_sample,
    k_sweep,
    load_checkpoint,
    save_checkpoint,
    train,
    write_k_sweep_report,
)

# ---------------------------------------------------------------------------
# shared desk-scale datasets (session-scoped: built once)

@pytest.fixture(scope="session")
def desk_manifests(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    train_manifest = root / "train.txt"
    eval_manifest = root / "eval.txt"
    write_manifest(train_manifest, make_manifest_entries(128, 64, seed_start=0))
    write_manifest(eval_manifest, make_manifest_entries(32, 64, seed_start=1000))
    return str(train_manifest), str(eval_manifest)


@pytest.fixture(scope="session")
def desk_train_samples(desk_manifests):
    return load_samples(desk_manifests[0])


@pytest.fixture(scope="session")
def desk_eval_samples(desk_manifests):
    return load_samples(desk_manifests[1])


def eval_mean_report(params, samples):
    reports = [compute_report(Tensor(s.ground_truth), harmonize_sample(params, s),
                              s.mask) for s in samples]
    return mean_report(reports)


# ---------------------------------------------------------------------------
# independent reference implementations used only by this file

def knn_oracle(sim, k):
    idx = np.empty((sim.shape[0], k), dtype=np.int64)
    for i in range(sim.shape[0]):
        order = sorted(range(sim.shape[1]), key=lambda j: (-sim[i, j], j))
        idx[i] = order[:k]
    return idx


def softmax_oracle(rows):
    shifted = np.exp(rows - rows.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def loss_oracle(gt, harm, mask_vals, a_min):
    n, c, h, w = gt.shape
    total = 0.0
    fg = 0.0
    for y in range(h):
        for x in range(w):
            fg += mask_vals[0, 0, y, x]
            for ch in range(c):
                d = harm[0, ch, y, x] - gt[0, ch, y, x]
                total += d * d
    denom = max(a_min * (h * w) / 65536.0, fg)
    return total / denom


def mse_oracle(a, b):
    diff = (a - b) * 255.0
    total = 0.0
    for v in diff.reshape(-1):
        total += v * v
    return total / diff.size


def fmse_oracle(a, b, mask_vals):
    diff = (a - b) * 255.0
    total = 0.0
    count = 0.0
    for ch in range(a.shape[1]):
        for y in range(a.shape[2]):
            for x in range(a.shape[3]):
                if mask_vals[0, 0, y, x] == 1.0:
                    d = diff[0, ch, y, x]
                    total += d * d
    count = 3.0 * mask_vals.sum()
    return total / count


def gaussian_window():
    half = 5
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_oracle(a, b):
    win = gaussian_window()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    scores = []
    for ch in range(a.shape[1]):
        x = a[0, ch] * 255.0
        y = b[0, ch] * 255.0
        h, w = x.shape
        for i in range(h - 10):
            for j in range(w - 10):
                px = x[i:i + 11, j:j + 11]
                py = y[i:i + 11, j:j + 11]
                mx = (win * px).sum()
                my = (win * py).sum()
                vx = (win * px * px).sum() - mx * mx
                vy = (win * py * py).sum() - my * my
                cov = (win * px * py).sum() - mx * my
                scores.append(((2 * mx * my + c1) * (2 * cov + c2))
                              / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(scores))


def block_mask(h, w, rows):
    vals = np.zeros((1, 1, h, w))
    vals[:, :, :rows, :] = 1.0
    return Mask(vals)


# ---------------------------------------------------------------------------
# criteria

@pytest.mark.acceptance(label="criterion 1: gradient suite (per-op < 1e-4, "
                              "full model < 1e-3)")
def test_criterion_01_gradient_suite(acceptance_detail):
    per_op_worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)

        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(3))
        conv_coeff = Tensor(rng.standard_normal((1, 3, 6, 6)))
        elu_in = Tensor(rng.standard_normal((2, 7)), requires_grad=True)
        down_in = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        up_in = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        up_coeff = Tensor(rng.standard_normal((1, 2, 6, 6)))
        cat_in = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        cat_other = Tensor(rng.standard_normal((1, 3, 4, 4)))
        cat_coeff = Tensor(rng.standard_normal((1, 5, 4, 4)))
        soft_in = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        soft_coeff = Tensor(rng.standard_normal((4, 5)))

        ref = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        fg = Tensor(rng.standard_normal((3, 6)))
        ld_params = LDParams(
            fusion_weight=Tensor(rng.standard_normal((3, 6, 1, 1)) * 0.5,
                                 requires_grad=True),
            fusion_bias=Tensor(rng.standard_normal(3), requires_grad=True),
            k_neighbors=2)
        fuse_coeff = Tensor(rng.standard_normal((3, 6)))

        feats = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
        ld_mask = block_mask(4, 4, 2)
        ld_coeff = Tensor(rng.standard_normal((1, 3, 4, 4)))

        mgd_in = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        mgd_params = MGDParams(w_f=Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5),
                               w_b=Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5),
                               bias_f=Tensor(rng.standard_normal(2)),
                               bias_b=Tensor(rng.standard_normal(2)))
        mgd_mask = block_mask(6, 6, 3)
        mgd_coeff = Tensor(rng.standard_normal((1, 2, 6, 6)))

        harm = Tensor(rng.random((1, 3, 6, 6)), requires_grad=True)
        loss_gt = Tensor(rng.random((1, 3, 6, 6)))
        loss_mask = block_mask(6, 6, 2)

        checks = [
            (x, lambda t: tensor_sum(conv2d(t, w, b, 1, 1) * conv_coeff), None),
            (w, lambda t: tensor_sum(conv2d(x, t, b, 1, 1) * conv_coeff), None),
            (elu_in, lambda t: tensor_sum(activation_elu(t) * 2.0), 1e-4),
            (down_in, lambda t: tensor_sum(resample(t, "down2") * 3.0), None),
            (up_in, lambda t: tensor_sum(resample(t, "up2") * up_coeff), None),
            (cat_in, lambda t: tensor_sum(concat_channels(t, cat_other) * cat_coeff),
             None),
            (soft_in, lambda t: tensor_sum(softmax(t, axis=-1) * soft_coeff), None),
            (ref, lambda t: tensor_sum(adaptive_fuse(t, fg, ld_params) * fuse_coeff),
             1e-4),
            (ld_params.fusion_weight,
             lambda t: tensor_sum(adaptive_fuse(ref, fg, ld_params) * fuse_coeff),
             1e-4),
            (feats, lambda t: tensor_sum(ld_forward(t, ld_mask, ld_params) * ld_coeff),
             1e-4),
            (mgd_in, lambda t: tensor_sum(mgd_forward(t, mgd_mask, mgd_params)
                                          * mgd_coeff), None),
            (harm, lambda t: foreground_mse_loss(loss_gt, t, loss_mask, LossConfig()),
             None),
        ]
        for tensor, fn, kink in checks:
            report = grad_check(fn, tensor, eps=1e-5, kink_tol=kink)
            per_op_worst = max(per_op_worst, report.max_rel_error)
            assert report.max_rel_error < 1e-4

    vals = np.zeros((1, 1, 32, 32))
    vals[:, :, :16, :16] = 1.0
    mask = Mask(vals)
    rng = np.random.default_rng(0)
    params = init_generator_params(0, 4, "full", 1)
    model_in = Tensor(rng.random((1, 3, 32, 32)), requires_grad=True)
    model_gt = Tensor(rng.random((1, 3, 32, 32)))

    def model_loss(_):
        out = generator_forward(model_in, mask, params)
        return foreground_mse_loss(model_gt, out, mask, LossConfig())

    model_worst = 0.0
    named = params.named_tensors()
    targets = [model_in, named["enc1.weight"], named["ld.fusion_weight"],
               named["dec1.w_f"], named["proj.weight"]]
    for tensor in targets:
        report = grad_check(model_loss, tensor, eps=1e-5, kink_tol=1e-4,
                            max_coords=24, seed=0)
        model_worst = max(model_worst, report.max_rel_error)
        assert report.max_rel_error < 1e-3
    acceptance_detail(f"per-op worst {per_op_worst:.2e}, "
                      f"full-model worst {model_worst:.2e}")


@pytest.mark.acceptance(label="criterion 2: neighbor selection matches "
                              "full-sort oracle on 200 matrices")
def test_criterion_02_knn_oracle(acceptance_detail):
    rng = np.random.default_rng(20)
    for trial in range(200):
        k = int(rng.choice([1, 2, 3, 5]))
        n_f = int(rng.integers(1, 33))
        n_b = int(rng.integers(k, 33))
        sim = rng.standard_normal((n_f, n_b))
        if trial % 3 == 0:
            sim = np.round(sim, 1)
        selection = knn_select(Tensor(sim), k)
        want_idx = knn_oracle(sim, k)
        assert np.array_equal(selection.indices, want_idx)
        want_w = softmax_oracle(np.take_along_axis(sim, want_idx, axis=1))
        assert np.allclose(selection.weights.data, want_w, atol=1e-12)
    acceptance_detail("200 trials, exact indices, weights to 1e-12")


@pytest.mark.acceptance(label="criterion 3: dual-bank convolution identities "
                              "to 1e-9 over 20 seeds")
def test_criterion_03_mgd_identities(acceptance_detail):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        feats = Tensor(rng.standard_normal((1, 3, 8, 8)))
        w = rng.standard_normal((3, 3, 3, 3)) * 0.4
        b = rng.standard_normal(3)
        mask_a = Mask((rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64))
        mask_b = Mask((rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64))

        same = MGDParams(w_f=Tensor(w), w_b=Tensor(w.copy()),
                         bias_f=Tensor(b), bias_b=Tensor(b.copy()))
        plain = conv2d(feats, Tensor(w), Tensor(b), 1, 1).data
        assert np.allclose(mgd_forward(feats, mask_a, same).data, plain, atol=1e-9)
        assert np.allclose(mgd_forward(feats, mask_a, same).data,
                           mgd_forward(feats, mask_b, same).data, atol=1e-9)

        split_params = MGDParams(
            w_f=Tensor(w), w_b=Tensor(rng.standard_normal((3, 3, 3, 3))),
            bias_f=Tensor(b), bias_b=Tensor(rng.standard_normal(3)))
        ones = Mask(np.ones((1, 1, 8, 8)))
        zeros = Mask(np.zeros((1, 1, 8, 8)))
        fg_branch = conv2d(feats, split_params.w_f, split_params.bias_f, 1, 1).data
        bg_branch = conv2d(feats, split_params.w_b, split_params.bias_b, 1, 1).data
        assert np.allclose(mgd_forward(feats, ones, split_params).data,
                           fg_branch, atol=1e-9)
        assert np.allclose(mgd_forward(feats, zeros, split_params).data,
                           bg_branch, atol=1e-9)
    acceptance_detail("equal-bank, mask-independence, pure-branch identities")


@pytest.mark.acceptance(label="criterion 4: local-dynamic contracts over 50 seeds")
def test_criterion_04_ld_contracts(acceptance_detail):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        feats = Tensor(rng.standard_normal((1, 4, 6, 6)))
        rows = int(rng.integers(1, 6))
        mask = block_mask(6, 6, rows)
        params = LDParams(
            fusion_weight=Tensor(rng.standard_normal((4, 8, 1, 1)) * 0.5),
            fusion_bias=Tensor(rng.standard_normal(4)),
            k_neighbors=1)

        out = ld_forward(feats, mask, params).data
        bg = mask.values[0, 0] == 0.0
        assert np.array_equal(out[0][:, bg], feats.data[0][:, bg])

        split = split_locals(feats, mask)
        sim = cosine_similarity_map(split)
        selection = knn_select(sim, 1)
        reference = fuse_reference(split, selection).data
        for i in range(sim.shape[0]):
            j = int(np.argmax(sim.data[i]))
            assert selection.indices[i, 0] == j
            assert np.array_equal(reference[:, i],
                                  split.background_locals.data[:, j])

        scaled = split_locals(Tensor(feats.data * 3.7), mask)
        scaled_sel = knn_select(cosine_similarity_map(scaled), 1)
        assert np.array_equal(selection.indices, scaled_sel.indices)
    acceptance_detail("background bits, k=1 argmax column, scale invariance")


@pytest.mark.acceptance(label="criterion 5: loss oracle to 1e-12 and "
                              "composition identities")
def test_criterion_05_loss_and_composition(acceptance_detail):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        gt = rng.random((1, 3, 8, 8))
        harm = rng.random((1, 3, 8, 8))
        vals = (rng.random((1, 1, 8, 8)) < 0.4).astype(np.float64)
        vals[0, 0, 0, 0] = 1.0
        mask = Mask(vals)
        for a_min in (1.0, 100.0, 60000.0):
            got = foreground_mse_loss(Tensor(gt), Tensor(harm), mask,
                                      LossConfig(a_min=a_min)).item()
            want = loss_oracle(gt, harm, vals, a_min)
            assert abs(got - want) < 1e-12

    rng = np.random.default_rng(9)
    gt = Tensor(rng.random((1, 3, 8, 8)))
    fg = Tensor(rng.random((1, 3, 8, 8)))
    zeros = Mask(np.zeros((1, 1, 8, 8)))
    ones = Mask(np.ones((1, 1, 8, 8)))
    assert np.array_equal(compose_image(gt, fg, zeros).data, gt.data)
    assert np.array_equal(compose_image(gt, fg, ones).data, fg.data)

    sample = generate_sample(7, 64, "mid")
    for variant, bc in (("full", 4), ("base", 2)):
        params = init_generator_params(1, bc, variant, 1)
        out = harmonize_sample(params, sample).data
        bg = sample.mask.values[0, 0] == 0.0
        assert np.array_equal(out[0][:, bg], sample.composite[0][:, bg])
    acceptance_detail("loop oracle, exact mask identities, bit-exact passthrough")


@pytest.mark.acceptance(label="criterion 6: 50-step overfit reaches < 10% of "
                              "the starting loss")
def test_criterion_06_overfit(acceptance_detail):
    sample = generate_sample(0, 64, "mid")
    cfg = TrainerConfig(epochs=50, decay_epochs=(47, 49), decay_factor=1.0,
                        batch_size=1, seed=0, variant="full", base_channels=32,
                        learning_rate=1e-3)
    _, _, history = fit_samples([sample], cfg)
    losses = [h[2] for h in history]
    assert len(losses) == 50
    assert all(np.isfinite(losses))
    assert losses[-1] < 0.1 * losses[0]
    acceptance_detail(f"loss {losses[0]:.4f} -> {losses[-1]:.6f} "
                      f"({100 * losses[-1] / losses[0]:.2f}%)")


@pytest.mark.acceptance(label="criterion 7: desk ablation ordering on eval "
                              "fMSE (mean of 3 seeds)")
def test_criterion_07_ablation(acceptance_detail, desk_train_samples,
                               desk_eval_samples):
    results = {}
    for variant in ("base", "ld_only", "mgd_only", "full"):
        fmses = []
        for seed in (0, 1, 2):
            cfg = TrainerConfig(epochs=6, decay_epochs=(4, 5), decay_factor=1.0,
                                batch_size=4, seed=seed, variant=variant,
                                base_channels=8, learning_rate=1e-3)
            params, _, _ = fit_samples(desk_train_samples, cfg)
            fmses.append(eval_mean_report(params, desk_eval_samples).fmse)
        results[variant] = float(np.mean(fmses))
    assert results["full"] <= results["base"]
    assert results["ld_only"] <= results["base"]
    assert results["mgd_only"] <= results["base"]
    acceptance_detail("fMSE " + " ".join(f"{v}={results[v]:.1f}"
                                         for v in ("base", "ld_only",
                                                   "mgd_only", "full")))


@pytest.mark.acceptance(label="criterion 8: neighbor-count sweep report "
                              "(report-only)")
def test_criterion_08_k_sweep(acceptance_detail, desk_manifests, tmp_path):
    train_manifest, eval_manifest = desk_manifests
    cfg = TrainerConfig(epochs=3, decay_epochs=(1, 2), decay_factor=1.0,
                        batch_size=4, seed=0, variant="full", base_channels=8,
                        learning_rate=1e-3)
    rows = k_sweep(train_manifest, eval_manifest, cfg, ks=(1, 3, 5))
    assert [k for k, _ in rows] == [1, 3, 5]
    for _, report in rows:
        assert np.isfinite(report.mse) and np.isfinite(report.psnr)
    report_path = tmp_path / "k_sweep.txt"
    write_k_sweep_report(report_path, rows)
    lines = [ln for ln in report_path.read_text().splitlines()
             if not ln.startswith("#")]
    assert len(lines) == 3
    acceptance_detail(" ".join(f"k={k}: mse {r.mse:.1f} psnr {r.psnr:.2f}"
                               for k, r in rows))


@pytest.mark.acceptance(label="criterion 9: lite variant holds under a "
                              "quarter of the full parameter count")
def test_criterion_09_lite_ratio(acceptance_detail):
    full = count_parameters(init_generator_params(0, 32, "full", 1))
    lite = count_parameters(init_generator_params(0, 8, "full_lite", 1))
    ratio = lite / full
    assert ratio < 0.25
    acceptance_detail(f"{lite} / {full} = {ratio:.4f}")


@pytest.mark.acceptance(label="criterion 10: metric oracles to 1e-9 plus "
                              "closed-form anchors")
def test_criterion_10_metric_oracles(acceptance_detail):
    rng = np.random.default_rng(10)
    for _ in range(20):
        a = rng.random((1, 3, 16, 16))
        b = rng.random((1, 3, 16, 16))
        vals = (rng.random((1, 1, 16, 16)) < 0.5).astype(np.float64)
        vals[0, 0, 0, 0] = 1.0
        mask = Mask(vals)
        assert abs(mse(a, b) - mse_oracle(a, b)) < 1e-9
        assert abs(fmse(a, b, mask) - fmse_oracle(a, b, vals)) < 1e-9
        assert abs(psnr(a, b)
                   - 10.0 * np.log10(255.0 ** 2 / mse_oracle(a, b))) < 1e-9
        assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-9

    flat = np.zeros((1, 3, 16, 16))
    stepped = np.full((1, 3, 16, 16), 1.0 / 255.0)
    assert abs(psnr(flat, stepped) - 48.1308) < 1e-3
    img = np.random.default_rng(3).random((1, 3, 16, 16))
    assert abs(ssim(img, img) - 1.0) < 1e-12
    acceptance_detail("20 pairs to 1e-9; psnr(1)=48.1308; ssim(id)=1")


@pytest.mark.acceptance(label="criterion 11: determinism and round trips")
def test_criterion_11_determinism(acceptance_detail, tmp_path,
                                  desk_train_samples):
    manifest = tmp_path / "train.txt"
    write_manifest(manifest, make_manifest_entries(4, 64))
    cfg_kwargs = dict(epochs=2, decay_epochs=(0, 1), batch_size=2, seed=0,
                      variant="base", base_channels=2)
    train(manifest, TrainerConfig(**cfg_kwargs), tmp_path / "a")
    train(manifest, TrainerConfig(**cfg_kwargs), tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.hdnc").read_bytes() == \
        (tmp_path / "b" / "checkpoint.hdnc").read_bytes()
    assert (tmp_path / "a" / "loss_history.txt").read_text() == \
        (tmp_path / "b" / "loss_history.txt").read_text()

    params = init_generator_params(4, 4, "full", 3)
    ckpt = tmp_path / "round.hdnc"
    save_checkpoint(ckpt, params)
    loaded = load_checkpoint(ckpt)
    assert loaded.variant == "full" and loaded.k_neighbors == 3
    a = params.named_tensors()
    b = loaded.named_tensors()
    assert set(a) == set(b)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)

    worst = 0.0
    for seed in range(3):
        img = np.random.default_rng(seed).random((1, 3, 32, 32))
        path = tmp_path / f"img{seed}.png"
        save_image(path, img)
        worst = max(worst, float(np.abs(load_image(path).data - img).max()))
    assert worst <= 1.0 / 510.0
    sample = desk_train_samples[0]
    mask_path = tmp_path / "mask.png"
    save_mask(mask_path, sample.mask)
    assert np.array_equal(load_mask(mask_path).values, sample.mask.values)
    acceptance_detail(f"train runs bit-identical; png error {worst:.6f} "
                      f"<= {1.0 / 510.0:.6f}")
