"""Built-in diagnostic suites runnable from the command line.

Each suite carries its own reference computation (numeric differences,
full-sort neighbor selection, loop-based metrics) so it does not depend on
the code paths it is checking. Suites print one PASS/FAIL line each.
"""

from __future__ import annotations

import numpy as np

from .autograd import (
    Tensor,
    activation_elu,
    conv2d,
    grad_check,
    matmul,
    resample,
    softmax,
    tensor_sum,
)
from .metrics import fmse, mse, psnr, ssim
from .model import (
    MGDParams,
    Mask,
    cosine_similarity_map,
    knn_select,
    mgd_forward,
    split_locals,
)


def _gradient_suite(quick: bool):
    """Numeric-difference checks over the differentiable building blocks."""
    seeds = range(2) if quick else range(6)
    threshold = 1e-4
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)

        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = Tensor(rng.standard_normal(3))
        conv_coeff = Tensor(rng.standard_normal((1, 3, 6, 6)))
        soft_coeff = Tensor(rng.standard_normal((4, 5)))
        up_coeff = Tensor(rng.standard_normal((1, 2, 4, 4)))
        mat_rhs = Tensor(rng.standard_normal((4, 2)))
        checks = [
            (x, lambda t: tensor_sum(conv2d(t, w, b, stride=1, padding=1)
                                     * conv_coeff)),
            (Tensor(rng.standard_normal((4, 5)), requires_grad=True),
             lambda t: tensor_sum(softmax(t, axis=-1) * soft_coeff)),
            (Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True),
             lambda t: tensor_sum(resample(t, "down2") * 3.0)),
            (Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True),
             lambda t: tensor_sum(resample(t, "up2") * up_coeff)),
            (Tensor(rng.standard_normal((3, 4)), requires_grad=True),
             lambda t: tensor_sum(matmul(t, mat_rhs))),
            (Tensor(rng.standard_normal((2, 7)), requires_grad=True),
             lambda t: tensor_sum(activation_elu(t) * 2.0)),
        ]
        for tensor, fn in checks:
            report = grad_check(fn, tensor, eps=1e-5, kink_tol=1e-4)
            worst = max(worst, report.max_rel_error)
            if report.max_rel_error > threshold:
                return False, f"max relative error {report.max_rel_error:.3g}"
    return True, f"max relative error {worst:.3g} over all ops"


def _knn_oracle(sim: np.ndarray, k: int):
    """Full sort per row; ties broken toward the smaller column index."""
    idx = np.empty((sim.shape[0], k), dtype=np.int64)
    for i in range(sim.shape[0]):
        order = sorted(range(sim.shape[1]), key=lambda j: (-sim[i, j], j))
        idx[i] = order[:k]
    return idx


def _knn_suite(quick: bool):
    trials = 20 if quick else 100
    rng = np.random.default_rng(1234)
    for trial in range(trials):
        n_f = int(rng.integers(1, 17))
        n_b = int(rng.integers(2, 17))
        sim = rng.standard_normal((n_f, n_b))
        if trial % 3 == 0:
            sim = np.round(sim, 1)
        k = int(rng.integers(1, min(5, n_b) + 1))
        selection = knn_select(Tensor(sim), k)
        want_idx = _knn_oracle(sim, k)
        if not np.array_equal(selection.indices, want_idx):
            return False, f"index mismatch at trial {trial}"
        rows = np.take_along_axis(sim, want_idx, axis=1)
        shifted = np.exp(rows - rows.max(axis=1, keepdims=True))
        want_w = shifted / shifted.sum(axis=1, keepdims=True)
        if not np.allclose(selection.weights.data, want_w, atol=1e-12):
            return False, f"weight mismatch at trial {trial}"
    return True, f"{trials} random similarity matrices matched"


def _mgd_suite(quick: bool):
    seeds = range(3) if quick else range(10)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        feats = Tensor(rng.standard_normal((1, 3, 8, 8)))
        w = rng.standard_normal((3, 3, 3, 3)) * 0.3
        b = rng.standard_normal(3)
        mask_vals = (rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64)
        mask = Mask(mask_vals)

        same = MGDParams(w_f=Tensor(w), w_b=Tensor(w.copy()),
                         bias_f=Tensor(b), bias_b=Tensor(b.copy()))
        plain = conv2d(feats, Tensor(w), Tensor(b), stride=1, padding=1)
        if not np.allclose(mgd_forward(feats, mask, same).data, plain.data,
                           atol=1e-9):
            return False, f"equal-bank identity failed at seed {seed}"

        split = MGDParams(w_f=Tensor(w), w_b=Tensor(rng.standard_normal(w.shape)),
                          bias_f=Tensor(b), bias_b=Tensor(rng.standard_normal(3)))
        ones = Mask(np.ones((1, 1, 8, 8)))
        fg_only = conv2d(feats, split.w_f, split.bias_f, stride=1, padding=1)
        if not np.allclose(mgd_forward(feats, ones, split).data, fg_only.data,
                           atol=1e-9):
            return False, f"all-foreground identity failed at seed {seed}"

        out = mgd_forward(feats, mask, split).data
        bg_out = conv2d(feats, split.w_b, split.bias_b, stride=1, padding=1).data
        bg_pos = mask_vals[0, 0] == 0.0
        if not np.allclose(out[0, :, bg_pos], bg_out[0, :, bg_pos], atol=1e-9):
            return False, f"background-bank identity failed at seed {seed}"
    return True, "dual-bank identities hold"


def _similarity_suite(quick: bool):
    seeds = range(2) if quick else range(6)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        feats = Tensor(rng.standard_normal((1, 4, 4, 4)))
        vals = np.zeros((1, 1, 4, 4))
        vals[:, :, :2, :] = 1.0
        locals_ = split_locals(feats, Mask(vals))
        sim = cosine_similarity_map(locals_).data
        f = locals_.foreground_locals.data
        g = locals_.background_locals.data
        for i in range(f.shape[1]):
            for j in range(g.shape[1]):
                dot = float(f[:, i] @ g[:, j])
                denom = float(np.linalg.norm(f[:, i]) * np.linalg.norm(g[:, j]))
                want = dot / (denom + 1e-8)
                if abs(sim[i, j] - want) > 1e-10:
                    return False, f"cosine mismatch at seed {seed} ({i},{j})"
    return True, "cosine map matches per-pair computation"


def _metrics_suite(quick: bool):
    rng = np.random.default_rng(99)
    trials = 2 if quick else 8
    for trial in range(trials):
        a = rng.random((1, 3, 16, 16))
        b = rng.random((1, 3, 16, 16))
        vals = (rng.random((1, 1, 16, 16)) < 0.5).astype(np.float64)
        vals[0, 0, 0, 0] = 1.0
        mask = Mask(vals)

        diff = (a - b) * 255.0
        want_mse = float(np.mean(diff * diff))
        if abs(mse(a, b) - want_mse) > 1e-9:
            return False, f"mse mismatch at trial {trial}"

        num = float((diff * diff * vals).sum())
        want_fmse = num / (3.0 * vals.sum())
        if abs(fmse(a, b, mask) - want_fmse) > 1e-9:
            return False, f"fmse mismatch at trial {trial}"

    unit = np.zeros((1, 3, 8, 8))
    stepped = np.full((1, 3, 8, 8), 1.0 / 255.0)
    if abs(psnr(unit, stepped) - 10.0 * np.log10(255.0 ** 2)) > 1e-3:
        return False, "psnr of a one-byte step is off"
    img = np.random.default_rng(0).random((1, 3, 16, 16))
    if abs(ssim(img, img) - 1.0) > 1e-12:
        return False, "ssim of identical images is not 1"
    const_a = np.full((1, 3, 16, 16), 0.25)
    const_b = np.full((1, 3, 16, 16), 0.75)
    mu_x, mu_y = 0.25 * 255.0, 0.75 * 255.0
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    want = ((2 * mu_x * mu_y + c1) * c2) / ((mu_x ** 2 + mu_y ** 2 + c1) * c2)
    if abs(ssim(const_a, const_b) - want) > 1e-9:
        return False, "ssim closed form for constant images is off"
    return True, "loop and closed-form references matched"


SUITES = (
    ("gradients", _gradient_suite),
    ("knn-selection", _knn_suite),
    ("masked-convolution", _mgd_suite),
    ("similarity", _similarity_suite),
    ("metrics", _metrics_suite),
)


def run_selftest(quick: bool = False, out=print) -> bool:
    all_ok = True
    for name, suite in SUITES:
        ok, detail = suite(quick)
        all_ok = all_ok and ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    out(f"selftest {'passed' if all_ok else 'FAILED'}"
        f" ({len(SUITES)} suites{', quick' if quick else ''})")
    return all_ok
