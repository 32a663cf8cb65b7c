"""Adam training loop, checkpoint serialization, and evaluation harness.

Batches are processed sequentially with gradient accumulation, then one Adam
step per batch (equal to optimizing the summed-batch loss). Sample order is
reshuffled each epoch from a seeded generator, so runs are bit-deterministic
for a fixed (seed, config, manifest).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor, backward, no_grad
from .data import generate_sample, load_samples, read_manifest
from .metrics import compute_report, mean_report
from .model import (
    VARIANTS,
    GeneratorParams,
    LossConfig,
    foreground_mse_loss,
    generator_forward,
    generator_params_from_arrays,
    init_generator_params,
)

CHECKPOINT_MAGIC = b"HDNC"
ADAM_MAGIC = b"HDNA"
CHECKPOINT_VERSION = 1


@dataclass
class TrainerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 30
    decay_epochs: tuple = (25, 28)
    decay_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    variant: str = "full"
    base_channels: int = 32
    k_neighbors: int = 1
    a_min: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ContractError(
                f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if len(self.decay_epochs) != 2:
            raise ContractError("decay_epochs must hold exactly two epochs")
        d0, d1 = self.decay_epochs
        if not d0 < d1 < self.epochs:
            raise ContractError(
                f"decay epochs must be ascending and below epochs: "
                f"{self.decay_epochs} vs {self.epochs}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ContractError("learning_rate, epochs and batch_size must be positive")

    def effective_base_channels(self) -> int:
        """full_lite quarters the channel widths of the full model."""
        if self.variant == "full_lite":
            return max(1, self.base_channels // 4)
        return self.base_channels


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_adam_state(params: GeneratorParams) -> AdamState:
    named = params.named_tensors()
    return AdamState(m={n: np.zeros_like(t.data) for n, t in named.items()},
                     v={n: np.zeros_like(t.data) for n, t in named.items()})


def adam_step(params: GeneratorParams, state: AdamState, cfg: TrainerConfig,
              lr_now: float) -> None:
    """Bias-corrected Adam update in place; zeroes gradients afterwards."""
    named = params.named_tensors()
    for name, t in named.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    t_step = state.step
    c1 = 1.0 - cfg.beta1 ** t_step
    c2 = 1.0 - cfg.beta2 ** t_step
    for name, t in named.items():
        g = t.grad
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        t.data -= lr_now * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        t.grad = None


def lr_at_epoch(cfg: TrainerConfig, epoch: int) -> float:
    lr = cfg.learning_rate
    if epoch >= cfg.decay_epochs[0]:
        lr *= cfg.decay_factor
    if epoch >= cfg.decay_epochs[1]:
        lr *= cfg.decay_factor
    return lr


# ---------------------------------------------------------------------------
# checkpoint format

def _write_block(path, magic: bytes, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContractError(f"{path}: truncated checkpoint")
    return data


def _read_block(path, magic: bytes) -> dict:
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ContractError(f"{path}: bad magic {got!r}, expected {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, path))[0]
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported version {version}")
        count = struct.unpack("<I", _read_exact(fh, 4, path))[0]
        tensors = {}
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(fh, 4, path))[0]
            if name_len > 4096:
                raise ContractError(f"{path}: implausible name length {name_len}")
            name = _read_exact(fh, name_len, path).decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4, path))[0]
            if rank > 8:
                raise ContractError(f"{path}: implausible rank {rank} for {name!r}")
            dims = tuple(struct.unpack("<Q", _read_exact(fh, 8, path))[0]
                         for _ in range(rank))
            n_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 8 * n_vals, path)
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        return tensors


def save_checkpoint(path, params: GeneratorParams) -> None:
    tensors = {n: t.data for n, t in params.named_tensors().items()}
    tensors["meta.k_neighbors"] = np.float64(params.k_neighbors)
    tensors["meta.variant"] = np.float64(VARIANTS.index(params.variant))
    _write_block(path, CHECKPOINT_MAGIC, tensors)


def load_checkpoint(path) -> GeneratorParams:
    tensors = _read_block(path, CHECKPOINT_MAGIC)
    k = int(tensors.pop("meta.k_neighbors", np.float64(1.0)))
    variant_idx = tensors.pop("meta.variant", None)
    variant = VARIANTS[int(variant_idx)] if variant_idx is not None else None
    return generator_params_from_arrays(tensors, k_neighbors=k, variant=variant)


def save_adam_state(path, state: AdamState) -> None:
    tensors = {}
    for name, arr in state.m.items():
        tensors[f"{name}.m"] = arr
    for name, arr in state.v.items():
        tensors[f"{name}.v"] = arr
    tensors["meta.step"] = np.float64(state.step)
    _write_block(path, ADAM_MAGIC, tensors)


def load_adam_state(path) -> AdamState:
    tensors = _read_block(path, ADAM_MAGIC)
    step = int(tensors.pop("meta.step"))
    state = AdamState(step=step)
    for name, arr in tensors.items():
        base, kind = name.rsplit(".", 1)
        if kind == "m":
            state.m[base] = arr
        elif kind == "v":
            state.v[base] = arr
        else:
            raise ContractError(f"{path}: unexpected entry {name!r}")
    if set(state.m) != set(state.v):
        raise ContractError(f"{path}: first/second moment names disagree")
    return state


# ---------------------------------------------------------------------------
# training

def fit_samples(samples, cfg: TrainerConfig, out_dir=None,
                params: GeneratorParams | None = None,
                state: AdamState | None = None):
    """Core loop over in-memory samples.

    Returns (params, state, history) where history holds (epoch, step, loss)
    with loss averaged over the batch. When ``out_dir`` is given, a rolling
    checkpoint pair and the loss history are written there.
    """
    if not samples:
        raise ContractError("no samples to train on")
    if params is None:
        params = init_generator_params(cfg.seed, cfg.effective_base_channels(),
                                       cfg.variant, cfg.k_neighbors)
    if state is None:
        state = init_adam_state(params)
    loss_cfg = LossConfig(a_min=cfg.a_min)
    history = []
    step = 0
    ckpt_path = adam_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.hdnc")
        adam_path = os.path.join(out_dir, "checkpoint.hdna")
    for epoch in range(cfg.epochs):
        lr_now = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        for start in range(0, len(samples), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            total = 0.0
            for idx in batch:
                s = samples[idx]
                out = generator_forward(Tensor(s.composite), s.mask, params)
                loss = foreground_mse_loss(Tensor(s.ground_truth), out, s.mask, loss_cfg)
                backward(loss)
                total += loss.item()
            batch_loss = total / len(batch)
            if not np.isfinite(batch_loss):
                seeds = [int(samples[i].seed) for i in batch]
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"batch sample seeds {seeds}")
            adam_step(params, state, cfg, lr_now)
            history.append((epoch, step, batch_loss))
            step += 1
        if out_dir is not None:
            save_checkpoint(ckpt_path, params)
            save_adam_state(adam_path, state)
    if out_dir is not None:
        write_loss_history(os.path.join(out_dir, "loss_history.txt"), history)
    return params, state, history


def write_loss_history(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# epoch step loss\n")
        for epoch, step, loss in history:
            fh.write(f"{epoch} {step} {loss:.17g}\n")


def train(manifest_path, cfg: TrainerConfig, out_dir):
    """Train from a manifest; returns (checkpoint_path, history_path)."""
    samples = load_samples(manifest_path)
    fit_samples(samples, cfg, out_dir=out_dir)
    return os.path.join(out_dir, "checkpoint.hdnc"), \
        os.path.join(out_dir, "loss_history.txt")


# ---------------------------------------------------------------------------
# evaluation

def harmonize_sample(params: GeneratorParams, sample) -> Tensor:
    with no_grad():
        return generator_forward(Tensor(sample.composite), sample.mask, params)


def evaluate(checkpoint_path, manifest_path):
    """Run the generator over every manifest sample.

    Returns (overall MetricsReport, {band: MetricsReport}).
    """
    params = load_checkpoint(checkpoint_path)
    return evaluate_params(params, manifest_path)


def evaluate_params(params: GeneratorParams, manifest_path):
    entries = read_manifest(manifest_path)
    reports = []
    per_band = {}
    for seed, size, band in entries:
        s = generate_sample(seed, size, band)
        out = harmonize_sample(params, s)
        r = compute_report(Tensor(s.ground_truth), out, s.mask)
        reports.append(r)
        per_band.setdefault(band, []).append(r)
    overall = mean_report(reports)
    bands = {band: mean_report(rs) for band, rs in sorted(per_band.items())}
    return overall, bands


def composite_baseline(manifest_path):
    """Metrics of the raw composites against ground truth (no model)."""
    reports = []
    for seed, size, band in read_manifest(manifest_path):
        s = generate_sample(seed, size, band)
        reports.append(compute_report(Tensor(s.ground_truth), Tensor(s.composite), s.mask))
    return mean_report(reports)


def k_sweep(train_manifest, eval_manifest, cfg: TrainerConfig, ks=(1, 3, 5)):
    """Train once per k and evaluate; returns [(k, MetricsReport), ...]."""
    samples = load_samples(train_manifest)
    rows = []
    for k in ks:
        cfg_k = TrainerConfig(**{**cfg.__dict__, "k_neighbors": int(k)})
        params, _, _ = fit_samples(samples, cfg_k)
        overall, _ = evaluate_params(params, eval_manifest)
        rows.append((int(k), overall))
    return rows


def write_k_sweep_report(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# k mse psnr fmse ssim\n")
        for k, report in rows:
            fh.write(f"{k} {report.mse:.6g} {report.psnr:.6g} "
                     f"{report.fmse:.6g} {report.ssim:.6g}\n")
