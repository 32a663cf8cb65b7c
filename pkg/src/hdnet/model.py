"""Harmonization model: composition, local dynamic fusion, mask-aware dual
convolution, the encoder-decoder generator, and the foreground-normalized loss.

The local dynamic (LD) stage replaces each foreground feature vector with an
adaptive fusion of itself and a softmax-weighted blend of its k most
cosine-similar background vectors. The mask-aware global dynamic (MGD) stage
runs two separate filter banks over the whole feature map and blends the
results through the mask. Both are assembled purely from autograd ops, so
gradients come for free.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ContractError,
    DimensionError,
    Tensor,
    activation_elu,
    concat_channels,
    conv2d,
    gather_columns,
    matmul,
    overwrite_columns,
    resample,
    reshape,
    softmax,
    sqrt,
    take_per_row,
    transpose,
)


class DegenerateMaskError(ContractError):
    """Mask has no foreground or no background at the working resolution."""


class Mask:
    """Binary foreground mask, shape [1,1,H,W], entries exactly 0 or 1.

    The background mask is always derived as ``1 - values``, never stored.
    """

    __slots__ = ("values", "foreground_count")

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 1:
            raise DimensionError(f"mask must be [1,1,H,W], got shape {arr.shape}")
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ContractError("mask entries must be exactly 0 or 1")
        self.values = np.ascontiguousarray(arr)
        self.foreground_count = float(arr.sum())

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    def background_values(self) -> np.ndarray:
        return 1.0 - self.values

    def is_degenerate(self) -> bool:
        return self.foreground_count == 0.0 or self.foreground_count == self.values.size

    def resized(self, h: int, w: int) -> "Mask":
        """Downscale by block averaging, then re-binarize (mean >= 0.5 -> 1)."""
        hh, ww = self.height, self.width
        if (h, w) == (hh, ww):
            return self
        if h <= 0 or w <= 0 or hh % h or ww % w:
            raise DimensionError(f"cannot resize {hh}x{ww} mask to {h}x{w}")
        fh, fw = hh // h, ww // w
        block = self.values.reshape(1, 1, h, fh, w, fw).mean(axis=(3, 5))
        return Mask((block >= 0.5).astype(np.float64))


@dataclass
class LocalSplit:
    """Feature columns partitioned by the mask.

    Positions are flat row-major spatial indices (y*W + x); together the two
    lists are disjoint and cover every location once.
    """
    foreground_locals: Tensor      # [C, N_f]
    background_locals: Tensor      # [C, N_b]
    fg_positions: np.ndarray       # [N_f] int
    bg_positions: np.ndarray       # [N_b] int
    height: int
    width: int


@dataclass
class LDSelection:
    """Per-foreground-location choice of k background columns and their weights."""
    indices: np.ndarray            # [N_f, K] int, distinct per row
    weights: Tensor                # [N_f, K], rows sum to 1
    similarity: Tensor | None = None


@dataclass
class LDParams:
    """Adaptive-fusion layer: a 1x1 convolution from 2C to C channels."""
    fusion_weight: Tensor          # [C, 2C, 1, 1]
    fusion_bias: Tensor            # [C]
    k_neighbors: int = 1

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ContractError(f"k_neighbors must be >= 1, got {self.k_neighbors}")


@dataclass
class MGDParams:
    """Dual filter banks blended through the mask."""
    w_f: Tensor                    # [Cout, Cin, 3, 3]
    w_b: Tensor                    # [Cout, Cin, 3, 3]
    bias_f: Tensor                 # [Cout]
    bias_b: Tensor                 # [Cout]

    def __post_init__(self):
        if self.w_f.shape != self.w_b.shape:
            raise DimensionError(
                f"filter banks must match: {self.w_f.shape} vs {self.w_b.shape}")


@dataclass
class ConvParams:
    """Plain convolution stage (used where a dynamic module is ablated away)."""
    weight: Tensor
    bias: Tensor


@dataclass
class LossConfig:
    """a_min is the minimum-area clamp in pixels at 256x256 reference scale."""
    a_min: float = 100.0

    def __post_init__(self):
        if self.a_min < 1:
            raise ContractError(f"a_min must be >= 1, got {self.a_min}")


VARIANTS = ("base", "ld_only", "mgd_only", "full", "full_lite")


@dataclass
class GeneratorParams:
    """All learnable tensors of the generator, addressable by dotted name."""
    variant: str
    base_channels: int
    enc: list = field(default_factory=list)     # 4 ConvParams
    ld: LDParams | None = None
    dec: list = field(default_factory=list)     # 4 MGDParams or ConvParams
    proj: ConvParams | None = None

    def named_tensors(self) -> dict:
        """Ordered name -> Tensor map; names are unique by construction."""
        out = {}
        for i, st in enumerate(self.enc, 1):
            out[f"enc{i}.weight"] = st.weight
            out[f"enc{i}.bias"] = st.bias
        if self.ld is not None:
            out["ld.fusion_weight"] = self.ld.fusion_weight
            out["ld.fusion_bias"] = self.ld.fusion_bias
        for i, st in enumerate(self.dec, 1):
            if isinstance(st, MGDParams):
                out[f"dec{i}.w_f"] = st.w_f
                out[f"dec{i}.bias_f"] = st.bias_f
                out[f"dec{i}.w_b"] = st.w_b
                out[f"dec{i}.bias_b"] = st.bias_b
            else:
                out[f"dec{i}.weight"] = st.weight
                out[f"dec{i}.bias"] = st.bias
        out["proj.weight"] = self.proj.weight
        out["proj.bias"] = self.proj.bias
        return out

    @property
    def k_neighbors(self) -> int:
        return 1 if self.ld is None else self.ld.k_neighbors


def _uniform_conv(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int) -> ConvParams:
    bound = float(np.sqrt(1.0 / (cin * kh * kw)))
    w = Tensor(rng.uniform(-bound, bound, size=(cout, cin, kh, kw)), requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True)
    return ConvParams(weight=w, bias=b)


def init_generator_params(seed: int, base_channels: int = 32, variant: str = "full",
                          k_neighbors: int = 1) -> GeneratorParams:
    """Build a freshly initialized generator.

    Weights are uniform in +/- sqrt(1/(Cin*kh*kw)) from a generator seeded by
    ``seed``; biases are zero. Draw order is fixed (encoder, LD, decoder,
    projection) so initialization is deterministic. ``full_lite`` shares the
    structure of ``full``; its narrower width is the caller's choice of
    ``base_channels``.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    bc = base_channels
    rng = np.random.default_rng(seed)
    with_ld = variant in ("ld_only", "full", "full_lite")
    with_mgd = variant in ("mgd_only", "full", "full_lite")

    enc_plan = [(3, bc), (bc, 2 * bc), (2 * bc, 4 * bc), (4 * bc, 8 * bc)]
    enc = [_uniform_conv(rng, cout, cin, 3, 3) for cin, cout in enc_plan]

    ld = None
    if with_ld:
        c = 8 * bc
        fuse = _uniform_conv(rng, c, 2 * c, 1, 1)
        ld = LDParams(fusion_weight=fuse.weight, fusion_bias=fuse.bias,
                      k_neighbors=k_neighbors)

    dec_plan = [(16 * bc, 4 * bc), (8 * bc, 2 * bc), (4 * bc, bc), (2 * bc, bc)]
    dec = []
    for cin, cout in dec_plan:
        if with_mgd:
            f = _uniform_conv(rng, cout, cin, 3, 3)
            b = _uniform_conv(rng, cout, cin, 3, 3)
            dec.append(MGDParams(w_f=f.weight, bias_f=f.bias, w_b=b.weight, bias_b=b.bias))
        else:
            dec.append(_uniform_conv(rng, cout, cin, 3, 3))

    proj = _uniform_conv(rng, 3, bc, 1, 1)
    return GeneratorParams(variant=variant, base_channels=bc, enc=enc, ld=ld,
                           dec=dec, proj=proj)


def generator_params_from_arrays(named: dict, k_neighbors: int = 1,
                                 variant: str | None = None) -> GeneratorParams:
    """Rebuild GeneratorParams from a name -> float64 array map (checkpoint load).

    ``variant`` distinguishes ``full`` from ``full_lite`` (same structure,
    different width); when omitted it is inferred from which tensors exist,
    defaulting to ``full`` for the shared structure.
    """
    def tensor(name):
        if name not in named:
            raise ContractError(f"missing parameter {name!r}")
        return Tensor(named[name], requires_grad=True)

    if "enc1.weight" not in named:
        raise ContractError("missing parameter 'enc1.weight'")
    bc = int(np.asarray(named["enc1.weight"]).shape[0])
    with_ld = "ld.fusion_weight" in named
    with_mgd = "dec1.w_f" in named
    if with_ld and with_mgd:
        inferred = "full"
    elif with_ld:
        inferred = "ld_only"
    elif with_mgd:
        inferred = "mgd_only"
    else:
        inferred = "base"
    if variant is None:
        variant = inferred
    else:
        compatible = (variant == inferred
                      or (inferred == "full" and variant == "full_lite"))
        if not compatible:
            raise ContractError(
                f"variant {variant!r} does not match stored structure ({inferred})")

    enc = [ConvParams(tensor(f"enc{i}.weight"), tensor(f"enc{i}.bias")) for i in range(1, 5)]
    ld = None
    if with_ld:
        ld = LDParams(fusion_weight=tensor("ld.fusion_weight"),
                      fusion_bias=tensor("ld.fusion_bias"), k_neighbors=k_neighbors)
    dec = []
    for i in range(1, 5):
        if with_mgd:
            dec.append(MGDParams(w_f=tensor(f"dec{i}.w_f"), bias_f=tensor(f"dec{i}.bias_f"),
                                 w_b=tensor(f"dec{i}.w_b"), bias_b=tensor(f"dec{i}.bias_b")))
        else:
            dec.append(ConvParams(tensor(f"dec{i}.weight"), tensor(f"dec{i}.bias")))
    proj = ConvParams(tensor("proj.weight"), tensor("proj.bias"))
    params = GeneratorParams(variant=variant, base_channels=bc, enc=enc, ld=ld,
                             dec=dec, proj=proj)
    expected = set(params.named_tensors())
    got = set(named)
    if got != expected:
        raise ContractError(f"unexpected parameter names: {sorted(got ^ expected)}")
    return params


def count_parameters(params: GeneratorParams) -> int:
    """Total scalar count over all named tensors; depends only on shapes."""
    return sum(t.size for t in params.named_tensors().values())


# ---------------------------------------------------------------------------
# composition and loss

def compose_image(ground_truth: Tensor, foreground: Tensor, mask: Mask) -> Tensor:
    """Blend: mask picks foreground pixels, everything else keeps ground truth."""
    gt, fg = _as_image(ground_truth), _as_image(foreground)
    if gt.shape != fg.shape:
        raise DimensionError(f"image shapes disagree: {gt.shape} vs {fg.shape}")
    if (mask.height, mask.width) != gt.shape[2:]:
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match image {gt.shape[2]}x{gt.shape[3]}")
    m = Tensor(mask.values)
    mb = Tensor(mask.background_values())
    return fg * m + gt * mb


def _as_image(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise DimensionError(f"expected a [1,3,H,W] image tensor, got shape {t.shape}")
    return t


def foreground_mse_loss(ground_truth: Tensor, harmonized: Tensor, mask: Mask,
                        cfg: LossConfig | None = None) -> Tensor:
    """Squared error summed over the image, normalized by the clamped mask area.

    The clamp floor scales with resolution: a_min pixels at 256x256 becomes
    a_min * (H*W) / 256^2 here, so tiny-foreground behavior is size-invariant.
    """
    cfg = cfg or LossConfig()
    gt, h = _as_image(ground_truth), _as_image(harmonized)
    if gt.shape != h.shape:
        raise DimensionError(f"image shapes disagree: {gt.shape} vs {h.shape}")
    hh, ww = gt.shape[2], gt.shape[3]
    if (mask.height, mask.width) != (hh, ww):
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match image {hh}x{ww}")
    a_min_eff = cfg.a_min * (hh * ww) / (256.0 * 256.0)
    denom = max(a_min_eff, mask.foreground_count)
    diff = h - gt
    return (diff * diff).sum() / denom


# ---------------------------------------------------------------------------
# local dynamic module

def split_locals(features: Tensor, mask: Mask) -> LocalSplit:
    """Partition feature columns into foreground and background by the mask."""
    if features.ndim != 4 or features.shape[0] != 1:
        raise DimensionError(f"features must be [1,C,H,W], got shape {features.shape}")
    _, c, h, w = features.shape
    if (mask.height, mask.width) != (h, w):
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match features {h}x{w}")
    if mask.is_degenerate():
        raise DegenerateMaskError(
            "mask has no foreground or no background at this resolution")
    flat_mask = mask.values.reshape(-1)
    fg_idx = np.flatnonzero(flat_mask == 1.0)
    bg_idx = np.flatnonzero(flat_mask == 0.0)
    flat = reshape(features, (c, h * w))
    return LocalSplit(foreground_locals=gather_columns(flat, fg_idx),
                      background_locals=gather_columns(flat, bg_idx),
                      fg_positions=fg_idx, bg_positions=bg_idx, height=h, width=w)


def cosine_similarity_map(split: LocalSplit) -> Tensor:
    """S[i, j] = cosine of foreground column i against background column j.

    Denominators carry +1e-8 so zero vectors stay finite.
    """
    ff, bb = split.foreground_locals, split.background_locals
    dots = matmul(transpose(ff), bb)                                  # [N_f, N_b]
    norm_f = sqrt((ff * ff).sum(axis=0, keepdims=True))               # [1, N_f]
    norm_b = sqrt((bb * bb).sum(axis=0, keepdims=True))               # [1, N_b]
    denom = matmul(transpose(norm_f), norm_b) + 1e-8                  # [N_f, N_b]
    return dots / denom


def knn_select(similarity: Tensor, k: int) -> LDSelection:
    """Pick the k highest-similarity background columns per foreground row.

    Ties break toward the smaller background index. Weights are the softmax of
    the k selected similarity values; gradients flow through the weights and
    (downstream) the selected columns, while the index choice itself is held
    constant during backward.
    """
    if similarity.ndim != 2:
        raise DimensionError(f"similarity must be [N_f, N_b], got shape {similarity.shape}")
    n_b = similarity.shape[1]
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if k > n_b:
        raise ContractError(f"k = {k} exceeds background size {n_b}")
    order = np.argsort(-similarity.data, axis=1, kind="stable")
    indices = np.ascontiguousarray(order[:, :k])
    selected = take_per_row(similarity, indices)
    weights = softmax(selected, axis=1)
    return LDSelection(indices=indices, weights=weights, similarity=similarity)


def fuse_reference(split: LocalSplit, selection: LDSelection) -> Tensor:
    """Weighted sum of each row's selected background columns: one reference
    vector per foreground location, shape [C, N_f]."""
    n_f, k = selection.indices.shape
    gathered = gather_columns(split.background_locals, selection.indices)  # [C, N_f, K]
    w = reshape(selection.weights, (1, n_f, k))
    return (gathered * w).sum(axis=2)


def adaptive_fuse(reference: Tensor, foreground: Tensor, params: LDParams) -> Tensor:
    """Per-location affine map over [reference; foreground], then ELU.

    Implemented as a 1x1 convolution across the location axis; equivalent to
    applying one [C x 2C] matrix at every column.
    """
    if reference.shape != foreground.shape:
        raise DimensionError(
            f"reference/foreground shapes disagree: {reference.shape} vs {foreground.shape}")
    c, n = reference.shape
    if params.fusion_weight.shape != (c, 2 * c, 1, 1):
        raise DimensionError(
            f"fusion weight must be [{c},{2 * c},1,1], got {params.fusion_weight.shape}")
    ref4 = reshape(reference, (1, c, 1, n))
    fg4 = reshape(foreground, (1, c, 1, n))
    cat = concat_channels(ref4, fg4)
    out = conv2d(cat, params.fusion_weight, params.fusion_bias, stride=1, padding=0)
    out = activation_elu(out, alpha=1.0)
    return reshape(out, (c, n))


def ld_forward(features: Tensor, mask: Mask, params: LDParams) -> Tensor:
    """Rewrite foreground columns with their adaptive fusions; background
    columns pass through with their exact bits.

    A degenerate mask (all foreground or all background) bypasses the module
    with a warning, returning the input unchanged. k larger than the
    background size is clamped with a warning.
    """
    if features.ndim != 4 or features.shape[0] != 1:
        raise DimensionError(f"features must be [1,C,H,W], got shape {features.shape}")
    _, c, h, w = features.shape
    if (mask.height, mask.width) != (h, w):
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match features {h}x{w}")
    if mask.is_degenerate():
        warnings.warn("degenerate mask: local dynamic module bypassed", stacklevel=2)
        return features
    split = split_locals(features, mask)
    k = params.k_neighbors
    n_b = split.bg_positions.shape[0]
    if k > n_b:
        warnings.warn(f"k_neighbors={k} exceeds background size {n_b}; clamping",
                      stacklevel=2)
        k = n_b
    sim = cosine_similarity_map(split)
    selection = knn_select(sim, k)
    reference = fuse_reference(split, selection)
    fused = adaptive_fuse(reference, split.foreground_locals, params)
    flat = reshape(features, (c, h * w))
    out = overwrite_columns(flat, fused, split.fg_positions)
    return reshape(out, (1, c, h, w))


# ---------------------------------------------------------------------------
# mask-aware global dynamic module

def mgd_forward(features: Tensor, mask: Mask, params: MGDParams) -> Tensor:
    """Run both filter banks over the whole input, then blend through the mask:
    foreground keeps the w_f response, background the w_b response."""
    if features.ndim != 4:
        raise DimensionError(f"features must be [N,Cin,H,W], got shape {features.shape}")
    h, w = features.shape[2], features.shape[3]
    if (mask.height, mask.width) != (h, w):
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match features {h}x{w}")
    m = Tensor(mask.values)
    mb = Tensor(mask.background_values())
    out_f = conv2d(features, params.w_f, params.bias_f, stride=1, padding=1)
    out_b = conv2d(features, params.w_b, params.bias_b, stride=1, padding=1)
    return out_f * m + out_b * mb


# ---------------------------------------------------------------------------
# generator

def generator_forward(composite: Tensor, mask: Mask, params: GeneratorParams) -> Tensor:
    """Encoder-decoder pass over the composite.

    Four encoder stages (conv + ELU, skip saved, 2x downsample), the local
    dynamic stage at the bottleneck when present, four decoder stages
    (2x upsample, skip concat, dynamic or plain conv, ELU), a 1x1 projection to
    RGB, and a final blend that returns background pixels of the composite
    untouched.
    """
    x = _as_image(composite)
    h, w = x.shape[2], x.shape[3]
    if h % 16 or w % 16:
        raise DimensionError(f"spatial size must be divisible by 16, got {h}x{w}")
    if (mask.height, mask.width) != (h, w):
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match image {h}x{w}")

    skips = []
    for stage in params.enc:
        x = activation_elu(conv2d(x, stage.weight, stage.bias, stride=1, padding=1))
        skips.append(x)
        x = resample(x, "down2")

    if params.ld is not None:
        x = ld_forward(x, mask.resized(h // 16, w // 16), params.ld)

    scale = 8
    for stage, skip in zip(params.dec, reversed(skips)):
        x = resample(x, "up2")
        x = concat_channels(x, skip)
        if isinstance(stage, MGDParams):
            x = mgd_forward(x, mask.resized(h // scale, w // scale), stage)
        else:
            x = conv2d(x, stage.weight, stage.bias, stride=1, padding=1)
        x = activation_elu(x)
        scale //= 2

    raw = conv2d(x, params.proj.weight, params.proj.bias, stride=1, padding=0)
    m = Tensor(mask.values)
    mb = Tensor(mask.background_values())
    return raw * m + _as_image(composite) * mb
