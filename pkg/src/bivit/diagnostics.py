"""Analysis tools: softmax-gradient curves, dot-product range checks,
attention heatmaps, theoretical size/OPs accounting and the precision grid."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitops import pack_signs, xnor_popcount_gemm
from .layers import PrecisionConfig, TinyViT

# -- softmax gradient curve -----------------------------------------------------------


@dataclass
class CurveDump:
    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            for k, v in self.meta.items():
                f.write(f"# {k}={v}\n")
            w = csv.writer(f)
            w.writerow(["p", "y"])
            for a, b in zip(self.x, self.y):
                w.writerow([repr(float(a)), repr(float(b))])


def softmax_grad_curve(d: int, samples: int = 257, row_len: int = 2) -> CurveDump:
    """Diagonal softmax-gradient term ``A * (1 - A)`` of one element.

    The element carries logit ``p / sqrt(d)`` for ``p`` in ``[-d, d]``; the
    other ``row_len - 1`` logits of the row are 0.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    if row_len < 2 or samples < 2:
        raise ValueError("row_len and samples must be at least 2")
    p = np.linspace(-d, d, samples)
    z = p / math.sqrt(d)
    # softmax of [z, 0, ..., 0] at index 0, written to stay finite for large |z|
    a = 1.0 / (1.0 + (row_len - 1) * np.exp(-z))
    meta = {"d": d, "row_len": row_len, "samples": samples,
            "context": "varying logit p/sqrt(d), remaining logits 0"}
    return CurveDump(p, a * (1.0 - a), meta)


# -- extreme dot-product range ---------------------------------------------------------------


@dataclass
class DotRange:
    d: int
    attained: set
    expected: set
    exhaustive: bool

    @property
    def ok(self) -> bool:
        return self.attained <= self.expected and min(self.attained) == -self.d \
            and max(self.attained) == self.d


def extreme_dot_range_check(d: int, samples: int = 4096, seed: int = 0) -> DotRange:
    """Dot products of +1/-1 vectors of length d, via the packed kernel.

    For ``d <= 16`` every left vector is enumerated against the all-ones
    vector (which covers every attainable value by symmetry); above that,
    random pairs plus the aligned and anti-aligned extremes are sampled.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    expected = set(range(-d, d + 1, 2))
    ones = np.ones((1, d))
    if d <= 16:
        codes = np.arange(2**d, dtype=np.int64)[:, None]
        a = np.where((codes >> np.arange(d)) & 1, 1.0, -1.0)
        vals = xnor_popcount_gemm(pack_signs(a), pack_signs(ones)).ravel()
        return DotRange(d, set(int(v) for v in vals), expected, True)
    rng = np.random.default_rng(seed)
    a = np.where(rng.random((samples, d)) < 0.5, -1.0, 1.0)
    b = np.where(rng.random((samples, d)) < 0.5, -1.0, 1.0)
    a = np.vstack([a, ones, -ones])
    b = np.vstack([b, ones, ones])
    prod = xnor_popcount_gemm(pack_signs(a), pack_signs(b))
    vals = set(int(v) for v in np.diagonal(prod))
    return DotRange(d, vals, expected, False)


# -- heatmaps -------------------------------------------------------------------------------------

PGM_MAXVAL = 65535


def normalize_map(m: np.ndarray, maxval: int = PGM_MAXVAL) -> np.ndarray:
    """Min-max normalise to integers in [0, maxval]; a flat map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros(m.shape, dtype=np.int64)
    return np.rint((m - lo) / (hi - lo) * maxval).astype(np.int64)


def write_pgm(path, m: np.ndarray) -> None:
    img = normalize_map(m)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii"))
        f.write(img.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: unsupported graymap type {magic}")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, offset=pos + 1, count=w * h)
    return data.reshape(h, w).astype(np.int64)


def attention_heatmap_dump(model: TinyViT, images, block: int, head: int, out_prefix,
                           stage: str = "pre_softmax", sample: int = 0) -> tuple[Path, Path]:
    """Write one attention map as ``<prefix>.pgm`` and ``<prefix>.txt``."""
    if stage not in ("pre_softmax", "post_softmax"):
        raise ValueError("stage must be 'pre_softmax' or 'post_softmax'")
    if not 0 <= block < len(model.blocks):
        raise IndexError(f"block {block} out of range")
    if not 0 <= head < model.arch.heads:
        raise IndexError(f"head {head} out of range")
    _, recs = model(images)
    rec = recs[block]
    m = (rec.scores if stage == "pre_softmax" else rec.attn).data[sample, head]
    prefix = Path(out_prefix)
    pgm, txt = prefix.with_suffix(".pgm"), prefix.with_suffix(".txt")
    write_pgm(pgm, m)
    np.savetxt(txt, m, fmt="%.17g")
    return pgm, txt


# -- theoretical size and OPs ---------------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description for the size/OPs accounting (not trainable)."""

    family: str  # "deit" or "swin"
    embed_dim: int
    depths: tuple
    heads: tuple
    mlp_ratio: float = 4.0
    patch: int = 16
    resolution: int = 224
    classes: int = 1000
    in_chans: int = 3
    window: int = 7

    def __post_init__(self):
        if self.family not in ("deit", "swin"):
            raise ValueError("family must be 'deit' or 'swin'")
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have one entry per stage")
        if self.resolution % self.patch:
            raise ValueError("resolution must be divisible by the patch size")
        dim = self.embed_dim
        for i, h in enumerate(self.heads):
            if dim % h:
                raise ValueError(f"stage {i}: dim {dim} not divisible by {h} heads")
            if self.family == "swin":
                side = self.resolution // self.patch // 2**i
                if side % self.window:
                    raise ValueError(f"stage {i}: feature map {side} not divisible by window")
                dim *= 2
        if self.family == "deit" and len(self.depths) != 1:
            raise ValueError("plain ViTs have a single stage")


ARCHS = {
    "deit-tiny": ArchSpec("deit", 192, (12,), (3,)),
    "deit-small": ArchSpec("deit", 384, (12,), (6,)),
    "deit-base": ArchSpec("deit", 768, (12,), (12,)),
    "swin-tiny": ArchSpec("swin", 96, (2, 2, 6, 2), (3, 6, 12, 24), patch=4),
    "swin-small": ArchSpec("swin", 96, (2, 2, 18, 2), (3, 6, 12, 24), patch=4),
}


def arch_from_vit(arch) -> ArchSpec:
    """Accounting description of a trainable ``ViTArch``."""
    return ArchSpec("deit", arch.dim, (arch.depth,), (arch.heads,), arch.mlp_ratio, arch.patch,
                    arch.image_size, arch.classes, arch.in_chans)


@dataclass
class LayerCost:
    name: str
    kind: str  # "matmul" or "elementwise"
    macs: int
    weight_bits: int = 32
    act_bits: int = 32
    matrix_params: int = 0
    vector_params: int = 0
    counted: bool = True  # included in the OPs total

    @property
    def binary(self) -> bool:
        return self.kind == "matmul" and self.weight_bits <= 8 and self.act_bits <= 8

    @property
    def bops(self) -> int:
        return self.macs * self.weight_bits * self.act_bits if self.binary and self.counted else 0

    @property
    def flops(self) -> int:
        return 0 if self.binary or not self.counted else self.macs


@dataclass
class OpsSizeReport:
    size_mb: float
    ops_1e8: float
    fp_params: int
    bin_params: int
    fp_flops: int
    bops: int
    accel_ratio: float
    real_size_mb: float
    real_ops_1e8: float
    raw_size_mb: float
    raw_ops_1e8: float
    layers: list = field(default_factory=list, repr=False)

    def summary(self) -> str:
        return f"{self.size_mb:.1f} MB, {self.ops_1e8:.1f}e8 OPs, {self.accel_ratio:.1f}x"

    def breakdown_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "kind", "macs", "weight_bits", "act_bits", "counted", "flops", "bops",
                        "matrix_params", "vector_params"])
            for c in self.layers:
                w.writerow([c.name, c.kind, c.macs, c.weight_bits, c.act_bits, int(c.counted),
                            c.flops, c.bops, c.matrix_params, c.vector_params])


def _trunc1(x: float) -> float:
    # one decimal, truncated; the small epsilon absorbs float noise in exact decimals
    return math.floor(x * 10 + 1e-9) / 10


def _layer_costs(arch: ArchSpec, p: PrecisionConfig, real_first_last: bool) -> list[LayerCost]:
    costs: list[LayerCost] = []
    add = costs.append
    res_p = arch.resolution // arch.patch
    dim = arch.embed_dim
    # calibrated default: first/last weights stored at block width, products at full precision
    edge_bits = 32 if real_first_last else min(p.mhsa_weights, p.mlp_weights)
    add(LayerCost("patch_embed", "matmul", res_p * res_p * arch.in_chans * arch.patch**2 * dim,
                  edge_bits, 32, arch.in_chans * arch.patch**2 * dim, dim, counted=real_first_last))
    side = res_p
    hidden_of = lambda d: int(d * arch.mlp_ratio)  # noqa: E731
    if arch.family == "deit":
        n = side * side + 1
        add(LayerCost("cls_pos", "elementwise", 0, vector_params=dim + n * dim, counted=False))
    else:
        add(LayerCost("patch_norm", "elementwise", side * side * dim, vector_params=2 * dim))
    attn_bits = p.attention_acts
    for s, (depth, heads) in enumerate(zip(arch.depths, arch.heads)):
        if arch.family == "deit":
            tokens, groups, n = side * side + 1, 1, side * side + 1
        else:
            tokens = side * side
            n = arch.window**2
            groups = tokens // n
        hid = hidden_of(dim)
        for b in range(depth):
            tag = f"s{s}.b{b}" if arch.family == "swin" else f"b{b}"
            scale_vec = 5 * heads if attn_bits == 1 else 0  # alpha_q,k,v,A and tau_A
            rel = (2 * arch.window - 1) ** 2 * heads if arch.family == "swin" else 0
            add(LayerCost(f"{tag}.ln1", "elementwise", tokens * dim, vector_params=2 * dim))
            add(LayerCost(f"{tag}.qkv", "matmul", tokens * dim * 3 * dim, p.mhsa_weights, p.mhsa_acts,
                          3 * dim * dim, 3 * dim + (3 * dim if p.mhsa_weights == 1 else 0)))
            add(LayerCost(f"{tag}.attn_qk", "matmul", groups * n * n * dim, attn_bits, attn_bits,
                          vector_params=scale_vec + rel))
            add(LayerCost(f"{tag}.attn_scale", "elementwise", groups * heads * n * n))
            add(LayerCost(f"{tag}.softmax", "elementwise", groups * heads * n * n))
            add(LayerCost(f"{tag}.attn_av", "matmul", groups * n * n * dim, attn_bits, attn_bits))
            add(LayerCost(f"{tag}.proj", "matmul", tokens * dim * dim, p.mhsa_weights, p.mhsa_acts,
                          dim * dim, dim + (dim if p.mhsa_weights == 1 else 0)))
            add(LayerCost(f"{tag}.res1", "elementwise", tokens * dim))
            add(LayerCost(f"{tag}.ln2", "elementwise", tokens * dim, vector_params=2 * dim))
            add(LayerCost(f"{tag}.fc1", "matmul", tokens * dim * hid, p.mlp_weights, p.mlp_acts,
                          dim * hid, hid + (hid if p.mlp_weights == 1 else 0)))
            add(LayerCost(f"{tag}.gelu", "elementwise", tokens * hid))
            add(LayerCost(f"{tag}.fc2", "matmul", tokens * hid * dim, p.mlp_weights, p.mlp_acts,
                          hid * dim, dim + (dim if p.mlp_weights == 1 else 0)))
            add(LayerCost(f"{tag}.res2", "elementwise", tokens * dim))
        if arch.family == "swin" and s < len(arch.depths) - 1:
            add(LayerCost(f"s{s}.merge_norm", "elementwise", tokens * dim, vector_params=4 * dim))
            side //= 2
            add(LayerCost(f"s{s}.merge", "matmul", side * side * 4 * dim * 2 * dim, p.mlp_weights,
                          p.mlp_acts, 4 * dim * 2 * dim, 2 * dim if p.mlp_weights == 1 else 0))
            dim *= 2
    tokens = side * side + (1 if arch.family == "deit" else 0)
    add(LayerCost("norm", "elementwise", tokens * dim, vector_params=2 * dim))
    add(LayerCost("head", "matmul", dim * arch.classes, edge_bits, 32, dim * arch.classes,
                  arch.classes))
    return costs


def ops_size_calc(arch, precision: PrecisionConfig | None = None, *,
                  real_first_last: bool = False) -> OpsSizeReport:
    """Theoretical model size (MB) and OPs (x1e8).

    OPs are FLOPs plus BOPs/64, one operation per multiply-accumulate or per
    elementwise result; a product counts as BOPs when both operands have at
    most 8 bits. Sizes use 32 bits per real value and the stated width per
    stored weight, in units of 1e6 bytes. Displayed values are truncated to
    one decimal and the acceleration ratio is formed from those.

    With ``real_first_last=False`` (the calibrated default) the patch
    embedding is left out of the OPs total and the patch-embedding and
    classifier weights are stored at block precision; ``True`` counts both
    layers at full precision.
    """
    if isinstance(arch, str):
        if arch not in ARCHS:
            raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHS)}")
        arch = ARCHS[arch]
    if not isinstance(arch, ArchSpec):
        arch = arch_from_vit(arch)
    precision = precision or PrecisionConfig.full()
    layers = _layer_costs(arch, precision, real_first_last)
    real = _layer_costs(arch, PrecisionConfig.full(), real_first_last)

    def totals(costs):
        flops = sum(c.flops for c in costs)
        bops = sum(c.bops for c in costs)
        fp_p = sum(c.vector_params for c in costs) + sum(
            c.matrix_params for c in costs if c.weight_bits == 32)
        bin_p = sum(c.matrix_params for c in costs if c.weight_bits < 32)
        bits = 32 * fp_p + sum(c.matrix_params * c.weight_bits for c in costs if c.weight_bits < 32)
        return flops, bops, fp_p, bin_p, bits / 8 / 1e6, (flops + bops / 64) / 1e8

    flops, bops, fp_p, bin_p, size, ops = totals(layers)
    *_, real_size, real_ops = totals(real)
    disp_ops, disp_real = _trunc1(ops), _trunc1(real_ops)
    accel = round(disp_real / disp_ops, 1) if disp_ops > 0 else math.inf
    return OpsSizeReport(_trunc1(size), disp_ops, fp_p, bin_p, flops, bops, accel,
                         _trunc1(real_size), disp_real, size, ops, layers)


def parse_bits(label: str) -> PrecisionConfig:
    """``"1-1"`` / ``"32-32"`` (weights-activations for every block module)."""
    try:
        w, a = (int(v) for v in label.split("-"))
    except ValueError:
        raise ValueError(f"bad bit label {label!r}; expected like '1-1'") from None
    return PrecisionConfig(w, a, w, a, a)


# -- precision ablation grid -----------------------------------------------------------------------

GRID_LABELS = ("w1a1", "w1a32", "w32a32")


@dataclass
class AblationGrid:
    cells: dict  # (mlp label, mhsa label) -> val accuracy

    def complete(self, labels=GRID_LABELS) -> bool:
        return all((m, h) in self.cells for m, h in itertools.product(labels, labels))

    def to_csv(self, path) -> None:
        labels = sorted({m for m, _ in self.cells}, key=GRID_LABELS.index)
        cols = sorted({h for _, h in self.cells}, key=GRID_LABELS.index)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mlp\\mhsa"] + list(cols))
            for m in labels:
                w.writerow([m] + [repr(self.cells.get((m, h), float("nan"))) for h in cols])


def precision_ablation_grid(base_cfg, data, teacher, labels=GRID_LABELS) -> AblationGrid:
    """Train one student per (MLP, MHSA) precision pair with a shared seed and budget."""
    from dataclasses import replace

    from .train import evaluate, train_student

    cells = {}
    for mlp, mhsa in itertools.product(labels, labels):
        cfg = replace(base_cfg, mlp=mlp, mhsa=mhsa)
        student, _ = train_student(cfg, teacher, data)
        cells[(mlp, mhsa)] = evaluate(student, data.x_val, data.y_val)
    return AblationGrid(cells)
