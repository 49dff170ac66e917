"""Binarized transformer building blocks and a tiny plain ViT.

Binarized matrix products run on the packed XNOR/popcount kernels in
``bitops``; their backward passes are ordinary dense products of the +1/-1
(or 0/1) operands, with straight-through gating applied by the binarizers
upstream.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .bitops import ShapeError, pack_rows, packed_gemm

BITS = (1, 32)
ATTN_BINARIZERS = ("threshold_01", "sign_pm1", "none")


@dataclass
class PrecisionConfig:
    """Bit-widths per module; patch embedding and classifier stay 32/32."""

    mhsa_weights: int = 32
    mhsa_acts: int = 32
    mlp_weights: int = 32
    mlp_acts: int = 32
    attention_acts: int = 32

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value not in BITS:
                raise ValueError(f"{name} must be 1 or 32, got {value}")

    @classmethod
    def full(cls) -> "PrecisionConfig":
        return cls()

    @classmethod
    def binary(cls) -> "PrecisionConfig":
        return cls(1, 1, 1, 1, 1)

    @classmethod
    def from_labels(cls, mhsa: str = "w1a1", mlp: str = "w1a1") -> "PrecisionConfig":
        """Build from ``wXaY`` labels, e.g. ``from_labels("w1a32", "w1a1")``.

        The self-attention activations (q, k, v and the attention map) follow
        the MHSA activation width.
        """
        mw, ma = _parse_label(mhsa)
        lw, la = _parse_label(mlp)
        return cls(mw, ma, lw, la, ma)

    def labels(self) -> tuple[str, str]:
        return (f"w{self.mhsa_weights}a{self.mhsa_acts}", f"w{self.mlp_weights}a{self.mlp_acts}")

    @property
    def is_full(self) -> bool:
        return all(v == 32 for v in asdict(self).values())


def _parse_label(label: str) -> tuple[int, int]:
    try:
        w, a = label.lower().lstrip("w").split("a")
        return int(w), int(a)
    except ValueError:
        raise ValueError(f"bad precision label {label!r}; expected like 'w1a32'") from None


# -- packed products as differentiable ops ---------------------------------------


def bit_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b^T`` (contracting last axes) for +1/-1 operands via popcount.

    ``b`` is either a 2-D weight broadcast over ``a``'s leading axes or has
    leading axes matching ``a``.
    """
    k = a.shape[-1]
    if b.shape[-1] != k:
        raise ShapeError(f"bit_matmul reduction mismatch {a.shape} vs {b.shape}")
    ad_, bd = a.data, b.data
    out = packed_gemm(pack_rows(ad_), pack_rows(bd), k).astype(np.float64)

    def bw(g):
        if bd.ndim == 2:
            gb = g.reshape(-1, g.shape[-1]).T @ ad_.reshape(-1, k)
            return g @ bd, gb
        return g @ bd, np.swapaxes(g, -1, -2) @ ad_

    return ad.custom_op("bit_matmul", out, (a, b), bw)


def bit_matmul01(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b^T`` for a {0,1} left operand and a +1/-1 right operand.

    With ``s = 2a - 1`` in {-1,+1}: ``a . b = (s . b + 1 . b) / 2``, both
    terms being XNOR/popcount products.
    """
    k = a.shape[-1]
    ad_, bd = a.data, b.data
    bw_words = pack_rows(bd)
    signed = packed_gemm(pack_rows(2.0 * ad_ - 1.0), bw_words, k)
    ones = np.ones(bd.shape[:-2] + (1, k))
    colsum = packed_gemm(pack_rows(ones), bw_words, k)
    out = (signed + colsum).astype(np.float64) / 2.0

    def bw(g):
        return g @ bd, np.swapaxes(g, -1, -2) @ ad_

    return ad.custom_op("bit_matmul01", out, (a, b), bw)


# -- layers -----------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


class BinaryLinear:
    """Linear layer with optional 1-bit weights and/or inputs.

    At w1a1 the output is ``alpha_w * (sign(x) . sign(W)^T) + bias`` with
    the product computed on packed bits.
    """

    def __init__(self, c_in, c_out, weight_bits=32, act_bits=32, *, rng=None, name="linear"):
        if weight_bits not in BITS or act_bits not in BITS:
            raise ValueError("bit-widths must be 1 or 32")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.weight_bits, self.act_bits = weight_bits, act_bits
        self.weight = Tensor(_xavier(rng, c_out, c_in), True, f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out), True, f"{name}.bias")
        self.alpha = Tensor(np.ones(c_out), weight_bits == 1, f"{name}.alpha_w")

    def parameters(self) -> dict[str, Tensor]:
        params = {self.weight.name: self.weight, self.bias.name: self.bias}
        if self.weight_bits == 1:
            params[self.alpha.name] = self.alpha
        return params

    def calibrate(self) -> None:
        """Set each channel scale to the mean |w| of its latent weight row."""
        self.alpha.data[:] = np.maximum(np.abs(self.weight.data).mean(axis=1), 1e-8)

    def __call__(self, x: Tensor) -> Tensor:
        return binary_linear_forward(x, self)


def binary_linear_forward(x: Tensor, layer: BinaryLinear) -> Tensor:
    if x.shape[-1] != layer.c_in:
        raise ShapeError(f"{layer.name}: input width {x.shape[-1]} != {layer.c_in}")
    bin_w, bin_a = layer.weight_bits == 1, layer.act_bits == 1
    w = ad.sign_ste(layer.weight, 1.0) if bin_w else layer.weight
    xin = ad.sign_ste(x, 1.0) if bin_a else x
    if bin_w and bin_a:
        out = bit_matmul(xin, w)
    else:
        out = ad.matmul(xin, ad.transpose(w))
    if bin_w:
        out = out * layer.alpha
    return out + layer.bias


@dataclass
class SteRecord:
    """Binarizer inputs from the last forward: values and broadcast clip width."""

    values: np.ndarray  # (B, h, rows, cols), already centred for threshold binarizers
    alpha: np.ndarray  # broadcastable to values

    def zero_fraction(self) -> np.ndarray:
        outside = np.abs(self.values) > self.alpha
        return outside.mean(axis=(0, 2, 3))


@dataclass
class AttentionRecord:
    scores: Tensor  # pre-softmax (scaled) scores, (B, h, T, T)
    attn: Tensor  # post-softmax attention, (B, h, T, T)
    ste: dict = field(default_factory=dict)


class BinarizedMHSA:
    """Multi-head self-attention with head-wise scaling factors.

    ``alpha_q``, ``alpha_k``, ``alpha_v`` and ``alpha_A`` hold one positive
    scale per head. They both scale the binarized products and set the
    straight-through clip window of the matching binarizer. The products
    ``alpha_q * alpha_k`` and ``alpha_A * alpha_v`` are formed on the fly.
    """

    def __init__(
        self,
        dim,
        heads,
        precision: PrecisionConfig,
        *,
        n_tokens,
        attn_binarizer="threshold_01",
        learnable_scales=True,
        rng=None,
        name="attn",
    ):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        if attn_binarizer not in ATTN_BINARIZERS:
            raise ValueError(f"attn_binarizer must be one of {ATTN_BINARIZERS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.precision = precision
        self.attn_binarizer = attn_binarizer
        self.learnable_scales = learnable_scales
        wb, ab = precision.mhsa_weights, precision.mhsa_acts
        self.q = BinaryLinear(dim, dim, wb, ab, rng=rng, name=f"{name}.q")
        self.k = BinaryLinear(dim, dim, wb, ab, rng=rng, name=f"{name}.k")
        self.v = BinaryLinear(dim, dim, wb, ab, rng=rng, name=f"{name}.v")
        self.proj = BinaryLinear(dim, dim, wb, ab, rng=rng, name=f"{name}.proj")
        learn = learnable_scales and self.binarized
        self.alpha_q = Tensor(np.ones(heads), learn, f"{name}.alpha_q")
        self.alpha_k = Tensor(np.ones(heads), learn, f"{name}.alpha_k")
        self.alpha_v = Tensor(np.ones(heads), learn, f"{name}.alpha_v")
        self.alpha_A = Tensor(np.ones(heads), learn, f"{name}.alpha_A")
        self.tau_A = Tensor(np.full(heads, 1.0 / n_tokens), learn, f"{name}.tau_A")
        self.calibrating = False

    @property
    def binarized(self) -> bool:
        return self.precision.attention_acts == 1

    def head_scales(self) -> list[Tensor]:
        return [self.alpha_q, self.alpha_k, self.alpha_v, self.alpha_A, self.tau_A]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for lin in (self.q, self.k, self.v, self.proj):
            params.update(lin.parameters())
        if self.binarized:
            params.update({t.name: t for t in self.head_scales()})
        return params

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return ad.transpose(t.reshape(b, n, self.heads, self.head_dim), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> tuple[Tensor, AttentionRecord]:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected (B, T, {self.dim}), got {x.shape}")
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if self.binarized:
            o, rec = self._binary_attention(q, k, v)
        else:
            o, rec = mhsa_attention_real(q, k, v)
        b, _, n, _ = o.shape
        o = ad.transpose(o, (0, 2, 1, 3)).reshape(b, n, self.dim)
        return self.proj(o), rec

    def _binary_attention(self, q, k, v):
        h = self.heads
        col = (h, 1, 1)
        if self.calibrating and self.learnable_scales:
            for t, a in ((q, self.alpha_q), (k, self.alpha_k), (v, self.alpha_v)):
                a.data[:] = np.maximum(np.abs(t.data).mean(axis=(0, 2, 3)), 1e-6)
        aq, ak, av = (a.reshape(col) for a in (self.alpha_q, self.alpha_k, self.alpha_v))
        aA, tau = self.alpha_A.reshape(col), self.tau_A.reshape(col)
        for a in (self.alpha_q, self.alpha_k, self.alpha_v, self.alpha_A):
            if np.any(a.data <= 0):
                raise ValueError(f"{a.name} must be positive")
        bq = ad.sign_ste(q, aq)
        bk = ad.sign_ste(k, ak)
        bv = ad.sign_ste(v, av)
        s = bit_matmul(bq, bk)
        scores = s * ((aq * ak) * (1.0 / math.sqrt(self.head_dim)))
        attn = ad.softmax(scores, axis=-1)
        ste = {
            "q": SteRecord(q.data, aq.data),
            "k": SteRecord(k.data, ak.data),
            "v": SteRecord(v.data, av.data),
        }
        if self.attn_binarizer == "threshold_01":
            if self.calibrating and self.learnable_scales:
                self._calibrate_alpha_A(attn.data >= tau.data)
                aA = self.alpha_A.reshape(col)
            bA = ad.threshold_ste(attn, tau, aA)
            ste["A"] = SteRecord(attn.data - tau.data, aA.data)
            o = bit_matmul01(bA, ad.swap_last(bv))
        elif self.attn_binarizer == "sign_pm1":
            if self.calibrating and self.learnable_scales:
                self._calibrate_alpha_A(np.ones(attn.shape, dtype=bool))
                aA = self.alpha_A.reshape(col)
            bA = ad.sign_ste(attn, aA)
            ste["A"] = SteRecord(attn.data, aA.data)
            o = bit_matmul(bA, ad.swap_last(bv))
        else:
            o = ad.matmul(attn, bv)
            aA = Tensor(np.ones(col))
        o = o * (aA * av)
        return o, AttentionRecord(scores, attn, ste)

    def _calibrate_alpha_A(self, selected: np.ndarray) -> None:
        # one over the mean number of attended keys per row, so that
        # alpha_A * (b_A . b_v) averages the selected values
        counts = selected.sum(axis=-1).mean(axis=(0, 2))
        self.alpha_A.data[:] = 1.0 / np.maximum(counts, 1.0)


def mhsa_attention_real(q: Tensor, k: Tensor, v: Tensor):
    """Real-valued scaled dot-product attention on split heads (B, h, T, d)."""
    d = q.shape[-1]
    scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / math.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    return ad.matmul(attn, v), AttentionRecord(scores, attn)


def mhsa_forward_real(x: Tensor, mhsa: BinarizedMHSA) -> tuple[Tensor, Tensor]:
    """Real-valued MHSA ignoring the module's precision; returns (a_out, A)."""
    saved = mhsa.precision
    full = PrecisionConfig.full()
    lins = (mhsa.q, mhsa.k, mhsa.v, mhsa.proj)
    bits = [(l.weight_bits, l.act_bits) for l in lins]
    try:
        mhsa.precision = full
        for l in lins:
            l.weight_bits = l.act_bits = 32
        out, rec = mhsa(x)
    finally:
        mhsa.precision = saved
        for l, (wb, ab) in zip(lins, bits):
            l.weight_bits, l.act_bits = wb, ab
    return out, rec.attn


def mhsa_forward_binary(x: Tensor, mhsa: BinarizedMHSA) -> tuple[Tensor, Tensor, Tensor]:
    """Binarized MHSA; returns (a_out, attention, pre-softmax scores)."""
    if not mhsa.binarized:
        raise ContractError("module is configured with real-valued attention")
    out, rec = mhsa(x)
    return out, rec.attn, rec.scores


class Block:
    def __init__(self, dim, heads, mlp_ratio, precision, *, n_tokens, attn_binarizer,
                 learnable_scales, rng, name):
        self.name = name
        self.precision = precision
        self.ln1_g = Tensor(np.ones(dim), True, f"{name}.ln1.gamma")
        self.ln1_b = Tensor(np.zeros(dim), True, f"{name}.ln1.beta")
        self.ln2_g = Tensor(np.ones(dim), True, f"{name}.ln2.gamma")
        self.ln2_b = Tensor(np.zeros(dim), True, f"{name}.ln2.beta")
        self.attn = BinarizedMHSA(
            dim, heads, precision, n_tokens=n_tokens, attn_binarizer=attn_binarizer,
            learnable_scales=learnable_scales, rng=rng, name=f"{name}.attn",
        )
        hidden = int(dim * mlp_ratio)
        wb, ab = precision.mlp_weights, precision.mlp_acts
        self.fc1 = BinaryLinear(dim, hidden, wb, ab, rng=rng, name=f"{name}.fc1")
        self.fc2 = BinaryLinear(hidden, dim, wb, ab, rng=rng, name=f"{name}.fc2")

    def parameters(self) -> dict[str, Tensor]:
        params = {t.name: t for t in (self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b)}
        params.update(self.attn.parameters())
        params.update(self.fc1.parameters())
        params.update(self.fc2.parameters())
        return params

    def linears(self) -> list[BinaryLinear]:
        a = self.attn
        return [a.q, a.k, a.v, a.proj, self.fc1, self.fc2]

    def __call__(self, x: Tensor) -> tuple[Tensor, AttentionRecord]:
        a, rec = self.attn(ad.layernorm(x, self.ln1_g, self.ln1_b))
        x = x + a
        u = self.fc1(ad.layernorm(x, self.ln2_g, self.ln2_b))
        if self.precision.mlp_acts == 32:
            # at a1 the next layer's sign binarizer is the nonlinearity
            u = ad.gelu(u)
        return x + self.fc2(u), rec


@dataclass(frozen=True)
class ViTArch:
    image_size: int = 8
    in_chans: int = 1
    patch: int = 2
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    classes: int = 10

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    def describe(self) -> str:
        return ";".join(f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def parse(cls, text: str) -> "ViTArch":
        kv = dict(item.split("=", 1) for item in text.strip().split(";") if item)
        types = {k: type(v) for k, v in asdict(cls()).items()}
        return cls(**{k: types[k](v) for k, v in kv.items()})


class TinyViT:
    """Plain ViT: real patch embedding and head, configurable-precision blocks."""

    def __init__(self, arch: ViTArch = ViTArch(), precision: PrecisionConfig | None = None, *,
                 attn_binarizer="threshold_01", learnable_scales=True, seed=0):
        self.arch = arch
        self.precision = precision or PrecisionConfig.full()
        self.attn_binarizer = attn_binarizer
        self.learnable_scales = learnable_scales
        rng = np.random.default_rng(seed)
        d, pdim = arch.dim, arch.patch * arch.patch * arch.in_chans
        self.patch_w = Tensor(_xavier(rng, d, pdim), True, "patch_embed.weight")
        self.patch_b = Tensor(np.zeros(d), True, "patch_embed.bias")
        self.cls_token = Tensor(rng.normal(0, 0.02, (1, 1, d)), True, "cls_token")
        self.pos_embed = Tensor(rng.normal(0, 0.02, (1, arch.n_tokens, d)), True, "pos_embed")
        self.blocks = [
            Block(d, arch.heads, arch.mlp_ratio, self.precision, n_tokens=arch.n_tokens,
                  attn_binarizer=attn_binarizer, learnable_scales=learnable_scales,
                  rng=rng, name=f"blocks.{i}")
            for i in range(arch.depth)
        ]
        self.norm_g = Tensor(np.ones(d), True, "norm.gamma")
        self.norm_b = Tensor(np.zeros(d), True, "norm.beta")
        self.head_w = Tensor(_xavier(rng, arch.classes, d), True, "head.weight")
        self.head_b = Tensor(np.zeros(arch.classes), True, "head.bias")
        self.last_tape = None
        self.last_records: list[AttentionRecord] = []

    def parameters(self) -> dict[str, Tensor]:
        params = {t.name: t for t in (self.patch_w, self.patch_b, self.cls_token, self.pos_embed)}
        for blk in self.blocks:
            params.update(blk.parameters())
        params.update({t.name: t for t in (self.norm_g, self.norm_b, self.head_w, self.head_b)})
        return params

    def all_tensors(self) -> dict[str, Tensor]:
        """Every stored tensor, including frozen head-wise scales."""
        out = dict(self.parameters())
        for blk in self.blocks:
            out.update({t.name: t for t in blk.attn.head_scales()})
            for lin in blk.linears():
                out[lin.alpha.name] = lin.alpha
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.parameters().items() if t.requires_grad}

    def freeze(self) -> None:
        for t in self.all_tensors().values():
            t.requires_grad = False

    def patchify(self, images: np.ndarray) -> np.ndarray:
        a = self.arch
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != a.in_chans or x.shape[2] != a.image_size \
                or x.shape[3] != a.image_size:
            raise ShapeError(
                f"expected images (B, {a.in_chans}, {a.image_size}, {a.image_size}), "
                f"got {np.shape(images)}"
            )
        b, c, hgt, wid = x.shape
        p = a.patch
        x = x.reshape(b, c, hgt // p, p, wid // p, p).transpose(0, 2, 4, 3, 5, 1)
        return x.reshape(b, (hgt // p) * (wid // p), p * p * c)

    def __call__(self, images) -> tuple[Tensor, list[AttentionRecord]]:
        return model_forward(images, self)

    def calibrate(self, images) -> None:
        """One forward pass that sets every scale from live statistics."""
        for blk in self.blocks:
            for lin in blk.linears():
                if lin.weight_bits == 1:
                    lin.calibrate()
            blk.attn.calibrating = True
        try:
            model_forward(images, self)
        finally:
            for blk in self.blocks:
                blk.attn.calibrating = False


def model_forward(images, model: TinyViT) -> tuple[Tensor, list[AttentionRecord]]:
    patches = Tensor(model.patchify(images))
    b = patches.shape[0]
    x = ad.matmul(patches, ad.transpose(model.patch_w)) + model.patch_b
    cls = ad.mul(Tensor(np.ones((b, 1, 1))), model.cls_token)
    x = ad.concat([cls, x], axis=1) + model.pos_embed
    records = []
    for blk in model.blocks:
        x, rec = blk(x)
        records.append(rec)
    x = ad.layernorm(x, model.norm_g, model.norm_b)
    logits = ad.matmul(x[:, 0, :], ad.transpose(model.head_w)) + model.head_b
    model.last_tape = ad.current_tape()
    model.last_records = records
    return logits, records


def ste_grad_fraction(model: TinyViT) -> list[dict[str, np.ndarray]]:
    """Per block and binarizer, the per-head fraction of zeroed STE gradients.

    Reads the binarizer inputs of the last forward pass, which must have been
    followed by a backward pass on the same tape.
    """
    tape = model.last_tape
    if tape is None or not tape.backward_done:
        raise ContractError("ste_grad_fraction needs a completed forward + backward pass")
    return [
        {kind: r.zero_fraction() for kind, r in rec.ste.items()} for rec in model.last_records
    ]
