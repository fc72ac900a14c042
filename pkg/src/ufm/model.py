"""FPN-lite encoder and the MIA transformer (shared MSCA, generic FFN, routed assistants)."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .seeding import rng_for
from .synthdata import DataFormatError, Modality, pair_key

PHASES = ("pretrain-1", "pretrain-2", "pretrain-3", "finetune-same", "finetune-cross", "eval")
CKPT_MAGIC = b"UFMCKPT1"


class RoutingError(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    d: int = 64
    heads: int = 4
    d_ffn: int = 128
    d_fine: int = 32
    M: int = 2
    enc_channels: tuple[int, int] = (16, 32)
    modalities: tuple[str, ...] = ("OPT", "NIR", "SAR", "DEPTH", "UV")
    pairs: tuple[str, ...] = ("OPT+SAR", "NIR+OPT", "DEPTH+OPT")
    # "residual": layer l reads V_{l-1}; "ffn-sum": layer l reads G_{l-1}+A_{l-1} only
    layer_input: str = "residual"
    generic_ffn: bool = True
    assistant_ffn: bool = True
    fine_gain: float = 1.0  # fixed scale on unit-variance fine descriptors (inverse softmax temperature)
    upsample: str = "linear"  # or "nearest"
    # fine-loss gradients stop at the coarse trunk (1/4, 1/8 stages and transformer tokens)
    fine_stop_grad: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if not 1 <= self.M < self.L:
            raise ValueError(f"need 1 <= M < L, got M={self.M}, L={self.L}")
        if self.d % 4:
            raise ValueError("hidden size must be divisible by 4 for the 2-D positional encoding")
        if self.upsample not in ("linear", "nearest"):
            raise ValueError(f"unknown upsample mode '{self.upsample}'")
        if self.layer_input not in ("residual", "ffn-sum"):
            raise ValueError(f"unknown layer_input '{self.layer_input}'")
        for m in self.modalities:
            Modality.parse(m)
        for k in self.pairs:
            a, b = k.split("+")
            if pair_key(a, b) != k:
                raise ValueError(f"pair key '{k}' is not canonical (expected {pair_key(a, b)})")

    @property
    def d_assist(self) -> int:
        return self.d_ffn // 2

    @property
    def assistant_keys(self) -> tuple[str, ...]:
        return tuple(self.modalities) + tuple(self.pairs)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(L=9, d=768, heads=12, d_ffn=3072, d_fine=128, M=3, enc_channels=(128, 196))


def _linear_shapes(prefix: str, din: int, dout: int):
    return [(f"{prefix}.weight", (din, dout)), (f"{prefix}.bias", (dout,))]


def _conv_shapes(prefix: str, cin: int, cout: int, k: int):
    return [(f"{prefix}.weight", (cout, cin, k, k)), (f"{prefix}.bias", (cout,))]


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the registry and the checkpoint follow this order."""
    c1, c2 = cfg.enc_channels
    d, df = cfg.d, cfg.d_fine
    out = []
    out += _conv_shapes("encoder.conv1", 1, c1, 3)
    out += _conv_shapes("encoder.conv1b", c1, c1, 3)
    out += _conv_shapes("encoder.conv2", c1, c2, 3)
    out += _conv_shapes("encoder.conv3", c2, d, 3)
    out += _conv_shapes("encoder.top", d, df, 1)
    out += _conv_shapes("encoder.lat2", c2, df, 1)
    out += _conv_shapes("encoder.lat1", c1, df, 1)
    out += _conv_shapes("encoder.smooth", df, df, 3)
    for i in range(cfg.L):
        out += [(f"layer{i}.norm_attn.gain", (d,)), (f"layer{i}.norm_attn.bias", (d,))]
        for kind in ("self", "cross"):
            for w in "qkvo":
                out += _linear_shapes(f"layer{i}.attn.{kind}_{w}", d, d)
        out += [(f"layer{i}.norm_ffn.gain", (d,)), (f"layer{i}.norm_ffn.bias", (d,))]
        out += _linear_shapes(f"layer{i}.ffn.fc1", d, cfg.d_ffn)
        out += _linear_shapes(f"layer{i}.ffn.fc2", cfg.d_ffn, d)
    for key in cfg.assistant_keys:
        for i in range(cfg.L):
            out += _linear_shapes(f"assistant.{key}.layer{i}.fc1", d, cfg.d_assist)
            out += _linear_shapes(f"assistant.{key}.layer{i}.fc2", cfg.d_assist, d)
    out += [("head.norm.gain", (d,)), ("head.norm.bias", (d,))]
    out += _linear_shapes("head.c2f", d, df)
    out += _linear_shapes("head.fine", df, df)
    return out


def analytic_param_count(cfg: ModelConfig) -> int:
    """Closed-form scalar count, written independently of param_layout."""
    c1, c2 = cfg.enc_channels
    d, df, f, fa = cfg.d, cfg.d_fine, cfg.d_ffn, cfg.d_ffn // 2
    enc = (9 * c1 + c1) + (9 * c1 * c1 + c1) + (9 * c1 * c2 + c2) + (9 * c2 * d + d) \
        + (d * df + df) + (c2 * df + df) + (c1 * df + df) + (9 * df * df + df)
    per_layer = 2 * d + 8 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    per_assistant_layer = (d * fa + fa) + (fa * d + d)
    n_assist = len(cfg.modalities) + len(cfg.pairs)
    head = 2 * d + (d * df + df) + (df * df + df)
    return enc + cfg.L * per_layer + n_assist * cfg.L * per_assistant_layer + head


HEAD_INIT_SCALE = 0.1  # head projections feed a normalization; small weights move faster under Adam


def _init_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name.startswith("assistant.") and ".fc2." in name:
        return np.zeros(shape)  # training starts at the generic-only baseline
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    if name.startswith("head."):
        bound *= HEAD_INIT_SCALE
    return rng.uniform(-bound, bound, size=shape)


def positional_encoding(rows: int, cols: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code, (rows*cols, d): first half encodes x, second half y."""
    q = d // 4
    freq = 1.0 / (10000.0 ** (np.arange(q) / q))
    yy, xx = np.mgrid[0:rows, 0:cols]
    x, y = xx.reshape(-1, 1) * freq, yy.reshape(-1, 1) * freq
    return np.concatenate([np.sin(x), np.cos(x), np.sin(y), np.cos(y)], axis=1)


# --------------------------------------------------------------------- routing

def route(modality_a, modality_b, layer: int, L: int, M: int, phase: str = "eval",
          available: tuple[str, ...] | None = None) -> tuple[str, str]:
    """Assistant key for each stream at ``layer``."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase '{phase}'")
    if not 0 <= layer < L:
        raise ValueError(f"layer {layer} outside 0..{L - 1}")
    a, b = Modality.parse(modality_a).value, Modality.parse(modality_b).value
    if a == b:
        keys = (a, a)
    elif layer < L - M:
        keys = (a, b)
    else:
        k = pair_key(a, b)
        keys = (k, k)
    if available is not None:
        for k in keys:
            if k not in available:
                raise RoutingError(f"no assistant '{k}' for pair ({a}, {b}) at layer {layer}")
    return keys


# ----------------------------------------------------------------------- model

def _linear(x: Tensor, p: dict, prefix: str) -> Tensor:
    return nx.matmul(x, p[prefix + ".weight"]) + p[prefix + ".bias"]


def _affine_norm(x: Tensor, p: dict, prefix: str) -> Tensor:
    return nx.layernorm(x) * p[prefix + ".gain"] + p[prefix + ".bias"]


def upsample(x: Tensor, k: int) -> Tensor:
    """Nearest-neighbour ×k on the last two axes of (B, C, H, W)."""
    b, c, h, w = x.shape
    ones = np.ones((1, 1, 1, k, 1, k), dtype=x.dtype)
    return nx.reshape(nx.reshape(x, (b, c, h, 1, w, 1)) * ones, (b, c, h * k, w * k))


def _interp_matrix(n: int, k: int) -> np.ndarray:
    """(n*k, n) linear weights; output j sits at input coordinate j/k (clamped at the far edge)."""
    u = np.minimum(np.arange(n * k) / k, n - 1)
    i0 = np.minimum(np.floor(u).astype(int), max(n - 2, 0))
    f = u - i0
    U = np.zeros((n * k, n))
    U[np.arange(n * k), i0] += 1.0 - f
    if n > 1:
        U[np.arange(n * k), i0 + 1] += f
    return U


def upsample_linear(x: Tensor, k: int) -> Tensor:
    """Separable linear ×k on the last two axes of (B, C, H, W)."""
    _, _, h, w = x.shape
    Uh = _interp_matrix(h, k).astype(x.dtype)
    Uw = _interp_matrix(w, k).T.astype(x.dtype)
    return nx.matmul(nx.matmul(Uh, x), Uw)


@dataclass
class LayerState:
    Vp: Tensor
    G: Tensor
    A: Tensor
    V: Tensor


@dataclass
class PairOutput:
    coarse_a: Tensor   # (N, d) after the head norm
    coarse_b: Tensor
    fine_a: Tensor     # (h/2, w/2, d_fine)
    fine_b: Tensor
    states: list[LayerState] = field(default_factory=list)
    routes: list[tuple[str, str]] = field(default_factory=list)


class MiaModel:
    """Parameter registry plus the forward computation."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=None):
        self.cfg = cfg or ModelConfig()
        dtype = dtype or nx.default_dtype()
        rng = rng_for(seed, "model-init")
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in param_layout(self.cfg):
            self.params[name] = Tensor(_init_value(name, shape, rng), requires_grad=True,
                                       name=name, dtype=dtype)

    # registry helpers
    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: dict, strict: bool = True):
        for k, v in state.items():
            if k not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter '{k}'")
                continue
            t = self.params[k]
            if tuple(v.shape) != t.shape:
                raise DataFormatError(f"shape mismatch for '{k}': {tuple(v.shape)} vs {t.shape}")
            t.data = np.array(v, dtype=t.dtype)
        if strict:
            missing = set(self.params) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)[:5]}")

    def astype(self, dtype) -> "MiaModel":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def with_config(self, **kw) -> "MiaModel":
        """Same parameters under a modified config (switches only)."""
        m = MiaModel.__new__(MiaModel)
        m.cfg = replace(self.cfg, **kw)
        m.params = self.params
        return m

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # forward pieces
    def encode(self, imgs) -> tuple[Tensor, Tensor]:
        """imgs (B, H, W) -> coarse (B, d, H/8, W/8), fine (B, d_fine, H/2, W/2).

        Stride-2 stages at 1/2, 1/4, 1/8 (the 1/2 stage has an extra 3x3 conv);
        a top-down path with 1x1 laterals merges back to 1/2.
        """
        x = nx.as_tensor(imgs)
        if x.ndim == 2:
            x = nx.reshape(x, (1,) + x.shape)
        b, h, w = x.shape
        if h % 8 or w % 8:
            raise nx.ShapeError(f"image size {h}x{w} not divisible by 8")
        p = self.params
        x = nx.reshape(x, (b, 1, h, w))
        c1 = nx.relu(nx.conv2d(x, p["encoder.conv1.weight"], p["encoder.conv1.bias"], stride=2, pad=1))
        c1 = nx.relu(nx.conv2d(c1, p["encoder.conv1b.weight"], p["encoder.conv1b.bias"], pad=1))
        c2 = nx.relu(nx.conv2d(c1, p["encoder.conv2.weight"], p["encoder.conv2.bias"], stride=2, pad=1))
        c3 = nx.relu(nx.conv2d(c2, p["encoder.conv3.weight"], p["encoder.conv3.bias"], stride=2, pad=1))
        stop = self.cfg.fine_stop_grad
        top = nx.conv2d(c3.detach() if stop else c3, p["encoder.top.weight"], p["encoder.top.bias"])
        up = upsample_linear if self.cfg.upsample == "linear" else upsample
        m2 = up(top, 2) + nx.conv2d(c2.detach() if stop else c2, p["encoder.lat2.weight"], p["encoder.lat2.bias"])
        m1 = up(m2, 2) + nx.conv2d(c1.detach() if stop else c1, p["encoder.lat1.weight"], p["encoder.lat1.bias"])
        fine = nx.conv2d(m1, p["encoder.smooth.weight"], p["encoder.smooth.bias"], pad=1)
        return c3, fine

    def _attend(self, q_in: Tensor, kv_in: Tensor, prefix: str) -> Tensor:
        p, H = self.params, self.cfg.heads
        s, n, d = q_in.shape
        dh = d // H

        def split(t):
            return nx.transpose(nx.reshape(t, (s, -1, H, dh)), (0, 2, 1, 3))

        q = split(_linear(q_in, p, prefix + "_q"))
        k = split(_linear(kv_in, p, prefix + "_k"))
        v = split(_linear(kv_in, p, prefix + "_v"))
        att = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)), axis=-1)
        o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (s, n, d))
        return _linear(o, p, prefix + "_o")

    def msca(self, y: Tensor, i: int) -> Tensor:
        """Self-attention in each stream, then cross-attention to the other stream."""
        sa = self._attend(y, y, f"layer{i}.attn.self")
        u = y + sa
        ca = self._attend(u, nx.gather(u, [1, 0], axis=0), f"layer{i}.attn.cross")
        return sa + ca

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return _linear(nx.gelu(_linear(x, self.params, prefix + ".fc1")), self.params, prefix + ".fc2")

    def _assistant(self, x: Tensor, keys: tuple[str, str], i: int) -> Tensor:
        for k in keys:
            if k not in self.cfg.assistant_keys:
                raise RoutingError(f"unknown assistant '{k}'")
        if keys[0] == keys[1]:
            return self._ffn(x, f"assistant.{keys[0]}.layer{i}")
        outs = [self._ffn(nx.gather(x, [s], axis=0), f"assistant.{keys[s]}.layer{i}") for s in (0, 1)]
        return nx.concat(outs, axis=0)

    def mia_layer(self, x: Tensor, i: int, keys: tuple[str, str]) -> LayerState:
        """x: (2, N, d) layer input; both streams share attention and generic FFN weights."""
        p = self.params
        vp = self.msca(_affine_norm(x, p, f"layer{i}.norm_attn"), i) + x
        h = _affine_norm(vp, p, f"layer{i}.norm_ffn")
        zero = nx.as_tensor(np.zeros(vp.shape, dtype=vp.dtype))
        g = self._ffn(h, f"layer{i}.ffn") if self.cfg.generic_ffn else zero
        a = self._assistant(h, keys, i) if self.cfg.assistant_ffn else zero
        return LayerState(vp, g, a, g + a + vp)

    def forward_pair(self, img_a, img_b, modalities=("OPT", "OPT"), phase: str = "eval",
                     keep_states: bool = False) -> PairOutput:
        a, b = np.asarray(img_a), np.asarray(img_b)
        if a.shape != b.shape:
            raise nx.ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
        cfg = self.cfg
        coarse, fine = self.encode(np.stack([a, b]))
        _, d, hc, wc = coarse.shape
        tokens = nx.transpose(nx.reshape(coarse, (2, d, hc * wc)), (0, 2, 1))
        x = tokens + positional_encoding(hc, wc, d).astype(tokens.dtype)
        states, routes = [], []
        for i in range(cfg.L):
            keys = route(modalities[0], modalities[1], i, cfg.L, cfg.M, phase, cfg.assistant_keys)
            st = self.mia_layer(x, i, keys)
            routes.append(keys)
            if keep_states:
                states.append(st)
            x = st.V if cfg.layer_input == "residual" else st.G + st.A
        out = _affine_norm(x, self.params, "head.norm")
        cf = _linear(out.detach() if cfg.fine_stop_grad else out, self.params, "head.c2f")  # (2, N, d_fine)
        cf = nx.reshape(nx.transpose(cf, (0, 2, 1)), (2, cfg.d_fine, hc, wc))
        hf, wf = fine.shape[2], fine.shape[3]
        fused = fine + (upsample_linear if cfg.upsample == "linear" else upsample)(cf, hf // hc)
        fused = nx.transpose(fused, (0, 2, 3, 1))  # (2, hf, wf, d_fine)
        fo = nx.layernorm(_linear(fused, self.params, "head.fine"))  # unit-variance descriptors
        if self.cfg.fine_gain != 1.0:
            fo = nx.scale(fo, self.cfg.fine_gain)
        fa, fb = nx.gather(fo, 0, axis=0), nx.gather(fo, 1, axis=0)
        ca, cb = nx.gather(out, 0, axis=0), nx.gather(out, 1, axis=0)
        return PairOutput(ca, cb, fa, fb, states, routes)


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, tensors: "OrderedDict[str, np.ndarray] | dict") -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        (n,) = struct.unpack_from("<I", data, 8)
        off = 12
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 4 * size > len(data):
                raise DataFormatError(f"{path}: truncated payload for '{name}'")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error:
        raise DataFormatError(f"{path}: truncated checkpoint") from None
    if off != len(data):
        raise DataFormatError(f"{path}: {len(data) - off} trailing bytes")
    return out


def infer_config(state: dict, base: ModelConfig | None = None) -> ModelConfig:
    """Recover the size fields (L, d, d_ffn, d_fine, encoder widths) from parameter shapes.

    Head count and M are not recoverable from shapes and come from ``base``.
    """
    base = base or ModelConfig()
    try:
        L = sum(1 for k in state if k.startswith("layer") and k.endswith(".norm_attn.gain"))
        d = int(state["layer0.norm_attn.gain"].shape[0])
        d_ffn = int(state["layer0.ffn.fc1.weight"].shape[1])
        d_fine = int(state["head.fine.weight"].shape[1])
        enc = (int(state["encoder.conv1.weight"].shape[0]), int(state["encoder.conv2.weight"].shape[0]))
    except KeyError as exc:
        raise DataFormatError(f"checkpoint lacks {exc}") from None
    heads = base.heads if d % base.heads == 0 else 1
    return replace(base, L=L, d=d, d_ffn=d_ffn, d_fine=d_fine, enc_channels=enc, heads=heads,
                   M=min(base.M, L - 1))


def model_from_checkpoint(path, cfg: ModelConfig | None = None) -> MiaModel:
    state = load_checkpoint(path)
    m = MiaModel(cfg or infer_config(state))
    m.load_state_dict({k: v for k, v in state.items() if k in m.params})
    return m
