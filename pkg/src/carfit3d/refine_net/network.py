"""Refinement CNN in NumPy with hand-written backward passes.

Input is a context grid in channels-last layout ``(B, 54, 32, 24)``: the
24 height cells are channels over the 54 x 32 length-width plane, so all
convolutions are 2D. Each block is conv3x3 (pad 1) -> ELU -> maxpool 2x2;
then a fully connected ELU layer and the heads. Stage 1 has a 7-value
regression head and a 2-way classification head side by side; stage 2 only
classifies.

Parameter file layout (little-endian)::

    b"CFRN" u16 version=1 u16 stage
    u32 n_blocks  u32[n_blocks] widths  u32 fc_hidden  u32[3] input shape
    f64[9] anchor (xc yc zc xl yl zl L H W)  f64[7] target_std
    u32 n_tensors  n_tensors x { u16 len, name, u32 ndim, u32[ndim], f32[...] }
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .targets import CanonicalAnchor

_MAGIC = b"CFRN"
_VERSION = 1
DEFAULT_TARGET_STD = (0.05,) * 7


class ShapeMismatch(ValueError):
    pass


class ParamsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    stage: int = 1
    widths: tuple = (32, 64, 128, 128)
    fc_hidden: int = 256
    in_shape: tuple = (54, 32, 24)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")

    @property
    def n_reg(self) -> int:
        return 7 if self.stage == 1 else 0


def _im2col(x):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # B H W C 3 3
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, 9 * C)


def _col2im(dcols, shape):
    B, H, W, C = shape
    d = dcols.reshape(B, H, W, 3, 3, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + H, kx:kx + W, :] += d[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _pool(x):
    B, H, W, C = x.shape
    h2, w2 = H // 2, W // 2
    xr = x[:, : 2 * h2, : 2 * w2, :].reshape(B, h2, 2, w2, 2, C)
    xw = xr.transpose(0, 1, 3, 5, 2, 4).reshape(B, h2, w2, C, 4)
    idx = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _unpool(dout, idx, shape):
    B, H, W, C = shape
    h2, w2 = H // 2, W // 2
    dw = np.zeros((B, h2, w2, C, 4), dtype=dout.dtype)
    np.put_along_axis(dw, idx[..., None], dout[..., None], axis=-1)
    dr = dw.reshape(B, h2, w2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * h2, 2 * w2, C)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, : 2 * h2, : 2 * w2, :] = dr
    return dx


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def smooth_l1_with_grad(diff):
    ad = np.abs(diff)
    loss = np.where(ad < 1.0, 0.5 * diff * diff, ad - 0.5)
    grad = np.where(ad < 1.0, diff, np.sign(diff))
    return loss, grad


class RefineNet:
    """Parameters plus forward/backward for one refinement stage."""

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32,
                 anchor: CanonicalAnchor | None = None, target_std=DEFAULT_TARGET_STD,
                 zero_heads: bool = False, params=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.anchor = anchor or CanonicalAnchor.default()
        self.target_std = np.asarray(target_std, dtype=np.float64)
        self.params = params if params is not None else self._init(seed, zero_heads)
        self._cache = None

    def _init(self, seed, zero_heads):
        rng = np.random.default_rng(seed)
        p = OrderedDict()
        L, W, C = self.cfg.in_shape
        cin = C
        for i, cout in enumerate(self.cfg.widths):
            p[f"conv{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
            p[f"conv{i}.b"] = np.zeros(cout)
            cin = cout
            L, W = L // 2, W // 2
        feat = L * W * cin
        if feat == 0:
            raise ShapeMismatch("input too small for the number of blocks")
        if self.cfg.fc_hidden:
            p["fc.W"] = rng.normal(0.0, np.sqrt(2.0 / feat), (feat, self.cfg.fc_hidden))
            p["fc.b"] = np.zeros(self.cfg.fc_hidden)
            feat = self.cfg.fc_hidden
        heads = [("cls", 2, 0.01)]
        if self.cfg.n_reg:
            heads.append(("reg", self.cfg.n_reg, 0.001))
        for name, n, std in heads:
            p[f"{name}.W"] = np.zeros((feat, n)) if zero_heads else rng.normal(0.0, std, (feat, n))
            p[f"{name}.b"] = np.zeros(n)
        return OrderedDict((k, v.astype(self.dtype)) for k, v in p.items())

    # -- forward / backward ---------------------------------------------------

    def forward(self, x, keep_cache: bool = False):
        """Return ``(reg, logits)``; ``reg`` is ``None`` for stage 2.

        ``reg`` is in target-std units; multiply by ``target_std`` for the
        raw regression code.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != tuple(self.cfg.in_shape):
            raise ShapeMismatch(f"expected input (B, {self.cfg.in_shape}), got {x.shape}")
        p = self.params
        cache = []
        a = x
        for i in range(len(self.cfg.widths)):
            Wt = p[f"conv{i}.W"]
            cols = _im2col(a)
            z = (cols @ Wt.reshape(-1, Wt.shape[-1]) + p[f"conv{i}.b"]).reshape(*a.shape[:3], Wt.shape[-1])
            e = _elu(z)
            pooled, idx = _pool(e)
            if keep_cache:
                cache.append((a.shape, cols, z, e, idx))
            a = pooled
        flat_shape = a.shape
        f = a.reshape(len(a), -1)
        hidden_in = f
        if self.cfg.fc_hidden:
            zf = f @ p["fc.W"] + p["fc.b"]
            f = _elu(zf)
        else:
            zf = None
        logits = f @ p["cls.W"] + p["cls.b"]
        reg = f @ p["reg.W"] + p["reg.b"] if self.cfg.n_reg else None
        if keep_cache:
            self._cache = (cache, flat_shape, hidden_in, zf, f)
        return reg, logits

    def backward(self, d_reg, d_logits, input_grad: bool = False):
        cache, flat_shape, hidden_in, zf, f = self._cache
        p = self.params
        g = OrderedDict()
        g["cls.W"] = f.T @ d_logits
        g["cls.b"] = d_logits.sum(axis=0)
        df = d_logits @ p["cls.W"].T
        if self.cfg.n_reg:
            g["reg.W"] = f.T @ d_reg
            g["reg.b"] = d_reg.sum(axis=0)
            df = df + d_reg @ p["reg.W"].T
        if self.cfg.fc_hidden:
            dz = df * np.where(zf > 0, 1.0, f + 1.0)
            g["fc.W"] = hidden_in.T @ dz
            g["fc.b"] = dz.sum(axis=0)
            df = dz @ p["fc.W"].T
        da = df.reshape(flat_shape)
        dx = None
        for i in reversed(range(len(self.cfg.widths))):
            in_shape, cols, z, e, idx = cache[i]
            de = _unpool(da, idx, e.shape)
            dz = de * np.where(z > 0, 1.0, e + 1.0)
            dz2 = dz.reshape(-1, dz.shape[-1])
            Wt = p[f"conv{i}.W"]
            g[f"conv{i}.W"] = (cols.T @ dz2).reshape(Wt.shape)
            g[f"conv{i}.b"] = dz2.sum(axis=0)
            if i > 0 or input_grad:
                dcols = dz2 @ Wt.reshape(-1, Wt.shape[-1]).T
                da = _col2im(dcols, in_shape)
                if i == 0:
                    dx = da
        self._cache = None
        return OrderedDict((k, g[k]) for k in p), dx

    def loss_and_grads(self, x, labels, targets=None, reg_weight: float = 1.0, input_grad: bool = False):
        """Cross-entropy plus smooth-L1 on the positives' normalised targets.

        Returns ``(total, parts, grads, dx)``.
        """
        labels = np.asarray(labels, dtype=np.int64)
        reg, logits = self.forward(x, keep_cache=True)
        ce, d_logits = cross_entropy(logits.astype(np.float64), labels)
        parts = {"cls": ce, "reg": 0.0}
        d_reg = None
        if self.cfg.n_reg:
            d_reg = np.zeros_like(reg, dtype=np.float64)
            pos = labels == 1
            if targets is not None and pos.any():
                t = np.asarray(targets, dtype=np.float64)[pos] / self.target_std
                l, gr = smooth_l1_with_grad(reg[pos].astype(np.float64) - t)
                npos = int(pos.sum())
                parts["reg"] = float(reg_weight * l.sum() / npos)
                d_reg[pos] = reg_weight * gr / npos
            d_reg = d_reg.astype(self.dtype)
        grads, dx = self.backward(d_reg, d_logits.astype(self.dtype), input_grad)
        return ce + parts["reg"], parts, grads, dx

    def predict(self, x):
        """``(raw regression codes or None, car probability)`` per sample."""
        reg, logits = self.forward(x)
        prob = softmax(logits.astype(np.float64))[:, 1]
        if reg is not None:
            reg = reg.astype(np.float64) * self.target_std
        return reg, prob

    # -- serialization ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        c = self.cfg
        out = [_MAGIC, struct.pack("<HH", _VERSION, c.stage), struct.pack("<I", len(c.widths))]
        out.append(struct.pack(f"<{len(c.widths)}I", *c.widths))
        out.append(struct.pack("<I3I", c.fc_hidden, *c.in_shape))
        out.append(struct.pack("<9d", *self.anchor.as_array()))
        out.append(struct.pack("<7d", *self.target_std))
        out.append(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            nb = name.encode()
            out.append(struct.pack("<H", len(nb)) + nb)
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RefineNet":
        if data[:4] != _MAGIC:
            raise ParamsFormatError("bad magic")
        off = 4
        try:
            version, stage = struct.unpack_from("<HH", data, off)
            off += 4
            if version != _VERSION:
                raise ParamsFormatError(f"unsupported version {version}")
            (nb,) = struct.unpack_from("<I", data, off)
            off += 4
            widths = struct.unpack_from(f"<{nb}I", data, off)
            off += 4 * nb
            fc_hidden, *in_shape = struct.unpack_from("<I3I", data, off)
            off += 16
            anchor = struct.unpack_from("<9d", data, off)
            off += 72
            tstd = struct.unpack_from("<7d", data, off)
            off += 56
            (nt,) = struct.unpack_from("<I", data, off)
            off += 4
            params = OrderedDict()
            for _ in range(nt):
                (ln,) = struct.unpack_from("<H", data, off)
                off += 2
                name = data[off:off + ln].decode()
                off += ln
                (nd,) = struct.unpack_from("<I", data, off)
                off += 4
                shape = struct.unpack_from(f"<{nd}I", data, off)
                off += 4 * nd
                n = int(np.prod(shape))
                if off + 4 * n > len(data):
                    raise ParamsFormatError("truncated tensor")
                params[name] = np.frombuffer(data, "<f4", n, off).reshape(shape).astype(np.float32)
                off += 4 * n
        except struct.error as exc:
            raise ParamsFormatError(f"truncated file: {exc}") from None
        cfg = NetConfig(stage, tuple(widths), fc_hidden, tuple(in_shape))
        return cls(cfg, anchor=CanonicalAnchor(*anchor), target_std=tstd, params=params)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RefineNet":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
