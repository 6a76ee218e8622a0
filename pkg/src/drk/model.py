"""Micro referring-segmentation model and the DCKP checkpoint format.

Pipeline for an image ``[N, 3, H, W]`` and attribute vector ``[N, D]``::

    enc1   3x3 stride 2, relu                      H/2
    enc2   3x3 stride 2, relu                      H/4
    fuse   1x1 over [visual, tiled attr, coords], relu
    block  enhancement block, upsample x2          H/2
    dyn    attribute-generated 1x1 conv, relu
    head   1x1 conv to one logit, bilinear x2      H
    p      sigmoid

Two coordinate channels (row and column in [-1, 1]) are appended at the
fusion stage so location words in the attribute vector can be grounded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import enhance as E
from . import layers as L
from . import tensor
from .errors import FormatError
from .tensor import Rng

DCKP_MAGIC = b"DCKP"
DCKP_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    attr_dim: int = 15
    kernel_size: int = 3
    reduction: int = 4
    factor: int = 2
    coords: bool = True
    deformable: bool = True
    use_se: bool = True
    use_residual: bool = True

    META_FIELDS = ("channels", "attr_dim", "kernel_size", "reduction", "factor",
                   "coords", "deformable", "use_se", "use_residual")


@dataclass
class MicroParams:
    enc1: L.Conv2dParams
    enc2: L.Conv2dParams
    fuse: L.Conv2dParams
    block: E.EnhanceParams
    dyn: E.DynConvParams
    head: L.Conv2dParams


@dataclass
class MicroModel:
    config: ModelConfig
    params: MicroParams
    dtype: np.dtype = np.dtype(np.float32)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return named_arrays(self.params)

    def copy(self) -> "MicroModel":
        return MicroModel(self.config, _map_arrays(self.params, np.copy), self.dtype)


def named_arrays(obj, prefix="") -> dict[str, np.ndarray]:
    """Flatten every ndarray reachable through nested dataclasses, by dotted name."""
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, np.ndarray):
            out[name] = value
        elif is_dataclass(value):
            out.update(named_arrays(value, name + "."))
    return out


def _map_arrays(obj, fn):
    changes = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, np.ndarray):
            changes[f.name] = fn(value)
        elif is_dataclass(value):
            changes[f.name] = _map_arrays(value, fn)
    return replace(obj, **changes)


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> MicroModel:
    """Kaiming-initialised model; parameters are drawn in a fixed order.

    Every ablation variant draws the same parameters, so two configs that
    differ only in their switches start bit-identical.
    """
    rng = Rng(seed)
    c = config.channels
    extra = 2 if config.coords else 0
    enc1 = L.init_conv(rng, 3, c, 3, stride=2, padding=1, dtype=dtype)
    enc2 = L.init_conv(rng, c, c, 3, stride=2, padding=1, dtype=dtype)
    fuse = L.init_conv(rng, c + config.attr_dim + extra, c, 1, dtype=dtype)
    block = E.init_enhance(rng, c, c, config.kernel_size, config.reduction, config.factor, dtype)
    block = replace(block, deformable=config.deformable, use_se=config.use_se,
                    use_residual=config.use_residual)
    dyn = E.init_dynconv(rng, config.attr_dim, c, c, weight_scale=0.1, dtype=dtype)
    head = L.init_conv(rng, c, 1, 1, dtype=dtype)
    params = MicroParams(enc1, enc2, fuse, block, dyn, head)
    return MicroModel(config, params, np.dtype(dtype))


def _coord_channels(n, h, w, dtype):
    ys = np.linspace(-1, 1, h, dtype=dtype)
    xs = np.linspace(-1, 1, w, dtype=dtype)
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    return np.broadcast_to(grid, (n, 2, h, w))


def forward(model: MicroModel, images: np.ndarray, attrs: np.ndarray):
    """Return ``(probabilities [N, 1, H, W], cache)``."""
    p = model.params
    cfg = model.config
    x = images.astype(model.dtype, copy=False)
    a = attrs.astype(model.dtype, copy=False)
    n = x.shape[0]

    convs = {name: {} for name in ("enc1", "enc2", "fuse", "head")}  # im2col columns
    z1 = L.conv2d_fwd(x, p.enc1, convs["enc1"])
    h1 = np.maximum(z1, 0)
    z2 = L.conv2d_fwd(h1, p.enc2, convs["enc2"])
    h2 = np.maximum(z2, 0)
    hh, ww = h2.shape[2:]
    parts = [h2, np.broadcast_to(a[:, :, None, None], (n, a.shape[1], hh, ww))]
    if cfg.coords:
        parts.append(_coord_channels(n, hh, ww, model.dtype))
    cat = np.concatenate(parts, axis=1)
    z3 = L.conv2d_fwd(cat, p.fuse, convs["fuse"])
    h3 = np.maximum(z3, 0)
    block_cache = {}
    z4 = E.enhance_block_fwd(h3, p.block, block_cache)
    h4 = np.maximum(z4, 0)
    z5 = E.dyn_conv_apply(h4, a, p.dyn)
    h5 = np.maximum(z5, 0)
    logits_small = L.conv2d_fwd(h5, p.head, convs["head"])
    factor = x.shape[2] // logits_small.shape[2]
    logits = L.upsample_bilinear(logits_small, factor)
    prob = L.sigmoid(logits)
    cache = dict(x=x, a=a, convs=convs, z1=z1, h1=h1, z2=z2, h2=h2, cat=cat, z3=z3, h3=h3, z4=z4,
                 block_cache=block_cache, h4=h4, z5=z5, h5=h5, logits_small=logits_small, factor=factor,
                 prob=prob)
    return prob, cache


def backward(model: MicroModel, cache, grad_prob: np.ndarray) -> MicroParams:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d p."""
    p = model.params
    c = cache
    dt = model.dtype
    prob = c["prob"]
    g_logits = L.flush_subnormals((grad_prob * prob * (1 - prob)).astype(dt))
    g_small = L.upsample_bilinear_bwd(c["logits_small"].shape, c["factor"], g_logits)
    g_h5, g_head = L.conv2d_bwd(c["h5"], p.head, g_small, c["convs"]["head"])
    g_z5 = g_h5 * (c["z5"] > 0)
    g_h4, _, g_dyn = E.dyn_conv_bwd(c["h4"], c["a"], p.dyn, g_z5)
    g_z4 = g_h4 * (c["z4"] > 0)
    g_h3, g_block = E.enhance_block_bwd(c["h3"], p.block, g_z4, c["block_cache"])
    g_z3 = g_h3 * (c["z3"] > 0)
    g_cat, g_fuse = L.conv2d_bwd(c["cat"], p.fuse, g_z3, c["convs"]["fuse"])
    g_h2 = g_cat[:, : c["h2"].shape[1]]
    g_z2 = g_h2 * (c["z2"] > 0)
    g_h1, g_enc2 = L.conv2d_bwd(c["h1"], p.enc2, g_z2, c["convs"]["enc2"])
    g_z1 = g_h1 * (c["z1"] > 0)
    _, g_enc1 = L.conv2d_bwd(c["x"], p.enc1, g_z1, c["convs"]["enc1"])
    grads = MicroParams(g_enc1, g_enc2, g_fuse, g_block, g_dyn, g_head)
    return _map_arrays(grads, lambda g: np.ascontiguousarray(g, dtype=dt))


def predict(model: MicroModel, images, attrs, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        prob, _ = forward(model, images[i:i + batch_size], attrs[i:i + batch_size])
        out.append(prob)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: MicroModel) -> bytes:
    entries = [(f"meta.{k}", np.array([float(getattr(model.config, k))], dtype=np.float64))
               for k in ModelConfig.META_FIELDS]
    entries += sorted(model.named_arrays().items())
    out = [DCKP_MAGIC, struct.pack("<BI", DCKP_VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + tensor.to_bytes(arr))
    return b"".join(out)


def read_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != DCKP_MAGIC:
        raise FormatError("missing DCKP magic")
    if len(buf) < 9:
        raise FormatError("truncated DCKP header")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != DCKP_VERSION:
        raise FormatError(f"unsupported DCKP version {version}")
    pos = 9
    entries = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated DCKP entry")
        (length,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + length].decode("utf-8")
        pos += length
        entries[name], pos = tensor.from_bytes(buf, pos)
    if pos != len(buf):
        raise FormatError("trailing bytes after DCKP entries")
    return entries


def model_from_entries(entries: dict[str, np.ndarray]) -> MicroModel:
    meta = {}
    for k in ModelConfig.META_FIELDS:
        key = f"meta.{k}"
        if key not in entries:
            raise FormatError(f"checkpoint lacks {key}")
        v = float(entries[key][0])
        meta[k] = bool(v) if isinstance(getattr(ModelConfig, k), bool) else int(v)
    config = ModelConfig(**meta)
    arrays = {k: v for k, v in entries.items() if not k.startswith("meta.")}
    dtype = next(iter(arrays.values())).dtype
    model = init_model(config, seed=0, dtype=dtype)
    expected = model.named_arrays()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise FormatError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, arr in expected.items():
        if arrays[name].shape != arr.shape:
            raise FormatError(f"parameter {name} has shape {arrays[name].shape}, expected {arr.shape}")
        arr[...] = arrays[name]
    return model


def save_checkpoint(path, model: MicroModel) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> MicroModel:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        return model_from_entries(read_checkpoint(buf))
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
