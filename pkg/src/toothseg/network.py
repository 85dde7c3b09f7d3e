"""Segmentation network: point embedding, attention encoder, global
feature and the two per-point heads, plus the checkpoint container."""
from __future__ import annotations

import contextlib
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
_MAGIC = b"TSEGCKPT"


@dataclass
class NetworkConfig:
    d_e: int = 128          # embedding width
    d_p: int = 256          # encoder output width
    d_v: int = 64           # jaw-category embedding width
    k_nn: int = 20
    n_heads: int = 4
    n_layers: int = 4
    n_classes: int = 33
    n_aux: int = 2
    head_hidden: tuple = (256, 128)
    dropout: float = 0.1
    negative_slope: float = 0.2

    def __post_init__(self):
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        widths = [self.d_e, self.d_p, self.d_v, self.k_nn, self.n_heads, self.n_layers,
                  self.n_classes, self.n_aux, *self.head_hidden]
        if any(w <= 0 for w in widths):
            raise ValueError(f"all widths must be positive: {self}")
        if self.d_e % self.n_heads:
            raise ValueError(f"d_e={self.d_e} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_g(self) -> int:
        return self.d_v + 2 * self.d_p

    @property
    def d_a(self) -> int:
        return self.d_p + self.d_g

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


PRESETS = {
    "default": NetworkConfig(),
    "small": NetworkConfig(d_e=64, d_p=128, d_v=32, k_nn=16, n_heads=4,
                           head_hidden=(128, 64), dropout=0.1),
    "tiny": NetworkConfig(d_e=32, d_p=64, d_v=16, k_nn=12, n_heads=2,
                          head_hidden=(64, 32), dropout=0.0),
}


def knn_indices(h: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` nearest rows in feature space, self excluded.

    h : (B, N, C) -> (B, N, k)
    """
    n = h.shape[1]
    if n < k + 1:
        raise ValueError(f"need at least k_nn + 1 = {k + 1} points, got {n}")
    with torch.no_grad():
        sq = (h * h).sum(-1)
        d = sq.unsqueeze(2) + sq.unsqueeze(1) - 2.0 * h @ h.transpose(1, 2)
        d.diagonal(dim1=1, dim2=2).fill_(float("inf"))
        return d.topk(k, dim=-1, largest=False).indices


class BranchCache:
    """Piecewise branch choices of one forward pass, replayed on later passes.

    The neighbor graphs, LeakyReLU sign patterns and max-pool positions are
    piecewise constant in the parameters. While active, the first forward
    records them and subsequent forwards reuse them, so repeated evaluations
    stay on the smooth branch that autograd differentiates. Inactive, every
    operation is the plain one.
    """

    def __init__(self):
        self.active = False
        self.records = []
        self.cursor = 0

    def reset(self, active=False):
        self.active, self.records, self.cursor = active, [], 0

    def rewind(self):
        self.cursor = 0

    def _replay(self, make):
        if self.cursor < len(self.records):
            out = self.records[self.cursor]
        else:
            out = make()
            self.records.append(out)
        self.cursor += 1
        return out

    def graph(self, h, k):
        if not self.active:
            return knn_indices(h, k)
        return self._replay(lambda: knn_indices(h, k))

    def leaky(self, x, slope):
        if not self.active:
            return F.leaky_relu(x, slope)
        mask = self._replay(lambda: x.detach() >= 0)
        return torch.where(mask, x, x * slope)

    def max(self, x, dim):
        if not self.active:
            return x.max(dim=dim).values
        idx = self._replay(lambda: x.detach().argmax(dim=dim, keepdim=True))
        return x.gather(dim, idx).squeeze(dim)


class LeakyReLU(nn.Module):
    def __init__(self, slope, cache):
        super().__init__()
        self.slope = slope
        self.cache = cache

    def forward(self, x):
        return self.cache.leaky(x, self.slope)


class EdgeConv(nn.Module):
    """max_j MLP([h_i, h_j - h_i]) over the k nearest neighbors of i,
    with the graph rebuilt from the current features."""

    def __init__(self, d_in, d_out, k, negative_slope=0.2, cache=None):
        super().__init__()
        self.k = k
        self.lin = nn.Linear(2 * d_in, d_out)
        self.norm = nn.LayerNorm(d_out)
        self.negative_slope = negative_slope
        self.cache = cache if cache is not None else BranchCache()

    def forward(self, h):
        b, n, c = h.shape
        idx = self.cache.graph(h, self.k)
        nbr = h[torch.arange(b, device=h.device)[:, None, None], idx]
        center = h.unsqueeze(2).expand(b, n, self.k, c)
        e = self.lin(torch.cat([center, nbr - center], dim=-1))
        e = self.cache.leaky(self.norm(e), self.negative_slope)
        return self.cache.max(e, dim=2)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention with a residual
    connection and layer norm."""

    def __init__(self, d, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm = nn.LayerNorm(d)

    def weights(self, h):
        """Attention weights (B, heads, N, N); rows sum to one."""
        q, k, _ = self._split(h)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)

    def _split(self, h):
        b, n, d = h.shape
        qkv = self.qkv(h).view(b, n, 3, self.n_heads, d // self.n_heads)
        return qkv.permute(2, 0, 3, 1, 4).unbind(0)

    def forward(self, h):
        b, n, d = h.shape
        q, k, v = self._split(h)
        a = F.scaled_dot_product_attention(q, k, v)
        a = a.transpose(1, 2).reshape(b, n, d)
        return self.norm(h + self.out(a))


class SegmentationNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or NetworkConfig()
        self.seed = seed
        slope = cfg.negative_slope
        self.branches = BranchCache()
        self.embed_lin1 = nn.Linear(8, cfg.d_e)
        self.embed_norm1 = nn.LayerNorm(cfg.d_e)
        self.embed_lin2 = nn.Linear(cfg.d_e, cfg.d_e)
        self.embed_norm2 = nn.LayerNorm(cfg.d_e)
        self.edge1 = EdgeConv(cfg.d_e, cfg.d_e, cfg.k_nn, slope, self.branches)
        self.edge2 = EdgeConv(cfg.d_e, cfg.d_e, cfg.k_nn, slope, self.branches)
        self.attention = nn.ModuleList(SelfAttention(cfg.d_e, cfg.n_heads)
                                       for _ in range(cfg.n_layers))
        self.fuse = nn.Linear(cfg.n_layers * cfg.d_e, cfg.d_p)
        self.category = nn.Linear(2, cfg.d_v)
        self.seg_head = self._head(cfg.n_classes)
        self.aux_head = self._head(cfg.n_aux)
        self.reset_parameters(seed)

    def _head(self, n_out):
        cfg = self.config
        layers, width = [], cfg.d_a
        for h in cfg.head_hidden:
            layers += [nn.Linear(width, h), LeakyReLU(cfg.negative_slope, self.branches), nn.Dropout(cfg.dropout)]
            width = h
        layers.append(nn.Linear(width, n_out))
        return nn.Sequential(*layers)

    def reset_parameters(self, seed: int):
        """Uniform fan-in initialization drawn from a generator seeded by ``seed``."""
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                with torch.no_grad():
                    module.weight.copy_(torch.rand(module.weight.shape, generator=gen,
                                                   dtype=torch.float64) * 2 * bound - bound)
                    module.bias.copy_(torch.rand(module.bias.shape, generator=gen,
                                                 dtype=torch.float64) * 2 * bound - bound)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    @contextlib.contextmanager
    def frozen_branches(self):
        """Replay the first forward's piecewise choices inside the block.

        See ``BranchCache``; used by the gradient checks so that finite
        differences and autograd see the same smooth function.
        """
        self.branches.reset(active=True)
        try:
            yield self
        finally:
            self.branches.reset(active=False)

    def _act(self, x):
        return self.branches.leaky(x, self.config.negative_slope)

    def point_embed(self, features):
        """(B, N, 8) -> h_pe (B, N, d_e)."""
        h = self._act(self.embed_norm1(self.embed_lin1(features)))
        h = self._act(self.embed_norm2(self.embed_lin2(h)))
        return self.edge2(self.edge1(h))

    def encode(self, h_pe):
        """(B, N, d_e) -> h_p (B, N, d_p)."""
        outs, h = [], h_pe
        for layer in self.attention:
            h = layer(h)
            outs.append(h)
        return self.fuse(torch.cat(outs, dim=-1))

    def global_feature(self, h_p, category):
        """h_g = sigma(V) ++ maxpool(h_p) ++ avgpool(h_p), shape (B, d_g)."""
        check_one_hot(category)
        return torch.cat([self.category(category), self.branches.max(h_p, dim=1), h_p.mean(dim=1)], dim=-1)

    def forward(self, features, category):
        """Per-point logits for the main (B, N, 33) and auxiliary (B, N, 2) heads."""
        if features.dim() == 2:
            seg, aux = self.forward(features.unsqueeze(0), category.reshape(1, -1))
            return seg[0], aux[0]
        self.branches.rewind()
        h_p = self.encode(self.point_embed(features))
        h_g = self.global_feature(h_p, category)
        h_a = torch.cat([h_p, h_g.unsqueeze(1).expand(-1, h_p.shape[1], -1)], dim=-1)
        return self.seg_head(h_a), self.aux_head(h_a)

    def expected_shapes(self) -> dict:
        """Parameter shapes implied by the config alone."""
        cfg = self.config
        shapes = {}

        def lin(name, i, o):
            shapes[f"{name}.weight"] = (o, i)
            shapes[f"{name}.bias"] = (o,)

        def norm(name, d):
            shapes[f"{name}.weight"] = (d,)
            shapes[f"{name}.bias"] = (d,)

        lin("embed_lin1", 8, cfg.d_e)
        norm("embed_norm1", cfg.d_e)
        lin("embed_lin2", cfg.d_e, cfg.d_e)
        norm("embed_norm2", cfg.d_e)
        for e in ("edge1", "edge2"):
            lin(f"{e}.lin", 2 * cfg.d_e, cfg.d_e)
            norm(f"{e}.norm", cfg.d_e)
        for i in range(cfg.n_layers):
            lin(f"attention.{i}.qkv", cfg.d_e, 3 * cfg.d_e)
            lin(f"attention.{i}.out", cfg.d_e, cfg.d_e)
            norm(f"attention.{i}.norm", cfg.d_e)
        lin("fuse", cfg.n_layers * cfg.d_e, cfg.d_p)
        lin("category", 2, cfg.d_v)
        for head, n_out in (("seg_head", cfg.n_classes), ("aux_head", cfg.n_aux)):
            width = cfg.d_a
            for j, h in enumerate(cfg.head_hidden):
                lin(f"{head}.{3 * j}", width, h)
                width = h
            lin(f"{head}.{3 * len(cfg.head_hidden)}", width, n_out)
        return shapes


def check_one_hot(category: torch.Tensor):
    c = category.reshape(-1, 2) if category.dim() < 2 else category
    ok = ((c == 0) | (c == 1)).all() and bool((c.sum(-1) == 1).all())
    if c.shape[-1] != 2 or not ok:
        raise ValueError(f"category vector must be one-hot of length 2, got {category.tolist()}")


def shape_audit(model: SegmentationNet):
    """Raise if any parameter disagrees with the config-derived shape or is non-finite."""
    expected = model.expected_shapes()
    actual = {k: tuple(v.shape) for k, v in model.named_parameters()}
    if expected != actual:
        missing = set(expected) ^ set(actual)
        wrong = {k: (expected[k], actual[k]) for k in set(expected) & set(actual)
                 if expected[k] != actual[k]}
        raise ValueError(f"shape audit failed: unmatched={sorted(missing)} wrong={wrong}")
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"parameter {name} has non-finite entries")


def cloud_tensors(clouds, dtype=torch.float32):
    """Stack FeatureClouds into (B, N, 8) features and (B, 2) categories."""
    if not isinstance(clouds, (list, tuple)):
        clouds = [clouds]
    feats = torch.as_tensor(np.stack([c.features for c in clouds]), dtype=dtype)
    cats = torch.as_tensor(np.stack([c.category for c in clouds]), dtype=dtype)
    return feats, cats


def forward(model: SegmentationNet, cloud):
    """Logits of one FeatureCloud: (N, 33), (N, 2)."""
    dtype = next(model.parameters()).dtype
    feats, cats = cloud_tensors(cloud, dtype)
    seg, aux = model(feats, cats)
    return seg[0], aux[0]


def backward(model: SegmentationNet, cloud, grad_seg, grad_aux) -> dict:
    """Parameter gradients of ``<grad_seg, seg> + <grad_aux, aux>``.

    Parameters that do not influence the selected outputs get zeros.
    """
    seg, aux = forward(model, cloud)
    params = dict(model.named_parameters())
    target = (seg * torch.as_tensor(grad_seg, dtype=seg.dtype)).sum() + \
             (aux * torch.as_tensor(grad_aux, dtype=aux.dtype)).sum()
    grads = torch.autograd.grad(target, list(params.values()), allow_unused=True)
    return {name: torch.zeros_like(p) if g is None else g
            for (name, p), g in zip(params.items(), grads)}


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, model: SegmentationNet, extra_tensors: dict | None = None,
                    meta: dict | None = None):
    """Write a versioned checkpoint.

    Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
    header (version, config, rng_seed, tensor table, meta), then each
    tensor as row-major little-endian float32 in table order.
    """
    tensors = {k: v.detach() for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v.detach() if isinstance(v, torch.Tensor) else torch.as_tensor(v)
    table, payload, offset = [], [], 0
    for name, t in tensors.items():
        buf = t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        payload.append(buf)
        offset += len(buf)
    cfg = asdict(model.config)
    cfg["head_hidden"] = list(cfg["head_hidden"])
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": cfg,
        "rng_seed": model.seed,
        "tensors": table,
        "meta": meta or {},
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for buf in payload:
                fh.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[dict, dict]:
    """Header dict and ``{name: float32 tensor}`` of a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header.get("format_version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint format {header['format_version']} is newer "
                         f"than supported {CHECKPOINT_VERSION}")
    base = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data[start:start + entry["nbytes"]], dtype="<f4")
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header, tensors


def load_checkpoint(path) -> tuple[SegmentationNet, dict, dict]:
    """Rebuild the model; returns (model, meta, extra tensors)."""
    header, tensors = read_checkpoint(path)
    model = SegmentationNet(NetworkConfig.from_dict(header["config"]), seed=header["rng_seed"])
    state_keys = set(model.state_dict())
    model.load_state_dict({k: v for k, v in tensors.items() if k in state_keys})
    shape_audit(model)
    extra = {k: v for k, v in tensors.items() if k not in state_keys}
    return model, header.get("meta", {}), extra
