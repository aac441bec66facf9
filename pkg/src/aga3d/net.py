"""Two-channel 3D CNN backbone, multi-view mLSTM branches and the binary head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.mlstm import init_mlstm_stack, mlstm_sequence
from .autodiff.tensor import Tensor, as_tensor
from .errors import ShapeError

__all__ = [
    "VIEWS",
    "NetConfig",
    "init_params",
    "backbone_forward",
    "to_view_sequences",
    "forward",
    "predict",
    "stack_input",
]

VIEWS = ("axial", "coronal", "sagittal", "volumetric")


@dataclass(frozen=True)
class NetConfig:
    input_dims: tuple = (64, 64, 32)
    in_channels: int = 2
    channels: int = 32
    strides: tuple = (2, 2, 2)
    kernel: int = 3
    grid: tuple = (8, 8, 4)
    d_h: int = 128
    mlstm_layers: int = 2
    embed_dim: int = 512
    head_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(n) for n in self.input_dims))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if len(self.strides) != 3:
            raise ValueError("backbone has exactly three convolution layers")
        if len(VIEWS) * self.d_h != self.embed_dim:
            raise ValueError(f"embed_dim {self.embed_dim} must equal 4 * d_h = {4 * self.d_h}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _conv_init(rng, cout, cin, k):
    # He-uniform: keeps ReLU activations at unit scale through the backbone
    bound = math.sqrt(6.0 / (cin * k ** 3))
    return rng.uniform(-bound, bound, (cout, cin, k, k, k)), np.zeros(cout)


def init_params(cfg):
    """Seeded parameter dict; insertion order is the checkpoint order."""
    rng = np.random.default_rng(cfg.seed)
    c, k = cfg.channels, cfg.kernel
    p = {}
    for name, cin in (("conv1", cfg.in_channels), ("res", c), ("conv2", c), ("conv3", c)):
        p[f"{name}.w"], p[f"{name}.b"] = _conv_init(rng, c, cin, k)
    for view in VIEWS:
        p.update(init_mlstm_stack(rng, c, cfg.d_h, cfg.mlstm_layers, prefix=f"{view}."))
    b1 = math.sqrt(6.0 / cfg.embed_dim)
    p["head.w1"] = rng.uniform(-b1, b1, (cfg.head_hidden, cfg.embed_dim))
    p["head.b1"] = np.zeros(cfg.head_hidden)
    b2 = 1.0 / math.sqrt(cfg.head_hidden)
    p["head.w2"] = rng.uniform(-b2, b2, (1, cfg.head_hidden))
    p["head.b2"] = np.zeros(1)
    return p


def backbone_forward(x, p, cfg):
    """(B, 2, X, Y, Z) -> (B, 32, 8, 8, 4).

    Layer 1 output feeds both layer 2 and a residual conv; the two are summed
    before layer 2's ReLU.  Layer 3 is followed by adaptive average pooling
    onto ``cfg.grid``.
    """
    x = as_tensor(x)
    if x.ndim == 4:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"backbone expects (B, {cfg.in_channels}, X, Y, Z), got {x.shape}")
    pad = cfg.kernel // 2
    s1, s2, s3 = cfg.strides
    a1 = ops.relu(ops.conv3d(x, p["conv1.w"], p["conv1.b"], stride=s1, padding=pad))
    # conv2 and the residual conv read the same input, so run them as one
    # convolution with stacked output channels and split afterwards.
    c = cfg.channels
    both = ops.conv3d(a1, ops.concat([p["conv2.w"], p["res.w"]], axis=0),
                      ops.concat([p["conv2.b"], p["res.b"]], axis=0), stride=s2, padding=pad)
    res = ops.relu(ops.narrow(both, 1, c, c))
    a2 = ops.relu(ops.add(ops.narrow(both, 1, 0, c), res))
    a3 = ops.relu(ops.conv3d(a2, p["conv3.w"], p["conv3.b"], stride=s3, padding=pad))
    return ops.adaptive_avg_pool3d(a3, cfg.grid)


def to_view_sequences(f):
    """Slice-mean token sequences from a (B, C, 8, 8, 4) feature map.

    axial: one token per index of spatial axis 0 (mean over axes 1, 2);
    coronal: per index of axis 1; sagittal: per index of axis 2;
    volumetric: every voxel, x-fastest.  Each is (B, T, C).
    """
    f = as_tensor(f)
    if f.ndim == 4:
        f = ops.reshape(f, (1,) + f.shape)
    if f.ndim != 5:
        raise ShapeError(f"view sequences need (B, C, X, Y, Z), got {f.shape}")
    bsz, c = f.shape[:2]
    n_tok = f.shape[2] * f.shape[3] * f.shape[4]
    return {
        "axial": ops.transpose(ops.mean(f, axis=(3, 4)), (0, 2, 1)),
        "coronal": ops.transpose(ops.mean(f, axis=(2, 4)), (0, 2, 1)),
        "sagittal": ops.transpose(ops.mean(f, axis=(2, 3)), (0, 2, 1)),
        "volumetric": ops.reshape(ops.transpose(f, (0, 4, 3, 2, 1)), (bsz, n_tok, c)),
    }


def forward(x, p, cfg, return_logit=False):
    """Returns ``(prob (B,), z (B, 512), z_unit (B, 512))`` as tensors."""
    feats = backbone_forward(x, p, cfg)
    if feats.shape[2:] != cfg.grid:
        raise ShapeError(f"backbone produced grid {feats.shape[2:]}, expected {cfg.grid}")
    seqs = to_view_sequences(feats)
    branches = [ops.mean(mlstm_sequence(seqs[v], p, cfg.mlstm_layers, prefix=f"{v}."), axis=1)
                for v in VIEWS]
    z = ops.concat(branches, axis=-1)
    hidden = ops.relu(ops.linear(z, p["head.w1"], p["head.b1"]))
    logit = ops.reshape(ops.linear(hidden, p["head.w2"], p["head.b2"]), (z.shape[0],))
    prob = ops.sigmoid(logit)
    out = (prob, z, ops.l2_normalize(z, axis=-1))
    return out + (logit,) if return_logit else out


def stack_input(mri, prior):
    """Two-channel (2, X, Y, Z) float64 array from MRI and prior volumes."""
    a = np.asarray(getattr(mri, "data", mri), dtype=np.float64)
    b = np.asarray(getattr(prior, "data", prior), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"MRI dims {a.shape} do not match prior dims {b.shape}")
    return np.stack([a, b])


def predict(v_mri, prior, params, cfg, threshold=0.5):
    """``("positive" | "negative", p)``; positive iff ``p >= threshold``."""
    x = stack_input(v_mri, prior)[None]
    tensors = {k: Tensor(v) for k, v in params.items()}
    prob = float(forward(x, tensors, cfg)[0].data[0])
    return ("positive" if prob >= threshold else "negative"), prob
