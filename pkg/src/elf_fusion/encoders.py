"""Toy stand-ins for the fundus and OCT backbones.

The fundus encoder is two 3x3 stride-2 convolutions with ReLU followed by
adaptive average pooling to (h_x, w_x). The OCT encoder factorizes space and
time: a per-slice 3x3 stride-2 convolution with ReLU, adaptive pooling to
(h_y, w_y), then a 1-D convolution across slices whose stride brings the
slice count down to t_y, again with ReLU. Local and global branches of each
modality are separate encoders with disjoint parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import elft
from .config import FusionConfig
from .errors import FormatError, ShapeError
from .tensor import Tensor, adaptive_avg_pool2d, conv2d, conv_temporal, relu, reshape

FUNDUS_BRANCHES = ("enc_fundus_local", "enc_fundus_global")
OCT_BRANCHES = ("enc_oct_local", "enc_oct_global")


@dataclass
class FundusFeatures:
    local: Tensor | None
    global_: Tensor | None

    def merged(self) -> tuple[Tensor | None, Tensor | None]:
        return tuple(None if t is None else merge_axes_fundus(t) for t in (self.local, self.global_))


@dataclass
class OctFeatures:
    local: Tensor | None
    global_: Tensor | None

    def merged(self) -> tuple[Tensor | None, Tensor | None]:
        return tuple(None if t is None else merge_axes_oct(t) for t in (self.local, self.global_))


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def init_fundus_encoder(prefix: str, cfg: FusionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    mid, dt = cfg.fundus_mid_channels, cfg.dtype
    return {
        f"{prefix}.conv1.weight": he_uniform(rng, (mid, 3, 3, 3), 27, dt),
        f"{prefix}.conv1.bias": zeros(mid, dt),
        f"{prefix}.conv2.weight": he_uniform(rng, (cfg.c_x, mid, 3, 3), mid * 9, dt),
        f"{prefix}.conv2.bias": zeros(cfg.c_x, dt),
    }


def init_oct_encoder(prefix: str, cfg: FusionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    k, dt = cfg.oct_temporal_kernel, cfg.dtype
    return {
        f"{prefix}.spatial.weight": he_uniform(rng, (cfg.c_y, 1, 3, 3), 9, dt),
        f"{prefix}.spatial.bias": zeros(cfg.c_y, dt),
        f"{prefix}.temporal.weight": he_uniform(rng, (cfg.c_y, cfg.c_y, k), cfg.c_y * k, dt),
        f"{prefix}.temporal.bias": zeros(cfg.c_y, dt),
    }


def run_fundus_encoder(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: FusionConfig) -> Tensor:
    h = reshape(x, (1,) + x.dims)
    h = relu(conv2d(h, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], stride=2, padding=1))
    h = relu(conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], stride=2, padding=1))
    h = adaptive_avg_pool2d(h, (cfg.h_x, cfg.w_x))
    return reshape(h, h.dims[1:])


def run_oct_encoder(y: Tensor, params: dict[str, Tensor], prefix: str, cfg: FusionConfig) -> Tensor:
    h = relu(conv2d(y, params[f"{prefix}.spatial.weight"], params[f"{prefix}.spatial.bias"], stride=2, padding=1))
    h = adaptive_avg_pool2d(h, (cfg.h_y, cfg.w_y))
    k = cfg.oct_temporal_kernel
    h = conv_temporal(
        h,
        params[f"{prefix}.temporal.weight"],
        params[f"{prefix}.temporal.bias"],
        stride=cfg.oct_temporal_stride,
        padding=(k - 1) // 2,
    )
    h = relu(h)
    if h.dims[0] != cfg.t_y:
        raise ShapeError(f"OCT encoder produced {h.dims[0]} slices, expected t_y={cfg.t_y}")
    return h


def encode_fundus(
    x: Tensor, params: dict[str, Tensor], cfg: FusionConfig, branches: tuple[bool, bool] = (True, True)
) -> FundusFeatures:
    """Run the (local, global) fundus encoders; ``branches`` switches each one on or off."""
    expected = (3,) + tuple(cfg.fundus_input_hw)
    if x.dims != expected:
        raise ShapeError(f"encode_fundus: expected image dims {expected}, got {x.dims}")
    local, global_ = (
        run_fundus_encoder(x, params, p, cfg) if on else None for p, on in zip(FUNDUS_BRANCHES, branches)
    )
    return FundusFeatures(local, global_)


def encode_oct(
    y: Tensor, params: dict[str, Tensor], cfg: FusionConfig, branches: tuple[bool, bool] = (True, True)
) -> OctFeatures:
    t, h, w = cfg.oct_input_thw
    if y.dims != (t, 1, h, w):
        raise ShapeError(f"encode_oct: expected volume dims {(t, 1, h, w)}, got {y.dims}")
    local, global_ = (run_oct_encoder(y, params, p, cfg) if on else None for p, on in zip(OCT_BRANCHES, branches))
    return OctFeatures(local, global_)


def merge_axes_fundus(f: Tensor) -> Tensor:
    """(C_x, H_x, W_x) -> (C_x*H_x, W_x)."""
    if len(f.dims) != 3:
        raise ShapeError(f"merge_axes_fundus: expected 3 dims, got {f.dims}")
    c, h, w = f.dims
    return reshape(f, (c * h, w))


def merge_axes_oct(o: Tensor) -> Tensor:
    """(T_y, C_y, H_y, W_y) -> (T_y, C_y*H_y, W_y)."""
    if len(o.dims) != 4:
        raise ShapeError(f"merge_axes_oct: expected 4 dims, got {o.dims}")
    t, c, h, w = o.dims
    return reshape(o, (t, c * h, w))


def fundus_feature_dims(cfg: FusionConfig) -> tuple[int, int, int]:
    return (cfg.c_x, cfg.h_x, cfg.w_x)


def oct_feature_dims(cfg: FusionConfig) -> tuple[int, int, int, int]:
    return (cfg.t_y, cfg.c_y, cfg.h_y, cfg.w_y)


def import_features(
    path: str | Path, cfg: FusionConfig, global_path: str | Path | None = None
) -> FundusFeatures | OctFeatures:
    """Load externally computed backbone features from ELFT files.

    A 3-d file is read as fundus features, a 4-d file as OCT features. When
    ``global_path`` is omitted the same map feeds both branches.
    """
    arrays = [elft.load_array(path)]
    if global_path is not None:
        arrays.append(elft.load_array(global_path))
    ndim = arrays[0].ndim
    if ndim == 3:
        want, kind = fundus_feature_dims(cfg), FundusFeatures
    elif ndim == 4:
        want, kind = oct_feature_dims(cfg), OctFeatures
    else:
        raise FormatError(f"ndim: feature file {path} has {ndim} dims, expected 3 (fundus) or 4 (OCT)")
    for src, arr in zip((path, global_path), arrays):
        if arr.shape != want:
            raise FormatError(f"dims: {src} has dims {arr.shape}, expected {want} from config")
    tensors = [Tensor(a, dtype=a.dtype) for a in arrays]
    return kind(tensors[0], tensors[-1])
