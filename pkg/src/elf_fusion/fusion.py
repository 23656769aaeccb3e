"""Local-wise and global-wise cross-modal attention, heads and the full forward.

Shapes used throughout (D_x = C_x*H_x, S_y = C_y*H_y):

* fundus maps after merging: ``(D_x, W_x)``
* OCT maps after merging: ``(T_y, S_y, W_y)``
* aligned OCT maps (1x1 conv over T_y): ``(D_x, S_y, W_y)``
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import MODES, FusionConfig
from .encoders import (
    FUNDUS_BRANCHES,
    OCT_BRANCHES,
    FundusFeatures,
    OctFeatures,
    encode_fundus,
    encode_oct,
    he_uniform,
    init_fundus_encoder,
    init_oct_encoder,
    zeros,
)
from .errors import ElfError, ParameterError, ShapeError
from .tensor import (
    Tensor,
    concat_first,
    conv1x1,
    global_avg_pool,
    linear,
    matmul,
    relu,
    reshape,
    softmax_temp,
    transpose,
)

Params = dict[str, Tensor]


@dataclass
class LmOutput:
    x_bar_L: Tensor
    y_bar_L: Tensor
    fused: Tensor


@dataclass
class GmOutput:
    y_bar_G: Tensor
    y_agg_G: Tensor
    fused: Tensor


def _check_pair(x: Tensor, y_bar: Tensor, tau: float, who: str) -> None:
    if len(x.dims) != 2 or len(y_bar.dims) != 3:
        raise ShapeError(f"{who}: expected (D, W_x) and (D, S, W) tensors, got {x.dims} and {y_bar.dims}")
    if x.dims[0] != y_bar.dims[0]:
        raise ShapeError(f"{who}: feature dims differ ({x.dims[0]} vs {y_bar.dims[0]})")
    if not tau > 0:
        raise ParameterError(f"{who}: temperature must be positive, got {tau}")


def lm_transform(y_L: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Align OCT channels with the fundus feature space: (T_y, S, W) -> (D_x, S, W)."""
    if len(y_L.dims) != 3:
        raise ShapeError(f"lm_transform: expected (T_y, S_y, W_y), got {y_L.dims}")
    return conv1x1(y_L, weight, bias)


gm_transform = lm_transform


def lm_attention_weights(x_L: Tensor, y_bar_L: Tensor, tau: float) -> Tensor:
    """Softmax weights over the W_x fundus columns for every OCT position, shape (S*W, W_x)."""
    _check_pair(x_L, y_bar_L, tau, "lm_attention")
    d, s, w = y_bar_L.dims
    cols = reshape(y_bar_L, (d, s * w))
    return softmax_temp(matmul(transpose(cols), x_L), tau, axis=-1)


def lm_attention(x_L: Tensor, y_bar_L: Tensor, tau: float) -> Tensor:
    """Re-express each aligned OCT position as a convex mix of fundus columns.

    scores[p, l] = <y_bar_L[:, p], x_L[:, l]>, weights = softmax(scores / tau)
    over l, output[:, p] = sum_l weights[p, l] * x_L[:, l].
    """
    weights = lm_attention_weights(x_L, y_bar_L, tau)
    out = matmul(x_L, transpose(weights))
    return reshape(out, y_bar_L.dims)


def gm_attention_weights(x_G: Tensor, y_bar_G: Tensor, tau: float) -> Tensor:
    """Softmax over all S*W OCT positions for every fundus column, shape (W_x, S*W)."""
    _check_pair(x_G, y_bar_G, tau, "gm_attention")
    d, s, w = y_bar_G.dims
    cols = reshape(y_bar_G, (d, s * w))
    return softmax_temp(matmul(transpose(x_G), cols), tau, axis=-1)


def gm_attention(x_G: Tensor, y_bar_G: Tensor, tau: float) -> Tensor:
    """Aggregate the aligned OCT map into one vector per fundus column: (D_x, W_x)."""
    weights = gm_attention_weights(x_G, y_bar_G, tau)
    d, s, w = y_bar_G.dims
    cols = reshape(y_bar_G, (d, s * w))
    return matmul(cols, transpose(weights))


def lm_fuse(x_bar_L: Tensor, y_bar_L: Tensor) -> Tensor:
    return concat_first(x_bar_L, y_bar_L)


def gm_fuse(y_agg_G: Tensor, x_G: Tensor) -> Tensor:
    return concat_first(y_agg_G, x_G)


def local_module(x_L: Tensor, y_L: Tensor, params: Params, cfg: FusionConfig) -> LmOutput:
    y_bar = lm_transform(y_L, params["lm_align.weight"], params["lm_align.bias"])
    x_bar = lm_attention(x_L, y_bar, cfg.tau_L)
    return LmOutput(x_bar, y_bar, lm_fuse(x_bar, y_bar))


def global_module(x_G: Tensor, y_G: Tensor, params: Params, cfg: FusionConfig) -> GmOutput:
    y_bar = gm_transform(y_G, params["gm_align.weight"], params["gm_align.bias"])
    y_agg = gm_attention(x_G, y_bar, cfg.tau_G)
    return GmOutput(y_bar, y_agg, gm_fuse(y_agg, x_G))


def branch_head(z: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pool a fused map over its non-channel axes, project to fused_width, ReLU."""
    return relu(linear(global_avg_pool(z), weight, bias))


def fuse_classify(f_L: Tensor, f_G: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if f_L.dims != f_G.dims or len(f_L.dims) != 1:
        raise ShapeError(f"fuse_classify: branch features {f_L.dims} and {f_G.dims} must be equal-length vectors")
    return linear(concat_first(f_L, f_G), weight, bias)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

GROUPS = (
    "enc_fundus_local",
    "enc_fundus_global",
    "enc_oct_local",
    "enc_oct_global",
    "lm_align",
    "gm_align",
    "lm_head",
    "gm_head",
    "classifier",
    "fundus_head",
    "oct_head",
)

MODE_GROUPS = {
    "full": GROUPS[:9],
    "lm_only": ("enc_fundus_local", "enc_oct_local", "lm_align", "lm_head", "classifier"),
    "gm_only": ("enc_fundus_global", "enc_oct_global", "gm_align", "gm_head", "classifier"),
    "concat_only": ("enc_fundus_local", "enc_oct_local", "fundus_head", "oct_head", "classifier"),
    "fundus_only": ("enc_fundus_local", "fundus_head", "classifier"),
    "oct_only": ("enc_oct_local", "oct_head", "classifier"),
}


def _linear_params(prefix: str, n_out: int, n_in: int, rng: np.random.Generator, dtype, gain: float) -> Params:
    bound = gain * np.sqrt(1.0 / n_in)
    return {
        f"{prefix}.weight": Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)), requires_grad=True, dtype=dtype),
        f"{prefix}.bias": zeros(n_out, dtype),
    }


def init_params(cfg: FusionConfig, seed: int) -> Params:
    """Seeded fan-in-scaled uniform initialization of every parameter group.

    Each group draws from its own stream keyed by (seed, group index), so a
    group's initial values do not depend on which other groups exist.
    """
    cfg.validate()
    dt, dx, fw = cfg.dtype, cfg.d_x, cfg.fused_width
    params: Params = {}
    for i, group in enumerate(GROUPS):
        rng = np.random.default_rng([seed, i])
        if group in FUNDUS_BRANCHES:
            params.update(init_fundus_encoder(group, cfg, rng))
        elif group in OCT_BRANCHES:
            params.update(init_oct_encoder(group, cfg, rng))
        elif group in ("lm_align", "gm_align"):
            params[f"{group}.weight"] = he_uniform(rng, (dx, cfg.t_y), cfg.t_y, dt)
            params[f"{group}.bias"] = zeros(dx, dt)
        elif group in ("lm_head", "gm_head"):
            params.update(_linear_params(group, fw, 2 * dx, rng, dt, np.sqrt(6.0)))
        elif group == "fundus_head":
            params.update(_linear_params(group, fw, dx, rng, dt, np.sqrt(6.0)))
        elif group == "oct_head":
            params.update(_linear_params(group, fw, cfg.t_y, rng, dt, np.sqrt(6.0)))
        else:
            params.update(_linear_params(group, cfg.num_classes, 2 * fw, rng, dt, 1.0))
    return params


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def mode_params(params: Params, mode: str) -> Params:
    """The subset of ``params`` a given forward mode reads."""
    if mode not in MODE_GROUPS:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    groups = MODE_GROUPS[mode]
    return {k: v for k, v in params.items() if group_of(k) in groups}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def _component(name: str) -> Iterator[None]:
    try:
        yield
    except ElfError as exc:
        if str(exc).startswith(f"[{name}]"):
            raise
        raise type(exc)(f"[{name}] {exc}") from exc


def _note(trace: dict | None, name: str, t: Tensor) -> Tensor:
    if trace is not None:
        trace[name] = t.dims
    return t


def forward_features(
    fundus: FundusFeatures | None,
    oct: OctFeatures | None,
    params: Params,
    cfg: FusionConfig,
    mode: str = "full",
    trace: dict | None = None,
) -> Tensor:
    """Everything after the encoders, for any ablation mode."""
    if mode not in MODE_GROUPS:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    p = params
    x_L = x_G = y_L = y_G = None
    with _component("merge"):
        if fundus is not None:
            x_L, x_G = fundus.merged()
        if oct is not None:
            y_L, y_G = oct.merged()
        for name, t in (("X_L_merged", x_L), ("X_G_merged", x_G), ("Y_L_merged", y_L), ("Y_G_merged", y_G)):
            if t is not None:
                _note(trace, name, t)

    if mode == "fundus_only":
        with _component("fundus_head"):
            f = _note(trace, "fundus_feature", branch_head(x_L, p["fundus_head.weight"], p["fundus_head.bias"]))
        f_a, f_b = f, f
    elif mode == "oct_only":
        with _component("oct_head"):
            f = _note(trace, "oct_feature", branch_head(y_L, p["oct_head.weight"], p["oct_head.bias"]))
        f_a, f_b = f, f
    elif mode == "concat_only":
        with _component("concat_heads"):
            f_a = _note(trace, "fundus_feature", branch_head(x_L, p["fundus_head.weight"], p["fundus_head.bias"]))
            f_b = _note(trace, "oct_feature", branch_head(y_L, p["oct_head.weight"], p["oct_head.bias"]))
    else:
        f_L = f_G = None
        if mode in ("full", "lm_only"):
            with _component("local_module"):
                lm = local_module(x_L, y_L, p, cfg)
                _note(trace, "Y_bar_L", lm.y_bar_L)
                _note(trace, "X_bar_L", lm.x_bar_L)
                _note(trace, "LM_fused", lm.fused)
            with _component("lm_head"):
                f_L = _note(trace, "LM_feature", branch_head(lm.fused, p["lm_head.weight"], p["lm_head.bias"]))
        if mode in ("full", "gm_only"):
            with _component("global_module"):
                gm = global_module(x_G, y_G, p, cfg)
                _note(trace, "Y_bar_G", gm.y_bar_G)
                _note(trace, "Y_agg_G", gm.y_agg_G)
                _note(trace, "GM_fused", gm.fused)
            with _component("gm_head"):
                f_G = _note(trace, "GM_feature", branch_head(gm.fused, p["gm_head.weight"], p["gm_head.bias"]))
        f_a = f_L if f_L is not None else f_G
        f_b = f_G if f_G is not None else f_L

    with _component("classifier"):
        logits = fuse_classify(f_a, f_b, p["classifier.weight"], p["classifier.bias"])
    return _note(trace, "logits", logits)


def forward(sample, params: Params, cfg: FusionConfig, mode: str = "full", trace: dict | None = None) -> Tensor:
    """Logits for one sample (anything with ``fundus`` and ``oct`` tensors).

    Single-modality modes never touch the other modality's tensor.
    """
    if mode not in MODE_GROUPS:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    fundus = oct = None
    branches = (mode != "gm_only", mode in ("full", "gm_only"))
    if mode != "oct_only":
        with _component("encode_fundus"):
            fundus = encode_fundus(sample.fundus, params, cfg, branches)
            for name, t in (("X_L", fundus.local), ("X_G", fundus.global_)):
                if t is not None:
                    _note(trace, name, t)
    if mode != "fundus_only":
        with _component("encode_oct"):
            oct = encode_oct(sample.oct, params, cfg, branches)
            for name, t in (("Y_L", oct.local), ("Y_G", oct.global_)):
                if t is not None:
                    _note(trace, name, t)
    return forward_features(fundus, oct, params, cfg, mode, trace)
