"""Symbolic dimension trace of the full forward pass; nothing is allocated."""

from __future__ import annotations

from .config import FusionConfig


def symbols(cfg: FusionConfig) -> dict[str, int]:
    return {
        "C_x": cfg.c_x,
        "H_x": cfg.h_x,
        "W_x": cfg.w_x,
        "D_x": cfg.d_x,
        "T_y": cfg.t_y,
        "C_y": cfg.c_y,
        "H_y": cfg.h_y,
        "W_y": cfg.w_y,
        "S_y": cfg.s_y,
        "fused_width": cfg.fused_width,
        "num_classes": cfg.num_classes,
    }


def encoder_stages(cfg: FusionConfig) -> dict[str, tuple[int, ...]]:
    """Intermediate dims inside the toy encoders."""
    (h1, w1), (h2, w2) = cfg.fundus_stage_hw()
    t, oh, ow = cfg.oct_input_thw
    sh, sw = cfg.oct_stage_hw()
    return {
        "fundus_input": (3,) + tuple(cfg.fundus_input_hw),
        "fundus_conv1": (cfg.fundus_mid_channels, h1, w1),
        "fundus_conv2": (cfg.c_x, h2, w2),
        "oct_input": (t, 1, oh, ow),
        "oct_spatial": (t, cfg.c_y, sh, sw),
        "oct_spatial_pooled": (t, cfg.c_y, cfg.h_y, cfg.w_y),
    }


def shape_trace(cfg: FusionConfig) -> dict[str, tuple[int, ...]]:
    """Dims of every named tensor the full-mode forward records in its trace."""
    cfg.validate()
    dx, sy, fw = cfg.d_x, cfg.s_y, cfg.fused_width
    x = (cfg.c_x, cfg.h_x, cfg.w_x)
    y = (cfg.t_y, cfg.c_y, cfg.h_y, cfg.w_y)
    return {
        "X_L": x,
        "X_G": x,
        "Y_L": y,
        "Y_G": y,
        "X_L_merged": (dx, cfg.w_x),
        "X_G_merged": (dx, cfg.w_x),
        "Y_L_merged": (cfg.t_y, sy, cfg.w_y),
        "Y_G_merged": (cfg.t_y, sy, cfg.w_y),
        "Y_bar_L": (dx, sy, cfg.w_y),
        "X_bar_L": (dx, sy, cfg.w_y),
        "LM_fused": (2 * dx, sy, cfg.w_y),
        "LM_feature": (fw,),
        "Y_bar_G": (dx, sy, cfg.w_y),
        "Y_agg_G": (dx, cfg.w_x),
        "GM_fused": (2 * dx, cfg.w_x),
        "GM_feature": (fw,),
        "logits": (cfg.num_classes,),
    }


def _fmt(dims: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in dims)


def render_trace(cfg: FusionConfig) -> str:
    lines = ["# symbols"]
    lines += [f"{k:<12} = {v}" for k, v in symbols(cfg).items()]
    lines.append("# toy encoder stages")
    lines += [f"{k:<18} {_fmt(v)}" for k, v in encoder_stages(cfg).items()]
    lines.append("# forward (full mode)")
    lines += [f"{k:<18} {_fmt(v)}" for k, v in shape_trace(cfg).items()]
    return "\n".join(lines) + "\n"
