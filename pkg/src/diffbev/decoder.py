"""Per-proposal denoising decoder: a small MLP over pooled RoI features, a
sinusoidal time embedding and the raw proposal coordinates, with exact
reverse-mode gradients.

Heads emit one class logit (sigmoid -> probability), five signal-space
residuals added onto the proposal coordinates and clamped to the signal
range, and two height outputs: cz = prior_cz + a, dz = prior_dz * exp(b).
With all-zero parameters the decoder is the identity on boxes at prob 0.5.

Proposals never interact, so permuting a batch permutes the outputs; the
backward accumulation reduces over proposals in index order, which keeps
single-threaded training bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import NUM_CHANNELS


@dataclass(frozen=True)
class DecoderConfig:
    pool_size: int = 7
    hidden: int = 128
    time_dim: int = 64
    signal_scale: float = 2.0
    height_mode: str = "regressed"  # or "prior"
    prior_cz: float = 0.75
    prior_dz: float = 1.5

    def __post_init__(self):
        if self.height_mode not in ("regressed", "prior"):
            raise ValueError(f"unknown height mode {self.height_mode!r}")
        if self.time_dim % 2 != 0:
            raise ValueError("time embedding dimension must be even")

    @property
    def roi_dim(self) -> int:
        return self.pool_size * self.pool_size * NUM_CHANNELS

    @property
    def concat_dim(self) -> int:
        return 2 * self.hidden + 5


_SHAPES = {
    "w_roi": lambda c: (c.roi_dim, c.hidden),
    "b_roi": lambda c: (c.hidden,),
    "w_time": lambda c: (c.time_dim, c.hidden),
    "b_time": lambda c: (c.hidden,),
    "w_h1": lambda c: (c.concat_dim, c.hidden),
    "b_h1": lambda c: (c.hidden,),
    "w_h2": lambda c: (c.hidden, c.hidden),
    "b_h2": lambda c: (c.hidden,),
    "w_cls": lambda c: (c.hidden, 1),
    "b_cls": lambda c: (1,),
    "w_reg": lambda c: (c.hidden, 5),
    "b_reg": lambda c: (5,),
    "w_ht": lambda c: (c.hidden, 2),
    "b_ht": lambda c: (2,),
}

PARAM_NAMES = tuple(_SHAPES)


def param_shapes(cfg: DecoderConfig) -> dict:
    return {name: fn(cfg) for name, fn in _SHAPES.items()}


def init_params(cfg: DecoderConfig, rng: np.random.Generator, head_scale: float = 0.0) -> dict:
    """He-scaled trunk weights; heads start at ``head_scale`` (zero by default,
    which makes the fresh decoder the identity passthrough)."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("b_"):
            params[name] = np.zeros(shape)
        elif name in ("w_cls", "w_reg", "w_ht"):
            params[name] = head_scale * rng.standard_normal(shape)
        else:
            params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / shape[0])
    return params


def zero_params(cfg: DecoderConfig) -> dict:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def validate_params(params: dict, cfg: DecoderConfig) -> None:
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        raise ValueError(f"parameter names {sorted(params)} do not match {sorted(shapes)}")
    for name, arr in params.items():
        if arr.shape != shapes[name]:
            raise ValueError(f"{name}: shape {arr.shape} != expected {shapes[name]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer time level; components in [-1, 1]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass
class DecoderOutput:
    probs: np.ndarray  # (N,)
    x0_signal: np.ndarray  # (N, 5) clamped
    cz: np.ndarray  # (N,)
    dz: np.ndarray  # (N,)
    cache: dict


def decoder_forward(
    params: dict, roi: np.ndarray, t: int, signal: np.ndarray, cfg: DecoderConfig
) -> DecoderOutput:
    n = roi.shape[0]
    roi_flat = roi.reshape(n, -1)
    sig = np.asarray(signal, dtype=float).reshape(n, 5)
    emb = time_embedding(t, cfg.time_dim)

    r = roi_flat @ params["w_roi"] + params["b_roi"]
    te = emb @ params["w_time"] + params["b_time"]
    h0 = np.concatenate([r, np.broadcast_to(te, (n, te.size)), sig], axis=1)
    a1 = h0 @ params["w_h1"] + params["b_h1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params["w_h2"] + params["b_h2"]
    h2 = np.maximum(a2, 0.0)

    logit = (h2 @ params["w_cls"] + params["b_cls"])[:, 0]
    prob = 1.0 / (1.0 + np.exp(-logit))
    delta = h2 @ params["w_reg"] + params["b_reg"]
    x0_pre = sig + delta
    x0 = np.clip(x0_pre, -cfg.signal_scale, cfg.signal_scale)
    ht = h2 @ params["w_ht"] + params["b_ht"]
    if cfg.height_mode == "regressed":
        cz = cfg.prior_cz + ht[:, 0]
        dz = cfg.prior_dz * np.exp(ht[:, 1])
    else:
        cz = np.full(n, cfg.prior_cz)
        dz = np.full(n, cfg.prior_dz)

    for name, arr in (("prob", prob), ("x0", x0), ("cz", cz), ("dz", dz)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite decoder output in {name} (training divergence)")

    cache = {
        "roi_flat": roi_flat,
        "emb": emb,
        "h0": h0,
        "a1": a1,
        "h1": h1,
        "a2": a2,
        "h2": h2,
        "prob": prob,
        "inside": np.abs(x0_pre) < cfg.signal_scale,
        "dz": dz,
        "n": n,
    }
    return DecoderOutput(probs=prob, x0_signal=x0, cz=cz, dz=dz, cache=cache)


def decoder_backward(
    params: dict,
    cache: dict,
    d_prob: np.ndarray,
    d_x0: np.ndarray,
    d_cz: np.ndarray,
    d_dz: np.ndarray,
    cfg: DecoderConfig,
):
    """Exact gradients of the loss w.r.t. every parameter and the inputs.

    Takes loss gradients w.r.t. the decoder outputs (probability, clamped
    signal prediction, heights) and returns (param_grads, input_grads) where
    input_grads holds d_roi (N, roi_dim) and d_signal (N, 5).
    """
    prob = cache["prob"]
    d_logit = np.asarray(d_prob, dtype=float) * prob * (1.0 - prob)
    d_delta = np.asarray(d_x0, dtype=float) * cache["inside"]
    if cfg.height_mode == "regressed":
        d_ht = np.stack([np.asarray(d_cz, dtype=float), np.asarray(d_dz, dtype=float) * cache["dz"]], axis=1)
    else:
        d_ht = np.zeros((cache["n"], 2))

    h2, h1, h0 = cache["h2"], cache["h1"], cache["h0"]
    grads = {}
    grads["w_cls"] = h2.T @ d_logit[:, None]
    grads["b_cls"] = np.array([d_logit.sum()])
    grads["w_reg"] = h2.T @ d_delta
    grads["b_reg"] = d_delta.sum(axis=0)
    grads["w_ht"] = h2.T @ d_ht
    grads["b_ht"] = d_ht.sum(axis=0)

    d_h2 = d_logit[:, None] @ params["w_cls"].T + d_delta @ params["w_reg"].T + d_ht @ params["w_ht"].T
    d_a2 = d_h2 * (cache["a2"] > 0)
    grads["w_h2"] = h1.T @ d_a2
    grads["b_h2"] = d_a2.sum(axis=0)
    d_h1 = d_a2 @ params["w_h2"].T
    d_a1 = d_h1 * (cache["a1"] > 0)
    grads["w_h1"] = h0.T @ d_a1
    grads["b_h1"] = d_a1.sum(axis=0)
    d_h0 = d_a1 @ params["w_h1"].T

    hidden = cfg.hidden
    d_r = d_h0[:, :hidden]
    d_te = d_h0[:, hidden : 2 * hidden]
    d_sig_h0 = d_h0[:, 2 * hidden :]

    grads["w_roi"] = cache["roi_flat"].T @ d_r
    grads["b_roi"] = d_r.sum(axis=0)
    grads["w_time"] = np.outer(cache["emb"], d_te.sum(axis=0))
    grads["b_time"] = d_te.sum(axis=0)

    input_grads = {
        "d_roi": d_r @ params["w_roi"].T,
        "d_signal": d_sig_h0 + d_delta,  # residual connection
    }
    return grads, input_grads


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, config_text: str) -> None:
    """NPZ container: ``version`` (int), ``config_text`` (str), and one
    ``param/<name>`` float64 array per parameter, row-major. The layout is
    stable across package versions; readers must check ``version``."""
    arrays = {f"param/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    np.savez(
        path,
        version=np.array(CHECKPOINT_VERSION),
        config_text=np.array(config_text),
        **arrays,
    )


def load_checkpoint(path):
    """Returns (params dict, config text)."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config_text = str(data["config_text"])
        params = {
            key[len("param/") :]: data[key].astype(np.float64)
            for key in data.files
            if key.startswith("param/")
        }
    return params, config_text
