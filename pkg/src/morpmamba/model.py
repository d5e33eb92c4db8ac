"""MorpMamba network: tokens -> center-gated enhancement -> cross attention
-> ReLU state-space scan -> standardized state -> linear classifier.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted path.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, MagicError, ShapeMismatchError, TruncatedPayloadError
from .morphology import plain_tokens, spatial_tokens, spectral_tokens, token_param_shapes
from .numerics import Tensor

VARIANTS = ("NM", "SMM", "SSMM")
CHECKPOINT_MAGIC = "MMCK1"
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "SSMM"
    patch: int = 4
    bands: int = 15
    classes: int = 9
    d_model: int = 64
    heads: int = 4
    kernel: int = 5
    ssm_dim: int | None = None
    lam: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.patch < 2:
            raise ConfigError(f"patch size must be >= 2, got {self.patch}")
        if self.bands < 1:
            raise ConfigError(f"bands must be >= 1, got {self.bands}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.ssm_dim is not None and self.ssm_dim < 1:
            raise ConfigError(f"ssm_dim must be positive, got {self.ssm_dim}")
        if self.lam < 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")

    @property
    def state_dim(self) -> int:
        return self.d_model if self.ssm_dim is None else self.ssm_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, s = cfg.d_model, cfg.state_dim
    spatial_morph = cfg.variant in ("SMM", "SSMM")
    spectral_morph = cfg.variant == "SSMM"
    shapes: dict[str, tuple[int, ...]] = {}
    for name, shape in token_param_shapes("spatial", spatial_morph, cfg.bands, cfg.patch, d, cfg.kernel).items():
        shapes[f"spatial_tokens.{name}"] = shape
    for name, shape in token_param_shapes("spectral", spectral_morph, cfg.bands, cfg.patch, d, cfg.kernel).items():
        shapes[f"spectral_tokens.{name}"] = shape
    for stream in ("spatial", "spectral"):
        shapes[f"enhance.{stream}_weight"] = (d, d)
        shapes[f"enhance.{stream}_bias"] = (d,)
    for name in ("wq", "wk", "wv", "wo"):
        shapes[f"attention.{name}"] = (d, d)
    shapes["attention.bo"] = (d,)
    shapes["ssm.w_trans"] = (s, s)
    shapes["ssm.w_update"] = (s, d)
    shapes["classifier.weight"] = (cfg.classes, s)
    shapes["classifier.bias"] = (cfg.classes,)
    return dict(sorted(shapes.items()))


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded initialization: SEs at one, biases at zero, everything else
    uniform in +-sqrt(6 / fan_in)."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for key, shape in param_shapes(cfg).items():
        leaf = key.rsplit(".", 1)[1]
        if leaf.endswith("_se"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] if leaf == "dw_weight" else shape[1]
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[key] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def param_count(params: Mapping[str, Tensor]) -> int:
    return sum(int(p.size) for p in params.values())


def subset(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    head = prefix + "."
    return {k[len(head) :]: v for k, v in params.items() if k.startswith(head)}


# ---------------------------------------------------------------------------
# network stages


def _linear(x: Tensor, weight: Tensor) -> Tensor:
    """x W^T for ``x`` of shape (..., n) and ``weight`` of shape (m, n)."""
    if x.ndim == 1:
        return nx.reshape(nx.matmul(nx.reshape(x, (1, x.shape[0])), nx.swap_last(weight)), (weight.shape[0],))
    return nx.matmul(x, nx.swap_last(weight))


def center_indices(p: int) -> list[int]:
    """Row-major token indices of the center pixel (odd P) or central 2x2 block (even P)."""
    if p < 2:
        raise ConfigError(f"patch size must be >= 2, got {p}")
    if p % 2:
        m = p // 2
        return [m * p + m]
    a, b = p // 2 - 1, p // 2
    return [a * p + a, a * p + b, b * p + a, b * p + b]


def center_vector(tokens: Tensor, p: int) -> Tensor:
    idx = center_indices(p)
    picked = nx.getitem(tokens, (Ellipsis, idx, slice(None)))
    return nx.mean(picked, axis=-2)


def enhance(tokens: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """tokens * sigmoid(W c + b), one gate broadcast over every token."""
    if tokens.shape[-1] != weight.shape[0] or c.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"enhance: tokens {tokens.shape}, c {c.shape}, W {weight.shape}, b {bias.shape}")
    gate = nx.sigmoid(nx.add(_linear(c, weight), bias))
    gate = nx.reshape(gate, gate.shape[:-1] + (1, gate.shape[-1]))
    return nx.mul(tokens, gate)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, (n, d) = x.shape[:-2], x.shape[-2:]
    x = nx.reshape(x, lead + (n, heads, d // heads))
    m = len(lead)
    return nx.transpose(x, tuple(range(m)) + (m + 1, m, m + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead, (h, n, dk) = x.shape[:-3], x.shape[-3:]
    m = len(lead)
    x = nx.transpose(x, tuple(range(m)) + (m + 1, m, m + 2))
    return nx.reshape(x, lead + (n, h * dk))


def mhsa(q_tokens: Tensor, kv_tokens: Tensor, params: Mapping[str, Tensor], heads: int, return_attention: bool = False):
    """Cross attention: queries from ``q_tokens``, keys/values from ``kv_tokens``.

    Output has one row per query token.
    """
    d = q_tokens.shape[-1]
    if d % heads:
        raise ConfigError(f"token dim {d} is not divisible by heads={heads}")
    dk = d // heads
    q = _split_heads(nx.matmul(q_tokens, params["wq"]), heads)
    k = _split_heads(nx.matmul(kv_tokens, params["wk"]), heads)
    v = _split_heads(nx.matmul(kv_tokens, params["wv"]), heads)
    scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(dk))
    attn = nx.softmax_rows(scores)
    out = _merge_heads(nx.matmul(attn, v))
    out = nx.add(nx.matmul(out, params["wo"]), params["bo"])
    return (out, attn) if return_attention else out


def ssm_scan(e: Tensor, w_trans: Tensor, w_update: Tensor) -> Tensor:
    """h_t = relu(W_trans h_{t-1} + W_update e_t) from h_0 = 0; returns h_T."""
    if e.ndim < 2 or e.shape[-2] < 1:
        raise DimensionError(f"ssm_scan needs a nonempty (..., T, D) sequence, got {e.shape}")
    if w_update.shape[1] != e.shape[-1] or w_trans.shape != (w_update.shape[0],) * 2:
        raise DimensionError(f"ssm_scan: E {e.shape}, W_trans {w_trans.shape}, W_update {w_update.shape}")
    drive = nx.matmul(e, nx.swap_last(w_update))  # (..., T, S)
    trans_t = nx.swap_last(w_trans)
    h = None
    for t in range(e.shape[-2]):
        u = nx.getitem(drive, (Ellipsis, slice(t, t + 1), slice(None)))
        pre = u if h is None else nx.add(nx.matmul(h, trans_t), u)
        h = nx.relu(pre)
    return nx.reshape(h, h.shape[:-2] + (h.shape[-1],))


def classify(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Raw logits h W^T + b; the L2 penalty lives in the loss."""
    if h.shape[-1] != weight.shape[1]:
        raise DimensionError(f"classify: state {h.shape} vs weight {weight.shape}")
    return nx.add(_linear(h, weight), bias)


def _tokens(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    sp = subset(params, "spatial_tokens")
    sc = subset(params, "spectral_tokens")
    t_spatial = spatial_tokens(x, sp) if cfg.variant in ("SMM", "SSMM") else plain_tokens(x, sp, "spatial")
    t_spectral = spectral_tokens(x, sc) if cfg.variant == "SSMM" else plain_tokens(x, sc, "spectral")
    return t_spatial, t_spectral


def forward(x, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Logits for a channel-first patch ``(C', P, P)`` or batch ``(B, C', P, P)``."""
    x = nx.as_tensor(x, params["classifier.weight"].dtype)
    if x.shape[-3:] != (cfg.bands, cfg.patch, cfg.patch):
        raise DimensionError(
            f"input {x.shape} does not match config (bands={cfg.bands}, patch={cfg.patch})"
        )
    t_spatial, t_spectral = _tokens(x, params, cfg)
    c = center_vector(t_spatial, cfg.patch)
    e_spatial = enhance(t_spatial, c, params["enhance.spatial_weight"], params["enhance.spatial_bias"])
    e_spectral = enhance(t_spectral, c, params["enhance.spectral_weight"], params["enhance.spectral_bias"])
    att = mhsa(e_spectral, e_spatial, subset(params, "attention"), cfg.heads)
    h = ssm_scan(att, params["ssm.w_trans"], params["ssm.w_update"])
    h = nx.standardize(h, NORM_EPS)
    return classify(h, params["classifier.weight"], params["classifier.bias"])


class MorpMamba:
    """Config plus parameters, with batched inference helpers."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, dtype=np.float32):
        self.config = config
        self.params = init_params(config, dtype) if params is None else params
        expected = param_shapes(config)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ShapeMismatchError(f"parameters do not match config: expected {expected}, got {got}")

    @property
    def dtype(self):
        return self.params["classifier.weight"].dtype

    def __call__(self, x) -> Tensor:
        return forward(x, self.params, self.config)

    def param_count(self) -> int:
        return param_count(self.params)

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.classes), dtype=self.dtype)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """1-based class predictions; np.argmax breaks ties toward the lowest class."""
        return self.logits(x, batch_size).argmax(axis=-1) + 1

    def copy(self, dtype=None) -> "MorpMamba":
        dtype = self.dtype if dtype is None else dtype
        params = {k: Tensor(v.data.astype(dtype, copy=True), requires_grad=True) for k, v in self.params.items()}
        return MorpMamba(self.config, params)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, config: ModelConfig, params: Mapping[str, Tensor], run: Mapping | None = None) -> None:
    """Binary MMCK1 file: header line, then (u16 key length, key, u64 count, f32 data) per parameter."""
    header_cfg = config.to_dict()
    if run is not None:
        header_cfg["run"] = dict(run)
    header = json.dumps({"magic": CHECKPOINT_MAGIC, "config": header_cfg}, sort_keys=True, separators=(",", ":"))
    chunks = [header.encode("ascii"), b"\n"]
    for key in sorted(params):
        kb = key.encode("utf-8")
        data = np.ascontiguousarray(params[key].data, dtype="<f4")
        chunks += [struct.pack("<H", len(kb)), kb, struct.pack("<Q", data.size), data.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("ascii")) if nl >= 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or header.get("magic") != CHECKPOINT_MAGIC:
        raise MagicError(f"{path}: not an {CHECKPOINT_MAGIC} checkpoint")
    cfg_dict = dict(header["config"])
    run = cfg_dict.pop("run", {})
    config = ModelConfig.from_dict(cfg_dict)
    shapes = param_shapes(config)
    params: dict[str, Tensor] = {}
    pos = nl + 1
    try:
        while pos < len(raw):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            key = raw[pos : pos + klen].decode("utf-8")
            pos += klen
            (count,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            nbytes = 4 * count
            if pos + nbytes > len(raw):
                raise TruncatedPayloadError(f"{path}: parameter {key!r} is truncated")
            if key not in shapes or int(np.prod(shapes[key])) != count:
                raise ShapeMismatchError(f"{path}: parameter {key!r} with {count} values does not fit the config")
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shapes[key])
            params[key] = Tensor(data.astype(dtype), requires_grad=True)
            pos += nbytes
    except struct.error:
        raise TruncatedPayloadError(f"{path}: checkpoint record is truncated") from None
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise ShapeMismatchError(f"{path}: missing parameters {missing}")
    return config, params, run
