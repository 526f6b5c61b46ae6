"""A small post-layer-norm BERT encoder over a named parameter map.

The model is functional: ``forward(params, ...)`` takes the parameter dict,
so the frozen teacher and the trainable student run the same code with
different parameter sets.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch

from . import tensor_core as tc

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    dropout_p: float = 0.1
    ln_eps: float = 1e-12

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class EncoderActivations:
    hidden: list[torch.Tensor]  # n_layers + 1 tensors of shape (B, n, d); 0 = embedding output
    pooled: torch.Tensor        # (B, d)
    padding_mask: torch.Tensor  # (B, n)
    attention: list[torch.Tensor] | None = None

    @property
    def final(self) -> torch.Tensor:
        return self.hidden[-1]


# truncated at +-2 sigma, the normal's std shrinks by this factor
_TRUNC_STD_FACTOR = math.sqrt(
    1.0 - 4.0 * math.exp(-2.0) / math.sqrt(2.0 * math.pi) / math.erf(2.0 / math.sqrt(2.0))
)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_len, d),
        "embeddings.segment": (2, d),
        "embeddings.ln.gain": (d,),
        "embeddings.ln.bias": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "attn.ln.gain"] = (d,)
        shapes[p + "attn.ln.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, ff)
        shapes[p + "ffn.in.bias"] = (ff,)
        shapes[p + "ffn.out.weight"] = (ff, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ffn.ln.gain"] = (d,)
        shapes[p + "ffn.ln.bias"] = (d,)
    shapes.update({
        "mlm.transform.weight": (d, d),
        "mlm.transform.bias": (d,),
        "mlm.ln.gain": (d,),
        "mlm.ln.bias": (d,),
        "mlm.bias": (config.vocab_size,),
        "pooler.weight": (d, d),
        "pooler.bias": (d,),
        "nsp.weight": (d, 2),
        "nsp.bias": (2,),
    })
    return shapes


def is_no_decay(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    return name.endswith(".bias") or ".ln." in name


def init_params(config: ModelConfig, seed: int = 13, dtype=tc.STANDARD) -> dict[str, torch.Tensor]:
    """Truncated-normal weights with std 0.02 (cut at two underlying sigmas)."""
    g = torch.Generator().manual_seed(seed)
    sigma = 0.02 / _TRUNC_STD_FACTOR
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            t = torch.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            t = torch.empty(shape, dtype=tc.WIDE)
            torch.nn.init.trunc_normal_(t, mean=0.0, std=sigma, a=-2 * sigma, b=2 * sigma, generator=g)
            t = t.to(dtype)
        params[name] = t.requires_grad_(True)
    return params


def _linear(x, params, prefix):
    return tc.add(tc.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def forward(params: dict[str, torch.Tensor], config: ModelConfig, ids: torch.Tensor,
            segment_ids: torch.Tensor | None = None, padding_mask: torch.Tensor | None = None,
            train: bool = False, generator: torch.Generator | None = None,
            return_attention: bool = False) -> EncoderActivations:
    """Encode a (B, n) or (n,) id tensor.

    Dropout is applied only when ``train`` is true; padded keys are
    excluded from attention.
    """
    if ids.dim() == 1:
        ids = ids[None]
        segment_ids = None if segment_ids is None else segment_ids[None]
        padding_mask = None if padding_mask is None else padding_mask[None]
    B, n = ids.shape
    if n > config.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {config.max_len}")
    if segment_ids is None:
        segment_ids = torch.zeros_like(ids)
    if padding_mask is None:
        padding_mask = torch.ones(B, n, dtype=torch.bool)
    p, eps, drop = config.dropout_p, config.ln_eps, train and config.dropout_p > 0

    def do(x):
        return tc.dropout(x, p, generator, training=drop)

    positions = torch.arange(n)
    x = tc.embedding_lookup(params["embeddings.token"], ids)
    x = x + tc.embedding_lookup(params["embeddings.position"], positions)[None]
    x = x + tc.embedding_lookup(params["embeddings.segment"], segment_ids)
    x = do(tc.layer_norm(x, params["embeddings.ln.gain"], params["embeddings.ln.bias"], eps))
    hidden = [x]
    attention = []

    h, dh = config.n_heads, config.d_model // config.n_heads
    key_mask = padding_mask[:, None, None, :]  # (B, 1, 1, n)
    for i in range(config.n_layers):
        pre = f"layers.{i}."

        def heads(t):
            return t.view(B, n, h, dh).transpose(1, 2)

        q = heads(_linear(x, params, pre + "attn.q"))
        k = heads(_linear(x, params, pre + "attn.k"))
        v = heads(_linear(x, params, pre + "attn.v"))
        scores = tc.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
        probs = tc.softmax(scores, -1, mask=key_mask)
        if return_attention:
            attention.append(probs)
        ctx = tc.matmul(do(probs), v).transpose(1, 2).reshape(B, n, config.d_model)
        attn_out = do(_linear(ctx, params, pre + "attn.o"))
        x = tc.layer_norm(x + attn_out, params[pre + "attn.ln.gain"], params[pre + "attn.ln.bias"], eps)
        ff = _linear(tc.gelu(_linear(x, params, pre + "ffn.in")), params, pre + "ffn.out")
        x = tc.layer_norm(x + do(ff), params[pre + "ffn.ln.gain"], params[pre + "ffn.ln.bias"], eps)
        hidden.append(x)

    pooled = torch.tanh(_linear(x[:, 0], params, "pooler"))
    return EncoderActivations(hidden, pooled, padding_mask, attention if return_attention else None)


def mlm_head(hidden: torch.Tensor, params: dict[str, torch.Tensor], config: ModelConfig) -> torch.Tensor:
    """(..., d) hidden states -> (..., vocab) logits, output projection tied to token embeddings."""
    t = tc.gelu(_linear(hidden, params, "mlm.transform"))
    t = tc.layer_norm(t, params["mlm.ln.gain"], params["mlm.ln.bias"], config.ln_eps)
    return tc.add(tc.matmul(t, params["embeddings.token"].t()), params["mlm.bias"])


def mlm_logits(acts: EncoderActivations, params: dict[str, torch.Tensor], config: ModelConfig) -> torch.Tensor:
    return mlm_head(acts.final, params, config)


def nsp_logits(acts: EncoderActivations, params: dict[str, torch.Tensor]) -> torch.Tensor:
    return _linear(acts.pooled, params, "nsp")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def clone_params(params: dict[str, torch.Tensor], requires_grad: bool = True) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().requires_grad_(requires_grad) for k, v in params.items()}


def save_checkpoint(path: str | Path, params: dict[str, torch.Tensor], config: ModelConfig,
                    step: int = 0, extra: dict | None = None) -> Path:
    """Write ``params.bin`` plus a ``config.json`` sidecar into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tc.save_tensors(params, path / "params.bin")
    meta = {"format_version": CHECKPOINT_VERSION, "step": step, "config": asdict(config)}
    if extra:
        meta.update(extra)
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path, requires_grad: bool = True):
    """Return ``(params, config, meta)`` from a checkpoint directory."""
    path = Path(path)
    meta = json.loads((path / "config.json").read_text())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    config = ModelConfig.from_dict(meta["config"])
    params = tc.load_tensors(path / "params.bin")
    expected = param_shapes(config)
    if set(params) != set(expected) or any(tuple(params[k].shape) != expected[k] for k in expected):
        raise ValueError(f"checkpoint {path} does not match its config")
    ordered = {k: params[k].requires_grad_(requires_grad) for k in expected}
    return ordered, config, meta
