"""Tensor operations, reverse-mode gradients and gradient checking.

Tensors are ``torch.Tensor`` objects; torch's autograd records the
computation and performs the reverse sweep. This module adds the contracts
the rest of the package relies on: explicit shape errors, finiteness checks,
a stable masked softmax, a one-shot :func:`backward`, a central-difference
gradient checker, and the named-tensor file format used by checkpoints.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import torch

WIDE = torch.float64
STANDARD = torch.float32

FORMAT_VERSION = 1
_MAGIC = b"TNSR"
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class DimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    # a NaN or Inf anywhere makes the sum non-finite; finite float32 data
    # never comes near overflow at the scales used here
    if x.is_floating_point() and x.numel() and not math.isfinite(float(x.detach().sum())):
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteError(f"non-finite values in {what}")
    return x


def tensor(data, dtype=STANDARD, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype).clone()
    check_finite(t)
    return t.requires_grad_(requires_grad)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise DimensionError(str(e)) from None
    return check_finite(a + b, "add")


def softmax(x: torch.Tensor, axis: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax along ``axis`` with max subtraction.

    ``mask`` (broadcastable bool, True = keep) removes entries from the
    normaliser; removed entries get probability exactly 0.
    """
    check_finite(x, "softmax input")
    if mask is not None:
        x = x.masked_fill(~mask, -math.inf)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    check_finite(x, "log_softmax input")
    if mask is not None:
        x = x.masked_fill(~mask, -math.inf)
    return x - torch.logsumexp(x, dim=axis, keepdim=True)


def _norms(x: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((n == 0).any()):
        raise DegenerateVectorError("zero-norm vector in cosine similarity")
    return n


def cosine_sim(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    return (u * v).sum(-1) / (_norms(u).squeeze(-1) * _norms(v).squeeze(-1))


def normalize_rows(x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Scale rows of ``x`` to unit length; rows outside ``valid`` are left as zeros."""
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if valid is None:
        valid = torch.ones(x.shape[:-1], dtype=torch.bool)
    if bool(((n.squeeze(-1) == 0) & valid).any()):
        raise DegenerateVectorError("zero-norm representation row")
    safe = torch.where(valid.unsqueeze(-1), n, torch.ones_like(n))
    return torch.where(valid.unsqueeze(-1), x / safe, torch.zeros_like(x))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a_hat = a / _norms(a)
    b_hat = a_hat if b is None else b / _norms(b)
    return a_hat @ b_hat.transpose(-1, -2)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError("layer_norm affine parameters do not match last extent")
    mu = x.mean(-1, keepdim=True)
    centered = x - mu
    var = (centered * centered).mean(-1, keepdim=True)
    return check_finite(centered / torch.sqrt(var + eps) * gain + bias, "layer_norm")


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact Gaussian-CDF form
    return x * 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return table[ids]


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-row cross-entropy; ``logits`` is (..., K), ``targets`` is (...)."""
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy shapes: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    logp = log_softmax(logits, -1)
    return -logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None = None,
            training: bool = True) -> torch.Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(loss: torch.Tensor, wrt: Mapping[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Run the reverse sweep from a scalar ``loss``.

    Returns gradients for ``wrt`` (a name -> leaf map). Every leaf is given
    an entry; leaves the loss does not depend on get zeros. A loss can be
    differentiated once.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise BackwardError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise BackwardError("loss is detached from any recorded computation")
    if getattr(loss, "_consumed", False):
        raise BackwardError("backward already ran for this loss; run a new forward first")
    check_finite(loss, "loss")
    wrt = dict(wrt or {})
    leaves = [t for t in wrt.values() if t.requires_grad]
    names = [k for k, t in wrt.items() if t.requires_grad]
    grads = torch.autograd.grad(loss, leaves, allow_unused=True) if leaves else ()
    loss._consumed = True
    out = {}
    for name, t, g in zip(names, leaves, grads):
        out[name] = torch.zeros_like(t) if g is None else g
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def numerical_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float) -> torch.Tensor:
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(x))
            flat[i] = orig - eps
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6,
               tol: float = 1e-4, analytic: Callable[[torch.Tensor], torch.Tensor] | None = None,
               floor: float = 1e-6, scale_floor: float = 1e-4) -> GradCheckReport:
    """Compare an analytic gradient of scalar ``f`` at ``x`` with central differences.

    The analytic gradient comes from :func:`backward` unless ``analytic`` is
    given. Per-coordinate relative error is ``|a - n| / max(|a|, |n|, floor,
    scale_floor * max|a|)``: coordinates far below the largest gradient entry
    are judged at that entry's scale, since central differences cannot resolve
    them relative to themselves.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if analytic is None:
        xa = x.detach().clone().requires_grad_(True)
        a = backward(f(xa), {"x": xa})["x"]
    else:
        a = analytic(x.detach().clone())
    n = numerical_grad(f, x, eps)
    diff = (a.detach() - n).abs()
    a = a.detach()
    lo = max(floor, scale_floor * float(a.abs().max())) if a.numel() else floor
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(n, lo))
    rel = diff / denom
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.numel() else 0.0,
        max_abs_error=float(diff.max()) if diff.numel() else 0.0,
        tol=tol,
        n_coords=n.numel(),
    )


# ---------------------------------------------------------------------------
# named-tensor container
# ---------------------------------------------------------------------------

def dumps_tensors(tensors: Mapping[str, torch.Tensor]) -> bytes:
    """Serialise named tensors.

    Layout (little-endian): magic ``TNSR``, u32 format version, u32 count;
    then per tensor u32 name length, UTF-8 name, u8 dtype code, u32 rank,
    u64 extents, raw scalar payload.
    """
    parts = [_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, t in tensors.items():
        t = t.detach().contiguous().cpu()
        if t.dtype not in _DTYPE_CODES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", _DTYPE_CODES[t.dtype], t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        arr = t.numpy()
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def loads_tensors(buf: bytes) -> dict[str, torch.Tensor]:
    import numpy as np

    if buf[:4] != _MAGIC:
        raise ValueError("not a named-tensor container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 12
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dtype = _CODE_DTYPES[code]
        np_dtype = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}[dtype]
        count_el = math.prod(shape)
        arr = np.frombuffer(buf, dtype=np_dtype, count=count_el, offset=off)
        off += arr.nbytes
        out[name] = torch.from_numpy(arr.astype(np_dtype[1:]).reshape(shape).copy())
    return out


def save_tensors(tensors: Mapping[str, torch.Tensor], path: str | Path) -> None:
    Path(path).write_bytes(dumps_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    return loads_tensors(Path(path).read_bytes())
