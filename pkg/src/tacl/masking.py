"""BERT-style random masking and batch padding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .corpus import CLS_ID, MASK_ID, N_RESERVED, PAD_ID, SEP_ID, TokenSequence

SPECIAL_IDS = (PAD_ID, CLS_ID, SEP_ID)


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskingRates:
    select: float = 0.15
    mask: float = 0.8
    random: float = 0.1
    keep: float = 0.1
    # "selected": indicator marks every selected position (all three
    # replacement categories); "mask_only": only literal [MASK] positions.
    indicator: str = "selected"

    def __post_init__(self):
        if not 0.0 <= self.select <= 1.0:
            raise MaskingError("select rate must lie in [0, 1]")
        if abs(self.mask + self.random + self.keep - 1.0) > 1e-9:
            raise MaskingError("mask/random/keep rates must sum to 1")
        if self.indicator not in ("selected", "mask_only"):
            raise MaskingError(f"unknown indicator mode {self.indicator!r}")


@dataclass
class MaskedExample:
    original_ids: list[int]
    masked_ids: list[int]
    mask_indicator: list[int]
    selected: list[int]
    mlm_targets: list[int]  # original id where selected, -1 elsewhere
    segment_ids: list[int]
    is_next: bool = False

    @property
    def attention_len(self) -> int:
        return len(self.original_ids)


def apply_masking(seq: TokenSequence, rng: np.random.Generator, vocab_size: int,
                  rates: MaskingRates = MaskingRates(), is_next: bool = False) -> MaskedExample:
    ids = np.asarray(seq.ids, dtype=np.int64)
    maskable = ~np.isin(ids, SPECIAL_IDS)
    candidates = np.flatnonzero(maskable)
    if candidates.size == 0:
        raise MaskingError("sequence has no maskable tokens")

    chosen = (rng.random(ids.size) < rates.select) & maskable
    if not chosen.any():
        chosen[candidates[int(rng.integers(candidates.size))]] = True

    masked = ids.copy()
    category = rng.random(ids.size)
    to_mask = chosen & (category < rates.mask)
    to_random = chosen & (category >= rates.mask) & (category < rates.mask + rates.random)
    masked[to_mask] = MASK_ID
    n_random = int(to_random.sum())
    if n_random:
        masked[to_random] = rng.integers(N_RESERVED, vocab_size, size=n_random)

    indicator = chosen if rates.indicator == "selected" else to_mask
    return MaskedExample(
        original_ids=ids.tolist(),
        masked_ids=masked.tolist(),
        mask_indicator=indicator.astype(np.int64).tolist(),
        selected=chosen.astype(np.int64).tolist(),
        mlm_targets=np.where(chosen, ids, -1).tolist(),
        segment_ids=list(seq.segment_ids),
        is_next=is_next,
    )


@dataclass
class Batch:
    original_ids: torch.Tensor    # (B, n) long
    masked_ids: torch.Tensor      # (B, n) long
    segment_ids: torch.Tensor     # (B, n) long
    padding_mask: torch.Tensor    # (B, n) bool, True = real token
    mask_indicator: torch.Tensor  # (B, n) bool
    selected: torch.Tensor        # (B, n) bool
    mlm_targets: torch.Tensor     # (B, n) long, -1 where unused
    is_next: torch.Tensor         # (B,) long

    @property
    def special_mask(self) -> torch.Tensor:
        ids = self.original_ids
        return (ids == CLS_ID) | (ids == SEP_ID) | (ids == PAD_ID)

    def __len__(self) -> int:
        return self.original_ids.shape[0]


def pad_batch(examples: Sequence[MaskedExample], max_len: int | None = None) -> Batch:
    """Right-pad with [PAD] to ``max_len`` (default: longest example)."""
    if not examples:
        raise MaskingError("empty batch")
    longest = max(e.attention_len for e in examples)
    if max_len is None:
        max_len = longest
    if longest > max_len:
        raise MaskingError(f"example of length {longest} exceeds max_len {max_len}")

    def stack(attr, fill):
        rows = []
        for e in examples:
            v = list(getattr(e, attr))
            rows.append(v + [fill] * (max_len - len(v)))
        return torch.tensor(rows, dtype=torch.long)

    lengths = torch.tensor([e.attention_len for e in examples])
    return Batch(
        original_ids=stack("original_ids", PAD_ID),
        masked_ids=stack("masked_ids", PAD_ID),
        segment_ids=stack("segment_ids", 0),
        padding_mask=torch.arange(max_len)[None, :] < lengths[:, None],
        mask_indicator=stack("mask_indicator", 0).bool(),
        selected=stack("selected", 0).bool(),
        mlm_targets=stack("mlm_targets", -1),
        is_next=torch.tensor([int(e.is_next) for e in examples], dtype=torch.long),
    )
