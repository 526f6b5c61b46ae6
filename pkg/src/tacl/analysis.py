"""Token-representation self-similarity diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import model as M
from . import tensor_core as tc
from .corpus import CLS_ID, PAD_ID, SEP_ID, TokenSequence, single_sequence

LAYER0 = "embedding_output"


class AnalysisError(ValueError):
    pass


def self_similarity(h: torch.Tensor, keep: torch.Tensor | None = None) -> float:
    """Mean off-diagonal cosine similarity among the rows of ``h`` (n, d).

    Rows where ``keep`` is False are dropped first.
    """
    if keep is not None:
        h = h[keep.bool()]
    n = h.shape[0]
    if n < 2:
        raise AnalysisError("self-similarity needs at least two tokens")
    sims = tc.cosine_matrix(h.detach().double())
    off = sims.sum() - torch.diagonal(sims).sum()
    return float(off) / (n * (n - 1))


def analysis_keep_mask(ids: torch.Tensor, padding_mask: torch.Tensor, include_specials: bool = False) -> torch.Tensor:
    keep = padding_mask.bool() & (ids != PAD_ID)
    if not include_specials:
        keep &= (ids != CLS_ID) & (ids != SEP_ID)
    return keep


@dataclass
class LayerStat:
    layer: int
    mean: float
    std: float
    n: int


@dataclass
class SelfSimReport:
    layers: list[LayerStat]
    model_tag: str = ""
    corpus_tag: str = ""
    layer0: str = LAYER0

    def means(self) -> list[float]:
        return [s.mean for s in self.layers]

    def to_dict(self) -> dict:
        return {"model_tag": self.model_tag, "corpus_tag": self.corpus_tag, "layer0": self.layer0,
                "layers": [asdict(s) for s in self.layers]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "SelfSimReport":
        return cls([LayerStat(**s) for s in d["layers"]], d.get("model_tag", ""), d.get("corpus_tag", ""),
                   d.get("layer0", LAYER0))

    @classmethod
    def load(cls, path: str | Path) -> "SelfSimReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sentence_scores(params: dict, config: M.ModelConfig, sequences: Sequence[TokenSequence],
                    include_specials: bool = False, batch_size: int = 1) -> np.ndarray:
    """s(x) for every sentence and layer, shape (n_sentences, n_layers + 1).

    The default ``batch_size=1`` runs each sentence unpadded, so scores do not
    depend on which sentences share a batch.
    """
    rows = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        width = max(len(s) for s in chunk)
        ids = torch.full((len(chunk), width), PAD_ID, dtype=torch.long)
        segs = torch.zeros_like(ids)
        for b, s in enumerate(chunk):
            ids[b, :len(s)] = torch.tensor(s.ids)
            segs[b, :len(s)] = torch.tensor(s.segment_ids)
        pad = ids != PAD_ID
        with torch.no_grad():
            acts = M.forward(params, config, ids, segs, pad, train=False)
        keep = analysis_keep_mask(ids, pad, include_specials)
        for b in range(len(chunk)):
            rows.append([self_similarity(h[b], keep[b]) for h in acts.hidden])
    return np.asarray(rows, dtype=np.float64)


def layerwise_self_similarity(params: dict, config: M.ModelConfig, sequences: Sequence[TokenSequence],
                              include_specials: bool = False, model_tag: str = "",
                              corpus_tag: str = "", batch_size: int = 1) -> SelfSimReport:
    """Per-layer mean and (population) std of s(x) over the sample."""
    if not sequences:
        raise AnalysisError("empty sentence sample")
    scores = sentence_scores(params, config, sequences, include_specials, batch_size)
    n = scores.shape[0]
    layers = []
    for layer in range(scores.shape[1]):
        col = scores[:, layer]
        # sorted summation keeps the result independent of sample order
        col = np.sort(col)
        mean = math.fsum(col) / n
        std = math.sqrt(math.fsum((c - mean) ** 2 for c in col) / n)
        layers.append(LayerStat(layer, mean, std, n))
    return SelfSimReport(layers, model_tag, corpus_tag)


def sample_sentences(docs: Sequence[Sequence[Sequence[int]]], n: int, max_len: int, seed: int = 13,
                     min_tokens: int = 2) -> list[TokenSequence]:
    """Seeded sample of ``[CLS] sentence [SEP]`` sequences with at least ``min_tokens`` body tokens."""
    pool = [s for d in docs for s in d if len(s) >= min_tokens]
    if not pool:
        raise AnalysisError("no sentence long enough to analyse")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [single_sequence(pool[i], max_len) for i in sorted(idx)]


@dataclass
class SelfSimMatrix:
    values: np.ndarray
    tokens: list[str] = field(default_factory=list)


def self_sim_matrix(params: dict, config: M.ModelConfig, seq: TokenSequence, layer: int = -1,
                    tokens: Sequence[str] | None = None) -> SelfSimMatrix:
    """Pairwise cosine matrix of one sequence's states at ``layer`` (default final)."""
    ids = torch.tensor(seq.ids)[None]
    segs = torch.tensor(seq.segment_ids)[None]
    with torch.no_grad():
        acts = M.forward(params, config, ids, segs, train=False)
    h = acts.hidden[layer][0].double()
    m = tc.cosine_matrix(h).numpy()
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return SelfSimMatrix(m, list(tokens) if tokens is not None else [str(i) for i in seq.ids])


def _gray(v: float) -> int:
    x = 255.0 * (1.0 - min(1.0, max(-1.0, v))) / 2.0
    return int(math.floor(x + 0.5))


def heatmap_pgm(matrix: SelfSimMatrix, scale: int = 1) -> bytes:
    """Binary PGM; cosine in [-1, 1] maps linearly to gray [255, 0] (darker = more similar)."""
    m = matrix.values
    rows = []
    for i in range(m.shape[0]):
        row = bytes(_gray(float(v)) for v in m[i] for _ in range(scale))
        rows.extend([row] * scale)
    h, w = m.shape[0] * scale, m.shape[1] * scale
    return f"P5\n{w} {h}\n255\n".encode("ascii") + b"".join(rows)


def heatmap_csv(matrix: SelfSimMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + matrix.tokens)
    for tok, row in zip(matrix.tokens, matrix.values):
        writer.writerow([tok] + [f"{float(v):.9f}" for v in row])
    return buf.getvalue()


def read_heatmap_csv(text: str) -> SelfSimMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    tokens = rows[0][1:]
    values = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return SelfSimMatrix(values, tokens)


def export_heatmap(matrix: SelfSimMatrix, prefix: str | Path, scale: int = 1) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.pgm``."""
    prefix = Path(prefix)
    csv_path, pgm_path = prefix.with_name(prefix.name + ".csv"), prefix.with_name(prefix.name + ".pgm")
    csv_path.write_text(heatmap_csv(matrix), encoding="utf-8")
    pgm_path.write_bytes(heatmap_pgm(matrix, scale))
    return csv_path, pgm_path


@dataclass
class Comparison:
    deltas: list[float]  # mean_a - mean_b per layer
    final_delta: float
    more_discriminative: str  # "a", "b" or "tie" (lower final-layer s(x))

    def table(self, a_name: str = "a", b_name: str = "b") -> str:
        lines = [f"{'layer':>5}  {'delta(' + a_name + '-' + b_name + ')':>20}"]
        lines += [f"{i:>5}  {d:>+20.6f}" for i, d in enumerate(self.deltas)]
        winner = {"a": a_name, "b": b_name, "tie": "tie"}[self.more_discriminative]
        lines.append(f"final layer: more discriminative = {winner}")
        return "\n".join(lines)


def compare_models(a: SelfSimReport, b: SelfSimReport) -> Comparison:
    if len(a.layers) != len(b.layers):
        raise AnalysisError("reports have different layer counts")
    deltas = [x.mean - y.mean for x, y in zip(a.layers, b.layers)]
    final = deltas[-1]
    verdict = "a" if final < 0 else "b" if final > 0 else "tie"
    return Comparison(deltas, final, verdict)
