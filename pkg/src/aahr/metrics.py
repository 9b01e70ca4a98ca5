"""Retrieval metrics over similarity matrices with multi-positive ground
truth: R@K, rSum, R-Precision, and mAP@R, plus the bidirectional evaluation
protocol.

R@K uses the query-level hit-rate convention standard in cross-modal
retrieval: a query scores 1 if any of its positives appears in the top K.
With single-positive queries this coincides with the coverage ratio
|G intersect S_K| / |G|, which is also available via ``convention="coverage"``.
Ties are broken toward the lower gallery index.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .errors import ProtocolError, ShapeError

RECALL_KS = (1, 5, 10)


@dataclass
class SimilarityMatrix:
    sims: np.ndarray              # queries x gallery
    query_positives: List[Sequence[int]]

    def validate(self) -> "SimilarityMatrix":
        if self.sims.ndim != 2:
            raise ShapeError("similarity matrix must be 2-D")
        if not np.all(np.isfinite(self.sims)):
            raise ProtocolError("similarity matrix contains non-finite entries")
        if len(self.query_positives) != self.sims.shape[0]:
            raise ProtocolError("one positive set per query row is required")
        gallery = self.sims.shape[1]
        for q, pos in enumerate(self.query_positives):
            if len(pos) < 1:
                raise ProtocolError(f"query {q} has no positives")
            if any(g < 0 or g >= gallery for g in pos):
                raise ProtocolError(f"query {q} lists an out-of-range gallery index")
        return self


def ranking(sims: np.ndarray) -> np.ndarray:
    """Descending argsort per row; equal scores keep lower gallery index first."""
    return np.argsort(-sims, axis=1, kind="stable")


def _relevance(sm: SimilarityMatrix) -> np.ndarray:
    """Boolean Q x G matrix: rel[q, r] says rank r of query q is a positive."""
    order = ranking(sm.sims)
    rel = np.zeros(sm.sims.shape, dtype=bool)
    for q, pos in enumerate(sm.query_positives):
        rel[q] = np.isin(order[q], np.fromiter(pos, dtype=np.int64))
    return rel


def recall_at_k(sm: SimilarityMatrix, k: int, convention: str = "hit") -> float:
    """Percentage of queries with a positive in the top-K (``hit``), or the
    mean covered fraction of each query's positives (``coverage``)."""
    sm.validate()
    gallery = sm.sims.shape[1]
    if not 1 <= k <= gallery:
        raise ValueError(f"K={k} out of range for gallery size {gallery}")
    rel = _relevance(sm)
    if convention == "hit":
        per_query = rel[:, :k].any(axis=1).astype(np.float64)
    elif convention == "coverage":
        counts = np.array([len(p) for p in sm.query_positives], dtype=np.float64)
        per_query = rel[:, :k].sum(axis=1) / counts
    else:
        raise ValueError(f"unknown recall convention {convention!r}")
    return float(np.mean(per_query) * 100.0)


def r_precision(sm: SimilarityMatrix) -> float:
    """Precision within the top-R ranks where R is each query's positive count."""
    sm.validate()
    rel = _relevance(sm)
    per_query = np.empty(rel.shape[0], dtype=np.float64)
    for q, pos in enumerate(sm.query_positives):
        r = len(pos)
        per_query[q] = rel[q, :r].sum() / float(r)
    return float(np.mean(per_query) * 100.0)


def map_at_r(sm: SimilarityMatrix) -> float:
    """Mean average precision accumulated through each query's last positive."""
    sm.validate()
    rel = _relevance(sm)
    gallery = rel.shape[1]
    ranks = np.arange(1, gallery + 1, dtype=np.float64)
    per_query = np.empty(rel.shape[0], dtype=np.float64)
    for q, pos in enumerate(sm.query_positives):
        hits = rel[q].astype(np.float64)
        precisions = np.cumsum(hits) / ranks
        per_query[q] = np.sum(precisions * hits) / float(len(pos))
    return float(np.mean(per_query) * 100.0)


@dataclass
class MetricsReport:
    direction: str
    r_at: Dict[int, float] = field(default_factory=dict)
    r_p: float = 0.0
    map_at_r: float = 0.0

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "recall_at": {str(k): v for k, v in self.r_at.items()},
            "r_precision": self.r_p,
            "map_at_r": self.map_at_r,
        }


@dataclass
class EvalResult:
    image_to_text: MetricsReport
    text_to_image: MetricsReport
    rsum: float

    def to_dict(self) -> dict:
        return {
            "image_to_text": self.image_to_text.to_dict(),
            "text_to_image": self.text_to_image.to_dict(),
            "rsum": self.rsum,
        }

    def format_table(self) -> str:
        header = f"{'direction':<14}" + "".join(f"{f'R@{k}':>8}" for k in RECALL_KS)
        header += f"{'R-P':>8}{'mAP@R':>8}"
        lines = [header]
        for rep in (self.image_to_text, self.text_to_image):
            row = f"{rep.direction:<14}"
            row += "".join(f"{rep.r_at[k]:>8.1f}" for k in RECALL_KS)
            row += f"{rep.r_p:>8.1f}{rep.map_at_r:>8.1f}"
            lines.append(row)
        lines.append(f"rSum {self.rsum:.1f}")
        return "\n".join(lines)


def _report(sm: SimilarityMatrix, direction: str) -> MetricsReport:
    gallery = sm.sims.shape[1]
    r_at = {k: recall_at_k(sm, min(k, gallery)) for k in RECALL_KS}
    return MetricsReport(
        direction=direction, r_at=r_at, r_p=r_precision(sm), map_at_r=map_at_r(sm)
    )


def evaluate(
    image_embs: np.ndarray,
    text_embs: np.ndarray,
    image_ids: Sequence[str],
    caption_ids: Sequence[str],
    image_to_captions: Dict[str, Sequence[str]],
) -> EvalResult:
    """Bidirectional retrieval evaluation from normalized embeddings.

    Similarities are computed at 32-bit; K values above the gallery size are
    clamped (a 2-item gallery scores R@5 = R@2).  An image query counts a
    hit if any of its captions is retrieved, and symmetrically for captions.
    """
    if len(image_ids) != image_embs.shape[0] or len(caption_ids) != text_embs.shape[0]:
        raise ProtocolError("one id per embedding row is required")
    if not image_to_captions:
        raise ProtocolError("ground truth mapping is empty")
    cap_index = {c: i for i, c in enumerate(caption_ids)}
    img_index = {g: i for i, g in enumerate(image_ids)}
    i2t_pos: List[List[int]] = []
    t2i_pos: List[List[int]] = [[] for _ in caption_ids]
    for qi, img in enumerate(image_ids):
        caps = image_to_captions.get(img, [])
        idxs = sorted(cap_index[c] for c in caps if c in cap_index)
        if not idxs:
            raise ProtocolError(f"image {img!r} has no captions in the gallery")
        i2t_pos.append(idxs)
        for ci in idxs:
            t2i_pos[ci].append(qi)
    for ci, pos in enumerate(t2i_pos):
        if not pos:
            raise ProtocolError(f"caption {caption_ids[ci]!r} has no images in the gallery")

    sims = image_embs.astype(np.float32) @ text_embs.astype(np.float32).T
    sm_i2t = SimilarityMatrix(sims=sims, query_positives=i2t_pos)
    sm_t2i = SimilarityMatrix(sims=sims.T.copy(), query_positives=t2i_pos)
    rep_i2t = _report(sm_i2t, "image->text")
    rep_t2i = _report(sm_t2i, "text->image")
    rsum = float(sum(rep_i2t.r_at.values()) + sum(rep_t2i.r_at.values()))
    return EvalResult(image_to_text=rep_i2t, text_to_image=rep_t2i, rsum=rsum)
