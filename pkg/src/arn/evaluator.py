"""Re-ID inference and retrieval metrics (cosine ranking, CMC, mAP)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import ConfigError, LabeledSample
from .network import ARN, images_to_tensor

PROTOCOLS = ("plain", "cross_camera")
REPORT_RANKS = (1, 5, 10, 20)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray | None
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.identities = np.asarray(self.identities)
        if self.cameras is not None:
            self.cameras = np.asarray(self.cameras)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.identities):
            raise ConfigError("vectors must be n x d with one identity per row")

    def l2_normalized(self) -> "EmbeddingSet":
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return EmbeddingSet(self.vectors / np.maximum(norms, 1e-12), self.identities, self.cameras, True)


@dataclass
class RankingResult:
    """Per-query gallery orderings restricted to protocol-valid items.

    ``order[q]`` lists valid gallery indices by descending similarity (ties
    by ascending index); ``matches[q]`` flags same-identity items along that
    order; ``similarities[q]`` holds the sorted scores.
    """

    order: list[np.ndarray]
    matches: list[np.ndarray]
    similarities: list[np.ndarray]
    protocol: str

    @property
    def scorable(self) -> np.ndarray:
        """Queries with at least one valid correct match; the rest are excluded from metrics."""
        return np.array([m.any() for m in self.matches], dtype=bool)


def embed(samples: Sequence[LabeledSample], model: ARN, batch_size: int = 256) -> EmbeddingSet:
    """L2-normalized shared features via backbone and shared encoder only."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = images_to_tensor([s.image for s in samples[start : start + batch_size]], dtype)
            chunks.append(model.embed(batch).to(torch.float64).numpy())
    model.train(was_training)
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, model.config.latent_dim))
    cameras = [s.camera for s in samples]
    cams = None if any(c is None for c in cameras) else np.array(cameras)
    return EmbeddingSet(vectors, np.array([s.identity for s in samples]), cams).l2_normalized()


def shared_private_cosine(model: ARN, samples: Sequence[LabeledSample], domain) -> float:
    """Mean |cos| between each sample's shared and private feature."""
    if not model.use_private:
        raise ConfigError("model has no private encoders")
    model.eval()
    with torch.no_grad():
        images = images_to_tensor([s.image for s in samples], next(model.parameters()).dtype)
        maps = model.extract_feature_map(images)
        shared = model.encode_shared(maps)
        private = model.encode_private(maps, domain)
        cos = torch.nn.functional.cosine_similarity(shared, private, dim=1, eps=1e-12)
    return float(cos.abs().mean())


def rank(queries: EmbeddingSet, gallery: EmbeddingSet, protocol: str = "cross_camera") -> RankingResult:
    """Rank the gallery for every query by dot product of normalized rows.

    Under ``cross_camera`` gallery items sharing both identity and camera
    with the query are removed. Without camera metadata that protocol warns
    and falls back to ``plain``.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if not (queries.normalized and gallery.normalized):
        raise ConfigError("rank expects L2-normalized embeddings")
    if queries.vectors.shape[1] != gallery.vectors.shape[1]:
        raise ConfigError(f"dimension mismatch: {queries.vectors.shape[1]} vs {gallery.vectors.shape[1]}")
    if protocol == "cross_camera" and (queries.cameras is None or gallery.cameras is None):
        warnings.warn("no camera metadata; cross_camera falls back to plain", RuntimeWarning, stacklevel=2)
        protocol = "plain"

    sims = queries.vectors @ gallery.vectors.T
    same_id = queries.identities[:, None] == gallery.identities[None, :]
    valid = np.ones_like(same_id)
    if protocol == "cross_camera":
        valid = ~(same_id & (queries.cameras[:, None] == gallery.cameras[None, :]))

    order, matches, scores = [], [], []
    for q in range(len(sims)):
        idx = np.flatnonzero(valid[q])
        # stable sort keeps ascending gallery index among equal scores
        ranked = idx[np.argsort(-sims[q, idx], kind="stable")]
        order.append(ranked)
        matches.append(same_id[q, ranked])
        scores.append(sims[q, ranked])
    result = RankingResult(order, matches, scores, protocol)
    empty = int((~result.scorable).sum())
    if empty:
        warnings.warn(f"{empty} queries have no valid gallery match and are excluded", RuntimeWarning, stacklevel=2)
    return result


def cmc(result: RankingResult, max_rank: int = 20) -> np.ndarray:
    """Fraction of scorable queries whose first correct match is within rank k, k = 1..max_rank."""
    if max_rank < 1:
        raise ConfigError("max_rank must be >= 1")
    curve = np.zeros(max_rank)
    keep = result.scorable
    if not keep.any():
        return curve
    for m, ok in zip(result.matches, keep):
        if ok:
            first = int(np.argmax(m))
            if first < max_rank:
                curve[first:] += 1
    return curve / keep.sum()


def average_precision(matches: np.ndarray) -> float:
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        return float("nan")
    precision_at_hits = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def mean_average_precision(result: RankingResult) -> float:
    aps = [average_precision(m) for m, ok in zip(result.matches, result.scorable) if ok]
    return float(np.mean(aps)) if aps else 0.0


def expected_random_ap(num_relevant: int, num_valid: int) -> float:
    """Expected AP of a uniformly random ordering with R relevant out of N items.

    E[AP] = (R-1)/(N-1) + (N-R)/(N(N-1)) * H_N, with H_N the N-th harmonic number.
    """
    R, N = num_relevant, num_valid
    if R == 0:
        return float("nan")
    if N == 1:
        return 1.0
    harmonic = float(np.sum(1.0 / np.arange(1, N + 1)))
    return (R - 1) / (N - 1) + (N - R) / (N * (N - 1)) * harmonic


def chance_map(result: RankingResult) -> float:
    """mAP expected from random rankings over the same valid/relevant sets."""
    vals = [expected_random_ap(int(m.sum()), len(m)) for m, ok in zip(result.matches, result.scorable) if ok]
    return float(np.mean(vals)) if vals else 0.0


def metrics(result: RankingResult, max_rank: int = 20) -> dict:
    curve = cmc(result, max(max_rank, max(REPORT_RANKS)))
    out = {f"rank{k}": float(curve[k - 1]) for k in REPORT_RANKS}
    out["mAP"] = mean_average_precision(result)
    out["num_queries"] = int(result.scorable.sum())
    out["protocol"] = result.protocol
    return out


def evaluate(model: ARN, query: Sequence[LabeledSample], gallery: Sequence[LabeledSample], protocol="cross_camera"):
    """Embed, rank and score; returns (metrics dict, CMC curve)."""
    result = rank(embed(query, model), embed(gallery, model), protocol)
    return metrics(result), cmc(result, max(REPORT_RANKS))


def brute_force_oracle(queries: EmbeddingSet, gallery: EmbeddingSet, protocol: str, max_rank: int = 20):
    """Reference (CMC, mAP) by exhaustive pairwise comparison; for tests on small inputs only.

    Shares no code with :func:`rank`, :func:`cmc` or :func:`mean_average_precision`.
    A gallery item's rank is one plus the number of valid items that beat it
    (higher score, or equal score and lower index).
    """
    def unit(v):
        n = math.sqrt(sum(float(x) * float(x) for x in v))
        return [float(x) / max(n, 1e-12) for x in v]

    qv = [unit(v) for v in queries.vectors]
    gv = [unit(v) for v in gallery.vectors]
    use_cams = protocol == "cross_camera" and queries.cameras is not None and gallery.cameras is not None
    hits_at = [0] * max_rank
    aps = []
    for qi, q in enumerate(qv):
        q_id = queries.identities[qi]
        allowed = []
        for gi in range(len(gv)):
            if use_cams and gallery.identities[gi] == q_id and gallery.cameras[gi] == queries.cameras[qi]:
                continue
            allowed.append(gi)
        score = {gi: sum(a * b for a, b in zip(q, gv[gi])) for gi in allowed}
        position = {}
        for gi in allowed:
            beaten_by = 0
            for other in allowed:
                if score[other] > score[gi] or (score[other] == score[gi] and other < gi):
                    beaten_by += 1
            position[gi] = beaten_by + 1
        relevant = sorted(position[gi] for gi in allowed if gallery.identities[gi] == q_id)
        if not relevant:
            continue
        for k in range(max_rank):
            if relevant[0] <= k + 1:
                hits_at[k] += 1
        aps.append(sum((n + 1) / p for n, p in enumerate(relevant)) / len(relevant))
    if not aps:
        return np.zeros(max_rank), 0.0
    return np.array(hits_at, dtype=float) / len(aps), sum(aps) / len(aps)
