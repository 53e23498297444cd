"""Exact cosine retrieval over high-active users and sequence augmentation strategies."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .alignment import EmbeddingStore
from .dataio import DatasetSplit, UserHistory
from .numerics import ShapeError, cosine_rows

STRATEGIES = ("most_similar", "filter", "kth_similar", "dp")
ORIGINAL = "original"


class MissingEmbeddingError(KeyError):
    pass


class EmptyIndexError(LookupError):
    pass


class AlreadyAugmentedError(ValueError):
    pass


@dataclass
class AugmentConfig:
    strategy: str = "filter"
    theta: float = 0.3
    k: int = 3
    max_len: int = 200

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not -1.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [-1, 1]")
        if self.k < 1 or self.max_len < 1:
            raise ValueError("k and max_len must be >= 1")


@dataclass
class UserIndex:
    user_ids: list[str]
    unit: np.ndarray                    # rows L2-normalized
    norms: np.ndarray
    excluded: list[str] = field(default_factory=list)   # zero-norm users, never retrievable

    def __len__(self) -> int:
        return len(self.user_ids)


@dataclass
class AugmentedHistory:
    user_id: str
    items: list[str]
    provenance: list[str]

    @property
    def donated(self) -> list[str]:
        return [it for it, p in zip(self.items, self.provenance) if p != ORIGINAL]

    @property
    def original(self) -> list[str]:
        return [it for it, p in zip(self.items, self.provenance) if p == ORIGINAL]

    def to_json(self) -> str:
        return json.dumps({"user": self.user_id, "items": self.items, "provenance": self.provenance})

    @classmethod
    def from_json(cls, line: str) -> "AugmentedHistory":
        rec = json.loads(line)
        if len(rec["items"]) != len(rec["provenance"]):
            raise ValueError(f"items/provenance length mismatch for {rec['user']}")
        return cls(str(rec["user"]), list(rec["items"]), list(rec["provenance"]))


def donated_tag(uid: str) -> str:
    return f"donated:{uid}"


def build_index(store: EmbeddingStore, activity: Mapping[str, str]) -> UserIndex:
    lookup = store.user_lookup()
    high = sorted(u for u, seg in activity.items() if seg == "high")
    dim = store.user_emb.shape[1] if store.user_emb.ndim == 2 else 0
    ids, rows, norms, excluded = [], [], [], []
    for uid in high:
        if uid not in lookup:
            raise MissingEmbeddingError(f"high-active user {uid!r} has no embedding")
        v = lookup[uid]
        n = float(np.sqrt(v @ v))
        if n == 0.0:
            excluded.append(uid)
            continue
        ids.append(uid)
        rows.append(v / n)
        norms.append(n)
    unit = np.vstack(rows) if rows else np.zeros((0, dim))
    return UserIndex(ids, unit, np.asarray(norms), excluded)


def _ranked(index: UserIndex, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(index) == 0:
        raise EmptyIndexError("no high-active users to retrieve from")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.unit.shape[1],):
        raise ShapeError(f"query dimension {query.shape} does not match index {index.unit.shape[1]}")
    sims = cosine_rows(index.unit, query)
    # user_ids are sorted, so position breaks ties by ascending id
    order = np.lexsort((np.arange(len(sims)), -sims))
    return order, sims


def nearest_user(index: UserIndex, query) -> tuple[str, float]:
    order, sims = _ranked(index, query)
    best = order[0]
    return index.user_ids[best], float(sims[best])


def top_k_users(index: UserIndex, query, k: int) -> list[tuple[str, float]]:
    order, sims = _ranked(index, query)
    return [(index.user_ids[i], float(sims[i])) for i in order[:k]]


def item_user_similarities(donor_items: Sequence[str], user_emb: np.ndarray,
                           item_lookup: Mapping[str, np.ndarray]) -> list[float]:
    if not donor_items:
        return []
    try:
        rows = np.vstack([item_lookup[it] for it in donor_items])
    except KeyError as exc:
        raise MissingEmbeddingError(f"no catalog embedding for item {exc.args[0]!r}") from exc
    return cosine_rows(rows, np.asarray(user_emb, dtype=np.float64)).tolist()


def filter_sequence(items: Sequence[str], scores: Sequence[float], theta: float) -> list[str]:
    if len(items) != len(scores):
        raise ShapeError("scores must align with the history")
    return [it for it, s in zip(items, scores) if s >= theta]


def best_window(gains: Sequence[float]) -> tuple[int, int] | None:
    """Kadane's maximum-sum contiguous window as a half-open ``(start, stop)``.

    Ties go to the earliest-ending window, then the shortest. Returns None
    when no window has a positive sum.
    """
    best_sum = 0.0
    best: tuple[int, int] | None = None
    cur = 0.0
    start = 0
    for j, g in enumerate(gains):
        if cur <= 0.0:
            cur = g
            start = j
        else:
            cur += g
        if cur > best_sum:
            best_sum = cur
            best = (start, j + 1)
    return best


def _as_plain(uid: str, hist) -> list[str]:
    if isinstance(hist, AugmentedHistory):
        if any(p != ORIGINAL for p in hist.provenance):
            raise AlreadyAugmentedError(f"history of {uid!r} already carries donated items")
        return list(hist.items)
    return list(hist.items)


def _truncate(donated: list[tuple[str, str]], original: list[str], max_len: int):
    room = max_len - len(original)
    if room <= 0:
        return [], original[len(original) - max_len:]
    return donated[max(0, len(donated) - room):], original


def augment_user(uid: str, index: UserIndex, store: EmbeddingStore, histories: Mapping[str, object],
                 cfg: AugmentConfig) -> AugmentedHistory:
    cfg.validate()
    original = _as_plain(uid, histories[uid])
    users = store.user_lookup()
    if uid not in users:
        raise MissingEmbeddingError(f"no embedding for user {uid!r}")
    query = users[uid]
    items = store.item_lookup()

    def donor_items(donor: str) -> list[str]:
        return _as_plain(donor, histories[donor])

    donated: list[tuple[str, str]] = []
    if cfg.strategy == "kth_similar":
        for donor, _ in top_k_users(index, query, cfg.k):
            seq = donor_items(donor)
            kept = filter_sequence(seq, item_user_similarities(seq, query, items), cfg.theta)
            donated.extend((it, donor) for it in kept)
    else:
        donor, _ = nearest_user(index, query)
        seq = donor_items(donor)
        if cfg.strategy == "most_similar":
            kept = seq
        else:
            scores = item_user_similarities(seq, query, items)
            if cfg.strategy == "filter":
                kept = filter_sequence(seq, scores, cfg.theta)
            else:
                win = best_window([s - cfg.theta for s in scores])
                kept = seq[win[0]:win[1]] if win else []
        donated = [(it, donor) for it in kept]
    donated, original = _truncate(donated, original, cfg.max_len)
    return AugmentedHistory(uid, [it for it, _ in donated] + original,
                            [donated_tag(d) for _, d in donated] + [ORIGINAL] * len(original))


def augment_dataset(split: DatasetSplit, index: UserIndex, store: EmbeddingStore,
                    cfg: AugmentConfig, histories: Mapping[str, UserHistory] | None = None
                    ) -> dict[str, AugmentedHistory]:
    """Augment every low-active user; everyone else passes through with original provenance."""
    histories = split.histories() if histories is None else histories
    out = {}
    for uid in sorted(histories):
        if split.activity.get(uid) == "low":
            out[uid] = augment_user(uid, index, store, histories, cfg)
        else:
            items = _as_plain(uid, histories[uid])
            out[uid] = AugmentedHistory(uid, items, [ORIGINAL] * len(items))
    return out


def write_augmented(path, augmented: Mapping[str, AugmentedHistory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid in sorted(augmented):
            fh.write(augmented[uid].to_json() + "\n")


def read_augmented(path) -> dict[str, AugmentedHistory]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                h = AugmentedHistory.from_json(line)
                out[h.user_id] = h
    return out
