"""Interaction/feature files, leave-one-out splitting, activity segments, synthetic data."""

from __future__ import annotations

import json
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EMB_MAGIC = b"MARSEMB1"
POSITIVE_RATING = 4.0


class ParseError(ValueError):
    pass


class DuplicateRecordError(ValueError):
    pass


class FormatError(ValueError):
    pass


class SpecError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: float

    @property
    def label(self) -> int:
        return 1 if self.rating >= POSITIVE_RATING else 0


@dataclass
class ItemFeatures:
    item_id: str
    txt_feat: np.ndarray
    img_feat: np.ndarray


@dataclass
class UserHistory:
    user_id: str
    items: list[str]
    labels: list[int]


@dataclass
class DatasetSplit:
    train: list[Interaction]
    valid: list[Interaction]
    test: list[Interaction]
    activity: dict[str, str] = field(default_factory=dict)

    def histories(self) -> dict[str, UserHistory]:
        """Training histories for every user, including users absent from train."""
        return train_histories(self)

    def heldout(self) -> list[Interaction]:
        return self.valid + self.test

    def users(self) -> list[str]:
        return sorted({x.user_id for x in self.train + self.valid + self.test})


def _order_key(x: Interaction):
    return (x.timestamp, x.item_id)


# ---------------------------------------------------------------- file formats

def load_interactions(path) -> list[Interaction]:
    out: list[Interaction] = []
    seen: set[tuple[str, str, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                x = Interaction(str(rec["user"]), str(rec["item"]), int(rec["ts"]), float(rec["rating"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if x.timestamp < 0 or not math.isfinite(x.rating):
                raise ParseError(f"{path}:{lineno}: invalid timestamp or rating")
            key = (x.user_id, x.item_id, x.timestamp)
            if key in seen:
                raise DuplicateRecordError(f"{path}:{lineno}: duplicate record {key}")
            seen.add(key)
            out.append(x)
    return out


def write_interactions(path, interactions: Iterable[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x in interactions:
            fh.write(json.dumps({"user": x.user_id, "item": x.item_id, "ts": x.timestamp,
                                 "rating": x.rating}) + "\n")


def load_items(path) -> list[ItemFeatures]:
    out: list[ItemFeatures] = []
    dims: tuple[int, int] | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                txt = np.asarray(rec["txt_feat"], dtype=np.float64)
                img = np.asarray(rec["img_feat"], dtype=np.float64)
                item = str(rec["item"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if txt.ndim != 1 or img.ndim != 1:
                raise ParseError(f"{path}:{lineno}: features must be flat lists")
            if not (np.all(np.isfinite(txt)) and np.all(np.isfinite(img))):
                raise ParseError(f"{path}:{lineno}: non-finite feature value")
            if dims is None:
                dims = (txt.size, img.size)
            elif dims != (txt.size, img.size):
                raise ParseError(f"{path}:{lineno}: feature dimensions {txt.size},{img.size} != {dims}")
            out.append(ItemFeatures(item, txt, img))
    return out


def write_items(path, items: Iterable[ItemFeatures]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps({"item": it.item_id, "txt_feat": it.txt_feat.tolist(),
                                 "img_feat": it.img_feat.tolist()}) + "\n")


def write_embeddings(path, ids: Sequence[str], m: np.ndarray) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"embedding matrix must be 2-d, got {m.shape}")
    if len(ids) != m.shape[0]:
        raise FormatError(f"{len(ids)} ids for {m.shape[0]} rows")
    parts = [EMB_MAGIC, struct.pack("<II", m.shape[0], m.shape[1]),
             np.ascontiguousarray(m, dtype="<f8").tobytes()]
    for uid in ids:
        raw = uid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    rows, cols = struct.unpack_from("<II", data, 8)
    off = 16
    nbytes = rows * cols * 8
    if len(data) < off + nbytes:
        raise FormatError(f"{path}: truncated matrix")
    m = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).astype(np.float64).reshape(rows, cols)
    off += nbytes
    ids: list[str] = []
    for _ in range(rows):
        if len(data) < off + 4:
            raise FormatError(f"{path}: truncated id table")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + n:
            raise FormatError(f"{path}: truncated id string")
        ids.append(data[off:off + n].decode("utf-8"))
        off += n
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return ids, m


# ---------------------------------------------------------------- splitting

def leave_one_out_split(interactions: Iterable[Interaction]) -> DatasetSplit:
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for x in interactions:
        by_user[x.user_id].append(x)
    train: list[Interaction] = []
    valid: list[Interaction] = []
    test: list[Interaction] = []
    for uid in sorted(by_user):
        seq = sorted(by_user[uid], key=_order_key)
        if len(seq) < 3:
            train.extend(seq)
            continue
        train.extend(seq[:-2])
        valid.append(seq[-2])
        test.append(seq[-1])
    split = DatasetSplit(train, valid, test)
    split.activity = segment_activity(train_histories(split)) if by_user else {}
    return split


def train_histories(split: DatasetSplit) -> dict[str, UserHistory]:
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for x in split.train:
        by_user[x.user_id].append(x)
    out = {}
    for uid in split.users():
        seq = sorted(by_user.get(uid, []), key=_order_key)
        out[uid] = UserHistory(uid, [x.item_id for x in seq], [x.label for x in seq])
    return out


def segment_activity(histories: dict[str, UserHistory], low_frac: float = 0.3,
                     high_frac: float = 0.3) -> dict[str, str]:
    """Bottom ``low_frac`` of users by training length are low-active, top ``high_frac`` high."""
    if not (low_frac > 0 and high_frac > 0 and low_frac + high_frac <= 1):
        raise SpecError(f"bad activity fractions {low_frac}, {high_frac}")
    if not histories:
        raise EmptyInputError("no users to segment")
    order = sorted(histories, key=lambda u: (len(histories[u].items), u))
    n = len(order)
    n_low = math.floor(n * low_frac)
    n_high = math.floor(n * high_frac)
    out = {}
    for rank, uid in enumerate(order):
        if rank < n_low:
            out[uid] = "low"
        elif rank >= n - n_high:
            out[uid] = "high"
        else:
            out[uid] = "mid"
    return out


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    n_users: int = 2000
    n_items: int = 500
    n_topics: int = 8
    txt_dim: int = 32
    img_dim: int = 24
    noise_scale: float = 0.1
    min_interactions: int = 12
    max_interactions: int = 60
    low_active_frac: float = 0.3
    low_min_interactions: int = 3
    low_max_interactions: int = 5
    on_topic_prob: float = 0.7
    match_click_prob: float = 0.8
    mismatch_click_prob: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_topics < 2:
            raise SpecError("need at least two topics")
        if self.n_topics > self.n_items:
            raise SpecError(f"{self.n_topics} topics cannot be spread over {self.n_items} items")
        if self.noise_scale < 0:
            raise SpecError("noise scale must be non-negative")
        if self.n_users < 1 or self.txt_dim < 1 or self.img_dim < 1:
            raise SpecError("counts and dimensions must be positive")
        if not (1 <= self.low_min_interactions <= self.low_max_interactions):
            raise SpecError("bad low-active interaction range")
        if not (1 <= self.min_interactions <= self.max_interactions):
            raise SpecError("bad interaction range")
        if max(self.max_interactions, self.low_max_interactions) > self.n_items:
            raise SpecError("users cannot interact with more distinct items than exist")
        if not 0 <= self.low_active_frac <= 1:
            raise SpecError("low_active_frac must lie in [0, 1]")


@dataclass
class GroundTruth:
    item_topic: dict[str, int]
    user_topic: dict[str, int]


def _uid(i: int) -> str:
    return f"u{i:05d}"


def _iid(i: int) -> str:
    return f"i{i:05d}"


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Interaction], list[ItemFeatures], GroundTruth]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    T = spec.n_topics
    # every topic gets at least one item
    item_topic = np.concatenate([np.arange(T), rng.integers(0, T, size=spec.n_items - T)])
    rng.shuffle(item_topic)
    txt_centroids = rng.standard_normal((T, spec.txt_dim)) / math.sqrt(spec.txt_dim)
    img_centroids = rng.standard_normal((T, spec.img_dim)) / math.sqrt(spec.img_dim)
    items = []
    for i in range(spec.n_items):
        t = item_topic[i]
        txt = txt_centroids[t] + spec.noise_scale * rng.standard_normal(spec.txt_dim) / math.sqrt(spec.txt_dim)
        img = img_centroids[t] + spec.noise_scale * rng.standard_normal(spec.img_dim) / math.sqrt(spec.img_dim)
        items.append(ItemFeatures(_iid(i), txt, img))
    by_topic = [np.flatnonzero(item_topic == t) for t in range(T)]

    user_topic = rng.integers(0, T, size=spec.n_users)
    is_low = rng.random(spec.n_users) < spec.low_active_frac
    interactions: list[Interaction] = []
    for u in range(spec.n_users):
        if is_low[u]:
            n = int(rng.integers(spec.low_min_interactions, spec.low_max_interactions + 1))
        else:
            n = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
        own = by_topic[user_topic[u]]
        chosen: list[int] = []
        taken: set[int] = set()
        while len(chosen) < n:
            if rng.random() < spec.on_topic_prob:
                cand = int(own[rng.integers(own.size)])
            else:
                cand = int(rng.integers(spec.n_items))
            if cand in taken:
                continue
            taken.add(cand)
            chosen.append(cand)
        ts0 = int(rng.integers(0, 1_000_000))
        gaps = rng.integers(1, 10_000, size=n)
        for j, item in enumerate(chosen):
            p = spec.match_click_prob if item_topic[item] == user_topic[u] else spec.mismatch_click_prob
            pos = rng.random() < p
            rating = float(rng.integers(4, 6)) if pos else float(rng.integers(1, 4))
            interactions.append(Interaction(_uid(u), _iid(item), ts0 + int(gaps[: j + 1].sum()), rating))
    truth = GroundTruth({_iid(i): int(item_topic[i]) for i in range(spec.n_items)},
                        {_uid(u): int(user_topic[u]) for u in range(spec.n_users)})
    return interactions, items, truth
