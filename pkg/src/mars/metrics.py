"""AUC, impression-weighted per-user AUC, RelaImpr, and run comparison reports."""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .ctr import ScoredRecord

SEGMENTS = ("low", "mid", "high")


class UndefinedAUCError(ValueError):
    pass


class PartitionMismatchError(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as 1/2, computed exactly from sorted tie groups."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # boundaries of runs of equal scores
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    pos_in = np.add.reduceat(y_sorted.astype(np.int64), starts)
    size = np.diff(np.r_[starts, s.size])
    neg_in = size - pos_in
    neg_below = np.cumsum(neg_in) - neg_in
    # twice the U statistic, kept integral so the result is exact
    twice_u = int(np.sum(2 * pos_in * neg_below + pos_in * neg_in))
    return twice_u / (2 * n_pos * n_neg)


@dataclass
class WeightedAUC:
    auc: float
    users: int
    impressions: int
    skipped_users: int


def user_weighted_auc(records: Sequence[ScoredRecord]) -> WeightedAUC:
    """Per-user AUC averaged with per-user impression counts as weights.

    Users whose records hold a single class have no AUC; they are left out
    of both sums and counted in ``skipped_users``.
    """
    by_user: dict[str, list[ScoredRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user].append(r)
    num = 0.0
    den = 0
    used = skipped = 0
    for uid in sorted(by_user):
        rs = by_user[uid]
        labels = [r.label for r in rs]
        if len(set(labels)) < 2:
            skipped += 1
            continue
        num += len(rs) * roc_auc([r.score for r in rs], labels)
        den += len(rs)
        used += 1
    if den == 0:
        raise UndefinedAUCError("no user has both positive and negative records")
    return WeightedAUC(num / den, used, den, skipped)


def rela_impr(measured_auc: float, base_auc: float) -> float:
    """Relative improvement in percent against the 0.5 random-guess floor."""
    if base_auc == 0.5:
        raise ZeroDivisionError("base AUC of 0.5 leaves RelaImpr undefined")
    return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


def round_pct(x: float) -> float:
    """Two decimals, half away from zero."""
    q = Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(q)


# ---------------------------------------------------------------- reports

def _segment_metrics(records: Sequence[ScoredRecord]) -> dict:
    out: dict = {"records": len(records)}
    try:
        w = user_weighted_auc(records)
        out.update(weighted_auc=w.auc, users=w.users, impressions=w.impressions,
                   skipped_users=w.skipped_users)
    except UndefinedAUCError:
        out.update(weighted_auc=None, users=0, impressions=0,
                   skipped_users=len({r.user for r in records}))
    try:
        out["global_auc"] = roc_auc([r.score for r in records], [r.label for r in records])
    except UndefinedAUCError:
        out["global_auc"] = None
    return out


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MetricReport:
    base: str
    runs: dict[str, dict]
    config_fingerprint: str
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"base": self.base, "config_fingerprint": self.config_fingerprint,
                           "runs": self.runs, "notes": self.notes}, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Plain-text table: weighted AUC and RelaImpr per run, overall and per segment."""
        cols = ["overall"] + list(SEGMENTS)
        head = f"{'Model':<16}" + "".join(f"{c + ' AUC':>14}{'RelaImpr':>11}" for c in cols)
        lines = [head, "-" * len(head)]
        for name in sorted(self.runs, key=lambda n: (n != self.base, n)):
            run = self.runs[name]
            cells = []
            for c in cols:
                m = run["overall"] if c == "overall" else run["segments"][c]
                auc = m["weighted_auc"]
                ri = m.get("rela_impr_pct")
                cells.append(f"{auc:>14.4f}" if auc is not None else f"{'n/a':>14}")
                cells.append(f"{ri:>10.2f}%" if ri is not None else f"{'n/a':>11}")
            lines.append(f"{name:<16}" + "".join(cells))
        return "\n".join(lines) + "\n"


def _partition_key(records: Sequence[ScoredRecord]) -> list[tuple[str, str, int]]:
    return sorted((r.user, r.item, r.label) for r in records)


def build_report(runs: Mapping[str, Sequence[ScoredRecord]], segments: Mapping[str, str], base: str,
                 config: Mapping | None = None) -> MetricReport:
    if base not in runs:
        raise KeyError(f"base run {base!r} not among {sorted(runs)}")
    ref = _partition_key(runs[base])
    for name, recs in runs.items():
        if _partition_key(recs) != ref:
            raise PartitionMismatchError(f"run {name!r} was scored on a different partition than {base!r}")
    out: dict[str, dict] = {}
    for name in sorted(runs):
        recs = runs[name]
        seg_recs: dict[str, list[ScoredRecord]] = {s: [] for s in SEGMENTS}
        for r in recs:
            seg = segments.get(r.user)
            if seg in seg_recs:
                seg_recs[seg].append(r)
        out[name] = {"overall": _segment_metrics(recs),
                     "segments": {s: _segment_metrics(seg_recs[s]) for s in SEGMENTS}}
    base_run = out[base]
    for name, run in out.items():
        pairs = [(run["overall"], base_run["overall"])]
        pairs += [(run["segments"][s], base_run["segments"][s]) for s in SEGMENTS]
        for mine, theirs in pairs:
            for key, tag in (("weighted_auc", "rela_impr_pct"), ("global_auc", "global_rela_impr_pct")):
                a, b = mine[key], theirs[key]
                mine[tag] = round_pct(rela_impr(a, b)) if a is not None and b not in (None, 0.5) else None
    notes = ["weighted_auc follows the impression-weighted per-user form; global_auc pools all records",
             "single-class users are excluded from weighted_auc and counted in skipped_users"]
    return MetricReport(base, out, fingerprint(dict(config or {})), notes)
