"""DIN-style CTR model over item-ID histories.

Attention weights are unnormalized (no softmax over the history), so the
pooled user vector is a weighted sum rather than an average. Histories are
pooled in canonical (sorted index) order, which makes predictions exactly
invariant to history permutations.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .dataio import DatasetSplit, Interaction
from .numerics import NumericError, Params

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


class UnknownItemError(KeyError):
    pass


@dataclass
class CtrConfig:
    emb_dim: int = 10
    mlp: tuple[int, ...] = (64, 32)
    att_hidden: int = 36
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 512
    epochs: int = 5
    max_seq_len: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.emb_dim < 1 or self.att_hidden < 1:
            raise ValueError("emb_dim and att_hidden must be >= 1")
        if not self.mlp or min(self.mlp) < 1:
            raise ValueError("mlp widths must be non-empty and positive")
        if self.batch_size < 1 or self.max_seq_len < 1 or self.epochs < 0:
            raise ValueError("bad batch_size/max_seq_len/epochs")


@dataclass
class CtrModel:
    params: Params
    vocab: list[str]
    cfg: CtrConfig
    state: nx.OptimizerState | None = field(default=None, repr=False)

    @property
    def index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.vocab)}

    def save(self, path) -> None:
        path = Path(path)
        np.savez(path, **self.params)
        meta = {"config": asdict(self.cfg), "vocab": self.vocab}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def init_params(n_items: int, cfg: CtrConfig, rng: np.random.Generator) -> Params:
    # zero biases: with small embeddings a random bias alone can switch off a whole ReLU layer
    d = cfg.emb_dim
    p: Params = {
        "emb": nx.init_uniform(rng, d, (n_items, d)),
        "att_w1": nx.init_uniform(rng, 3 * d, (3 * d, cfg.att_hidden)),
        "att_b1": np.zeros(cfg.att_hidden),
        "att_w2": nx.init_uniform(rng, cfg.att_hidden, (cfg.att_hidden, 1)),
        "att_b2": np.zeros(1),
    }
    width = 2 * d
    for i, w in enumerate(cfg.mlp):
        p[f"mlp_w{i}"] = nx.init_uniform(rng, width, (width, w))
        p[f"mlp_b{i}"] = np.zeros(w)
        width = w
    p["out_w"] = nx.init_uniform(rng, width, (width, 1))
    p["out_b"] = np.zeros(1)
    return p


def _n_layers(params: Params) -> int:
    return sum(1 for k in params if k.startswith("mlp_w"))


def make_batch(histories: Sequence[Sequence[int]], max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncate to the most recent items, then sort indices for canonical pooling."""
    seqs = [sorted(list(h)[-max_seq_len:]) for h in histories]
    L = max([len(s) for s in seqs] + [1])
    hist = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for b, s in enumerate(seqs):
        hist[b, : len(s)] = s
        mask[b, : len(s)] = True
    return hist, mask


def forward_logits(params: Params, hist: np.ndarray, mask: np.ndarray, targets: np.ndarray,
                   need_cache: bool = False):
    emb = params["emb"]
    d = emb.shape[1]
    eh = emb[hist] * mask[:, :, None]
    et = emb[targets]
    etb = np.broadcast_to(et[:, None, :], eh.shape)
    att_in = np.concatenate([eh, etb, eh * etb], axis=-1)
    a_pre = att_in @ params["att_w1"] + params["att_b1"]
    a_hid = np.maximum(a_pre, 0.0)
    a = (a_hid @ params["att_w2"])[..., 0] + params["att_b2"][0]
    a = a * mask
    user = np.einsum("bl,bld->bd", a, eh)
    x = np.concatenate([user, et], axis=1)
    acts = [x]
    pres = []
    for i in range(_n_layers(params)):
        pre = acts[-1] @ params[f"mlp_w{i}"] + params[f"mlp_b{i}"]
        pres.append(pre)
        acts.append(np.maximum(pre, 0.0))
    z = (acts[-1] @ params["out_w"])[:, 0] + params["out_b"][0]
    if not need_cache:
        return z
    cache = dict(eh=eh, et=et, etb=etb, att_in=att_in, a_pre=a_pre, a_hid=a_hid, a=a,
                 acts=acts, pres=pres, d=d)
    return z, cache


def backward(params: Params, hist, mask, targets, dz: np.ndarray, cache) -> Params:
    g: Params = {}
    acts, pres = cache["acts"], cache["pres"]
    n = _n_layers(params)
    g["out_w"] = acts[-1].T @ dz[:, None]
    g["out_b"] = np.array([dz.sum()])
    dact = dz[:, None] * params["out_w"][:, 0][None, :]
    for i in reversed(range(n)):
        dpre = dact * (pres[i] > 0)
        g[f"mlp_w{i}"] = acts[i].T @ dpre
        g[f"mlp_b{i}"] = dpre.sum(axis=0)
        dact = dpre @ params[f"mlp_w{i}"].T
    d = cache["d"]
    duser, det = dact[:, :d], dact[:, d:].copy()
    eh, a = cache["eh"], cache["a"]
    # user = sum_l a_l eh_l
    da = np.einsum("bd,bld->bl", duser, eh) * mask
    deh = a[:, :, None] * duser[:, None, :]
    g["att_w2"] = np.einsum("blh,bl->h", cache["a_hid"], da)[:, None]
    g["att_b2"] = np.array([da.sum()])
    da_pre = (da[:, :, None] * params["att_w2"][:, 0][None, None, :]) * (cache["a_pre"] > 0)
    g["att_w1"] = np.einsum("blc,blh->ch", cache["att_in"], da_pre)
    g["att_b1"] = da_pre.sum(axis=(0, 1))
    datt = da_pre @ params["att_w1"].T
    etb = cache["etb"]
    deh = deh + datt[..., :d] + datt[..., 2 * d:] * etb
    det = det + np.sum(datt[..., d:2 * d] + datt[..., 2 * d:] * eh, axis=1)
    deh = deh * mask[:, :, None]
    g_emb = np.zeros_like(params["emb"])
    np.add.at(g_emb, hist.reshape(-1), deh.reshape(-1, d))
    np.add.at(g_emb, targets, det)
    g["emb"] = g_emb
    return g


def bce_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def batch_loss(params: Params, hist, mask, targets, labels, need_grad: bool = True):
    """Mean BCE on one batch and its gradient (weight decay lives in the optimizer)."""
    if need_grad:
        z, cache = forward_logits(params, hist, mask, targets, need_cache=True)
    else:
        z = forward_logits(params, hist, mask, targets)
    loss = bce_logits(z, labels)
    if not need_grad:
        return loss, None
    dz = (nx.sigmoid(z) - labels) / z.shape[0]
    return loss, backward(params, hist, mask, targets, dz, cache)


def din_forward(history: Sequence[int], target: int, params: Params, max_seq_len: int = 200) -> float:
    n = params["emb"].shape[0]
    for i in list(history) + [target]:
        if not 0 <= i < n:
            raise UnknownItemError(f"item index {i} outside vocabulary of {n}")
    hist, mask = make_batch([history], max_seq_len)
    z = forward_logits(params, hist, mask, np.array([target]))
    return float(nx.sigmoid(z)[0])


def ctr_loss(predictions, labels, params: Params | None = None, weight_decay: float = 0.0) -> float:
    p = np.clip(np.asarray(predictions, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)))) if p.size else 0.0
    if params is not None and weight_decay:
        loss += weight_decay * sum(float(np.sum(v * v)) for v in params.values())
    return loss


# ---------------------------------------------------------------- data plumbing

def user_sequences(split: DatasetSplit, prefixes: Mapping[str, Sequence[str]] | None = None):
    """(donated prefix, ordered train items, train labels) per user."""
    prefixes = prefixes or {}
    out = {}
    for uid, h in split.histories().items():
        out[uid] = (list(prefixes.get(uid, [])), h.items, h.labels)
    return out


def build_vocab(split: DatasetSplit, prefixes: Mapping[str, Sequence[str]] | None = None) -> list[str]:
    items = {x.item_id for x in split.train}
    for seq in (prefixes or {}).values():
        items.update(seq)
    return sorted(items)


def train_ctr(split: DatasetSplit, cfg: CtrConfig, prefixes: Mapping[str, Sequence[str]] | None = None):
    """Mini-batch AdamW on every train interaction.

    ``prefixes`` maps a user to donated items prepended to all of that
    user's histories; they are treated exactly like original items.
    """
    cfg.validate()
    vocab = build_vocab(split, prefixes)
    index = {it: i for i, it in enumerate(vocab)}
    samples = []
    for uid, (prefix, items, labels) in user_sequences(split, prefixes).items():
        pre = [index[it] for it in prefix]
        idx = [index[it] for it in items]
        for j, (t, lab) in enumerate(zip(idx, labels)):
            samples.append((pre + idx[:j], t, float(lab)))
    rng = np.random.default_rng(cfg.seed)
    params = init_params(len(vocab), cfg, rng)
    state = nx.OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total, n_batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
            hist, mask = make_batch([c[0] for c in chunk], cfg.max_seq_len)
            targets = np.array([c[1] for c in chunk], dtype=np.int64)
            labels = np.array([c[2] for c in chunk])
            loss, grads = batch_loss(params, hist, mask, targets, labels)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite CTR loss at epoch {epoch + 1}, batch {n_batches}")
            params, state = nx.adamw_step(params, grads, state)
            total += loss
            n_batches += 1
        l2 = cfg.weight_decay * sum(float(np.sum(v * v)) for v in params.values())
        row = {"epoch": epoch + 1, "bce": total / max(n_batches, 1)}
        row["total"] = row["bce"] + l2
        log.info("ctr epoch %d bce=%.5f", row["epoch"], row["bce"])
        history.append(row)
    return CtrModel(params, vocab, cfg, state), history


@dataclass
class ScoredRecord:
    user: str
    item: str
    label: int
    score: float

    def to_json(self) -> str:
        return json.dumps({"user": self.user, "item": self.item, "label": self.label, "score": self.score})


def predict(records: Sequence[Interaction], model: CtrModel, split: DatasetSplit,
            prefixes: Mapping[str, Sequence[str]] | None = None,
            batch_size: int = 2048) -> tuple[list[ScoredRecord], int]:
    """Score evaluation interactions; returns (records, number skipped for unknown items).

    The history for every record is the user's full train sequence, preceded
    by its donated prefix when given.
    """
    index = model.index
    seqs = user_sequences(split, prefixes)
    rows, skipped = [], 0
    for x in records:
        if x.item_id not in index:
            skipped += 1
            continue
        prefix, items, _ = seqs.get(x.user_id, ([], [], []))
        hist = [index[it] for it in prefix + items if it in index]
        rows.append((x, hist, index[x.item_id]))
    if skipped:
        log.warning("%d evaluation records skipped: item outside training vocabulary", skipped)
    out: list[ScoredRecord] = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        hist, mask = make_batch([c[1] for c in chunk], model.cfg.max_seq_len)
        z = forward_logits(model.params, hist, mask, np.array([c[2] for c in chunk], dtype=np.int64))
        for (x, _, _), p in zip(chunk, nx.sigmoid(z)):
            out.append(ScoredRecord(x.user_id, x.item_id, x.label, float(p)))
    return out, skipped


def write_predictions(path, records: Sequence[ScoredRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_predictions(path) -> list[ScoredRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(ScoredRecord(str(rec["user"]), str(rec["item"]), int(rec["label"]),
                                        float(rec["score"])))
    return out
