"""Stein-aligned multimodal item/user encoder.

Item ID sequences go through single-head self-attention; text and image
features are projected into a shared hidden space, fused by cross-attention
with a residual LayerNorm, and used as the query of a second cross-attention
over the contextual ID matrix. The fused vector is added back onto that
attention output, so content can reach the FFN that scores the result
against the click label. The whole network is trained jointly with a kernel alignment
loss plus a Stein-score entropy bonus, and then exported as frozen
item and user embeddings. A user vector is the mean over clicked history
items, each embedded in the user's own sequence context.

All gradients are hand-derived and checked against finite differences in
the test suite.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataio import DatasetSplit, ItemFeatures, UserHistory, read_embeddings, write_embeddings
from .numerics import EmptyBatchError, NumericError, Params, ShapeError

log = logging.getLogger(__name__)

LN_EPS = 1e-5


class EmptyHistoryError(ValueError):
    pass


class MissingFeaturesError(KeyError):
    pass


@dataclass
class AlignmentConfig:
    id_dim: int = 128
    hidden_dim: int = 32
    dk: int = 16
    lam: float = 0.1
    beta: float = 0.1
    ridge: float = 1e-3
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 3
    max_seq_len: int = 200
    seed: int = 0
    # add emb_fused back onto the secondary cross-attention output
    residual: bool = True
    # a training target sits at the end of its own context, as at export
    target_in_context: bool = True
    # user vectors pool only clicked history items (all items when none was clicked)
    pool_clicked: bool = True

    def validate(self) -> None:
        for name in ("id_dim", "hidden_dim", "dk", "batch_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lam < 0 or self.beta < 0 or self.ridge < 0:
            raise ValueError("lam, beta and ridge must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


PARAM_SHAPES = {
    "id_emb": ("items+1", "id"),
    "W_txt": ("txt", "hid"),
    "W_img": ("img", "hid"),
    "sa_q": ("id", "dk"), "sa_k": ("id", "dk"), "sa_v": ("id", "id"),
    "fu_q": ("hid", "dk"), "fu_k": ("hid", "dk"), "fu_v": ("hid", "hid"),
    "ca_q": ("hid", "dk"), "ca_k": ("id", "dk"), "ca_v": ("id", "hid"),
    "ffn_w1": ("hid", "hid"), "ffn_b1": ("hid",),
    "ffn_w2": ("hid", 1), "ffn_b2": (1,),
}


def init_params(n_items: int, txt_dim: int, img_dim: int, cfg: AlignmentConfig,
                rng: np.random.Generator) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; row ``n_items`` of ``id_emb`` is the sentinel."""
    sizes = {"items+1": n_items + 1, "id": cfg.id_dim, "txt": txt_dim, "img": img_dim,
             "hid": cfg.hidden_dim, "dk": cfg.dk}
    params: Params = {}
    for name, dims in PARAM_SHAPES.items():
        shape = tuple(sizes[d] if isinstance(d, str) else d for d in dims)
        if name == "id_emb":
            fan_in = cfg.id_dim
        elif name.startswith("ffn_b"):
            fan_in = cfg.hidden_dim
        else:
            fan_in = shape[0]
        params[name] = nx.init_uniform(rng, fan_in, shape)
    return params


# ---------------------------------------------------------------- single-row reference ops

def project_modalities(batch: Sequence[ItemFeatures], params: Params) -> tuple[np.ndarray, np.ndarray]:
    txt = np.stack([b.txt_feat for b in batch]) if batch else np.zeros((0, params["W_txt"].shape[0]))
    img = np.stack([b.img_feat for b in batch]) if batch else np.zeros((0, params["W_img"].shape[0]))
    if txt.shape[1] != params["W_txt"].shape[0] or img.shape[1] != params["W_img"].shape[0]:
        raise ShapeError(f"feature dims {txt.shape[1]}/{img.shape[1]} do not match projections")
    return img @ params["W_img"], txt @ params["W_txt"]


def encode_sequence(item_idx: Sequence[int], params: Params, max_seq_len: int = 200) -> np.ndarray:
    """Self-attention over the ID embeddings of a history; one output row per position."""
    if len(item_idx) == 0:
        raise EmptyHistoryError("cannot encode an empty history")
    idx = list(item_idx)[-max_seq_len:]
    x = params["id_emb"][idx]
    dk = params["sa_q"].shape[1]
    return nx.scaled_dot_attention(x @ params["sa_q"], x @ params["sa_k"], x @ params["sa_v"], dk)


def fuse_modalities(emb_img: np.ndarray, emb_txt: np.ndarray, params: Params) -> np.ndarray:
    emb_img = np.asarray(emb_img, dtype=np.float64)
    emb_txt = np.asarray(emb_txt, dtype=np.float64)
    if emb_img.shape != emb_txt.shape or emb_img.ndim != 1:
        raise ShapeError(f"fusion expects two equal-length rows, got {emb_img.shape} and {emb_txt.shape}")
    dk = params["fu_q"].shape[1]
    attn = nx.scaled_dot_attention(emb_img @ params["fu_q"], emb_txt @ params["fu_k"],
                                   emb_txt[None, :] @ params["fu_v"], dk)[0]
    return nx.layer_norm(emb_img + attn, LN_EPS)


def item_mm_embedding(emb_fused: np.ndarray, context: np.ndarray, params: Params) -> np.ndarray:
    context = nx.as_matrix(context)
    if context.shape[0] == 0:
        raise EmptyHistoryError("empty context; substitute the sentinel item")
    dk = params["ca_q"].shape[1]
    return nx.scaled_dot_attention(np.asarray(emb_fused) @ params["ca_q"], context @ params["ca_k"],
                                   context @ params["ca_v"], dk)[0]


def score_item(emb_mm: np.ndarray, params: Params) -> float:
    h = np.maximum(np.asarray(emb_mm) @ params["ffn_w1"] + params["ffn_b1"], 0.0)
    z = h @ params["ffn_w2"][:, 0] + params["ffn_b2"][0]
    return float(nx.sigmoid(np.array([z]))[0])


# ---------------------------------------------------------------- Stein machinery

def stein_score_estimate(batch: np.ndarray, gamma: float, ridge: float) -> np.ndarray:
    """Kernel Stein estimate of grad log q at each row of ``batch``.

    Solves (K/n + ridge*I) G = -B/n with B_i = sum_j grad_{e_j} k(e_j, e_i),
    i.e. the ridge acts on the sample-averaged Gram matrix so its strength
    does not depend on the batch size.
    """
    z = nx.as_matrix(batch)
    if z.shape[0] < 2:
        raise EmptyBatchError("Stein estimator needs at least two samples")
    if not (gamma > 0 and ridge > 0):
        raise ValueError("gamma and ridge must be positive")
    K = nx.rbf_gram(z, z, gamma)
    # grad_{e_j} k(e_j, e_i) = -(e_j - e_i) k_ji / gamma^2, summed over j
    B = (z * K.sum(axis=1, keepdims=True) - K @ z) / (gamma * gamma)
    try:
        G = -np.linalg.solve(K + (ridge * z.shape[0]) * np.eye(z.shape[0]), B)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"kernel system is singular: {exc}") from exc
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite Stein score estimate")
    return G


def alignment_loss(emb_img: np.ndarray, emb_txt: np.ndarray, gamma: float) -> float:
    emb_img, emb_txt = nx.as_matrix(emb_img), nx.as_matrix(emb_txt)
    if emb_img.shape[0] == 0:
        raise EmptyBatchError("alignment loss of an empty batch")
    if emb_img.shape != emb_txt.shape:
        raise ShapeError(f"paired modalities must match: {emb_img.shape} vs {emb_txt.shape}")
    if not gamma > 0:
        raise nx.BandwidthError(f"bandwidth must be positive, got {gamma}")
    d = emb_img - emb_txt
    return float(np.mean(np.exp(-np.einsum("ij,ij->i", d, d) / (2.0 * gamma * gamma))))


def entropy_regularizer(emb_img: np.ndarray, emb_txt: np.ndarray, gamma: float, ridge: float,
                        scores: np.ndarray | None = None) -> float:
    z = np.vstack([nx.as_matrix(emb_img), nx.as_matrix(emb_txt)])
    if scores is None:
        scores = stein_score_estimate(z, gamma, ridge)
    return float(-np.mean(np.einsum("ij,ij->i", scores, z)))


def stein_loss(emb_img: np.ndarray, emb_txt: np.ndarray, cfg: AlignmentConfig) -> float:
    gamma = nx.median_bandwidth(emb_img, emb_txt)
    out = -alignment_loss(emb_img, emb_txt, gamma)
    if cfg.lam:
        # the entropy estimate is rewarded: subtracting it spreads the embeddings
        out -= cfg.lam * entropy_regularizer(emb_img, emb_txt, gamma, cfg.ridge)
    return out


# ---------------------------------------------------------------- batched training path

@dataclass
class Batch:
    hist: np.ndarray      # B x L item indices, padded with the sentinel
    mask: np.ndarray      # B x L, True where a real (or sentinel-substitute) position
    targets: np.ndarray   # B
    labels: np.ndarray    # B, float


def make_batch(histories: Sequence[Sequence[int]], targets: Sequence[int], labels: Sequence[float],
               sentinel: int, max_seq_len: int) -> Batch:
    seqs = [list(h)[-max_seq_len:] or [sentinel] for h in histories]
    L = max(len(s) for s in seqs)
    hist = np.full((len(seqs), L), sentinel, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for b, s in enumerate(seqs):
        hist[b, : len(s)] = s
        mask[b, : len(s)] = True
    return Batch(hist, mask, np.asarray(targets, dtype=np.int64), np.asarray(labels, dtype=np.float64))


@dataclass
class Frozen:
    """Per-batch constants excluded from differentiation: bandwidth and Stein scores."""
    gamma: float
    scores: np.ndarray | None


def batch_loss(params: Params, batch: Batch, txt: np.ndarray, img: np.ndarray, cfg: AlignmentConfig,
               frozen: Frozen | None = None, need_grad: bool = True):
    """Forward (and optionally backward) pass of the total objective on one batch.

    ``txt``/``img`` are the raw feature tables indexed by item index. Returns
    ``(parts, grads, frozen)`` where ``parts`` holds bce/stein/total.
    """
    B = batch.targets.shape[0]
    dk = params["sa_q"].shape[1]
    rdk = 1.0 / math.sqrt(dk)
    # --- ID self-attention
    X = params["id_emb"][batch.hist]
    Q = X @ params["sa_q"]
    K = X @ params["sa_k"]
    V = X @ params["sa_v"]
    kmask = batch.mask[:, None, :]
    A = nx.masked_softmax(np.matmul(Q, K.transpose(0, 2, 1)) * rdk, kmask)
    C = np.matmul(A, V)
    # --- modality projection on the distinct targets of this batch
    uniq, inv = np.unique(batch.targets, return_inverse=True)
    txt_u, img_u = txt[uniq], img[uniq]
    Et_u = txt_u @ params["W_txt"]
    Ei_u = img_u @ params["W_img"]
    et, ei = Et_u[inv], Ei_u[inv]
    # --- fusion: one text key per item, so the attention weight is identically 1
    fq = ei @ params["fu_q"]
    fk = et @ params["fu_k"]
    w_f = nx.softmax_rows((np.einsum("bk,bk->b", fq, fk) * rdk)[:, None])
    attn = w_f * (et @ params["fu_v"])
    pre = ei + attn
    fused = nx.layer_norm(pre, LN_EPS)
    # --- secondary cross-attention over the contextual ID rows
    q2 = fused @ params["ca_q"]
    k2 = C @ params["ca_k"]
    v2 = C @ params["ca_v"]
    a2 = nx.masked_softmax(np.einsum("blk,bk->bl", k2, q2) * rdk, batch.mask)
    mm = np.einsum("bl,blh->bh", a2, v2)
    if cfg.residual:
        mm = mm + fused
    # --- FFN scorer, BCE on logits
    h_pre = mm @ params["ffn_w1"] + params["ffn_b1"]
    h = np.maximum(h_pre, 0.0)
    z = h @ params["ffn_w2"][:, 0] + params["ffn_b2"][0]
    y = batch.labels
    bce = float(np.mean(np.logaddexp(0.0, z) - y * z))
    # --- Stein objective
    if frozen is None:
        gamma = nx.median_bandwidth(Ei_u, Et_u)
        scores = None
        if cfg.lam:
            scores = stein_score_estimate(np.vstack([Ei_u, Et_u]), gamma, cfg.ridge)
        frozen = Frozen(gamma, scores)
    gamma = frozen.gamma
    U = uniq.shape[0]
    diff = Ei_u - Et_u
    kval = np.exp(-np.einsum("ij,ij->i", diff, diff) / (2.0 * gamma * gamma))
    align = float(kval.mean())
    ent = 0.0
    Z = None
    if cfg.lam:
        Z = np.vstack([Ei_u, Et_u])
        ent = float(-np.mean(np.einsum("ij,ij->i", frozen.scores, Z)))
    stein = -align - cfg.lam * ent
    total = bce + cfg.beta * stein
    parts = {"bce": bce, "align": align, "entropy": ent, "stein": stein, "total": total}
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss {parts}")
    if not need_grad:
        return parts, None, frozen

    g: Params = {}
    dz = (nx.sigmoid(z) - y) / B
    g["ffn_w2"] = (h.T @ dz)[:, None]
    g["ffn_b2"] = np.array([dz.sum()])
    dh_pre = (dz[:, None] * params["ffn_w2"][:, 0][None, :]) * (h_pre > 0)
    g["ffn_w1"] = mm.T @ dh_pre
    g["ffn_b1"] = dh_pre.sum(axis=0)
    dmm = dh_pre @ params["ffn_w1"].T
    dv2 = a2[:, :, None] * dmm[:, None, :]
    da2 = np.einsum("blh,bh->bl", v2, dmm)
    ds2 = a2 * (da2 - np.sum(a2 * da2, axis=1, keepdims=True)) * rdk
    dq2 = np.einsum("bl,blk->bk", ds2, k2)
    dk2 = ds2[:, :, None] * q2[:, None, :]
    g["ca_q"] = fused.T @ dq2
    g["ca_k"] = np.einsum("bld,blk->dk", C, dk2)
    g["ca_v"] = np.einsum("bld,blh->dh", C, dv2)
    dC = dk2 @ params["ca_k"].T + dv2 @ params["ca_v"].T
    dfused = dq2 @ params["ca_q"].T
    if cfg.residual:
        dfused = dfused + dmm
    dpre = nx.layer_norm_backward(fused, dfused, pre, LN_EPS)
    # softmax over a single key has zero Jacobian
    g["fu_q"] = np.zeros_like(params["fu_q"])
    g["fu_k"] = np.zeros_like(params["fu_k"])
    dattn_v = dpre * w_f
    g["fu_v"] = et.T @ dattn_v
    dei = dpre
    det = dattn_v @ params["fu_v"].T
    dEi_u = np.zeros_like(Ei_u)
    dEt_u = np.zeros_like(Et_u)
    np.add.at(dEi_u, inv, dei)
    np.add.at(dEt_u, inv, det)
    if cfg.beta:
        # d(-align): align = mean_i k_i, dk_i/dimg_i = -k_i (img_i - txt_i) / gamma^2
        coef = (kval / (U * gamma * gamma))[:, None] * diff
        dEi_u += cfg.beta * coef
        dEt_u -= cfg.beta * coef
        if cfg.lam:
            # d(-ent)/dZ with the scores held fixed
            dZ = frozen.scores / Z.shape[0]
            dEi_u += cfg.beta * cfg.lam * dZ[:U]
            dEt_u += cfg.beta * cfg.lam * dZ[U:]
    g["W_img"] = img_u.T @ dEi_u
    g["W_txt"] = txt_u.T @ dEt_u
    # --- self-attention backward
    dA = np.matmul(dC, V.transpose(0, 2, 1))
    dV = np.matmul(A.transpose(0, 2, 1), dC)
    dS = A * (dA - np.sum(A * dA, axis=-1, keepdims=True)) * rdk
    dQ = np.matmul(dS, K)
    dK = np.matmul(dS.transpose(0, 2, 1), Q)
    g["sa_q"] = np.einsum("bld,blk->dk", X, dQ)
    g["sa_k"] = np.einsum("bld,blk->dk", X, dK)
    g["sa_v"] = np.einsum("bld,ble->de", X, dV)
    dX = dQ @ params["sa_q"].T + dK @ params["sa_k"].T + dV @ params["sa_v"].T
    g_id = np.zeros_like(params["id_emb"])
    np.add.at(g_id, batch.hist.reshape(-1), dX.reshape(-1, dX.shape[-1]))
    g["id_emb"] = g_id
    return parts, g, frozen


# ---------------------------------------------------------------- model + training

@dataclass
class AlignmentModel:
    params: Params
    item_ids: list[str]
    cfg: AlignmentConfig
    txt: np.ndarray = field(repr=False)
    img: np.ndarray = field(repr=False)

    @property
    def index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.item_ids)}

    @property
    def sentinel(self) -> int:
        return len(self.item_ids)

    def save(self, path) -> None:
        path = Path(path)
        np.savez(path, **self.params)
        meta = {"config": asdict(self.cfg), "item_ids": self.item_ids}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def feature_tables(features: Sequence[ItemFeatures]) -> tuple[list[str], np.ndarray, np.ndarray]:
    order = sorted(features, key=lambda f: f.item_id)
    ids = [f.item_id for f in order]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item ids in feature table")
    return ids, np.stack([f.txt_feat for f in order]), np.stack([f.img_feat for f in order])


def training_samples(split: DatasetSplit, index: dict[str, int],
                     target_in_context: bool = True) -> list[tuple[list[int], int, float]]:
    """One sample per train interaction over the strictly earlier train items,
    plus the target itself when ``target_in_context`` is set."""
    out = []
    for uid, hist in split.histories().items():
        idx = []
        for item in hist.items:
            if item not in index:
                raise MissingFeaturesError(f"train item {item!r} has no features")
            idx.append(index[item])
        for j, (t, lab) in enumerate(zip(idx, hist.labels)):
            out.append((idx[:j] + [t] if target_in_context else idx[:j], t, float(lab)))
    return out


def train_alignment(split: DatasetSplit, features: Sequence[ItemFeatures], cfg: AlignmentConfig):
    """Jointly minimize BCE + beta * stein_loss with AdamW; returns (model, per-epoch log)."""
    cfg.validate()
    item_ids, txt, img = feature_tables(features)
    index = {it: i for i, it in enumerate(item_ids)}
    samples = training_samples(split, index, cfg.target_in_context)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(len(item_ids), txt.shape[1], img.shape[1], cfg, rng)
    state = nx.OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sentinel = len(item_ids)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        sums = {"bce": 0.0, "stein": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch([c[0] for c in chunk], [c[1] for c in chunk], [c[2] for c in chunk],
                               sentinel, cfg.max_seq_len)
            parts, grads, _ = batch_loss(params, batch, txt, img, cfg)
            params, state = nx.adamw_step(params, grads, state)
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1
        row = {"epoch": epoch + 1, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        log.info("align epoch %d bce=%.5f stein=%.5f total=%.5f", row["epoch"], row["bce"],
                 row["stein"], row["total"])
        history.append(row)
    return AlignmentModel(params, item_ids, cfg, txt, img), history


# ---------------------------------------------------------------- export

@dataclass
class EmbeddingStore:
    item_ids: list[str]
    item_emb: np.ndarray
    user_ids: list[str]
    user_emb: np.ndarray
    empty_users: list[str] = field(default_factory=list)

    def item_lookup(self) -> dict[str, np.ndarray]:
        return {it: self.item_emb[i] for i, it in enumerate(self.item_ids)}

    def user_lookup(self) -> dict[str, np.ndarray]:
        return {u: self.user_emb[i] for i, u in enumerate(self.user_ids)}

    def save(self, directory) -> None:
        d = Path(directory)
        write_embeddings(d / "item_embeddings.bin", self.item_ids, self.item_emb)
        write_embeddings(d / "user_embeddings.bin", self.user_ids, self.user_emb)

    @classmethod
    def load(cls, directory) -> "EmbeddingStore":
        d = Path(directory)
        item_ids, item_emb = read_embeddings(d / "item_embeddings.bin")
        user_ids, user_emb = read_embeddings(d / "user_embeddings.bin")
        empty = [u for u, row in zip(user_ids, user_emb) if not np.any(row)]
        return cls(item_ids, item_emb, user_ids, user_emb, empty)


def catalog_item_embeddings(model: AlignmentModel) -> np.ndarray:
    """Each item's embedding with its own contextual ID row as the only key.

    With a single key the attention weight is 1, so this reduces to the
    value path id_emb -> sa_v -> ca_v.
    """
    p = model.params
    ids = p["id_emb"][: len(model.item_ids)]
    out = (ids @ p["sa_v"]) @ p["ca_v"]
    if model.cfg.residual:
        out = out + nx.layer_norm(model.img @ p["W_img"] + (model.txt @ p["W_txt"]) @ p["fu_v"], LN_EPS)
    return out


def user_embedding(model: AlignmentModel, item_idx: Sequence[int],
                   keep: Sequence[bool] | None = None) -> np.ndarray:
    """Mean of in-context item embeddings over a (truncated) training history.

    Every item stays in the attention context; ``keep`` only selects which
    positions enter the mean.
    """
    p = model.params
    n = min(len(item_idx), model.cfg.max_seq_len)
    idx = list(item_idx)[len(item_idx) - n:]
    ctx = encode_sequence(idx, p, model.cfg.max_seq_len)
    e_img = model.img[idx] @ p["W_img"]
    e_txt = model.txt[idx] @ p["W_txt"]
    # single text key per item: attention output is the text value row
    fused = nx.layer_norm(e_img + e_txt @ p["fu_v"], LN_EPS)
    dk = p["ca_q"].shape[1]
    mm = nx.scaled_dot_attention(fused @ p["ca_q"], ctx @ p["ca_k"], ctx @ p["ca_v"], dk)
    if model.cfg.residual:
        mm = mm + fused
    if keep is not None:
        sel = np.asarray(list(keep)[len(item_idx) - n:], dtype=bool)
        if sel.any():
            mm = mm[sel]
    return mm.mean(axis=0)


def export_embeddings(model: AlignmentModel, histories: dict[str, UserHistory]) -> EmbeddingStore:
    index = model.index
    item_emb = catalog_item_embeddings(model)
    user_ids = sorted(histories)
    user_emb = np.zeros((len(user_ids), model.cfg.hidden_dim))
    empty = []
    for r, uid in enumerate(user_ids):
        items = histories[uid].items
        if not items:
            empty.append(uid)
            continue
        try:
            idx = [index[it] for it in items]
        except KeyError as exc:
            raise MissingFeaturesError(f"history item {exc.args[0]!r} of {uid} has no features") from exc
        keep = [bool(y) for y in histories[uid].labels] if model.cfg.pool_clicked else None
        user_emb[r] = user_embedding(model, idx, keep)
    if empty:
        log.warning("%d users have empty training histories; exported as zero vectors", len(empty))
    if not (np.all(np.isfinite(item_emb)) and np.all(np.isfinite(user_emb))):
        raise NumericError("non-finite exported embedding")
    return EmbeddingStore(list(model.item_ids), item_emb, user_ids, user_emb, empty)
