"""File-to-file pipeline stages. Each stage reads its inputs from ``out`` and writes its outputs there."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import alignment, ctr, dataio, metrics, retrieval
from .config import PipelineConfig

log = logging.getLogger(__name__)

INTERACTIONS = "interactions.jsonl"
ITEMS = "items.jsonl"
TRUTH = "ground_truth.json"
ALIGN_DIR = "alignment"
AUGMENTED = "augmented-histories.jsonl"
RUNS_DIR = "runs"
BASE_RUN = "base"
AUG_RUN = "mars"


class OutputExistsError(FileExistsError):
    pass


def _guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OutputExistsError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_split(out: Path, cfg: PipelineConfig) -> dataio.DatasetSplit:
    split = dataio.leave_one_out_split(dataio.load_interactions(out / INTERACTIONS))
    split.activity = dataio.segment_activity(split.histories(), cfg.low_frac, cfg.high_frac)
    return split


def run_synth(cfg: PipelineConfig, out: Path, force: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    _guard([out / INTERACTIONS, out / ITEMS], force)
    inter, items, truth = dataio.generate_synthetic(cfg.synthetic)
    dataio.write_interactions(out / INTERACTIONS, inter)
    dataio.write_items(out / ITEMS, items)
    summary = {
        "interactions": len(inter),
        "users": len(truth.user_topic),
        "items": len(items),
        "topics": cfg.synthetic.n_topics,
        "positive_rate": float(np.mean([x.label for x in inter])) if inter else 0.0,
    }
    (out / TRUTH).write_text(json.dumps({"summary": summary, "item_topic": truth.item_topic,
                                         "user_topic": truth.user_topic}, sort_keys=True))
    return summary


def run_align(cfg: PipelineConfig, out: Path, force: bool = False) -> dict:
    d = out / ALIGN_DIR
    d.mkdir(parents=True, exist_ok=True)
    _guard([d / "item_embeddings.bin", d / "user_embeddings.bin"], force)
    split = load_split(out, cfg)
    features = dataio.load_items(out / ITEMS)
    model, hist = alignment.train_alignment(split, features, cfg.alignment)
    store = alignment.export_embeddings(model, split.histories())
    model.save(d / "params.npz")
    store.save(d)
    _write_jsonl(d / "align_log.jsonl",
                 [{"epoch": r["epoch"], "bce": r["bce"], "stein": r["stein"], "total": r["total"]}
                  for r in hist])
    return {"epochs": len(hist), "items": len(store.item_ids), "users": len(store.user_ids),
            "empty_users": len(store.empty_users)}


def run_augment(cfg: PipelineConfig, out: Path, force: bool = False) -> dict:
    _guard([out / AUGMENTED], force)
    split = load_split(out, cfg)
    store = alignment.EmbeddingStore.load(out / ALIGN_DIR)
    index = retrieval.build_index(store, split.activity)
    if len(index) == 0:
        raise retrieval.EmptyIndexError("high-active user set is empty; nothing to retrieve from")
    augmented = retrieval.augment_dataset(split, index, store, cfg.augment)
    retrieval.write_augmented(out / AUGMENTED, augmented)
    low = [h for u, h in augmented.items() if split.activity.get(u) == "low"]
    donated = [len(h.donated) for h in low]
    return {"low_users": len(low), "mean_donated": float(np.mean(donated)) if donated else 0.0,
            "strategy": cfg.augment.strategy}


def _prefixes(out: Path) -> dict[str, list[str]]:
    return {u: h.donated for u, h in retrieval.read_augmented(out / AUGMENTED).items() if h.donated}


def run_train(cfg: PipelineConfig, out: Path, augment: bool = True, force: bool = False,
              name: str | None = None) -> dict:
    name = name or (AUG_RUN if augment else BASE_RUN)
    d = out / RUNS_DIR / name
    d.mkdir(parents=True, exist_ok=True)
    _guard([d / "predictions.jsonl"], force)
    split = load_split(out, cfg)
    prefixes = _prefixes(out) if augment else None
    model, hist = ctr.train_ctr(split, cfg.ctr, prefixes)
    model.save(d / "params.npz")
    _write_jsonl(d / "ctr_log.jsonl", hist)
    records, skipped = ctr.predict(split.heldout(), model, split, prefixes)
    ctr.write_predictions(d / "predictions.jsonl", records)
    (d / "run.json").write_text(json.dumps({"augment": augment, "skipped": skipped,
                                            "config": asdict(cfg.ctr)}, sort_keys=True, indent=1))
    return {"run": name, "records": len(records), "skipped": skipped}


def run_eval(cfg: PipelineConfig, out: Path, base: str = BASE_RUN, force: bool = False) -> metrics.MetricReport:
    _guard([out / "report.json", out / "report.txt"], force)
    split = load_split(out, cfg)
    runs = {}
    for d in sorted((out / RUNS_DIR).iterdir()):
        if (d / "predictions.jsonl").exists():
            runs[d.name] = ctr.read_predictions(d / "predictions.jsonl")
    report = metrics.build_report(runs, split.activity, base, cfg.to_dict())
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table())
    return report


def run_pipeline(cfg: PipelineConfig, out: Path, force: bool = False) -> metrics.MetricReport:
    run_synth(cfg, out, force)
    run_align(cfg, out, force)
    run_augment(cfg, out, force)
    run_train(cfg, out, augment=False, force=force)
    run_train(cfg, out, augment=True, force=force)
    return run_eval(cfg, out, force=force)
