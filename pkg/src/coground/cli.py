"""Command line pipeline: synthesize data, train, evaluate, score, audit.

Every command writes exactly one ``manifest.json`` next to its outputs with
the merged config snapshot, the seed, content hashes of the inputs, and
timing. Data outputs are byte-deterministic given identical inputs and seed
(the manifest itself carries timing, so it is the one file excluded from
that guarantee). Exit codes: 0 success, 1 validation error, 2 numeric
failure.

Config files are single JSON documents with optional sections "synthetic",
"model", "loss", "train", and "inference"; command line flags override file
values and the merged result is what lands in the manifest.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from .data import (
    SyntheticConfig,
    load_jsonl,
    split,
    synth_generate,
    synthetic_vocab,
    write_jsonl,
)
from .alignment import pseudo_coref, pseudo_grounding
from .errors import CogroundError, DataError, EvalError, TrainingError
from .gradcheck import audit_batch, audit_gradients, audit_model_config
from .inference import predict_chains, predict_grounding
from .losses import TERMS, LossConfig
from .metrics import evaluate_corpus
from .model import CorefGroundingModel, ModelConfig
from .partitions import Partition
from .training import TrainConfig, fit
from .validation import check_samples

EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "elapsed_seconds": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path}: not valid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise DataError(f"config {path}: expected a JSON object")
    return obj


def _merge(section: dict, overrides: dict) -> dict:
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _parse_weights(text: str | None) -> dict[str, float]:
    weights: dict[str, float] = {}
    if not text:
        return weights
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise DataError(f"loss weights: expected name=value, got {item!r}")
        name, value = item.split("=", 1)
        if name not in TERMS:
            raise DataError(f"loss weights: unknown term {name!r}")
        weights[name] = float(value)
    return weights


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TrainingError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except CogroundError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)

    return wrapper


@click.group()
def main():
    """Multimodal coreference and grounding, end to end on synthetic data."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--n-samples", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--sigma", type=float, default=None, help="feature noise level")
@click.option("--vocab-out", type=click.Path(), default=None, help="also dump the vocabulary")
@_cli_errors
def synth(config_path, out_path, n_samples, seed, sigma, vocab_out):
    """Generate a synthetic image-narration dataset (JSONL)."""
    started = time.time()
    section = _merge(
        _load_config(config_path).get("synthetic", {}),
        {"n_samples": n_samples, "seed": seed, "feature_noise_sigma": sigma},
    )
    for key in ("n_entities_range", "n_regions_range", "mentions_per_entity_range"):
        if key in section:
            section[key] = tuple(section[key])
    cfg = SyntheticConfig(**section)
    samples = synth_generate(cfg)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(samples, out)
    outputs = [out]
    if vocab_out:
        vocab = synthetic_vocab(cfg)
        Path(vocab_out).write_text(
            json.dumps(
                {
                    "token_to_id": vocab.token_to_id,
                    "noun_class_map": {str(k): v for k, v in vocab.noun_class_map.items()},
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        outputs.append(Path(vocab_out))
    _write_manifest(
        out.parent,
        "synth",
        {"synthetic": section},
        cfg.seed,
        inputs=[config_path] if config_path else [],
        outputs=outputs,
        started=started,
    )
    click.echo(f"wrote {len(samples)} samples to {out}")


def _model_config_for(samples, section: dict, seed: int) -> ModelConfig:
    d_region = samples[0].regions.features.shape[1]
    vocab_size = max(max(s.narration.token_ids, default=0) for s in samples) + 1
    defaults = dict(
        d_region=d_region,
        d_embed=32,
        vocab_size=vocab_size,
        n_text_layers=2,
        n_fusion_layers=2,
        n_visual_layers=1,
        max_regions=max(32, max(len(s.regions) for s in samples)),
        max_tokens=max(128, max(len(s.narration.token_ids) for s in samples)),
        seed=seed,
    )
    defaults.update(section)
    defaults["d_region"] = d_region
    defaults["vocab_size"] = max(defaults["vocab_size"], vocab_size)
    return ModelConfig(**defaults)


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--labeled-frac", type=float, default=1.0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--loss-weights", type=str, default=None, help="e.g. pcr=0,pgd=0")
@click.option("--ckpt-every", type=int, default=0, help="checkpoint every N epochs")
@click.option("--class-map", type=click.Path(exists=True), default=None,
              help="vocab JSON whose noun_class_map seeds first-epoch region selection")
@_cli_errors
def train(data_path, labeled_frac, config_path, out_dir, epochs, lr, batch_size, seed,
          loss_weights, ckpt_every, class_map):
    """Train on a dataset, splitting off a labeled fraction."""
    started = time.time()
    file_cfg = _load_config(config_path)
    train_section = _merge(
        file_cfg.get("train", {}),
        {"epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed},
    )
    loss_section = dict(file_cfg.get("loss", {}))
    loss_section["loss_weights"] = {
        **loss_section.get("loss_weights", {}),
        **_parse_weights(loss_weights),
    }
    train_cfg = TrainConfig(**train_section)
    loss_cfg = LossConfig(**loss_section)

    samples = load_jsonl(data_path)
    check_samples(samples)
    labeled, unlabeled = split(samples, labeled_frac, seed=train_cfg.seed)
    model = _model_config_for(samples, file_cfg.get("model", {}), train_cfg.seed)
    model = CorefGroundingModel(model)

    itc_class_map = None
    if class_map:
        raw = json.loads(Path(class_map).read_text()).get("noun_class_map", {})
        itc_class_map = {int(k): int(v) for k, v in raw.items()}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    def hook(epoch, m):
        if ckpt_every and (epoch + 1) % ckpt_every == 0:
            path = out / f"checkpoint-epoch{epoch + 1}.ckpt"
            m.save(path)
            outputs.append(path)

    model, log = fit(model, labeled, unlabeled, loss_cfg, train_cfg,
                     itc_class_map=itc_class_map, epoch_hook=hook)

    ckpt = out / "checkpoint.ckpt"
    model.save(ckpt)
    log_path = out / "loss_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for row in log:
            fh.write(json.dumps(row) + "\n")
    outputs += [ckpt, log_path]
    config_snapshot = {
        "train": train_section,
        "loss": loss_section,
        "model": dataclasses.asdict(model.cfg),
        "labeled_frac": labeled_frac,
    }
    _write_manifest(
        out, "train", config_snapshot, train_cfg.seed,
        inputs=[data_path] + ([config_path] if config_path else []) + ([class_map] if class_map else []),
        outputs=outputs, started=started,
    )
    final = log[-1]["total"] if log else float("nan")
    click.echo(f"trained {train_cfg.epochs} epochs on {len(labeled)} labeled / "
               f"{len(unlabeled)} unlabeled samples; final total loss {final:.4f}")


def _predictions_for(model, samples, chain_threshold, method):
    rows = []
    for sample in samples:
        enc = model.forward(sample)
        chains = predict_chains(enc.fused_mention_emb.data, chain_threshold, method=method)
        grounding = predict_grounding(enc.last_grounding, sample.regions.boxes)
        rows.append(
            {
                "id": sample.id,
                "chains": [list(c) for c in chains.clusters],
                "grounding": grounding.region_indices,
            }
        )
    return rows


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--chain-threshold", type=float, default=0.5, show_default=True)
@click.option("--method", type=click.Choice(["components", "greedy"]), default="components")
@_cli_errors
def eval_cmd(ckpt, data_path, out_dir, chain_threshold, method):
    """Run inference on labeled data and score it."""
    started = time.time()
    model = CorefGroundingModel.load(ckpt)
    samples = load_jsonl(data_path)
    if not samples:
        raise EvalError(f"{data_path}: nothing to evaluate")
    for s in samples:
        if s.labels is None:
            raise EvalError(f"sample {s.id} has no labels; eval needs a labeled dataset")
    preds = _predictions_for(model, samples, chain_threshold, method)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.jsonl"
    with open(pred_path, "w", encoding="utf-8") as fh:
        for row in preds:
            fh.write(json.dumps(row) + "\n")
    report = _score_predictions(samples, preds)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out, "eval",
        {"chain_threshold": chain_threshold, "method": method},
        model.cfg.seed, inputs=[ckpt, data_path], outputs=[pred_path, report_path],
        started=started,
    )
    click.echo(f"CoNLL F1 {report.conll_f1:.4f}, grounding {report.grounding.overall_acc:.4f}")


def _score_predictions(gold_samples, pred_rows):
    by_id = {row["id"]: row for row in pred_rows}
    gold_parts, pred_parts = [], []
    pred_boxes, gold_boxes, kinds = [], [], []
    for sample in gold_samples:
        if sample.id not in by_id:
            raise EvalError(f"predictions missing sample {sample.id}")
        row = by_id[sample.id]
        n = sample.n_mentions
        gold_parts.append(sample.gold_partition())
        pred_parts.append(Partition.from_chains(row["chains"], n))
        grounding = row.get("grounding")
        if grounding is None or len(grounding) != n:
            raise EvalError(f"sample {sample.id}: grounding must list one region per mention")
        boxes = []
        for r in grounding:
            if not 0 <= r < len(sample.regions):
                raise EvalError(f"sample {sample.id}: region index {r} out of range")
            boxes.append(sample.regions.boxes[r])
        pred_boxes.append(boxes)
        gold_boxes.append(sample.labels.mention_boxes)
        kinds.append([m.kind for m in sample.narration.mentions])
    return evaluate_corpus(gold_parts, pred_parts, pred_boxes, gold_boxes, kinds)


@main.command()
@click.option("--gold", "gold_path", type=click.Path(exists=True), required=True)
@click.option("--pred", "pred_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@_cli_errors
def score(gold_path, pred_path, out_path):
    """Score a prediction file against gold labels."""
    started = time.time()
    gold = load_jsonl(gold_path)
    for s in gold:
        if s.labels is None:
            raise EvalError(f"gold sample {s.id} has no labels")
    preds = []
    with open(pred_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                preds.append(json.loads(line))
    report = _score_predictions(gold, preds)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out.parent, "score", {}, None, inputs=[gold_path, pred_path], outputs=[out],
        started=started,
    )
    click.echo(f"CoNLL F1 {report.conll_f1:.4f}")


@main.command()
@click.option("--seeds", type=int, default=10, show_default=True)
@click.option("--d-embed", type=int, default=8, show_default=True)
@click.option("--mentions", type=int, default=2, show_default=True)
@click.option("--regions", type=int, default=3, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@_cli_errors
def gradcheck(seeds, d_embed, mentions, regions, tolerance):
    """Check every loss's gradients against finite differences."""
    worst: dict[str, float | None] = {}
    for seed in range(seeds):
        model = CorefGroundingModel(audit_model_config(seed, d_embed))
        batch, tags = audit_batch(seed, n_mentions=mentions, n_regions=regions)
        for result in audit_gradients(model, batch, tags, mask_seed=seed, tolerance=tolerance):
            if result.max_rel_error is None:
                worst.setdefault(result.term, None)
            else:
                prev = worst.get(result.term)
                worst[result.term] = (
                    result.max_rel_error if prev is None else max(prev, result.max_rel_error)
                )
    failed = False
    click.echo(f"{'loss':8s} {'max rel err':>12s}  status")
    for term, err in worst.items():
        if err is None:
            click.echo(f"{term:8s} {'n/a':>12s}  skipped (not exercised by this instance)")
        else:
            ok = err <= tolerance
            failed = failed or not ok
            click.echo(f"{term:8s} {err:12.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        click.echo("gradient check failed", err=True)
        sys.exit(EXIT_NUMERIC)


@main.command("pseudo-dump")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--coref-thresh", type=float, default=0.5, show_default=True)
@click.option("--ground-thresh", type=float, default=0.9, show_default=True)
@_cli_errors
def pseudo_dump(ckpt, data_path, out_path, coref_thresh, ground_thresh):
    """Dump the model's pseudo-labels for a dataset."""
    started = time.time()
    model = CorefGroundingModel.load(ckpt)
    samples = load_jsonl(data_path)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for sample in samples:
            enc = model.forward(sample)
            pairs = []
            if sample.n_mentions >= 2:
                sets = pseudo_coref(enc.fused_mention_emb.data, coref_thresh)
                pairs = [
                    [i, j] for i in range(sample.n_mentions) for j in sets.positives[i] if i < j
                ]
            mask = pseudo_grounding(enc.last_grounding, ground_thresh)
            grounding = [[int(m), int(r)] for m, r in zip(*np.nonzero(mask.values))]
            fh.write(
                json.dumps(
                    {"sample_id": sample.id, "pseudo_positives": pairs, "pseudo_grounding": grounding}
                )
                + "\n"
            )
    _write_manifest(
        out.parent, "pseudo-dump",
        {"coref_thresh": coref_thresh, "ground_thresh": ground_thresh},
        model.cfg.seed, inputs=[ckpt, data_path], outputs=[out], started=started,
    )
    click.echo(f"wrote pseudo-labels for {len(samples)} samples to {out}")


if __name__ == "__main__":
    main()
