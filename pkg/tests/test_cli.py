import hashlib
import json

import pytest
from click.testing import CliRunner

from coground.cli import main
from coground.data import load_jsonl


@pytest.fixture
def runner():
    return CliRunner()


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def synth_config(tmp_path, n_samples=8, sigma=0.05, seed=3):
    cfg = {
        "synthetic": {
            "n_samples": n_samples,
            "n_entities_range": [2, 3],
            "n_regions_range": [2, 4],
            "mentions_per_entity_range": [1, 2],
            "feature_noise_sigma": sigma,
            "seed": seed,
        },
        "model": {
            "d_embed": 16,
            "n_text_layers": 1,
            "n_fusion_layers": 1,
            "n_visual_layers": 1,
            "ffn_hidden": 16,
        },
        "train": {"epochs": 1, "batch_size": 4, "seed": 3},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def make_dataset(runner, tmp_path, **kwargs):
    cfg = synth_config(tmp_path, **kwargs)
    data = tmp_path / "data.jsonl"
    result = runner.invoke(main, ["synth", "--config", str(cfg), "--out", str(data)])
    assert result.exit_code == 0, result.output
    return cfg, data


def test_synth_writes_expected_line_count(runner, tmp_path):
    _, data = make_dataset(runner, tmp_path, n_samples=8)
    assert len(data.read_text().splitlines()) == 8
    assert (tmp_path / "manifest.json").exists()


def test_synth_zero_samples_writes_empty_file(runner, tmp_path):
    data = tmp_path / "empty.jsonl"
    result = runner.invoke(main, ["synth", "--out", str(data), "--n-samples", "0"])
    assert result.exit_code == 0, result.output
    assert data.read_text() == ""


def test_synth_is_idempotent_under_seed(runner, tmp_path):
    cfg = synth_config(tmp_path)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert runner.invoke(main, ["synth", "--config", str(cfg), "--out", str(a)]).exit_code == 0
    assert runner.invoke(main, ["synth", "--config", str(cfg), "--out", str(b)]).exit_code == 0
    assert sha256(a) == sha256(b)


def test_synth_flag_overrides_config(runner, tmp_path):
    cfg = synth_config(tmp_path, n_samples=8)
    data = tmp_path / "over.jsonl"
    result = runner.invoke(
        main, ["synth", "--config", str(cfg), "--out", str(data), "--n-samples", "3"]
    )
    assert result.exit_code == 0
    assert len(data.read_text().splitlines()) == 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["synthetic"]["n_samples"] == 3


def test_train_eval_round_trip(runner, tmp_path):
    cfg, data = make_dataset(runner, tmp_path, n_samples=8)
    out = tmp_path / "run"
    result = runner.invoke(
        main,
        ["train", "--data", str(data), "--labeled-frac", "0.5", "--config", str(cfg),
         "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "checkpoint.ckpt").exists()
    log_rows = [json.loads(l) for l in (out / "loss_log.jsonl").read_text().splitlines()]
    assert log_rows and set(log_rows[0]) >= {"step", "cr", "gd", "bbr", "pcr", "pgd", "itc", "mlm", "total"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and str(data) in manifest["inputs"]

    eval_out = tmp_path / "eval"
    result = runner.invoke(
        main,
        ["eval", "--ckpt", str(out / "checkpoint.ckpt"), "--data", str(data),
         "--out", str(eval_out)],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((eval_out / "report.json").read_text())
    assert set(report) == {"muc", "b3", "ceaf_phi4", "conll_f1", "grounding"}
    preds = (eval_out / "predictions.jsonl").read_text().splitlines()
    assert len(preds) == 8


def test_train_is_deterministic(runner, tmp_path):
    cfg, data = make_dataset(runner, tmp_path, n_samples=6)
    hashes = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        result = runner.invoke(
            main,
            ["train", "--data", str(data), "--labeled-frac", "0.5", "--config", str(cfg),
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        hashes.append(sha256(out / "checkpoint.ckpt"))
    assert hashes[0] == hashes[1]


def test_train_supervised_only_ablation(runner, tmp_path):
    cfg, data = make_dataset(runner, tmp_path, n_samples=6)
    out = tmp_path / "sup"
    result = runner.invoke(
        main,
        ["train", "--data", str(data), "--labeled-frac", "0.5", "--config", str(cfg),
         "--out", str(out), "--loss-weights", "pcr=0,pgd=0"],
    )
    assert result.exit_code == 0, result.output
    rows = [json.loads(l) for l in (out / "loss_log.jsonl").read_text().splitlines()]
    assert all(r["pcr"] == 0.0 and r["pgd"] == 0.0 for r in rows)


def test_train_checkpoint_every_epoch(runner, tmp_path):
    cfg, data = make_dataset(runner, tmp_path, n_samples=4)
    out = tmp_path / "ck"
    result = runner.invoke(
        main,
        ["train", "--data", str(data), "--config", str(cfg), "--out", str(out),
         "--epochs", "2", "--ckpt-every", "1"],
    )
    assert result.exit_code == 0, result.output
    assert (out / "checkpoint-epoch1.ckpt").exists()
    assert (out / "checkpoint-epoch2.ckpt").exists()


def test_score_gold_against_itself_is_perfect(runner, tmp_path):
    _, data = make_dataset(runner, tmp_path, n_samples=5)
    samples = load_jsonl(data)
    pred_path = tmp_path / "gold_as_pred.jsonl"
    with open(pred_path, "w") as fh:
        for s in samples:
            part = s.gold_partition()
            # gold grounding: the max-IoU region per mention
            from coground.alignment import gt_alignment
            import numpy as np

            h = gt_alignment(s.labels.mention_boxes, s.regions.boxes)
            grounding = [int(np.argmax(row)) for row in h.values]
            fh.write(json.dumps({
                "id": s.id,
                "chains": [list(c) for c in part.clusters],
                "grounding": grounding,
            }) + "\n")
    report_path = tmp_path / "report.json"
    result = runner.invoke(
        main, ["score", "--gold", str(data), "--pred", str(pred_path), "--out", str(report_path)]
    )
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text())
    assert report["conll_f1"] == pytest.approx(1.0)
    assert report["grounding"]["overall"] == pytest.approx(1.0)


def test_score_all_singletons_zero_muc(runner, tmp_path):
    _, data = make_dataset(runner, tmp_path, n_samples=5)
    samples = load_jsonl(data)
    pred_path = tmp_path / "singletons.jsonl"
    with open(pred_path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({
                "id": s.id,
                "chains": [[m] for m in range(s.n_mentions)],
                "grounding": [0] * s.n_mentions,
            }) + "\n")
    report_path = tmp_path / "report.json"
    result = runner.invoke(
        main, ["score", "--gold", str(data), "--pred", str(pred_path), "--out", str(report_path)]
    )
    assert result.exit_code == 0, result.output
    assert json.loads(report_path.read_text())["muc"]["f1"] == 0.0


def test_eval_rejects_unlabeled_data(runner, tmp_path):
    cfg, data = make_dataset(runner, tmp_path, n_samples=4)
    out = tmp_path / "run"
    assert runner.invoke(
        main, ["train", "--data", str(data), "--config", str(cfg), "--out", str(out)]
    ).exit_code == 0
    # strip the labels
    samples = load_jsonl(data)
    from coground.data import write_jsonl

    unlabeled_path = tmp_path / "unlabeled.jsonl"
    write_jsonl([s.without_labels() for s in samples], unlabeled_path)
    result = runner.invoke(
        main,
        ["eval", "--ckpt", str(out / "checkpoint.ckpt"), "--data", str(unlabeled_path),
         "--out", str(tmp_path / "eval")],
    )
    assert result.exit_code == 1
    assert "labels" in result.output


def test_bad_loss_weight_name_exits_one(runner, tmp_path):
    _, data = make_dataset(runner, tmp_path, n_samples=4)
    result = runner.invoke(
        main,
        ["train", "--data", str(data), "--out", str(tmp_path / "x"),
         "--loss-weights", "bogus=1"],
    )
    assert result.exit_code == 1


def test_pseudo_dump_format(runner, tmp_path):
    cfg, data = make_dataset(runner, tmp_path, n_samples=4)
    out = tmp_path / "run"
    assert runner.invoke(
        main, ["train", "--data", str(data), "--config", str(cfg), "--out", str(out)]
    ).exit_code == 0
    dump = tmp_path / "pseudo.jsonl"
    result = runner.invoke(
        main,
        ["pseudo-dump", "--ckpt", str(out / "checkpoint.ckpt"), "--data", str(data),
         "--out", str(dump), "--ground-thresh", "0.2"],
    )
    assert result.exit_code == 0, result.output
    rows = [json.loads(l) for l in dump.read_text().splitlines()]
    assert len(rows) == 4
    for row in rows:
        assert set(row) == {"sample_id", "pseudo_positives", "pseudo_grounding"}
        for i, j in row["pseudo_positives"]:
            assert i < j


def test_gradcheck_smoke_one_seed(runner):
    result = CliRunner().invoke(main, ["gradcheck", "--seeds", "1"])
    assert result.exit_code == 0, result.output
    assert "cr" in result.output and "n/a" in result.output
    assert "FAIL" not in result.output


def test_gradcheck_detects_injected_sign_flip(runner, monkeypatch):
    # flip the sign of the softmax backward rule: forward values are intact,
    # so finite differences stay right and the analytic side goes wrong
    import coground.autodiff as adiff

    true_softmax = adiff.softmax

    def broken_softmax(a, axis=-1):
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        import numpy as np

        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return (-out * (g - inner),)  # wrong sign

        return adiff._forward((a,), out, vjp)

    monkeypatch.setattr(adiff, "softmax", broken_softmax)
    try:
        result = runner.invoke(main, ["gradcheck", "--seeds", "1"])
    finally:
        monkeypatch.setattr(adiff, "softmax", true_softmax)
    assert result.exit_code == 2
    assert "FAIL" in result.output
