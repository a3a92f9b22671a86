"""Command-line behavior: exit codes, determinism, output files."""

import json

import pytest

from affseg import cli
from affseg.config import config_from_json, config_to_json, default_config, load_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A generated corpus plus a small-model config, trained once."""
    root = tmp_path_factory.mktemp("cli")
    cfg = default_config()
    cfg.corpus.n_train = 4
    cfg.corpus.n_eval = 2
    cfg.model.dim = 16
    cfg.model.heads = 2
    cfg.model.stages = 2
    cfg.optim.epochs = 1
    cfg.optim.batch_size = 2
    cfg_path = root / "run.json"
    cfg_path.write_text(config_to_json(cfg))
    corpus = root / "c.afsc"
    ckpt = root / "m.afck"
    assert cli.main(["gen", "--config", str(cfg_path), "--out", str(corpus)]) == 0
    assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus),
                     "--out", str(ckpt)]) == 0
    return root, cfg_path, corpus, ckpt


def test_config_init_emits_defaults(tmp_path, capsys):
    out = tmp_path / "cfg.json"
    assert cli.main(["config", "init", "--out", str(out)]) == 0
    assert load_config(str(out)) == default_config()
    assert cli.main(["config", "init"]) == 0
    printed = capsys.readouterr().out
    assert config_from_json(printed) == default_config()


def test_gen_is_byte_deterministic(workdir):
    root, cfg_path, corpus, _ = workdir
    again = root / "c2.afsc"
    assert cli.main(["gen", "--config", str(cfg_path), "--out", str(again)]) == 0
    assert again.read_bytes() == corpus.read_bytes()


def test_train_wrote_checkpoint_and_log(workdir):
    root, _, _, ckpt = workdir
    assert ckpt.exists()
    log = ckpt.parent / (ckpt.name + ".log")
    records = [json.loads(x) for x in log.read_text().splitlines()]
    assert len(records) == 1
    assert {"epoch", "cls", "mask_focal", "dice", "total"} <= set(records[0])


def test_train_reruns_reproduce_checkpoint_bytes(workdir):
    root, cfg_path, corpus, ckpt = workdir
    again = root / "m2.afck"
    assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus),
                     "--out", str(again), "--log", str(root / "m2.log")]) == 0
    assert again.read_bytes() == ckpt.read_bytes()


def test_eval_report_is_thread_independent(workdir):
    root, cfg_path, corpus, ckpt = workdir
    outs = []
    for name, threads in (("r1.json", "1"), ("r2.json", "3")):
        out = root / name
        assert cli.main(["eval", "--config", str(cfg_path), "--corpus", str(corpus),
                         "--checkpoint", str(ckpt), "--threads", threads,
                         "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    report = json.loads(outs[0])
    assert {"pq", "sq", "rq", "ap", "miou", "mode", "n_scenes"} <= set(report)
    assert report["n_scenes"] == 2


def test_eval_open_mode_with_kappa_zero_matches_closed(workdir):
    root, cfg_path, corpus, ckpt = workdir
    reports = {}
    for mode, extra in (("closed", []), ("open", ["--kappa", "0"])):
        out = root / f"{mode}.json"
        assert cli.main(["eval", "--config", str(cfg_path), "--corpus", str(corpus),
                         "--checkpoint", str(ckpt), "--mode", mode, "--out", str(out)]
                        + extra) == 0
        reports[mode] = json.loads(out.read_text())
    for key in ("pq", "sq", "rq", "ap", "miou"):
        assert reports["closed"][key] == reports["open"][key]


def test_infer_writes_overlays_and_report(workdir):
    root, cfg_path, corpus, ckpt = workdir
    out = root / "overlays"
    assert cli.main(["infer", "--config", str(cfg_path), "--corpus", str(corpus),
                     "--checkpoint", str(ckpt), "--scene", "1", "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"eval0001_patches.ppm", "eval0001_semantic.ppm",
                     "eval0001_panoptic.ppm", "eval0001_report.json"}
    report = json.loads((out / "eval0001_report.json").read_text())
    assert report["scene"] == 1 and report["split"] == "eval"
    assert "instances" in report and "scene_pq" in report
    for ppm in ("eval0001_patches.ppm", "eval0001_semantic.ppm", "eval0001_panoptic.ppm"):
        assert (out / ppm).read_bytes().startswith(b"P6\n64 64\n255\n")


def test_infer_scene_index_out_of_range(workdir):
    root, cfg_path, corpus, ckpt = workdir
    assert cli.main(["infer", "--config", str(cfg_path), "--corpus", str(corpus),
                     "--checkpoint", str(ckpt), "--scene", "99",
                     "--out", str(root / "x")]) == 2


def test_diagnose_reports_both_splits(workdir, capsys):
    root, cfg_path, corpus, _ = workdir
    assert cli.main(["diagnose", "--corpus", str(corpus)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"train", "eval"}
    for split in report.values():
        assert set(split) == {"direct", "merge_oracle"}
        # uncorrupted corpus: merging in-region patches recovers every target
        assert split["merge_oracle"]["miss_rate"]["0.5"] == 0.0


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as e:
        cli.main(["bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--corpus", "x"])  # missing --checkpoint
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 1


def test_data_errors_exit_two(workdir, tmp_path):
    root, cfg_path, corpus, ckpt = workdir
    assert cli.main(["eval", "--config", str(cfg_path), "--corpus", "/nope",
                     "--checkpoint", str(ckpt)]) == 2
    assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(ckpt),
                     "--out", str(tmp_path / "x.afck")]) == 2  # checkpoint as corpus
    bad = tmp_path / "bad.json"
    bad.write_text('{"kappa": 7}')
    assert cli.main(["gen", "--config", str(bad), "--out", str(tmp_path / "c")]) == 2


def test_numeric_failure_exits_three(workdir, monkeypatch):
    root, cfg_path, corpus, _ = workdir
    from affseg.train import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli.tr, "train", boom)
    assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus),
                     "--out", str(root / "z.afck")]) == 3
