import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from irfsod.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from irfsod.data import load_coco_annotations, load_image
from irfsod.training import load_checkpoint


def write_tiny_train_config(path: Path, data_root: Path) -> Path:
    path.write_text(f"""
# desk-test settings
data.root = {data_root}
backbone.channels = 8, 12
backbone.strides = 2, 2
backbone.support_size = 32
rpn.anchor_scales = 12, 24
rpn.anchor_ratios = 1.0
rpn.pre_nms_top_n = 200
rpn.post_nms_top_n = 32
rpn.pseudo_warmup_iters = 1
heads.roi_resolution = 4
heads.comparison_hidden = 16
heads.regressor_hidden = 32
train.iterations = 3
train.milestones = 2
train.support_shots = 2
""")
    return path


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Shared dataset + checkpoint produced through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    code = main(["make-shapes", "--out", str(data_dir), "--seed", "5",
                 "--images", "30", "--image-size", "64",
                 "--min-size", "12", "--max-size", "26"])
    assert code == EXIT_OK
    config = write_tiny_train_config(root / "run.cfg", data_dir)
    ckpt = root / "model.ckpt"
    code = main(["train", "--config", str(config), "--out", str(ckpt), "--quiet"])
    assert code == EXIT_OK
    return {"root": root, "data": data_dir, "config": config, "ckpt": ckpt}


class TestMakeShapes:
    def test_round_trips_through_loader(self, cli_workspace):
        split = load_coco_annotations(cli_workspace["data"] / "annotations.json",
                                      visible="all")
        assert len(split.records) == 30

    def test_same_seed_identical_bytes(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["make-shapes", "--out", str(tmp_path / sub), "--seed", "9",
                         "--images", "5", "--image-size", "48",
                         "--min-size", "10", "--max-size", "20"]) == EXIT_OK
        assert (tmp_path / "a" / "annotations.json").read_bytes() == \
               (tmp_path / "b" / "annotations.json").read_bytes()

    def test_split_preset_honored(self, tmp_path):
        assert main(["make-shapes", "--out", str(tmp_path / "ds"), "--seed", "1",
                     "--images", "4", "--image-size", "48", "--min-size", "10",
                     "--max-size", "20", "--classes", "circle,square,triangle,star,cross",
                     "--novel", "star,cross"]) == EXIT_OK
        raw = json.loads((tmp_path / "ds" / "annotations.json").read_text())
        assert raw["splits"] == {"base": [1, 2, 3], "novel": [4, 5]}

    def test_unknown_class_is_data_error(self, tmp_path):
        assert main(["make-shapes", "--out", str(tmp_path / "ds"),
                     "--classes", "circle,blob"]) == EXIT_DATA


class TestTrain:
    def test_missing_config_exits_2_and_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.cfg"
        code = main(["train", "--config", str(missing), "--out", str(tmp_path / "x.ckpt")])
        assert code == EXIT_USAGE
        assert str(missing) in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path, cli_workspace):
        code = main(["train", "--set", "rpn.bogus=1", "--data",
                     str(cli_workspace["data"]), "--out", str(tmp_path / "x.ckpt")])
        assert code == EXIT_USAGE

    def test_override_reflected_in_echoed_config(self, tmp_path, cli_workspace, capsys):
        config = write_tiny_train_config(tmp_path / "run.cfg", cli_workspace["data"])
        code = main(["train", "--config", str(config), "--set", "heads.alpha=0.5",
                     "--set", "train.iterations=1",
                     "--out", str(tmp_path / "m.ckpt"), "--quiet"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "heads.alpha = 0.5" in out
        assert "train.iterations = 1" in out

    def test_checkpoint_loadable_and_log_written(self, cli_workspace):
        model = load_checkpoint(cli_workspace["ckpt"])
        assert model.run_config.train.iterations == 3
        log = Path(str(cli_workspace["ckpt"]).replace(".ckpt", ".log.jsonl"))
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 3
        assert set(json.loads(lines[0])) == {"iteration", "l_rpn", "l_cls",
                                             "l_reg", "total", "lr"}


def build_support_dir(root: Path, split, categories, shots=2) -> Path:
    from irfsod.data import instances_of

    support_dir = root / "supports"
    for cat in categories:
        sub = support_dir / str(cat)
        sub.mkdir(parents=True, exist_ok=True)
        boxes = {}
        for i, inst in enumerate(instances_of(split, cat)[:shots]):
            name = f"s{i}.png"
            Image.fromarray(load_image(inst.record.path)).save(sub / name)
            boxes[name] = list(inst.box.to_xywh())
        (sub / "boxes.json").write_text(json.dumps(boxes))
    return support_dir


class TestDetect:
    def test_end_to_end_detections_json(self, cli_workspace, tmp_path, capsys):
        split = load_coco_annotations(cli_workspace["data"] / "annotations.json",
                                      visible="novel")
        cats = sorted(split.novel_categories)
        support_dir = build_support_dir(tmp_path, split, cats)
        target = next(r for r in split.records if r.annotations)
        out = tmp_path / "dets.json"
        code = main(["detect", "--checkpoint", str(cli_workspace["ckpt"]),
                     "--support-dir", str(support_dir),
                     "--images", str(target.path), "--out", str(out)])
        assert code == EXIT_OK
        rows = json.loads(out.read_text())
        assert len(rows) >= 1  # positive image yields at least one detection
        for row in rows:
            assert 0.0 <= row["score"] <= 1.0
            assert row["category_id"] in set(cats)
            assert len(row["bbox"]) == 4

    def test_rerun_identical(self, cli_workspace, tmp_path):
        split = load_coco_annotations(cli_workspace["data"] / "annotations.json",
                                      visible="novel")
        cats = sorted(split.novel_categories)
        support_dir = build_support_dir(tmp_path, split, cats)
        target = next(r for r in split.records if r.annotations)
        outs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert main(["detect", "--checkpoint", str(cli_workspace["ckpt"]),
                         "--support-dir", str(support_dir),
                         "--images", str(target.path), "--out", str(out)]) == EXIT_OK
            outs.append(out.read_text())
        assert outs[0] == outs[1]

    def test_unreadable_inputs_exit_3(self, cli_workspace, tmp_path):
        code = main(["detect", "--checkpoint", str(cli_workspace["ckpt"]),
                     "--support-dir", str(tmp_path / "missing"),
                     "--images", "x.png", "--out", str(tmp_path / "o.json")])
        assert code == EXIT_DATA


class TestEval:
    def test_onetime_reports_all_metrics(self, cli_workspace, tmp_path, capsys):
        out = tmp_path / "metrics.json"
        code = main(["eval", "--checkpoint", str(cli_workspace["ckpt"]),
                     "--protocol", "onetime", "--data", str(cli_workspace["data"]),
                     "--k-shot", "2", "--out", str(out)])
        assert code == EXIT_OK
        report = json.loads(out.read_text())
        for key in ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large",
                    "ar1", "ar10", "ar100", "ar_small", "ar_medium", "ar_large"):
            assert key in report

    def test_meta_reproducible_means(self, cli_workspace, tmp_path):
        reports = []
        for name in ("m1.json", "m2.json"):
            out = tmp_path / name
            code = main(["eval", "--checkpoint", str(cli_workspace["ckpt"]),
                         "--protocol", "meta", "--data", str(cli_workspace["data"]),
                         "--episodes", "2", "--n-way", "2", "--k-shot", "2",
                         "--queries-per-category", "2", "--seed", "11",
                         "--out", str(out)])
            assert code == EXIT_OK
            reports.append(json.loads(out.read_text()))
        for report in reports:
            report.pop("seconds_per_episode")  # wall time is not reproducible
        assert reports[0] == reports[1]
        assert reports[0]["episodes"] == 2
        assert "ci95" in reports[0]

    def test_unknown_protocol_usage_error(self, cli_workspace, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--checkpoint", str(cli_workspace["ckpt"]),
                  "--protocol", "bogus", "--data", str(cli_workspace["data"])])
        assert exc.value.code == EXIT_USAGE

    def test_missing_data_exit_3(self, cli_workspace, tmp_path):
        code = main(["eval", "--checkpoint", str(cli_workspace["ckpt"]),
                     "--protocol", "onetime", "--data", str(tmp_path / "none")])
        assert code == EXIT_DATA
