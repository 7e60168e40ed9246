from __future__ import annotations

import csv
import hashlib
import io
import json

import pytest

from cilab.cli import main
from cilab.config import parse_config, toy_config
from cilab.errors import ConfigError
from cilab.harness import read_metrics, render_report
from cilab.model import load_checkpoint
from cilab.retrieval import forget_ratio
from cilab.synth import GenConfig, generate, make_retrieval_split, save_dataset, save_split

TINY_MODEL = {"input": [1, 8, 8], "conv_blocks": 1, "conv_channels": [3], "hidden_dims": [16], "embed_dim": 6}
TINY_TRAIN = {"epochs_per_batch": 2, "tuples_per_step": 4, "steps_per_epoch": 2}


def tiny_raw(**overrides):
    raw = toy_config(
        data={"num_instances": 9, "views_per_instance": 4, "pose_grid": 4, "image_size": 8, "seed": 1},
        eval={"instances": 3, "queries_per_instance": 1},
        stream={"regime": "incremental", "num_batches": 3},
        model=TINY_MODEL,
        training=TINY_TRAIN,
        strategies=[{"kind": "naive", "loss_family": "triplet"},
                    {"kind": "lfl", "loss_family": "triplet"},
                    {"kind": "lwf", "loss_family": "nce", "nce_negatives": 3}],
    )
    raw.update(overrides)
    return raw


def write_config(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def rows_of(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


class TestConfigParsing:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config(tiny_raw(learning_rate=0.1))

    def test_unknown_nested_key(self):
        raw = tiny_raw()
        raw["strategies"][0]["gamma"] = 1
        with pytest.raises(ConfigError, match="gamma"):
            parse_config(raw)

    def test_training_defaults_merge(self):
        cfg = parse_config(tiny_raw())
        assert all(s.epochs_per_batch == 2 for s in cfg.strategies)
        assert cfg.loss_families == ["triplet", "nce"]

    def test_seed_override(self):
        assert parse_config(tiny_raw(), seed_override=7).seed == 7

    def test_lwf_triplet_rejected(self):
        raw = tiny_raw(strategies=[{"kind": "lwf", "loss_family": "triplet"}])
        with pytest.raises(ConfigError, match="lwf"):
            parse_config(raw)


class TestGenerate:
    def test_writes_files_and_is_reproducible(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tiny_raw())
        assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        for name in ("dataset.json", "dataset.bin", "split.json", "split.bin"):
            assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
        assert "train_instances=6" in capsys.readouterr().out

    def test_outlier_fraction_rejected(self, tmp_path, capsys):
        raw = tiny_raw()
        raw["data"]["outlier_fraction"] = 0.9
        code = main(["generate-data", "--config", str(write_config(tmp_path, raw)), "--out", str(tmp_path)])
        assert code == 2
        assert "outlier_fraction" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["generate-data", "--config", str(tmp_path / "nope.json")]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    cfg = write_config(tmp, tiny_raw())
    assert main(["train", "--config", str(cfg), "--out", str(tmp / "run")]) == 0
    return tmp, cfg


class TestTrain:
    def test_row_order_and_identity(self, trained):
        tmp, _ = trained
        rows = rows_of(tmp / "run" / "metrics.csv")
        order = [(r["loss"], r["strategy"]) for r in rows[::3]]
        assert order == [("triplet", "cumulative"), ("triplet", "naive"), ("triplet", "lfl"),
                         ("nce", "cumulative"), ("nce", "lwf")]
        for r in rows:
            assert abs(forget_ratio(float(r["ref_mAP"]), float(r["mAP"])) - float(r["forget"])) <= 0.01
            assert r["mAP"] == f"{float(r['mAP']):.2f}"

    def test_rerun_identical_bytes(self, trained):
        tmp, cfg = trained
        assert main(["train", "--config", str(cfg), "--out", str(tmp / "again")]) == 0
        assert (tmp / "run" / "metrics.csv").read_bytes() == (tmp / "again" / "metrics.csv").read_bytes()

    def test_checkpoints_per_strategy_and_t(self, trained, capsys):
        tmp, _ = trained
        ck = tmp / "run" / "checkpoints"
        for t in range(3):
            for stem in ("triplet_cumulative", "triplet_naive", "triplet_lfl", "nce_cumulative", "nce_lwf"):
                assert (ck / f"{stem}_t{t}.json").exists()
        assert main(["generate-data", "--config", str(tmp / "cfg.json"), "--out", str(tmp / "data")]) == 0
        capsys.readouterr()
        assert main(["evaluate", str(ck / "triplet_naive_t2.json"), str(tmp / "data" / "split.json")]) == 0
        printed = capsys.readouterr().out.split()[-1]
        naive_final = [r for r in rows_of(tmp / "run" / "metrics.csv") if r["strategy"] == "naive"][-1]
        assert printed == naive_final["mAP"]

    def test_single_batch_forget_zero(self, tmp_path):
        raw = tiny_raw(stream={"regime": "incremental", "num_batches": 1},
                       strategies=[{"kind": "naive", "loss_family": "triplet"}])
        assert main(["train", "--config", str(write_config(tmp_path, raw)), "--out", str(tmp_path / "o")]) == 0
        rows = rows_of(tmp_path / "o" / "metrics.csv")
        assert [r["forget"] for r in rows] == ["0.00", "0.00"]

    def test_from_saved_dataset(self, tmp_path):
        cfg = write_config(tmp_path, tiny_raw())
        assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
        raw = tiny_raw(data={"path": "data/dataset.json", "split": "data/split.json"},
                       strategies=[{"kind": "naive", "loss_family": "triplet"}])
        inline = tiny_raw(strategies=[{"kind": "naive", "loss_family": "triplet"}])
        assert main(["train", "--config", str(write_config(tmp_path, raw, "p.json")), "--out", str(tmp_path / "p")]) == 0
        assert main(["train", "--config", str(write_config(tmp_path, inline, "i.json")),
                     "--out", str(tmp_path / "i")]) == 0
        assert (tmp_path / "p" / "metrics.csv").read_bytes() == (tmp_path / "i" / "metrics.csv").read_bytes()

    def test_overlap_is_protocol_error(self, tmp_path):
        ds = generate(GenConfig(num_instances=4, views_per_instance=4, pose_grid=4, image_size=8))
        save_dataset(ds, tmp_path / "d.json")
        save_split(make_retrieval_split(ds.subset_instances([0, 1]), 1), tmp_path / "s.json")
        raw = tiny_raw(data={"path": "d.json", "split": "s.json"}, stream={"regime": "random", "num_batches": 2})
        assert main(["train", "--config", str(write_config(tmp_path, raw)), "--out", str(tmp_path / "o")]) == 3
        assert not (tmp_path / "o" / "metrics.csv").exists()

    def test_missing_dataset_is_persistence_error(self, tmp_path):
        raw = tiny_raw(data={"path": "absent.json", "split": "absent_split.json"})
        assert main(["train", "--config", str(write_config(tmp_path, raw)), "--out", str(tmp_path / "o")]) == 4

    def test_evaluate_missing_checkpoint(self, tmp_path):
        assert main(["evaluate", str(tmp_path / "x.json"), str(tmp_path / "s.json")]) == 4


REFERENCE_ROWS = """dataset,strategy,loss,t,mAP,ref_mAP,forget
Cars3D,naive,triplet,4,50.01,70.82,29.38
Cars3D,ewc,triplet,4,50.91,70.82,28.11
MVCD,naive,triplet,4,83.77,94.99,11.81
MVCD,ewc,triplet,4,81.44,94.99,14.26
CompCars,naive,triplet,4,38.60,54.41,29.06
CompCars,ewc,triplet,4,37.43,54.41,31.21
"""


class TestReport:
    def test_single_row(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("dataset,strategy,loss,t,mAP,ref_mAP,forget\ntoy,naive,triplet,0,40.00,50.00,20.00\n")
        assert main(["report", str(tmp_path / "m.csv")]) == 0
        body = [line for line in capsys.readouterr().out.splitlines() if line.startswith("  naive")]
        assert len(body) == 1
        assert (tmp_path / "curves.csv").read_text().splitlines()[1] == "toy,naive,triplet,false,0,40.00"

    def test_reference_shaped_rows(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text(REFERENCE_ROWS)
        assert main(["report", str(tmp_path / "m.csv")]) == 0
        out = capsys.readouterr().out
        for value in ("29.38", "28.11", "11.81", "14.26", "29.06", "31.21"):
            assert value in out
        marked = [line.split()[0:1] + line.split()[-2:] for line in out.splitlines() if line.endswith(" *")]
        assert marked == [["ewc", "28.11", "*"], ["naive", "11.81", "*"], ["naive", "29.06", "*"]]

    def test_mark_invariant_under_rescaling(self, tmp_path):
        (tmp_path / "m.csv").write_text(REFERENCE_ROWS)
        rows = read_metrics(tmp_path / "m.csv")
        scaled = [dict(r, mAP=r["mAP"] * 0.5, ref_mAP=r["ref_mAP"] * 0.5) for r in rows]
        marks = [line.split()[0] for line in render_report(rows).splitlines() if line.endswith("*")]
        marks2 = [line.split()[0] for line in render_report(scaled).splitlines() if line.endswith("*")]
        assert marks == marks2

    def test_schema_mismatch_names_column(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("strategy,loss,t,mAP,ref_mAP\nnaive,triplet,0,1,2\n")
        assert main(["report", str(tmp_path / "m.csv")]) == 2
        assert "'forget'" in capsys.readouterr().err

    def test_inconsistent_forget_rejected(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("strategy,loss,t,mAP,ref_mAP,forget\nnaive,triplet,0,40,50,10\n")
        assert main(["report", str(tmp_path / "m.csv")]) == 2

    def test_loss_comparison_block(self, trained, capsys):
        tmp, _ = trained
        assert main(["report", str(tmp / "run" / "metrics.csv"), "--out", str(tmp / "rep")]) == 0
        out = capsys.readouterr().out
        assert "Regression(%)" in out and "w/ NCE(%)" in out
        assert (tmp / "rep" / "curves.csv").exists()


class TestTransferCommand:
    @pytest.fixture(scope="class")
    @classmethod
    def transferred(cls, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("transfer")
        raw = tiny_raw(
            strategies=[{"kind": "naive", "loss_family": "triplet"}, {"kind": "lfl", "loss_family": "triplet"}],
            transfer={"pretrain_data": {"num_instances": 4, "views_per_instance": 4, "pose_grid": 4,
                                        "image_size": 8, "seed": 99},
                      "pretrain_epochs": 2},
        )
        cfg = write_config(tmp, raw)
        assert main(["transfer", "--config", str(cfg), "--out", str(tmp / "tr")]) == 0
        plain = dict(raw)
        plain.pop("transfer")
        assert main(["train", "--config", str(write_config(tmp, plain, "plain.json")), "--out", str(tmp / "pl")]) == 0
        return tmp

    def test_transfer_false_rows_equal_train(self, transferred):
        tr = rows_of(transferred / "tr" / "metrics.csv")
        pl = rows_of(transferred / "pl" / "metrics.csv")
        assert [{k: v for k, v in r.items() if k != "transfer"} for r in tr if r["transfer"] == "false"] == pl
        assert {r["transfer"] for r in tr} == {"true", "false"}

    def test_conv_bytes_constant(self, transferred):
        ck = transferred / "tr" / "checkpoints"
        for stem in ("triplet_naive", "triplet_lfl"):
            nets = [load_checkpoint(ck / f"transfer_{stem}_t{t}.json")[0] for t in range(3)]
            for name in nets[0].params:
                values = {n.params[name].data.tobytes() for n in nets}
                assert (len(values) == 1) == name.startswith("conv")

    def test_report_side_by_side(self, transferred, capsys):
        assert main(["report", str(transferred / "tr" / "metrics.csv")]) == 0
        out = capsys.readouterr().out
        assert "w/o(%)" in out and "w/(%)" in out and "(transfer)" in out

    def test_transfer_requires_pretrain_data(self, tmp_path):
        cfg = write_config(tmp_path, tiny_raw())
        assert main(["transfer", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
