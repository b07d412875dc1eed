import json
import subprocess
import sys

import pytest

from cecfscil.cli import main

FAST = ["--data.per_class_train=20", "--data.per_class_test=4", "--pretrain.epochs=2",
        "--pil.iterations=3"]


def test_run_writes_the_run_directory(tmp_path, capsys):
    assert main(["run", "--seed", "1", "--out", str(tmp_path / "r")] + FAST) == 0
    out = capsys.readouterr().out
    assert out.startswith("session,classes,accuracy\n")
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert {"metrics.json", "sessions.csv", "confusion_0.csv", "confusion_4.csv", "loss_log.csv",
            "encoder.json", "adapter.json", "manifest.json"} <= names
    doc = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert doc["seeds"]["run"] == 1 and doc["config"]["pil"]["iterations"] == 3


def test_run_is_byte_deterministic(tmp_path):
    for name, workers in (("a", 1), ("b", 4)):
        main(["run", "--seed", "2", "--out", str(tmp_path / name)] + FAST
             + ["--workers", str(workers)])
    for f in ("metrics.json", "sessions.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_pretrain_pil_eval_chain(tmp_path):
    pre, pil, ev = (str(tmp_path / n) for n in ("pre", "pil", "ev"))
    assert main(["pretrain", "--seed", "0", "--out", pre] + FAST) == 0
    assert main(["pil", "--seed", "0", "--out", pil, f"--checkpoints.encoder={pre}/encoder.json"]
                + FAST) == 0
    assert (tmp_path / "pil" / "loss_log.csv").read_text().startswith("iteration,loss,lr\n")
    assert main(["eval", "--out", ev, f"--checkpoints.encoder={pil}/encoder.json",
                 f"--checkpoints.adapter={pil}/adapter.json"] + FAST) == 0
    assert (tmp_path / "ev" / "sessions.csv").exists()


def test_config_file_and_ablate(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"per_class_train": 20, "per_class_test": 4},
                               "pretrain": {"epochs": 2}, "run": {"adapter": False}}))
    assert main(["ablate", "--config", str(cfg), "--axis", "classifier-kind",
                 "--grid", '["cosine", "neg-l2"]', "--out", str(tmp_path / "ab")]) == 0
    lines = (tmp_path / "ab" / "ablation_classifier-kind.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("cosine,")


@pytest.mark.parametrize("argv", [
    ["run"],                                          # --seed is mandatory
    ["run", "--seed", "0", "--pil.bogus=1"],
    ["run", "--seed", "0", "stray"],
    ["eval", "--run.adapter=false"],                  # no encoder checkpoint
])
def test_bad_invocations_exit(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code != 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cecfscil", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("pretrain", "pil", "run", "eval", "ablate"):
        assert cmd in res.stdout
