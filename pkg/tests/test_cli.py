import re

import numpy as np
import pytest
import yaml

from wavmtl import checkpoint as ck
from wavmtl.cli import EXIT_INVALID, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main

TINY = {
    "sre": {"conv_channels": 8, "d_model": 16, "n_heads": 2, "ffn_dim": 32, "code_dim": 16,
            "entries_per_codebook": 8, "distractors": 4},
    "heads": [{"task": "kws", "n_out": 4},
              {"task": "sv", "output": "embedding", "n_out": 8, "input_seconds": 2}],
    "train": {"max_iterations": 3, "freeze_iters": 1, "batch_sizes": {"kws": 2, "sv": 2},
              "pretrain_steps": 2, "pretrain_batch": 2, "pretrain_seconds": 0.25},
    "data": {"synthetic": {"n_keywords": 4, "n_speakers": 8, "clips_per_class": 3,
                           "kws_test_per_class": 2, "heldout_speakers": 4, "n_pairs": 40}},
    "seed": 3,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


@pytest.fixture
def sre_ckpt(tmp_path, config):
    out = str(tmp_path / "sre.ckpt")
    assert main(["pretrain", "--config", config, "--out", out, "--quiet"]) == EXIT_OK
    return out


def _values(text):
    return dict(re.findall(r"^(\w+)=(\S+)$", text, re.M))


def test_pretrain_writes_checkpoint_and_log(tmp_path, config, sre_ckpt, capsys):
    ckpt = ck.load(sre_ckpt)
    assert ckpt.config["kind"] == "sre"
    log = (tmp_path / "sre.ckpt.metrics.txt").read_text().splitlines()
    assert log[0] == "iter,task,loss,wall_ms" and len(log) == 3
    again = str(tmp_path / "again.ckpt")
    capsys.readouterr()
    main(["pretrain", "--config", config, "--out", again, "--quiet"])
    printed = _values(capsys.readouterr().out)
    assert printed["config_hash"] == ckpt.config["run_hash"]
    assert open(sre_ckpt, "rb").read() == open(again, "rb").read()


def test_finetune_logs_both_tasks(tmp_path, config, sre_ckpt):
    out = str(tmp_path / "model.ckpt")
    assert main(["finetune", "--config", config, "--sre", sre_ckpt, "--out", out,
                 "--quiet"]) == EXIT_OK
    rows = [line.split(",") for line in open(out + ".metrics.txt").read().splitlines()[1:]]
    assert [(int(r[0]), r[1]) for r in rows] == [(i, t) for i in range(3) for t in ("kws", "sv")]
    assert set(ck.load(out).config["tasks"]) == {"kws", "sv"}


def test_freeze_sre_keeps_input_tensors(tmp_path, config, sre_ckpt):
    out = str(tmp_path / "frozen.ckpt")
    assert main(["finetune", "--config", config, "--sre", sre_ckpt, "--freeze-sre",
                 "--out", out, "--quiet"]) == EXIT_OK
    before = ck.load(sre_ckpt).subset("sre")
    after = ck.load(out).subset("sre")
    assert before.keys() == after.keys()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_random_init_and_evaluation(tmp_path, config, capsys):
    out = str(tmp_path / "rand.ckpt")
    assert main(["finetune", "--config", config, "--random-init", "--out", out,
                 "--quiet"]) == EXIT_OK
    capsys.readouterr()
    assert main(["evaluate", "--config", config, "--checkpoint", out, "--task", "kws"]) == EXIT_OK
    first = capsys.readouterr().out
    acc = float(_values(first)["kws_top1"])
    assert 0.0 <= acc <= 1.0
    assert _values(open(out + ".kws.txt").read())["kws_top1"] == str(acc)
    main(["evaluate", "--config", config, "--checkpoint", out, "--task", "kws"])
    assert capsys.readouterr().out == first

    scores = tmp_path / "scores.txt"
    assert main(["evaluate", "--config", config, "--checkpoint", out, "--task", "sv",
                 "--scores", str(scores)]) == EXIT_OK
    eer = float(_values(capsys.readouterr().out)["sv_eer"])
    assert 0.0 <= eer <= 1.0
    lines = scores.read_text().splitlines()
    assert len(lines) == 40 and {line.split()[1] for line in lines} == {"0", "1"}


def test_untrained_model_is_at_chance_on_trials(tmp_path, capsys):
    doc = dict(TINY, train=dict(TINY["train"], max_iterations=0),
               data={"synthetic": {"n_pairs": 200}})
    doc["heads"] = [{"task": "kws", "n_out": 12},
                    {"task": "sv", "output": "embedding", "input_seconds": 2}]
    path = tmp_path / "chance.yaml"
    path.write_text(yaml.safe_dump(doc))
    out = str(tmp_path / "untrained.ckpt")
    assert main(["finetune", "--config", str(path), "--random-init", "--out", out,
                 "--quiet"]) == EXIT_OK
    capsys.readouterr()
    main(["evaluate", "--config", str(path), "--checkpoint", out, "--task", "sv"])
    assert abs(float(_values(capsys.readouterr().out)["sv_eer"]) - 0.5) <= 0.1


def test_seed_override_changes_hash(config, capsys, monkeypatch):
    main(["show-config", "--config", config])
    base = capsys.readouterr().out
    monkeypatch.setenv("MTL_SEED", "99")
    main(["show-config", "--config", config])
    overridden = capsys.readouterr().out
    assert "seed: 99" in overridden and base.splitlines()[-1] != overridden.splitlines()[-1]


def test_synth_data_materialises(tmp_path, config):
    out = tmp_path / "corpus"
    assert main(["synth-data", "--config", config, "--out", str(out)]) == EXIT_OK
    assert len(list((out / "kws_train").glob("*/*.wav"))) == 12
    assert (out / "trials.txt").read_text().count("\n") == 40


# -- failure modes and exit codes ------------------------------------------------------------

def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("sre:\n  d_modle: 3\n")
    assert main(["show-config", "--config", str(bad)]) == EXIT_INVALID
    assert "sre.d_modle" in capsys.readouterr().err


def test_missing_files_exit_code(tmp_path, config):
    assert main(["show-config", "--config", str(tmp_path / "none.yaml")]) == EXIT_IO
    assert main(["finetune", "--config", config, "--sre", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "o.ckpt"), "--quiet"]) == EXIT_IO


def test_unwritable_output_leaves_no_file(tmp_path, config):
    out = tmp_path / "missing-dir" / "sre.ckpt"
    assert main(["pretrain", "--config", config, "--out", str(out), "--quiet"]) == EXIT_IO
    assert not out.parent.exists()
    assert list(tmp_path.iterdir()) == [tmp_path / "run.yaml"]


def test_corrupt_checkpoint_exit_code(tmp_path, config, sre_ckpt):
    data = bytearray(open(sre_ckpt, "rb").read())
    data[100] ^= 1
    open(sre_ckpt, "wb").write(bytes(data))
    assert main(["finetune", "--config", config, "--sre", sre_ckpt,
                 "--out", str(tmp_path / "o.ckpt"), "--quiet"]) == EXIT_IO


def test_dimension_mismatch_is_described(tmp_path, config, sre_ckpt, capsys):
    doc = dict(TINY, sre=dict(TINY["sre"], conv_channels=4))
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump(doc))
    assert main(["finetune", "--config", str(other), "--sre", sre_ckpt,
                 "--out", str(tmp_path / "o.ckpt"), "--quiet"]) == EXIT_INVALID
    assert "conv_channels: checkpoint 8, config 4" in capsys.readouterr().err


def test_finetune_needs_a_checkpoint(tmp_path, config, capsys):
    assert main(["finetune", "--config", config, "--out", str(tmp_path / "o"),
                 "--quiet"]) == EXIT_INVALID
    assert "--sre" in capsys.readouterr().err


def test_evaluating_an_sre_only_checkpoint(config, sre_ckpt, capsys):
    assert main(["evaluate", "--config", config, "--checkpoint", sre_ckpt,
                 "--task", "kws"]) == EXIT_INVALID
    assert "no task heads" in capsys.readouterr().err


def test_missing_head_in_checkpoint(tmp_path, capsys):
    doc = dict(TINY, train=dict(TINY["train"], tasks=["kws"]))
    path = tmp_path / "kws.yaml"
    path.write_text(yaml.safe_dump(doc))
    out = str(tmp_path / "kws.ckpt")
    main(["finetune", "--config", str(path), "--random-init", "--out", out, "--quiet"])
    assert main(["evaluate", "--config", str(path), "--checkpoint", out,
                 "--task", "sv"]) == EXIT_INVALID
    assert "no 'sv' head" in capsys.readouterr().err


def test_nan_loss_exit_code(tmp_path, monkeypatch, capsys):
    from wavmtl import losses
    monkeypatch.setattr(losses.CrossEntropy, "__call__",
                        lambda self, logits, labels, step=0: logits.sum() * np.nan)
    doc = dict(TINY, train=dict(TINY["train"], tasks=["kws"]))
    path = tmp_path / "nan.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert main(["finetune", "--config", str(path), "--random-init",
                 "--out", str(tmp_path / "n.ckpt"), "--quiet"]) == EXIT_NUMERIC
    assert "iteration 0, task kws" in capsys.readouterr().err
    assert not (tmp_path / "n.ckpt").exists()
