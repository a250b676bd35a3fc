import json

import pytest

from pmlm.cli import main
from pmlm.toy import copy_pairs, write_copy_corpus, write_pairs_tsv

WORDS = "t01 t02 t03 t04 t05 t06"


@pytest.fixture
def workspace(tmp_path):
    write_copy_corpus(tmp_path / "c.txt", documents=30)
    write_pairs_tsv(tmp_path / "p.tsv", copy_pairs(12))
    (tmp_path / "cls.tsv").write_text("".join(f"t0{i % 5} t1{i % 3}\t{i % 2}\n" for i in range(12)))
    (tmp_path / "cfg.txt").write_text(
        "layers=1\nhidden_size=16\nattention_heads=2\nffn_inner_hidden_size=32\n"
        "max_positions=32\nbatch_size=4\ntraining_steps=4\nmax_len=24\n"
    )
    assert main(["build-vocab", "--corpus", str(tmp_path / "c.txt"), "--out", str(tmp_path / "v.txt")]) == 0
    return tmp_path


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_sample_mask(workspace, capsys):
    assert main(["sample-mask", "--vocab", str(workspace / "v.txt"), "--s1", WORDS, "--seed", "1"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("# tokens\t[SOS] t01")
    assert out[2].split("\t")[0] == "1"


def test_audit_mask_pass_and_injected_fail(workspace, capsys):
    args = ["audit-mask", "--vocab", str(workspace / "v.txt"), "--s1", WORDS, "--order", "4,5;2", "--all-mask"]
    assert main(args) == 0
    assert capsys.readouterr().out.rstrip().endswith("audit: PASS")
    assert main(args + ["--inject", "6,11"]) == 1
    assert "leak: [P]4 -> x6 -> x4" in capsys.readouterr().out


def test_pretrain_finetune_generate(workspace, capsys, monkeypatch):
    monkeypatch.setenv("PMLM_SEED", "5")
    out = workspace / "run"
    assert main(["pretrain", "--config", str(workspace / "cfg.txt"), "--corpus", str(workspace / "c.txt"), "--out", str(out)]) == 0
    result = last_json(capsys)
    assert result["step"] == 4
    assert "seed=5" in (out / "run_config.txt").read_text().splitlines()
    ck = result["checkpoint"]

    assert main(["finetune-gen", "--checkpoint", ck, "--data", str(workspace / "p.tsv"), "--out", str(workspace / "gen"), "--steps", "2"]) == 0
    assert last_json(capsys)["skipped"] == 0
    assert main(["generate", "--checkpoint", str(workspace / "gen" / "seq2seq.bin"), "--input", str(workspace / "p.tsv"), "--max-out", "4"]) == 0
    lines = capsys.readouterr().out.split("\n")[:-1]
    assert len(lines) == 12 and all(len(l.split()) <= 4 for l in lines)

    assert main(["finetune-cls", "--checkpoint", ck, "--data", str(workspace / "cls.tsv"), "--out", str(workspace / "cls"), "--steps", "2"]) == 0
    assert last_json(capsys)["num_labels"] == 2
    assert (workspace / "cls" / "finetune_config.txt").exists()


def test_resume_via_cli(workspace, capsys):
    base = ["pretrain", "--config", str(workspace / "cfg.txt"), "--corpus", str(workspace / "c.txt")]
    assert main(base + ["--out", str(workspace / "a")]) == 0
    ck = last_json(capsys)["checkpoint"]
    assert main(base + ["--out", str(workspace / "b"), "--steps", "6", "--resume", ck]) == 0
    assert last_json(capsys)["step"] == 6
    assert len((workspace / "b" / "metrics.jsonl").read_text().splitlines()) == 2


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["pretrain", "--out", "x"])
    assert e.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert main(["pretrain", "--corpus", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.txt"
    bad.write_text("bogus_key=1\n")
    assert main(["pretrain", "--config", str(bad), "--corpus", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_verify_quick_suite(capsys):
    assert main(["verify", "--suite", "sampler", "--quick"]) == 0
    assert capsys.readouterr().out.rstrip().endswith("VERIFY PASS")


def test_verify_all_passes(capsys):
    assert main(["verify", "--suite", "all"]) == 0
    out = capsys.readouterr().out
    for suite in ("ae_equivalence", "par_equivalence", "leakage_audit", "gradients", "masked_ratio", "forward_passes"):
        assert f"PASS {suite}" in out
    assert "FAIL" not in out
