from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from cluscomp.checkpoint import read_manifest
from cluscomp.cli import main, read_corpus
from cluscomp.codec import bits_per_param, load_clsc
from cluscomp.diagnostics import kurtosis
from cluscomp.toydata import WeightGenSpec, gen_weights

SMALL_CORPUS = ["--corpus-length", "12000", "--heldout", "16"]


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["init-model", "--out", str(d / "lm"), "--seed", "0"]) == 0
    assert main(["compress", "--manifest", str(d / "lm"), "--g", "8", "--n", "16", "--out", str(d / "c.clsc")]) == 0
    return d


def test_stats_table(tmp_path, capsys):
    assert main(["stats"]) == 0
    out = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["bits_2dp"] for r in out] == ["4.25", "3.04", "2.34"]
    assert [r["codebook_pct_table"] for r in out] == ["1.55", "2.32", "3.52"]


def test_config_echo_reproduces_run(tmp_path):
    first = tmp_path / "a.csv"
    assert main(["stats", "--g", "4", "9", "--out", str(first)]) == 0
    echo = json.loads((tmp_path / "a.csv.config.json").read_text())
    assert echo["command"] == "stats" and echo["g"] == [4, 9]
    echo["out"] = str(tmp_path / "b.csv")
    (tmp_path / "cfg.json").write_text(json.dumps(echo))
    assert main(["--config", str(tmp_path / "cfg.json")]) == 0
    assert (tmp_path / "b.csv").read_text() == first.read_text()


def test_flags_override_config(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"command": "stats", "g": [4], "d-in": 64, "d_out": 64}))
    assert main(["--config", str(tmp_path / "cfg.json"), "--g", "8", "--out", str(tmp_path / "s.csv")]) == 0
    r = rows(tmp_path / "s.csv")
    assert [x["g"] for x in r] == ["8"] and r[0]["d_in"] == "64"


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"command": "stats", "gee": 4}))
    assert main(["--config", str(tmp_path / "cfg.json")]) == 1
    assert "gee" in capsys.readouterr().err


def test_usage_errors():
    assert main([]) == 1
    assert main(["compress"]) == 1
    assert main(["stats", "--g", "four"]) == 1


def test_compress_bit_rows_follow_formula(work, tmp_path):
    out = tmp_path / "bits.csv"
    assert main(["compress", "--manifest", str(work / "lm"), "--g", "4", "--n", "65500", "--iters", "2",
                 "--out", str(tmp_path / "x.clsc"), "--bits-csv", str(out)]) == 0
    table = rows(out)
    assert len(table) == 14
    for r in table:
        formula = float(bits_per_param(int(r["d_in"]), int(r["d_out"]), 4, 65500).bits_per_param)
        assert float(r["bits_formula"]) == pytest.approx(formula, abs=1e-6)
        assert float(r["rel_error"]) == 0.0  # n exceeds the vector count: lossless


def test_workers_do_not_change_output(work, tmp_path, monkeypatch):
    args = ["compress", "--manifest", str(work / "lm"), "--g", "4", "--n", "64", "--iters", "5"]
    assert main(args + ["--workers", "1", "--out", str(tmp_path / "w1.clsc")]) == 0
    assert main(args + ["--workers", "8", "--out", str(tmp_path / "w8.clsc")]) == 0
    monkeypatch.setenv("CLUSCOMP_WORKERS", "3")
    assert main(args + ["--out", str(tmp_path / "env.clsc")]) == 0
    one = (tmp_path / "w1.clsc").read_bytes()
    assert one == (tmp_path / "w8.clsc").read_bytes() == (tmp_path / "env.clsc").read_bytes()


def test_missing_tensor_file(work, tmp_path, capsys):
    d = tmp_path / "broken"
    assert main(["gen-weights", "--out", str(d), "--rows", "8", "--cols", "8", "--name", "proj"]) == 0
    (d / "proj.bin").unlink()
    assert main(["compress", "--manifest", str(d), "--out", str(tmp_path / "z.clsc")]) == 2
    assert "proj.bin" in capsys.readouterr().err


def test_gen_weights_from_config(tmp_path):
    spec = WeightGenSpec("gaussian_with_outliers", 16, 12, seed=4, rate=0.05)
    cfg = dict(spec.to_dict(), command="gen-weights", out=str(tmp_path / "gw"))
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["--config", str(tmp_path / "cfg.json")]) == 0
    tensors, _ = read_manifest(tmp_path / "gw")
    assert tensors["W"].tobytes() == gen_weights(spec).tobytes()


def test_calibrate_loss_csv(work, tmp_path):
    out = tmp_path / "cal.csv"
    assert main(["calibrate", "--checkpoint", str(work / "lm"), "--clsc", str(work / "c.clsc"),
                 "--out", str(tmp_path / "cal.clsc"), "--epochs", "2", "--samples", "24", "--loss-csv", str(out)]
                + SMALL_CORPUS) == 0
    # 24 rows, 3 held out, 21 trained in batches of 8 -> 3 steps per epoch per block
    assert len(rows(out)) == 2 * 2 * 3
    echo = json.loads((tmp_path / "cal.clsc.config.json").read_text())
    assert echo["lr"] == 1e-4 and echo["weight_decay"] == 0.0 and echo["batch"] == 8


def test_recover_defaults_and_loss_rows(work, tmp_path):
    out = tmp_path / "loss.csv"
    assert main(["recover", "--checkpoint", str(work / "lm"), "--clsc", str(work / "c.clsc"),
                 "--out", str(tmp_path / "r.clsc"), "--loss-csv", str(out)] + SMALL_CORPUS) == 0
    echo = json.loads((tmp_path / "r.clsc.config.json").read_text())
    assert echo["lr"] == 1e-5 and echo["max_grad_norm"] == 0.3 and echo["batch"] == 8 and echo["epochs"] == 1
    n_train = 12000 // 64 - 16
    assert len(rows(out)) == 1 * -(-n_train // 8)


def test_resume_reproduces_losses(work, tmp_path):
    base = ["recover", "--checkpoint", str(work / "lm"), "--epochs", "2", "--lr", "1e-4", "--seed", "2",
            "--precision", "32"] + SMALL_CORPUS
    assert main(base + ["--clsc", str(work / "c.clsc"), "--out", str(tmp_path / "full.clsc"),
                        "--loss-csv", str(tmp_path / "full.csv")]) == 0
    assert main(base + ["--clsc", str(work / "c.clsc"), "--out", str(tmp_path / "half.clsc"),
                        "--loss-csv", str(tmp_path / "a.csv"), "--stop-after-epoch", "1",
                        "--state-out", str(tmp_path / "st.npz")]) == 0
    assert main(base + ["--clsc", str(tmp_path / "half.clsc"), "--out", str(tmp_path / "rest.clsc"),
                        "--loss-csv", str(tmp_path / "b.csv"), "--resume", str(tmp_path / "st.npz")]) == 0
    assert rows(tmp_path / "a.csv") + rows(tmp_path / "b.csv") == rows(tmp_path / "full.csv")
    assert (tmp_path / "rest.clsc").read_bytes() == (tmp_path / "full.clsc").read_bytes()


def test_finetune_runs(work, tmp_path):
    assert main(["finetune", "--checkpoint", str(work / "lm"), "--clsc", str(work / "c.clsc"),
                 "--out", str(tmp_path / "f.clsc"), "--corpus-kind", "copy", "--batch", "16", "--epochs", "1",
                 "--eval-csv", str(tmp_path / "ev.csv")] + SMALL_CORPUS) == 0
    evals = rows(tmp_path / "ev.csv")
    assert [e["epoch"] for e in evals] == ["0", "1"]
    echo = json.loads((tmp_path / "f.clsc.config.json").read_text())
    assert echo["weight_decay"] == 0.1 and echo["warmup_ratio"] == 0.03


def test_divergence_exit_code(work, tmp_path):
    with np.errstate(all="ignore"):
        code = main(["recover", "--checkpoint", str(work / "lm"), "--clsc", str(work / "c.clsc"),
                     "--out", str(tmp_path / "d.clsc"), "--lr", "1e30", "--max-grad-norm", "0"] + SMALL_CORPUS)
    assert code == 3


def test_corrupt_clsc_exit_code(work, tmp_path):
    buf = bytearray((work / "c.clsc").read_bytes())
    buf[100] ^= 0x10
    (tmp_path / "bad.clsc").write_bytes(bytes(buf))
    assert main(["quantize-codebook", "--clsc", str(tmp_path / "bad.clsc"), "--bits", "8",
                 "--out", str(tmp_path / "o.clsc")]) == 2


def test_quantize_codebook_widths(work, tmp_path, capsys):
    assert main(["quantize-codebook", "--clsc", str(work / "c.clsc"), "--bits", "3", "--out", str(tmp_path / "q.clsc")]) == 1
    err = capsys.readouterr().err
    assert all(w in err for w in ("2", "4", "8", "16"))
    assert main(["quantize-codebook", "--clsc", str(work / "c.clsc"), "--bits", "16",
                 "--out", str(tmp_path / "q16.clsc")]) == 0
    a, b = (work / "c.clsc").read_bytes(), (tmp_path / "q16.clsc").read_bytes()
    assert a == b  # 16-bit storage in, 16-bit storage out


def test_quantized_codebook_eval_change(work, tmp_path):
    assert main(["quantize-codebook", "--clsc", str(work / "c.clsc"), "--bits", "8",
                 "--out", str(tmp_path / "q8.clsc")]) == 0
    for name in ("c", "q8"):
        src = work / "c.clsc" if name == "c" else tmp_path / "q8.clsc"
        assert main(["eval", "--checkpoint", str(work / "lm"), "--clsc", str(src),
                     "--out", str(tmp_path / f"{name}.csv")] + SMALL_CORPUS) == 0
    before = float(rows(tmp_path / "c.csv")[1]["loss"])
    after = float(rows(tmp_path / "q8.csv")[1]["loss"])
    assert abs(after - before) / before < 0.01
    assert len(load_clsc(tmp_path / "q8.clsc")) == 14


def test_diag_kurtosis_ordering(tmp_path):
    out = {}
    for dist in ("gaussian", "student_t"):
        d = tmp_path / dist
        assert main(["gen-weights", "--out", str(d), "--distribution", dist, "--rows", "256", "--cols", "256"]) == 0
        assert main(["diag", "--manifest", str(d), "--out", str(tmp_path / f"{dist}.csv")]) == 0
        out[dist] = float(rows(tmp_path / f"{dist}.csv")[0]["kurtosis_pearson"])
    assert out["student_t"] > out["gaussian"]
    assert out["gaussian"] == pytest.approx(kurtosis(gen_weights(WeightGenSpec("gaussian", 256, 256))))


def test_diag_with_codes_and_wanda(work, tmp_path):
    assert main(["diag", "--manifest", str(work / "lm"), "--clsc", str(work / "c.clsc"), "--wanda",
                 "--samples", "4", "--out", str(tmp_path / "d.csv")] + SMALL_CORPUS) == 0
    table = {r["name"]: r for r in rows(tmp_path / "d.csv")}
    q = table["blocks.0.q"]
    assert 0 <= float(q["code_entropy"]) <= 1 and float(q["wanda_std"]) > 0
    assert table["embed"]["code_entropy"] == ""


def test_sweep_csv(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--rows", "64", "--cols", "64", "--g", "4", "8", "--n", "8", "32",
                 "--restarts", "1", "--out", str(out)]) == 0
    table = rows(out)
    err = {(int(r["g"]), int(r["n"])): float(r["rel_error"]) for r in table}
    assert err[(4, 32)] <= err[(4, 8)] and err[(8, 8)] >= err[(4, 8)]
    assert "violation" not in capsys.readouterr().out


def test_read_corpus(tmp_path):
    (tmp_path / "t.txt").write_text("Hi\n~")
    np.testing.assert_array_equal(read_corpus(tmp_path / "t.txt", 96), [ord("H") - 32, ord("i") - 32, 95, 94])
    (tmp_path / "t.bin").write_bytes(np.array([1, 2, 95], "<u2").tobytes())
    np.testing.assert_array_equal(read_corpus(tmp_path / "t.bin", 96), [1, 2, 95])
    from cluscomp.errors import CorruptFile
    with pytest.raises(CorruptFile):
        read_corpus(tmp_path / "t.bin", 50)


def test_text_corpus_drives_training(work, tmp_path):
    (tmp_path / "c.txt").write_text("the quick brown fox jumps over the lazy dog. " * 200)
    assert main(["recover", "--checkpoint", str(work / "lm"), "--clsc", str(work / "c.clsc"),
                 "--out", str(tmp_path / "r.clsc"), "--corpus", str(tmp_path / "c.txt"), "--heldout", "8"]) == 0


def test_stats_small_layer_leaves_table_share_blank(tmp_path):
    assert main(["stats", "--d-in", "64", "--d-out", "64", "--g", "4", "--out", str(tmp_path / "s.csv")]) == 0
    r = rows(tmp_path / "s.csv")[0]
    assert r["codebook_pct_table"] == "" and float(r["codebook_pct_exact"]) > 0
