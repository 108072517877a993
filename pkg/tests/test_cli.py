import csv
import subprocess
import sys

import pytest

from dekg_ilp import cli
from dekg_ilp import numeric as nm

FAST = ["--set", "epochs=2", "--set", "d=4", "--set", "L=1", "--set", "contrastive_samples=2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    assert cli.run(["build-dataset", "--synthetic", "--seed", "3", "--ratio", "MB", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.ckpt"
    assert cli.run(["train", "--train", str(data / "train.tsv"), "--out", str(path), "--seed", "1"] + FAST) == 0
    return path


def eval_args(data):
    return ["--train", str(data / "train.tsv"), "--dekg", str(data / "emerging.tsv"),
            "--enclosing", str(data / "enclosing.tsv"), "--bridging", str(data / "bridging.tsv")]


def test_build_dataset_outputs(data):
    manifest = dict(line.split(" = ") for line in (data / "manifest.txt").read_text().splitlines())
    assert manifest["ratio"] == "MB" and manifest["seed"] == "3"
    n_enc = len((data / "eval_enclosing.tsv").read_text().splitlines())
    n_brg = len((data / "eval_bridging.tsv").read_text().splitlines())
    assert (n_enc, n_brg) == (int(manifest["n_enclosing"]), int(manifest["n_bridging"]))
    assert 2 * n_enc == n_brg
    first = (data / "entities.tsv").read_text().splitlines()[0]
    assert first.split("\t")[1] == "0"


def test_build_dataset_from_files(data, tmp_path):
    out = tmp_path / "mixed"
    code = cli.run(["build-dataset", *eval_args(data), "--ratio", "ME", "--seed", "0", "--out", str(out)])
    assert code == 0
    assert (out / "manifest.txt").read_text().startswith("ratio = ME")


def test_train_writes_checkpoint_and_loss(ckpt, capsys):
    store, meta = nm.load_checkpoint(ckpt)
    assert meta["config"]["epochs"] == 2 and meta["config"]["seed"] == 1
    assert len(meta["relations"]) == 8
    rows = list(csv.reader(open(f"{ckpt}.loss.csv")))
    assert rows[0] == ["epoch", "loss_total", "loss_rank", "loss_contrastive"] and len(rows) == 3


def test_train_prints_resolved_config(data, tmp_path, capsys):
    cli.run(["train", "--train", str(data / "train.tsv"), "--out", str(tmp_path / "m.ckpt")] + FAST)
    out = capsys.readouterr().out
    assert "# resolved config" in out and "gamma_rank = 10.0" in out and "epochs = 2" in out


def test_config_file_and_env(data, tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("# tiny\nd = 4\nL = 1\nepochs = 1\ncontrastive_samples = 2\n")
    monkeypatch.setenv("DEKG_BETA", "0.25")
    path = tmp_path / "m.ckpt"
    assert cli.run(["train", "--config", str(cfg), "--train", str(data / "train.tsv"), "--out", str(path)]) == 0
    meta = nm.load_checkpoint(path)[1]["config"]
    assert (meta["d"], meta["beta"], meta["epochs"]) == (4, 0.25, 1)


def test_evaluate_report(data, ckpt, tmp_path, capsys):
    out = tmp_path / "report.csv"
    code = cli.run(["evaluate", "--ckpt", str(ckpt), *eval_args(data), "--ratio", "EQ", "--seeds", "2",
                    "--workers", "2", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    splits = {(r["split"], r["pattern"]) for r in rows}
    assert ("enclosing", "all") in splits and ("bridging", "all") in splits
    assert all(r["seeds"] == "2" for r in rows)
    assert "Hits@10" in capsys.readouterr().out


def test_evaluate_one_checkpoint_per_seed(data, ckpt, tmp_path):
    out = tmp_path / "r.csv"
    args = ["evaluate", "--ckpt", str(ckpt), "--ckpt", str(ckpt), *eval_args(data), "--seeds", "2", "--out", str(out)]
    assert cli.run(args) == 0
    args[args.index("--seeds") + 1] = "3"
    assert cli.run(args) == cli.EXIT_CONFIG


def test_ablate_four_rows(data, tmp_path):
    out = tmp_path / "ablate.csv"
    code = cli.run(["ablate", *eval_args(data), "--seeds", "1", "--out", str(out)] + FAST)
    assert code == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == cli.ABLATION_COLUMNS
    assert [r[0] for r in rows[1:]] == ["full", "-R", "-C", "-N"]


def test_inspect_subgraph(data, ckpt, tmp_path, capsys):
    link = (data / "bridging.tsv").read_text().splitlines()[0]
    out = tmp_path / "sg.txt"
    code = cli.run(["inspect-subgraph", "--ckpt", str(ckpt), "--train", str(data / "train.tsv"),
                    "--dekg", str(data / "emerging.tsv"), "--triple", link, "--out", str(out)])
    assert code == 0
    text = out.read_text()
    assert "(head)" in text and "(tail)" in text and "-1" in text


def test_export_embeddings(data, ckpt, tmp_path):
    out = tmp_path / "emb.csv"
    code = cli.run(["export-embeddings", "--ckpt", str(ckpt), "--train", str(data / "train.tsv"),
                    "--dekg", str(data / "emerging.tsv"), "--links", str(data / "eval_bridging.tsv"),
                    "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(open(out)))
    assert rows[0][:4] == ["head", "relation", "tail", "vector"] and len(rows[0]) == 4 + 4
    n_links = len((data / "eval_bridging.tsv").read_text().splitlines())
    assert len(rows) == 1 + 5 * n_links


def test_deterministic_artifacts(data, tmp_path):
    paths = []
    for run in ("a", "b"):
        ck = tmp_path / f"{run}.ckpt"
        rep = tmp_path / f"{run}.csv"
        assert cli.run(["train", "--train", str(data / "train.tsv"), "--out", str(ck), "--seed", "4"] + FAST) == 0
        assert cli.run(["evaluate", "--ckpt", str(ck), *eval_args(data), "--seeds", "2", "--out", str(rep)]) == 0
        paths.append((ck, rep))
    (ca, ra), (cb, rb) = paths
    assert ca.read_bytes() == cb.read_bytes()
    assert ra.read_bytes() == rb.read_bytes()


# --- exit codes -----------------------------------------------------------------------------

def test_missing_file(tmp_path):
    assert cli.run(["train", "--train", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "m")]) == cli.EXIT_MISSING_FILE


def test_bad_config(data, tmp_path):
    code = cli.run(["train", "--train", str(data / "train.tsv"), "--out", str(tmp_path / "m"), "--set", "beta=2"])
    assert code == cli.EXIT_CONFIG
    code = cli.run(["train", "--train", str(data / "train.tsv"), "--out", str(tmp_path / "m"), "--set", "nope=1"])
    assert code == cli.EXIT_CONFIG
    assert not (tmp_path / "m").exists()


def test_bad_data(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("a b c\n")
    assert cli.run(["train", "--train", str(bad), "--out", str(tmp_path / "m")]) == cli.EXIT_DATA


def test_bad_checkpoint(data, tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x00\x01garbage")
    code = cli.run(["evaluate", "--ckpt", str(junk), *eval_args(data), "--out", str(tmp_path / "r.csv")])
    assert code == cli.EXIT_CHECKPOINT


def test_insufficient_links(data, tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    args = ["build-dataset", "--train", str(data / "train.tsv"), "--dekg", str(data / "emerging.tsv"),
            "--enclosing", str(data / "enclosing.tsv"), "--bridging", str(empty), "--out", str(tmp_path / "o")]
    assert cli.run(args) == cli.EXIT_INSUFFICIENT


def test_diverged(data, tmp_path):
    code = cli.run(["train", "--train", str(data / "train.tsv"), "--out", str(tmp_path / "m.ckpt"),
                    "--set", "lr=1e150"] + FAST)
    assert code == cli.EXIT_DIVERGED
    assert not (tmp_path / "m.ckpt").exists()
    assert (tmp_path / "m.ckpt.diverged").exists()


def test_unknown_flag_and_codes_distinct():
    with pytest.raises(SystemExit) as exc:
        cli.run(["train", "--bogus"])
    assert exc.value.code == cli.EXIT_USAGE
    codes = [cli.EXIT_USAGE, cli.EXIT_MISSING_FILE, cli.EXIT_CONFIG, cli.EXIT_DATA,
             cli.EXIT_INSUFFICIENT, cli.EXIT_DIVERGED, cli.EXIT_CHECKPOINT, cli.EXIT_IO]
    assert len(set(codes)) == len(codes) and 0 not in codes


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dekg_ilp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "build-dataset" in proc.stdout
