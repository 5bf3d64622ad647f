import numpy as np
import pytest

from exitwise.cli import main
from exitwise.harness import Dataset, load_exitlog, write_csv_dataset
from exitwise.model import load_checkpoint

TRAIN = ["train", "--dataset", "two_moons:n=300,noise=0.2", "--layers", "4", "--hidden", "8",
         "--epochs", "3", "--seed", "7"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(TRAIN + ["--out", str(out / "train")]) == 0
    assert main(["dump", "--model", str(out / "train" / "model.mexm"), "--dataset",
                 "two_moons:n=300,noise=0.2", "--seed", "7", "--out", str(out / "log.txt")]) == 0
    return out


def test_train_outputs(run_dir):
    files = sorted(p.name for p in (run_dir / "train").iterdir())
    assert files == ["closest_layers.csv", "diagnostics.csv", "manifest.txt", "model.mexm"]
    manifest = (run_dir / "train" / "manifest.txt").read_text()
    assert "lam=0.2\n" in manifest and "seed=7\n" in manifest and "layers=4\n" in manifest
    assert (run_dir / "train" / "diagnostics.csv").read_text().startswith("step,layer,alpha,argmin_layer\n")


def test_manifest_rerun_is_bit_identical(run_dir, tmp_path):
    assert main(["train", "--config", str(run_dir / "train" / "manifest.txt"), "--out", str(tmp_path)]) == 0
    for name in ("model.mexm", "diagnostics.csv", "closest_layers.csv"):
        assert (tmp_path / name).read_bytes() == (run_dir / "train" / name).read_bytes()


def test_flags_override_config(run_dir, tmp_path):
    assert main(["train", "--config", str(run_dir / "train" / "manifest.txt"), "--lam", "0.1",
                 "--out", str(tmp_path)]) == 0
    assert "lam=0.1\n" in (tmp_path / "manifest.txt").read_text()
    assert (tmp_path / "model.mexm").read_bytes() != (run_dir / "train" / "model.mexm").read_bytes()


def test_lambda_grid_gives_four_checkpoints(tmp_path):
    for lam in ("0.1", "0.2", "0.3", "0.5"):
        args = TRAIN[:] + ["--epochs", "1", "--lam", lam, "--out", str(tmp_path / lam)]
        assert main(args) == 0
    blobs = {(tmp_path / lam / "model.mexm").read_bytes() for lam in ("0.1", "0.2", "0.3", "0.5")}
    assert len(blobs) == 4


@pytest.mark.parametrize("lam", ["1.0", "-0.2"])
def test_bad_lambda(tmp_path, capsys, lam):
    assert main(TRAIN + ["--lam", lam, "--out", str(tmp_path)]) == 2
    assert "lambda" in capsys.readouterr().err
    assert not (tmp_path / "model.mexm").exists()


def test_dumped_log_matches_model(run_dir):
    log = load_exitlog(run_dir / "log.txt")
    model = load_checkpoint(run_dir / "train" / "model.mexm")
    assert log.L == model.config.num_layers == 4
    assert len(log) == 75  # test split of 300


def test_eval(run_dir, capsys):
    assert main(["eval", "--log", str(run_dir / "log.txt"), "--policy", "voting:delta=2.0,k=0.5",
                 "--policy", "patience:s=2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "policy,params,accuracy,speedup,mean_exit_layer"
    assert lines[1].startswith("voting,delta=2.0;k=0.5,")
    assert lines[2].startswith("patience,s=2,")


def test_eval_from_checkpoint(run_dir, capsys):
    args = ["--policy", "entropy:t=0.3"]
    assert main(["eval", "--log", str(run_dir / "log.txt")] + args) == 0
    from_log = capsys.readouterr().out
    assert main(["eval", "--model", str(run_dir / "train" / "model.mexm"), "--dataset",
                 "two_moons:n=300,noise=0.2", "--seed", "7"] + args) == 0
    assert capsys.readouterr().out == from_log


def test_sweep(run_dir, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--log", str(run_dir / "log.txt"), "--policy", "voting:k=0.5",
                 "--grid", "delta=1.5,2.5", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 3
    speedups = [float(r.split(",")[3]) for r in rows[1:]]
    assert speedups == sorted(speedups)


def test_sweep_outputs_are_byte_identical(run_dir, tmp_path):
    args = ["sweep", "--log", str(run_dir / "log.txt"), "--policy", "patience", "--grid", "s=1,2,3"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_oracle(run_dir, capsys):
    assert main(["oracle", "--log", str(run_dir / "log.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and lines[1].startswith("oracle,,")


def test_analyze(run_dir, tmp_path):
    assert main(["analyze", "--log", str(run_dir / "log.txt"), "--policy", "voting:delta=2,k=0",
                 "--policy", "entropy:t=0.2", "--out-dir", str(tmp_path)]) == 0
    comp = (tmp_path / "comparison.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in comp[1:]] == ["voting", "entropy", "oracle"]
    accs = [float(r.split(",")[2]) for r in comp[1:]]
    assert accs[-1] >= max(accs)
    hist = (tmp_path / "exit_histogram.csv").read_text().splitlines()
    assert hist[0] == "policy,layer,exits,correct_exits" and len(hist) == 1 + 3 * 4
    assert len((tmp_path / "layer_accuracy.csv").read_text().splitlines()) == 5


@pytest.mark.parametrize(
    "argv",
    [
        ["eval", "--log", "x", "--policy", "voting:delta=2"],  # no silent default for k
        ["eval", "--log", "x", "--policy", "oracle", "--bogus"],
        ["sweep", "--log", "x", "--policy", "voting:k=0.5", "--grid", "s=1,2"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors(argv, tmp_path, run_dir):
    argv = [str(run_dir / "log.txt") if a == "x" else a for a in argv]
    assert main(argv) == 2


def test_missing_files(tmp_path):
    assert main(["oracle", "--log", str(tmp_path / "missing.txt")]) == 3
    assert main(["dump", "--model", str(tmp_path / "nope"), "--dataset", "two_moons", "--out",
                 str(tmp_path / "l")]) == 3


def test_bad_log_format(tmp_path):
    (tmp_path / "l.txt").write_text("#exitlog v1 L=2 C=2\n0,0,0.6,0.6,0.5,0.5\n")
    assert main(["oracle", "--log", str(tmp_path / "l.txt")]) == 3


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.txt").write_text("lamda=0.2\n")
    assert main(["train", "--config", str(tmp_path / "c.txt"), "--dataset", "two_moons", "--out",
                 str(tmp_path)]) == 2


def test_divergence_exit_code(tmp_path):
    with np.errstate(all="ignore"):
        assert main(TRAIN + ["--lr", "1e300", "--out", str(tmp_path)]) == 4


def test_csv_training_data(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3))
    y = (X[:, 0] > 0).astype(int)
    write_csv_dataset(Dataset(X, y, 2, "d"), tmp_path / "d.csv")
    assert main(["train", "--data", str(tmp_path / "d.csv"), "--layers", "2", "--epochs", "2",
                 "--out", str(tmp_path / "o")]) == 0
    assert load_checkpoint(tmp_path / "o" / "model.mexm").config.input_dim == 3
