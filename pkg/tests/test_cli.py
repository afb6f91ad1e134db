import csv
import subprocess
import sys

import numpy as np
import pytest

from craft.cli import main
from craft.refinement import load_checkpoint
from craft.tasks import read_task
from craft.trainer import METRIC_COLUMNS


@pytest.fixture(scope="module")
def task_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("t") / "t.bin"
    assert main(["gen-task", "--out", str(path), "--seed", "4", "--classes", "4",
                 "--shots", "2", "--test-per-class", "5"]) == 0
    return path


SMALL = ["--d0", "8", "--hidden", "8", "--batch-size", "8"]


def test_gen_task(task_file):
    task = read_task(task_file)
    assert (task.num_classes, task.shots, task.seed) == (4, 2, 4)


def test_train_outputs(tmp_path, task_file):
    out = tmp_path / "run"
    code = main(["train", "--task", str(task_file), "--out", str(out), "--budget", "80",
                 "--lambda", "8", *SMALL])
    assert code == 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRIC_COLUMNS and len(rows) == 11
    assert np.load(out / "prompt.npy").shape == (8,)
    assert load_checkpoint(out / "refiner.bin").num_classes == 4


def test_eval_zero_shot_matches_train_baseline(tmp_path, task_file, capsys):
    out = tmp_path / "run"
    main(["train", "--task", str(task_file), "--out", str(out), "--budget", "16",
          "--lambda", "8", *SMALL])
    baseline = capsys.readouterr().out.split("zero_shot=")[1].split()[0]
    assert main(["eval", "--task", str(task_file), "--d0", "8"]) == 0
    printed = capsys.readouterr().out
    assert printed.strip() == f"blackbox={baseline} refined={baseline}"


def test_eval_trained_artifacts(tmp_path, task_file, capsys):
    out = tmp_path / "run"
    main(["train", "--task", str(task_file), "--out", str(out), "--budget", "16",
          "--lambda", "8", *SMALL])
    refined = capsys.readouterr().out.split("refined=")[1].split()[0]
    log = tmp_path / "acc.csv"
    main(["eval", "--task", str(task_file), "--d0", "8", "--prompt", str(out / "prompt.npy"),
          "--refiner", str(out / "refiner.bin"), "--append", str(log)])
    assert capsys.readouterr().out.strip().endswith(f"refined={refined}")
    assert log.read_text().count("\n") == 1


def test_config_file_and_flag_precedence(tmp_path, task_file):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("budget = 40\npopsize = 8\nd0 = 8\nhidden = 8\n")
    out = tmp_path / "run"
    main(["train", "--task", str(task_file), "--out", str(out), "--config", str(cfg),
          "--budget", "24"])
    with open(out / "metrics.csv") as fh:
        assert len(list(csv.reader(fh))) == 4


def test_env_seed_fallback(tmp_path, task_file, monkeypatch):
    outs = []
    for seed in ("1", "1", "2"):
        monkeypatch.setenv("CRAFT_SEED", seed)
        out = tmp_path / f"run{len(outs)}"
        main(["train", "--task", str(task_file), "--out", str(out), "--budget", "16",
              "--lambda", "8", *SMALL])
        outs.append(np.load(out / "prompt.npy"))
    assert np.array_equal(outs[0], outs[1])
    assert not np.array_equal(outs[0], outs[2])


def test_unknown_config_key(tmp_path, task_file):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("warp_speed = 9\n")
    with pytest.raises(SystemExit) as exc:
        main(["train", "--task", str(task_file), "--config", str(cfg)])
    assert exc.value.code != 0


def test_unknown_flag(task_file):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--task", str(task_file), "--warp-speed", "9"])
    assert exc.value.code != 0


def test_missing_task_file(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--task", str(tmp_path / "nope.bin")])
    assert exc.value.code != 0
    assert "nope.bin" in capsys.readouterr().err


def test_bench_sphere(capsys):
    assert main(["bench-cmaes", "--fn", "sphere", "--d", "8"]) == 0
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    assert float(summary.split("median_best=")[1].split()[0]) < 1e-10


def test_ablate_csv(tmp_path, task_file):
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--task", str(task_file), "--grid", "refiner", "--seeds", "1",
                 "--out", str(out), "--budget", "16", "--lambda", "8", *SMALL]) == 0
    with open(out) as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_bad_dims():
    with pytest.raises(SystemExit):
        main(["serve", "--dims", "1,2,3"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "craft", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-task", "train", "eval", "ablate", "bench-cmaes", "serve"):
        assert cmd in res.stdout


def test_serve_subprocess_roundtrip(tmp_path):
    import socket
    import time

    from craft.remote import RemoteOracle

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    proc = subprocess.Popen([sys.executable, "-m", "craft", "serve", "--seed", "3",
                             "--budget", "2", "--listen", f"127.0.0.1:{port}",
                             "--dims", "2,4,6,3"])
    try:
        for _ in range(100):
            try:
                socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
                break
            except OSError:
                time.sleep(0.1)
        with RemoteOracle("127.0.0.1", port) as r:
            h = r.register_images(np.ones((2, 6)), "x")
            assert r.predict(h, np.zeros((3, 3, 4))).shape == (2, 3)
            assert r.ledger.budget == 2
    finally:
        proc.terminate()
        proc.wait(timeout=10)
