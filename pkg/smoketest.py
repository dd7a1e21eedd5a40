import os
import subprocess
import sys
import tempfile
from pathlib import Path

import pandas as pd


SCALE = os.getenv("SMOKETEST_SCALE", "desk")
PRESETS = (("res-unet1", 1), ("res-unet2", 2), ("res-net", 2))


def kidney(*args) -> subprocess.CompletedProcess:
    env = {**os.environ, "OPENBLAS_NUM_THREADS": "1", "OMP_NUM_THREADS": "1"}
    command = [sys.executable, str(Path(__file__).with_name("app.py")), "--scale", SCALE, "--seed", "0", *args]
    return subprocess.run(command, env=env, capture_output=True, text=True)


def run_smoketest():
    work = Path(tempfile.mkdtemp(prefix="kidney-smoke-"))
    raw, prepared, models, preds = work / "raw", work / "prepared", work / "models", work / "pred"
    table = work / "table.csv"

    result = kidney("gradcheck")
    assert result.returncode == 0, result.stderr
    print("Gradient check successful")

    result = kidney("phantom", "--count", "12", "--out", str(raw))
    assert result.returncode == 0, result.stderr
    print("Generate phantoms successful")

    result = kidney("preprocess", "--in", str(raw), "--out", str(prepared))
    assert result.returncode == 0, result.stderr
    print("Preprocess phantoms successful")

    for preset, stage in PRESETS:
        result = kidney("train", "--preset", preset, "--stage", str(stage), "--data", str(prepared),
                        "--out", str(models / f"{preset}.kck"))
        assert result.returncode == 0, result.stderr
        print(f"Train {preset} successful")

    stage1 = str(models / "res-unet1.kck")
    runs = {
        "res-unet2": str(models / "res-unet2.kck"),
        "res-net": str(models / "res-net.kck"),
        "ensemble": f"{models / 'res-unet2.kck'},{models / 'res-net.kck'}",
    }
    for name, stage2 in runs.items():
        result = kidney("predict", "--stage1", stage1, "--stage2", stage2, "--in", str(raw),
                        "--out", str(preds / name))
        assert result.returncode == 0, result.stderr
        result = kidney("evaluate", "--pred", str(preds / name), "--gt", str(raw),
                        "--report", str(work / f"{name}.csv"), "--name", name, "--table", str(table))
        assert result.returncode == 0, result.stderr
        print(f"Predict and evaluate {name} successful")

    summary = pd.read_csv(table, dtype=str)
    assert summary["model"].tolist() == list(runs)
    print(summary.to_string(index=False))

    result = kidney("predict", "--stage1", str(work / "absent.kck"), "--stage2", stage1,
                    "--in", str(raw), "--out", str(preds / "absent"))
    assert result.returncode == 3
    assert result.stderr.strip().splitlines()[-1].startswith("error=missing_file")
    print("Missing checkpoint exit code successful")


if __name__ == "__main__":
    run_smoketest()
