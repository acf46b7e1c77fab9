"""Run the builtin pipeline end to end and write baseline.json at the repo root.

Usage: python scripts/record_baseline.py [work_dir]
"""

import json
import platform
import sys
import tempfile
import time
from pathlib import Path

from cornercase import __version__
from cornercase.cli import main

ROOT = Path(__file__).resolve().parents[1]


def timed(argv):
    start = time.perf_counter()
    code = main(argv + ["-q"])
    if code:
        sys.exit(f"{' '.join(argv)} exited {code}")
    return round(time.perf_counter() - start, 1)


def campaign(out):
    stats = json.loads((Path(out) / "reports" / "campaign.json").read_text())["stats"]
    return {k: stats[k] for k in ("n_seeds", "n_cases", "conversion", "coverage", "already_diverged")}


def run(work):
    work = Path(work)
    models = str(work / "train" / "models")
    seconds = {"train": timed(["train", "--out", str(work / "train")])}
    seconds["generate"] = timed(["generate", "--model-dir", models, "--out", str(work / "gen")])
    seconds["augment-retrain"] = timed(["augment-retrain", "--model-dir", models, "--out", str(work / "retrain")])
    seconds["pipeline"] = round(sum(seconds.values()), 1)

    families = {"occl_rect": campaign(work / "gen")}
    for family in ("light", "occl_dots", "blur", "contrast"):
        out = work / f"gen_{family}"
        seconds[f"generate:{family}"] = timed(["generate", "--model-dir", models, "--constraint", family, "--out", str(out)])
        families[family] = campaign(out)

    train = json.loads((work / "train" / "reports" / "train.json").read_text())
    retrain = json.loads((work / "retrain" / "reports" / "retrain.json").read_text())
    return {
        "version": __version__,
        "python": platform.python_version(),
        "machine": platform.machine(),
        "seconds": seconds,
        "test_accuracy": {m["name"]: m["test_accuracy"] for m in train["models"]},
        "conversion_100_seeds": families,
        "retrain": retrain,
        "retrain_table": (work / "retrain" / "reports" / "retrain.txt").read_text().splitlines(),
    }


if __name__ == "__main__":
    if len(sys.argv) > 1:
        body = run(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as tmp:
            body = run(tmp)
    (ROOT / "baseline.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    print(json.dumps(body["seconds"], indent=2))
