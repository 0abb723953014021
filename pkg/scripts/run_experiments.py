"""Train every checkpoint the acceptance suite evaluates.

All training goes through the command-line entry point with fixed seeds, so
any artifact can be regenerated byte for byte. Existing outputs are kept;
delete a file to retrain it. Wall-clock time per run is appended to
``artifacts/timing.json``.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from baseseq.bench import cli_main

ROOT = Path(__file__).resolve().parents[1] / "artifacts"
BASE_STEPS = 40_000
BASE_HIDDEN = ["64", "64", "64"]
PIPELINE_STEPS = 150_000
SEQ_EPOCHS = 40
ABLATION_EPOCHS = 20
SEEDS = range(5)


def _timed(name: str, argv: list[str], out: Path) -> None:
    if out.exists():
        print(f"skip {name}: {out} exists")
        return
    t0 = time.perf_counter()
    code = cli_main(argv)
    if code != 0:
        raise SystemExit(f"{name} failed with exit code {code}")
    timing_path = ROOT / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    timing[name] = time.perf_counter() - t0
    timing_path.write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")


def base_runs() -> None:
    for frame in ("object", "table"):
        for seed in SEEDS:
            out = ROOT / f"base_{frame}_s{seed}.json"
            _timed(f"base_{frame}_s{seed}",
                   ["train-base", "--seed", str(seed), "--frame", frame, "--steps", str(BASE_STEPS),
                    "--hidden", *BASE_HIDDEN, "--eval-every", "2000", "--out", str(out)], out)


def pipeline_runs() -> None:
    base = ROOT / "pipeline" / "base_object.json"
    _timed("pipeline_base", ["train-base", "--seed", "0", "--frame", "object", "--steps", str(PIPELINE_STEPS),
                             "--hidden", *BASE_HIDDEN, "--eval-every", "5000", "--out", str(base)], base)
    seq = ROOT / "pipeline" / "seq.json"
    _timed("pipeline_seq", ["train-seq", "--seed", "0", "--base-ckpt", str(base), "--epochs", str(SEQ_EPOCHS),
                            "--out", str(seq)], seq)


def ablation_runs() -> None:
    base = ROOT / "pipeline" / "base_object.json"
    for baseline in ("greedy", "none"):
        for seed in SEEDS:
            out = ROOT / "ablation" / f"seq_{baseline}_s{seed}.json"
            _timed(f"seq_{baseline}_s{seed}",
                   ["train-seq", "--seed", str(seed), "--base-ckpt", str(base), "--baseline", baseline,
                    "--epochs", str(ABLATION_EPOCHS), "--out", str(out)], out)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("stage", choices=("base", "pipeline", "ablation", "all"))
    stage = parser.parse_args().stage
    if stage in ("base", "all"):
        base_runs()
    if stage in ("pipeline", "all"):
        pipeline_runs()
    if stage in ("ablation", "all"):
        ablation_runs()


if __name__ == "__main__":
    main()
