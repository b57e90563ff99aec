"""
scripts/run_benchmark.py
Adaptive vs fixed task weighting on a synthetic dataset.

Runs gen-data, trains twice (min-max lambda and lambda frozen at 1/sqrt(2))
with identical seeds, segments the held-out split with both models and
evaluates. Writes benchmark.csv with the held-out E1, E2, max(E1, E2) and
whole-image / per-cell Dice of each run.

    python scripts/run_benchmark.py --out bench
    python scripts/run_benchmark.py --out bench --set train.epochs=20 --set data.train_count=40
"""
import argparse
import logging
import os
import sys
from pathlib import Path

# Make sure project root is on the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s  %(message)s",
    datefmt="%H:%M:%S",
)
log = logging.getLogger(__name__)


def run_benchmark(out: Path, overrides):
    import main as cli
    from backend.checkpoint import load_checkpoint
    from backend.config import load_config
    from backend.trainer import checkpoint_path, evaluate_losses, load_samples
    from backend.utils import storage

    config = load_config(None, overrides)
    base = [arg for item in overrides for arg in ("--set", item)]

    def step(*argv):
        code = cli.main(base + list(argv))
        if code != 0:
            raise SystemExit(f"step {argv[0]} failed with exit code {code}")

    data = out / "data"
    step("gen-data", "--out", str(data))
    held_out = load_samples(data, "test", config.train.edge_sigma)

    rows = []
    for run_name, extra in (("adaptive", []), ("fixed", ["--fixed-lambda"])):
        run_dir = out / run_name
        step("train", "--data", str(data), "--out", str(run_dir), *extra)
        ckpt = checkpoint_path(run_dir, config.train.epochs)
        params = load_checkpoint(ckpt).params
        e1, e2 = evaluate_losses(params, held_out, config.train.dice_epsilon)

        seg_dir = out / f"{run_name}_segment"
        step("segment", "--checkpoint", str(ckpt), "--image", str(data / "test" / "images"), "--out", str(seg_dir))
        report_dir = out / f"{run_name}_report"
        step("eval", "--pred-dir", str(seg_dir), "--gt-dir", str(data / "test" / "masks"), "--out", str(report_dir))

        per_image = storage.read_csv(report_dir / "per_image.csv", storage.PER_IMAGE_HEADER)
        per_cell = storage.read_csv(report_dir / "per_cell.csv", storage.PER_CELL_HEADER)
        image_dice = sum(float(r["dice"]) for r in per_image) / len(per_image)
        cell_dice = sum(float(r["dice"]) for r in per_cell) / len(per_cell) if per_cell else float("nan")
        rows.append((run_name, e1, e2, max(e1, e2), image_dice, cell_dice))
        log.info(f"{run_name}: E1={e1:.4f} E2={e2:.4f} max={max(e1, e2):.4f} dice={image_dice:.4f}")

    storage.write_csv(out / "benchmark.csv", ("run", "E1", "E2", "max_E", "image_dice", "cell_dice"), rows)
    adaptive, fixed = rows[0][3], rows[1][3]
    log.info("─" * 60)
    log.info(f"held-out max(E1, E2): adaptive {adaptive:.4f} vs fixed {fixed:.4f}")
    return rows


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Adaptive vs fixed lambda benchmark")
    parser.add_argument("--out", required=True, help="Benchmark directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Config override (repeatable)")
    args = parser.parse_args()
    run_benchmark(Path(args.out), args.set)
