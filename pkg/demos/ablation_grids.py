"""Three small ablation grids through the Python API, merged into one report.

- which relation pairs to match (QK+VV against QQ+KK+VV)
- which teacher block to distil from
- teacher/student drop-path combinations

Everything is tiny so the script finishes in well under a minute. The teacher
is randomly initialised, so the accuracies sit near chance; the point is the
row structure of each grid and the merged report.

    python3 demos/ablation_grids.py --out /tmp/ablations
"""

import argparse
import shutil
from pathlib import Path

from vitdistill.cli import main as cli
from vitdistill.data import SyntheticDatasetSpec, generate
from vitdistill.pipeline import DistillPlan, GridSpec, run_ablation_grid
from vitdistill.vit import ViTConfig, ViTModel

TEACHER = ViTConfig(depth=6, hidden_dim=32, heads=4, patch_size=4, image_size=8, num_classes=4)
STUDENT = ViTConfig(depth=2, hidden_dim=16, heads=2, patch_size=4, image_size=8, num_classes=4,
                    adaptive_last_block_heads=4)

GRIDS = {
    "relation_pairs": {"loss_strategy.relation_pairs": [["QK", "VV"], ["QQ", "KK", "VV"]]},
    "target_block": {"target_block_index": [2, 3, 4, 5, 6]},
    "drop_path": {"drop_path": [{"teacher_drop_path": t, "student_drop_path": s}
                                for t, s in [(0.0, 0.0), (0.0, 0.1), (0.1, 0.1), (0.0, 0.2), (0.0, 0.3)]]},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="ablations")
    args = ap.parse_args()
    out = Path(args.out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)

    ds, _ = generate(SyntheticDatasetSpec(num_samples=400, image_size=8, seed=0))
    train, test = ds.split(300)
    ViTModel(TEACHER, seed=0).save(out / "teacher")
    base = DistillPlan(student_config=STUDENT, teacher_checkpoint=str(out / "teacher"), epochs=2,
                       batch_size=32, peak_lr=1e-3, warmup_epochs=0.5).to_dict()
    for name, axes in GRIDS.items():
        spec = GridSpec.from_dict({"name": name, "base_plan": base, "axes": axes, "eval_mode": "linear_probe",
                                   "eval": {"epochs": 3, "batch_size": 32}})
        run_ablation_grid(spec, train, train, test, out / name)
    cli(["report", *(str(out / n) for n in GRIDS), "--csv", str(out / "merged.csv")])


if __name__ == "__main__":
    main()
