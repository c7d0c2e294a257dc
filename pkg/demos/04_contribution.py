"""Train RAMF on one fold and watch how much layer-2 attention goes to each inference.

    python3 demos/04_contribution.py [--epochs 20] [--csv contributions.csv]
"""

import argparse
import tempfile

import numpy as np

from ramf import TrainConfig, contribution_trend, desk_config, desk_specs, generate_synthetic, load_table, plan_folds
from ramf.model import build_model
from ramf.train_eval import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        data = load_table(generate_synthetic(400, desk_specs(), 3.0, seed=2021, out_dir=tmp))
    plan = plan_folds(data.ids, data.labels)
    res = train(build_model(desk_config()), plan, 0, TrainConfig(epochs=args.epochs), data)

    # Non-hate videos come first, then hateful ones, like a left-to-right trend plot.
    series = contribution_trend(res.model, data.take(plan.folds[0].test))
    labels = np.asarray(series.labels)
    for label, name in ((0, "non-hateful"), (1, "hateful")):
        sel = labels == label
        print(f"{name:>12}: hate-source {series.hate[sel].mean():.3f}  non-hate-source {series.nonhate[sel].mean():.3f}")

    # A coarse text sparkline of the hate-source series across the sorted test set.
    bins = np.array_split(series.hate, 20)
    lo, hi = series.hate.min(), series.hate.max()
    ramp = " .:-=+*#%@"
    print("trend:", "".join(ramp[int((b.mean() - lo) / (hi - lo + 1e-12) * (len(ramp) - 1))] for b in bins))
    if args.csv:
        print("wrote", series.write_csv(args.csv))


if __name__ == "__main__":
    main()
