"""Parameter counts, FLOPs and latency for the full model and a few ablations.

    python3 demos/03_profiling.py [--runs 20]
"""

import argparse

from ramf import build_model, expected_param_count, full_config, profile


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=20)
    args = ap.parse_args()

    print(f"{'variant':<16}{'params':>12}{'closed form':>14}{'GFLOPs':>9}{'ms/sample':>11}")
    for variant in ("RAMF", "MF", "std_attn", "no_chc", "no_smc", "lstm_lgcf", "concat_fusion"):
        model = build_model(full_config(variant=variant))
        rep = profile(model, runs=args.runs, warmup=2)
        print(f"{variant:<16}{rep.param_count:>12,}{expected_param_count(model.cfg):>14,}"
              f"{rep.flops_per_forward / 1e9:>9.3f}{rep.latency_per_sample * 1e3:>11.2f}")


if __name__ == "__main__":
    main()
