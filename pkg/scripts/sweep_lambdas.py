"""Sweep the loss weights on the toy fixture and write a trade-off table and plot."""

import argparse
import itertools
import time
from dataclasses import replace
from pathlib import Path

import torch

from ppdeid.evaluation import plot_tradeoff, tradeoff_report, write_tradeoff_csv
from ppdeid.pipeline import TOY_CONFIG, prepare_toy, run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--values", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    ap.add_argument("--out", default="lambda_sweep")
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare_toy(args.seed)
    rows = []
    for lam_v, lam_s in itertools.product(args.values, args.values):
        start = time.time()
        cfg = replace(TOY_CONFIG, lambda_verif=lam_v, lambda_sim=lam_s)
        res = run_ablation(prep, "cgan_sim_verif", cfg)
        label = f"verif={lam_v:g} sim={lam_s:g}"
        rows.append({"group": "toy", "ablation": label, "deid_rate": res.deid_rate_test, "mean_ssim": res.mean_ssim})
        print(f"{label:22s} deid {res.deid_rate_test:6.1f}  ssim {res.mean_ssim:.3f}  ids {res.ids}  ({time.time() - start:.0f} s)", flush=True)
    rows = tradeoff_report(rows)
    write_tradeoff_csv(rows, out / "tradeoff.csv")
    plot_tradeoff(rows, out / "tradeoff.png")


if __name__ == "__main__":
    main()
