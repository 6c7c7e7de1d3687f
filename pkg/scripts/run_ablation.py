"""Train the four variants across the communication-range sweep, then tabulate and plot.

    python scripts/run_ablation.py --out runs/ablation --seeds 3 --epochs 200
"""

import argparse
from etcomm import harness
from etcomm.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--sweep", type=float, nargs="+", default=list(harness.DEFAULT_SWEEP))
    ap.add_argument("--plot-range", type=float, default=2.4, help="range whose curves are plotted")
    args = ap.parse_args()

    cfgs = load_config(args.config)
    spec = harness.ExperimentSpec(
        cfgs=cfgs,
        variants=harness.VARIANTS,
        comm_range_sweep=tuple(args.sweep),
        n_seeds=args.seeds,
        output_dir=args.out,
        epochs=args.epochs,
    )
    records = harness.run(spec)
    for metric in ("total_message_volume", "total_consensus_volume", "final_h_kl"):
        tab = harness.table(records, metric)
        harness.write_table(tab, args.out)
        print(f"\n{metric}\n{tab.text()}")
    chosen = [r for r in records if r.comm_range == args.plot_range] or records
    png, _ = harness.plot(chosen, args.out)
    print(f"\ncurves: {png}")


if __name__ == "__main__":
    main()
