"""Roll out freshly initialised parameters and print the per-step trigger table.

    python scripts/inspect_triggers.py --comm-range 2.4 --steps 15
"""

import argparse
from dataclasses import replace

import torch

from etcomm import comm, mappo, nets
from etcomm.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--comm-range", type=float, default=None)
    ap.add_argument("--steps", type=int, default=20, help="rows to print")
    args = ap.parse_args()

    cfgs = load_config(args.config)
    if args.comm_range is not None:
        cfgs = replace(cfgs, env=replace(cfgs.env, comm_range=args.comm_range))
    params = nets.build_params(cfgs.net, args.seed)
    batch = mappo.collect_rollout(cfgs.env, params, cfgs.trigger, cfgs.net.sigma(0), args.seed,
                                  torch.Generator().manual_seed(args.seed))
    rows = [r for r in batch.trigger_log.rows if r["t"] < args.steps]
    print(comm.summarize_log(rows, cfgs.env.n_agents))
    print(f"message volume {batch.message_volume:.0f}, consensus volume {batch.consensus_volume:.0f}")


if __name__ == "__main__":
    main()
