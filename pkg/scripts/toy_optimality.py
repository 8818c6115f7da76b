"""Train on the mirrored toy family and compare greedy attacks with the exhaustive optimum.

    python scripts/toy_optimality.py --pairs 60 --epochs 40
"""
import argparse

import numpy as np

from nodeinject import a2c
from nodeinject import attacker as A
from nodeinject import graph as G
from nodeinject import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=60)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    fam = H.toy_fixture_family(args.pairs, seed=args.seed)
    b = G.Budgets(1, 1, 1.0)  # cap of 2 bits: the density projection never binds
    cfg = a2c.TrainConfig(lr=args.lr, hidden=16, max_epochs=args.epochs, patience=args.epochs,
                          episodes_per_update=25, episodes_per_target=4, feature_weight=0.0, seed=args.seed)
    pol = A.AttackerPolicies(2, 2, A.PolicyConfig(hidden=16, readout="mean", init_density=0.5, seed=args.seed))

    def show(st, live, opt):
        row = st.log[-1]
        print(f"epoch {row['epoch']:3d}  val flips {row['success_rate_val']:.2f}  return {row['mean_return']:.3f}",
              flush=True)

    best, st = a2c.train_attacker(cfg, fam.oracle, fam.split, b, policies=pol, on_epoch=show)
    share, ratios = H.toy_optimality(best, fam, fam.split.test, b)
    print("ratios:", np.round(ratios, 2))
    print(f"{100 * share:.1f}% of {len(ratios)} held-out fixtures within 90% of the optimum "
          f"(best epoch {st.best_epoch})")


if __name__ == "__main__":
    main()
