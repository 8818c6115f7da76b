"""Write the planted-fixture experiment config as JSON, ready for the CLI.

    python scripts/dump_config.py runs/fixture/config.json [--continuous] [--cora DIR]
"""
import argparse

from nodeinject import graph as G
from nodeinject import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path")
    ap.add_argument("--continuous", action="store_true")
    ap.add_argument("--cora", help="directory with cora.content / cora.cites")
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()
    cfg = H.fixture_config(G.CONTINUOUS if args.continuous else G.DISCRETE)
    if args.cora:
        cfg.dataset = H.DatasetSpec(kind="citation", path=args.cora)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    cfg.dump(args.path)
    print(args.path)


if __name__ == "__main__":
    main()
