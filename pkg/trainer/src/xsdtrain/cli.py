"""Command-line front end: build a dataset via the spiralcine pipeline,
then train and export XSDW weights."""

import argparse
import json
import pickle
import sys

from .data import build_dataset
from .train import TrainConfig, export_xsdw, train


def cmd_build(args):
    samples = build_dataset(args.workdir, n_slices=args.slices,
                            n_frames=args.frames, grid_size=args.grid,
                            pixel_size_mm=args.pixel_size,
                            coils=args.coils, noise=args.noise,
                            seed=args.seed)
    with open(args.out, "wb") as fh:
        pickle.dump(samples, fh)
    print(f"{args.out}: {len(samples)} samples")


def cmd_train(args):
    with open(args.dataset, "rb") as fh:
        samples = pickle.load(fh)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed,
                      checkpoint_path=args.out + ".ckpt")
    model, history = train(samples, config=cfg)
    export_xsdw(model, args.out)
    if args.history:
        with open(args.history, "w") as fh:
            json.dump(history, fh)
    print(args.out)


def main(argv=None):
    p = argparse.ArgumentParser(prog="xsdtrain")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-data", help="simulate a training dataset")
    b.add_argument("--workdir", required=True)
    b.add_argument("--slices", type=int, default=10)
    b.add_argument("--frames", type=int, default=40)
    b.add_argument("--grid", type=int, default=64)
    b.add_argument("--pixel-size", type=float, default=2.58)
    b.add_argument("--coils", type=int, default=8)
    b.add_argument("--noise", type=float, default=0.01)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="train and export XSDW weights")
    t.add_argument("--dataset", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--history", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    args = p.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error funnel
        print(json.dumps({"error": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
