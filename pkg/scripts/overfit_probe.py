"""Fit a scale-1/8 model to 8 phantoms and report how fast training Dice climbs."""
import argparse
import json

from fetalseg.experiments import overfit_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--check-every", type=int, default=10)
    args = ap.parse_args()
    r = overfit_probe(args.seed, args.samples, max_epochs=args.epochs, target=args.target,
                      check_every=args.check_every)
    print(json.dumps({"reached": r.reached, "epochs": r.epochs, "dice": r.dice, "seconds": r.seconds}))


if __name__ == "__main__":
    main()
