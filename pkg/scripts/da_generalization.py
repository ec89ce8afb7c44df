"""Train DA and no-DA arms on one device profile, score both on another."""
import argparse
import json

from fetalseg.experiments import da_generalization


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--train-device", default="voluson_e8")
    ap.add_argument("--test-device", default="voluson_p8")
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()
    wins = 0
    for seed in args.seeds:
        r = da_generalization(seed, args.train_device, args.test_device, epochs=args.epochs)
        wins += r["da"] >= r["noda"]
        print(json.dumps({"seed": seed, **r}), flush=True)
    print(json.dumps({"da_wins": wins, "runs": len(args.seeds)}))


if __name__ == "__main__":
    main()
