"""Embed phantoms from several device profiles and score the device clusters."""
import argparse
import json

from fetalseg.experiments import device_embedding, two_blob_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--devices", nargs="+", default=["voluson_e8", "hera_w10", "voluson_p8"])
    ap.add_argument("--per-device", type=int, default=40)
    ap.add_argument("--plane", choices=("TV", "TC"), default="TV")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    m = device_embedding(tuple(args.devices), args.per_device, args.plane, args.seed)
    blobs = [two_blob_benchmark(s)["silhouette"] for s in range(5)]
    print(json.dumps({"devices": m, "two_blob_silhouettes": blobs}, indent=2))


if __name__ == "__main__":
    main()
