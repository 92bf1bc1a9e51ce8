"""Convert equal-length sktime/UEA ``.ts`` files into a wide CSV + manifest.

Only the subset needed for the bundled data is supported: ``@equalLength
true``, no timestamps, class labels last. Several input files (e.g. TRAIN
and TEST) are concatenated in order.

    python scripts/convert_ts.py GunPoint_TRAIN.ts GunPoint_TEST.ts -o data/gunpoint --name GunPoint
"""
import argparse
import csv
import json
from pathlib import Path


def read_ts(path):
    header, rows = {}, []
    in_data = False
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data:
            if line.lower() == "@data":
                in_data = True
                continue
            key, _, value = line[1:].partition(" ")
            header[key.lower()] = value.strip()
            continue
        *dims, label = line.split(":")
        rows.append(([[float(v) for v in dim.split(",")] for dim in dims], label.strip()))
    return header, rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("inputs", nargs="+")
    ap.add_argument("-o", "--out", required=True)
    ap.add_argument("--name", required=True)
    args = ap.parse_args()

    samples, labels, classes = [], [], None
    for path in args.inputs:
        header, rows = read_ts(path)
        if header.get("equallength", "true").lower() != "true":
            raise SystemExit(f"{path}: only equal-length series are supported")
        classes = header["classlabel"].split()[1:]
        for dims, label in rows:
            samples.append(dims)
            labels.append(label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = len(samples[0])
    T = len(samples[0][0])
    with open(out / f"{args.name.lower()}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "channel_id", "label"] + [f"v_{i + 1}" for i in range(T)])
        for i, (dims, label) in enumerate(zip(samples, labels)):
            for c, series in enumerate(dims):
                w.writerow([i, c, label] + [repr(v) for v in series])
    manifest = {"name": args.name, "csv": f"{args.name.lower()}.csv", "layout": "wide",
                "d": d, "C": len(classes), "classes": classes, "label_column": "label",
                "provenance": "UCR archive, " + " + ".join(Path(p).name for p in args.inputs)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"{len(samples)} samples, d={d}, T={T}, C={len(classes)}")


if __name__ == "__main__":
    main()
