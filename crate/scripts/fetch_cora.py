#!/usr/bin/env python3
"""Fetch the LINQS Cora citation graph and write it as a dataset directory.

The raw `cora.content` / `cora.cites` files ship inside the `pgl` source
distribution on PyPI, which is reachable wherever pip is.

Usage: python3 scripts/fetch_cora.py [OUT_DIR] [--from DIR_WITH_RAW_FILES]
"""

import argparse
import io
import json
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

SDIST = "pgl==2.2.6"
MEMBER_PREFIX = "pgl-2.2.6/pgl/data/cora/"


def fetch_raw(workdir: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
         SDIST, "-d", str(workdir)],
        check=True,
    )
    sdist = next(workdir.glob("pgl-*.tar.gz"))
    raw = workdir / "cora_raw"
    raw.mkdir()
    with tarfile.open(sdist) as tar:
        for name in ("cora.content", "cora.cites"):
            data = tar.extractfile(MEMBER_PREFIX + name).read()
            (raw / name).write_bytes(data)
    return raw


def convert(raw: Path, out: Path) -> None:
    ids = {}
    features = []
    labels = []
    for line in (raw / "cora.content").read_text().splitlines():
        cells = line.split()
        ids[cells[0]] = len(ids)
        features.append(cells[1:-1])
        labels.append(cells[-1])
    classes = sorted(set(labels))
    class_id = {c: i for i, c in enumerate(classes)}

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.csv", "w") as f:
        for row in features:
            f.write(",".join(row))
            f.write("\n")
    with open(out / "labels.csv", "w") as f:
        for label in labels:
            f.write(f"{class_id[label]}\n")
    skipped = 0
    with open(out / "edges.csv", "w") as f:
        for line in (raw / "cora.cites").read_text().splitlines():
            cited, citing = line.split()
            if cited not in ids or citing not in ids:
                skipped += 1
                continue
            f.write(f"{ids[citing]},{ids[cited]}\n")
    manifest = {
        "num_nodes": len(ids),
        "num_features": len(features[0]),
        "num_classes": len(classes),
        "task": "node-classification",
        "class_names": classes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {out}: {len(ids)} nodes, {len(features[0])} features, "
          f"{len(classes)} classes, skipped {skipped} cites")


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("out", nargs="?", default="data/cora")
    parser.add_argument("--from", dest="raw", default=None)
    args = parser.parse_args()
    if args.raw:
        convert(Path(args.raw), Path(args.out))
        return
    with tempfile.TemporaryDirectory() as tmp:
        raw = fetch_raw(Path(tmp))
        convert(raw, Path(args.out))


if __name__ == "__main__":
    main()
