"""Download the BAL problems used by the real-data acceptance checks.

    python scripts/fetch_datasets.py --dest ~/bal
    export DABA_DATA_DIR=~/bal
"""
import argparse
import hashlib
import shutil
import urllib.request
from pathlib import Path

BASE = "https://grail.cs.washington.edu/projects/bal/data"
FILES = ["ladybug/problem-1723-156502-pre.txt.bz2", "trafalgar/problem-257-65132-pre.txt.bz2"]


def main():
    ap = argparse.ArgumentParser(description="fetch BAL problems")
    ap.add_argument("--dest", type=Path, default=Path("data"))
    ap.add_argument("--base-url", default=BASE)
    args = ap.parse_args()
    for rel in FILES:
        out = args.dest / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        if not out.exists():
            with urllib.request.urlopen(f"{args.base_url}/{rel}", timeout=60) as resp, open(out, "wb") as fh:
                shutil.copyfileobj(resp, fh)
        digest = hashlib.sha256(out.read_bytes()).hexdigest()
        print(f"{digest}  {out}")


if __name__ == "__main__":
    main()
