#!/usr/bin/env python3
"""SNLI / MultiNLI jsonl -> `label<TAB>premise<TAB>hypothesis`.

    convert_snli.py snli_1.0_train.jsonl > snli_train.tsv

Pairs without a gold label (`-`) are dropped. `--limit N` keeps the first N.
"""

import argparse
import json
import sys

from _tsv import emit, report

LABELS = {"entailment", "contradiction", "neutral"}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("input")
    ap.add_argument("--limit", type=int, default=0)
    args = ap.parse_args()
    kept = skipped = 0
    with open(args.input, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            label = row.get("gold_label")
            if label in LABELS and emit(sys.stdout, label, row["sentence1"], row["sentence2"]):
                kept += 1
                if args.limit and kept >= args.limit:
                    break
            else:
                skipped += 1
    report(args.input, kept, skipped)


if __name__ == "__main__":
    main()
