#!/usr/bin/env python3
"""SciTail (tsv_format or snli_format jsonl) -> `label<TAB>premise<TAB>hypothesis`.

    convert_scitail.py scitail_1.0_train.tsv > scitail_train.tsv
"""

import argparse
import json
import sys

from _tsv import emit, report

LABELS = {"entails", "neutral"}


def rows(path):
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if path.endswith(".jsonl") or path.endswith(".txt") and line.startswith("{"):
                r = json.loads(line)
                yield r.get("gold_label"), r["sentence1"], r["sentence2"]
            else:
                parts = line.split("\t")
                if len(parts) >= 3:
                    yield parts[2], parts[0], parts[1]
                else:
                    yield None, "", ""


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("input")
    args = ap.parse_args()
    kept = skipped = 0
    for label, a, b in rows(args.input):
        if label in LABELS and emit(sys.stdout, label, a, b):
            kept += 1
        else:
            skipped += 1
    report(args.input, kept, skipped)


if __name__ == "__main__":
    main()
