#!/usr/bin/env python3
"""Quora question pairs -> `label<TAB>question1<TAB>question2`.

Accepts the original `quora_duplicate_questions.tsv` (with header) and the
common `label<TAB>q1<TAB>q2<TAB>id` split files (no header).

    convert_quora.py quora_duplicate_questions.tsv > quora.tsv
"""

import argparse
import csv
import sys

from _tsv import emit, report


def rows(path):
    with open(path, encoding="utf-8", newline="") as f:
        first = f.readline()
        f.seek(0)
        if first.startswith('"id"') or first.startswith("id\t"):
            for r in csv.DictReader(f, delimiter="\t"):
                yield r.get("is_duplicate"), r.get("question1") or "", r.get("question2") or ""
        else:
            for line in f:
                parts = line.rstrip("\n").split("\t")
                if len(parts) >= 3:
                    yield parts[0], parts[1], parts[2]
                else:
                    yield None, "", ""


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("input")
    args = ap.parse_args()
    kept = skipped = 0
    for label, a, b in rows(args.input):
        if label in ("0", "1") and emit(sys.stdout, label, a, b):
            kept += 1
        else:
            skipped += 1
    report(args.input, kept, skipped)


if __name__ == "__main__":
    main()
