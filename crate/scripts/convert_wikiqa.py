#!/usr/bin/env python3
"""WikiQA corpus -> `label<TAB>question<TAB>candidate<TAB>question_id`.

    convert_wikiqa.py WikiQA-train.tsv > wikiqa_train.tsv

Candidates of one question stay contiguous, in file order.
"""

import argparse
import csv
import sys

from _tsv import emit, report


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("input")
    args = ap.parse_args()
    kept = skipped = 0
    with open(args.input, encoding="utf-8", newline="") as f:
        for r in csv.DictReader(f, delimiter="\t", quoting=csv.QUOTE_NONE):
            label = r.get("Label")
            if label in ("0", "1") and emit(sys.stdout, label, r["Question"], r["Sentence"], r["QuestionID"]):
                kept += 1
            else:
                skipped += 1
    report(args.input, kept, skipped)


if __name__ == "__main__":
    main()
