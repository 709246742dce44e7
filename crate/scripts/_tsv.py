"""Shared helpers for the dataset converters."""

import sys


def clean(text):
    return " ".join(str(text).split())


def emit(out, label, a, b, group=None):
    a, b = clean(a), clean(b)
    if not a or not b:
        return False
    fields = [label, a, b] + ([clean(group)] if group is not None else [])
    out.write("\t".join(fields) + "\n")
    return True


def report(name, kept, skipped):
    print(f"{name}: wrote {kept} pairs, skipped {skipped}", file=sys.stderr)
