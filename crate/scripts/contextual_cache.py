#!/usr/bin/env python3
"""Precompute per-token contextual vectors into a `DEIMCTX1` cache file.

    contextual_cache.py --model bert-base-uncased --layer -1 \
        --out ctx.bin train.tsv dev.tsv

Each sentence of the TSV inputs is tokenized the same way as the Rust side
(lowercase, alphanumeric runs, one token per punctuation character). A
word's vector is the mean of its subword vectors from the chosen hidden
layer. `--random DIM` writes seeded random vectors instead of running a
model, which is enough to exercise the file format.

Format (little-endian): magic `DEIMCTX1`, u32 dim, u32 count, then per
sentence u32 key length, UTF-8 key (tokens joined by one space), u32 token
count, and count x dim f32 values. Records are sorted by key.
"""

import argparse
import random
import struct
import sys
import unicodedata


def tokenize(text):
    tokens, word = [], []
    for ch in text:
        if ch.isalnum():
            word.append(ch.lower())
            continue
        if word:
            tokens.append("".join(word))
            word = []
        if not ch.isspace() and unicodedata.category(ch) != "Cc":
            tokens.append(ch.lower())
    if word:
        tokens.append("".join(word))
    return tokens


def sentences(paths):
    seen = {}
    for path in paths:
        with open(path, encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip("\n").split("\t")
                for text in parts[1:3]:
                    toks = tokenize(text)
                    if toks:
                        seen.setdefault(" ".join(toks), toks)
    return seen


def random_vectors(items, dim, seed):
    rng = random.Random(seed)
    for key, toks in items:
        yield key, [[rng.uniform(-0.5, 0.5) for _ in range(dim)] for _ in toks]


def model_vectors(items, name, layer, batch):
    import torch
    from transformers import AutoModel, AutoTokenizer

    tok = AutoTokenizer.from_pretrained(name)
    model = AutoModel.from_pretrained(name, output_hidden_states=True).eval()
    items = list(items)
    for start in range(0, len(items), batch):
        chunk = items[start : start + batch]
        enc = tok([t for _, t in chunk], is_split_into_words=True, return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            hidden = model(**enc).hidden_states[layer]
        for b, (key, toks) in enumerate(chunk):
            sums = [None] * len(toks)
            counts = [0] * len(toks)
            for pos, w in enumerate(enc.word_ids(b)):
                if w is None:
                    continue
                v = hidden[b, pos]
                sums[w] = v if sums[w] is None else sums[w] + v
                counts[w] += 1
            dim = hidden.shape[-1]
            rows = [(s / c).tolist() if c else [0.0] * dim for s, c in zip(sums, counts)]
            yield key, rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("inputs", nargs="+")
    ap.add_argument("--out", required=True)
    ap.add_argument("--model")
    ap.add_argument("--layer", type=int, default=-1)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--random", type=int, metavar="DIM")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if (args.model is None) == (args.random is None):
        ap.error("give exactly one of --model or --random")
    items = sorted(sentences(args.inputs).items())
    if args.random:
        records = random_vectors(items, args.random, args.seed)
    else:
        records = model_vectors(items, args.model, args.layer, args.batch)
    body, dim, count = bytearray(), None, 0
    for key, rows in records:
        dim = dim or len(rows[0])
        k = key.encode("utf-8")
        body += struct.pack("<I", len(k)) + k + struct.pack("<I", len(rows))
        for r in rows:
            body += struct.pack(f"<{dim}f", *r)
        count += 1
    with open(args.out, "wb") as f:
        f.write(b"DEIMCTX1" + struct.pack("<II", dim or 0, count) + body)
    print(f"{args.out}: {count} sentences, dim {dim}", file=sys.stderr)


if __name__ == "__main__":
    main()
