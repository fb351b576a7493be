#!/usr/bin/env python3
"""Brute-force BLEU and CIDEr-D over toy_corpus.json.

Standalone recomputation used to freeze the expected values in the Rust
tests. Dense vectors over every n-gram in the corpus, no shared code with
the library. Run: python3 metrics_oracle.py
"""
import json
import math
import os
from collections import Counter


def ngrams(words, n):
    return [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]


def bleu(cands, refs, n_max):
    match = [0] * n_max
    total = [0] * n_max
    c_len = 0
    r_len = 0
    for c, rs in zip(cands, refs):
        c_len += len(c)
        lens = sorted(len(r) for r in rs)
        best = lens[0]
        for l in lens:
            if abs(l - len(c)) < abs(best - len(c)):
                best = l
        r_len += best
        for n in range(1, n_max + 1):
            cc = Counter(ngrams(c, n))
            clip = Counter()
            for r in rs:
                for g, k in Counter(ngrams(r, n)).items():
                    clip[g] = max(clip[g], k)
            match[n - 1] += sum(min(k, clip[g]) for g, k in cc.items())
            total[n - 1] += sum(cc.values())
    if min(match) == 0:
        return 0.0
    logp = sum(math.log(m / t) for m, t in zip(match, total)) / n_max
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(logp)


def cider_d(cands, refs, sigma=6.0):
    n_img = len(cands)
    # Index of every n-gram that appears anywhere.
    space = [sorted({g for rs, c in zip(refs, cands) for s in rs + [c] for g in ngrams(s, n)})
             for n in range(1, 5)]
    df = [dict.fromkeys(sp, 0) for sp in space]
    for rs in refs:
        for n in range(1, 5):
            for g in {g for r in rs for g in ngrams(r, n)}:
                df[n - 1][g] += 1
    log_n = math.log(n_img)

    def dense(words):
        vecs = []
        for n in range(1, 5):
            tf = Counter(ngrams(words, n))
            vecs.append([tf[g] * (log_n - math.log(max(1.0, df[n - 1][g]))) for g in space[n - 1]])
        return vecs, len(ngrams(words, 2))

    scores = []
    for c, rs in zip(cands, refs):
        hv, hl = dense(c)
        acc = [0.0] * 4
        for r in rs:
            rv, rl = dense(r)
            for n in range(4):
                dot = sum(min(a, b) * b for a, b in zip(hv[n], rv[n]))
                na = math.sqrt(sum(a * a for a in hv[n]))
                nb = math.sqrt(sum(b * b for b in rv[n]))
                val = dot / (na * nb) if na != 0 and nb != 0 else dot
                acc[n] += val * math.exp(-((hl - rl) ** 2) / (2 * sigma ** 2))
        scores.append(sum(acc) / 4 / len(rs) * 10)
    return sum(scores) / len(scores), scores


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    with open(os.path.join(here, "toy_corpus.json")) as f:
        data = json.load(f)
    for name in ("two", "five"):
        cands = [s.split() for s in data[name]["candidates"]]
        refs = [[r.split() for r in rs] for rs in data[name]["references"]]
        for n in range(1, 5):
            print(f"{name} bleu{n} {bleu(cands, refs, n):.12f}")
        mean, per = cider_d(cands, refs)
        print(f"{name} cider {mean:.12f}")
        for i, s in enumerate(per):
            print(f"{name} cider[{i}] {s:.12f}")


if __name__ == "__main__":
    main()
