"""Recompute sample corpus statistics independently of the Rust loader.

Usage: python3 corpus_stats.py sample_corpus.json > sample_corpus_stats.json
"""
import json
import sys
from collections import Counter


def main(path):
    with open(path, encoding="utf-8") as f:
        tasks = json.load(f)["tasks"]
    sizes = [t["set_size"] for t in tasks]
    words = [len(t["instruction"].split()) for t in tasks]
    out = {
        "count": len(tasks),
        "mean_set_size": sum(sizes) / len(sizes),
        "mean_word_count": sum(words) / len(words),
        "per_group": dict(sorted(Counter(t["group"] for t in tasks).items())),
        "per_subcategory": dict(sorted(Counter(t["subcategory"] for t in tasks).items())),
    }
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "sample_corpus.json")
