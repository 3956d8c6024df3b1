"""Generate reusable desk-scale fixtures: a blob dataset CSV and a text corpus.

The dataset plugs into any config via `dataset_path`; the corpus feeds
`tfidf-check` via `corpus_path`.
"""

import argparse
from pathlib import Path

from lissakit.core import SeededRng
from lissakit.models import make_blobs, save_dataset_csv
from lissakit.tfidf import corpus_to_text, sample_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-examples", type=int, default=512)
    parser.add_argument("--dim", type=int, default=16)
    parser.add_argument("--classes", type=int, default=5)
    parser.add_argument("--separation", type=float, default=2.0)
    parser.add_argument("--n-docs", type=int, default=50)
    parser.add_argument("--doc-length", type=int, default=8)
    parser.add_argument("--vocab", type=int, default=10)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rng = SeededRng(args.seed)
    data = make_blobs(rng, args.n_examples, args.dim, args.classes, args.separation)
    dataset_path = out / "blobs.csv"
    save_dataset_csv(data, str(dataset_path))
    print(f"dataset: {dataset_path} ({len(data)} examples, dim {args.dim}, "
          f"{args.classes} classes)")

    raw = SeededRng(args.seed + 1).uniform(args.vocab) * 0.4 + 0.8
    corpus = sample_corpus(SeededRng(args.seed + 2), args.n_docs, args.doc_length,
                           raw / raw.sum())
    corpus_path = out / "corpus.txt"
    corpus_path.write_text(corpus_to_text(corpus))
    print(f"corpus: {corpus_path} ({corpus.n_docs} docs of length "
          f"{corpus.doc_length}, vocab {corpus.vocab_size})")


if __name__ == "__main__":
    main()
