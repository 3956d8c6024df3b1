"""Attribution diagnostics: solver-vs-finetuning scores, similarity, TF-IDF.

  pbrf-compare/  scatter of stochastic-solver scores against finetuned ones
  similarity/    gradient-cosine vs curvature-weighted similarity matrices
  tfidf-check/   bag-of-words influence against the TF-IDF closed form
"""

import argparse
import sys
from pathlib import Path

from lissakit.cli import main as cli_main

MODEL = """\
model_kind = mlp
layer_sizes = 8, 6, 4
activation = tanh
init_scale = 0.5
n_examples = 200
separation = 2.0
lambda_damp = 0.06
eta = 1.6
batch_size = 16
t_steps = 25
"""


def run(command, config_text, out_dir, seed):
    cfg_path = out_dir / f"{command}.cfg"
    cfg_path.write_text(config_text)
    code = cli_main(
        [command, "--config", str(cfg_path), "--out", str(out_dir / command),
         "--seed", str(seed)]
    )
    if code != 0:
        sys.exit(f"{command} failed with exit code {code}")
    print(f"{command}: wrote {out_dir / command}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/attribution")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    run(
        "pbrf-compare",
        "command = pbrf-compare\n" + MODEL + "n_train = 10\nn_test = 40\n"
        "epsilon = 1e-8\n",
        out_dir,
        args.seed,
    )
    run(
        "similarity",
        "command = similarity\n" + MODEL + "n_items = 8\ntrain_index = 0\n",
        out_dir,
        args.seed,
    )
    run(
        "tfidf-check",
        "command = tfidf-check\nn_docs = 50\ndoc_length = 8\nvocab_size = 10\n"
        "lambda_damp = 1e-8\ntolerance = 1e-6\n",
        out_dir,
        args.seed,
    )


if __name__ == "__main__":
    main()
