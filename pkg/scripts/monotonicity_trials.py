#!/usr/bin/env python3
"""Randomized monotonicity audit over fresh non-negative models.

Draws (random projected model, random synthetic graph, random non-negative
integer feature addition) triples and checks, for every readout, that the
malware score never drops and that no input-gradient entry is negative.
"""

import argparse
import sys
import time

import numpy as np

from mal2gcn.featurize import build_vocabulary, embed_graph
from mal2gcn.gcn import (
    ModelParams,
    build_normalized_adjacency,
    forward,
    input_gradient,
    project_nonnegative,
)
from mal2gcn.synth import SynthConfig, generate_corpus


def random_nonneg_model(rng, d):
    h1, h2, hg = (int(rng.integers(2, 9)) for _ in range(3))
    return project_nonnegative(
        ModelParams(
            w_gcn1=rng.normal(size=(d, h1)),
            w_gcn2=rng.normal(size=(h1, h2)),
            w_hidden=rng.normal(size=(h2, hg)),
            b_hidden=rng.normal(size=hg),
            w_out=rng.normal(size=hg),
            b_out=rng.normal(size=1),
            nonneg_gcn=True,
            nonneg_gclf=True,
        )
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--tolerance", type=float, default=1e-9)
    args = parser.parse_args()

    cfg = SynthConfig(
        n_benign=60, n_malware=60, node_count_min=3, node_count_max=25,
        n_benign_apis=40, n_benign_strings=40, n_malicious_apis=40, n_malicious_strings=40,
        n_shared_apis=20, n_shared_strings=20, seed=args.seed,
    )
    corpus, _ = generate_corpus(cfg)
    vocab = build_vocabulary(corpus, k_api=30, k_str=30)
    graphs = [
        (build_normalized_adjacency(g), embed_graph(g, vocab).counts.astype(float))
        for g in corpus.records
    ]

    rng = np.random.default_rng(args.seed)
    started = time.perf_counter()
    violations = 0
    worst_drop = 0.0
    min_gradient = np.inf
    for trial in range(args.trials):
        model = random_nonneg_model(rng, vocab.size)
        adj, x = graphs[int(rng.integers(len(graphs)))]
        delta = np.zeros_like(x)
        edits = int(rng.integers(1, 16))
        np.add.at(
            delta,
            (rng.integers(x.shape[0], size=edits), rng.integers(x.shape[1], size=edits)),
            rng.integers(1, 4, size=edits),
        )
        for readout in ("avg", "sum", "max"):
            before, _ = forward(model, adj, x, readout)
            after, _ = forward(model, adj, x + delta, readout)
            drop = before - after
            worst_drop = max(worst_drop, drop)
            if drop > args.tolerance:
                violations += 1
            min_gradient = min(min_gradient, float(input_gradient(model, adj, x, readout).min()))
    elapsed = time.perf_counter() - started

    print(f"{args.trials} trials x 3 readouts in {elapsed:.1f}s")
    print(f"violations:         {violations}")
    print(f"worst score drop:   {worst_drop!r}")
    print(f"min input gradient: {min_gradient!r}")
    return 0 if violations == 0 else 3


if __name__ == "__main__":
    sys.exit(main())
