#!/usr/bin/env python3
"""Fit the bundled fixture models on the synthetic corpus and freeze them.

Produces src/falldet/models/{lr,svm,nb}_{smartfall,derivative}.json plus
tests/golden/features_golden.json (a handful of windows with their exact
oracle feature vectors, shared with the trainer's parity tests). Pure
numpy on purpose: the fits only have to be decent, not state of the art.

Run from the repository root:  python3 scripts/fit_fixture_models.py
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from falldet import harness  # noqa: E402
from falldet.classifiers import load_model, oracle_infer  # noqa: E402
from falldet.features import KINDS, oracle_features_batch  # noqa: E402

TRAIN_SEED = 404
TEST_SEED = 405
N_TRAIN = 2000
N_TEST = 600
FRAC_BITS = 16
# keeps |x - mu| / sigma bounded so shared-arithmetic headroom holds
Z_CAP = 100.0

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "falldet",
                       "models")
GOLDEN = os.path.join(os.path.dirname(__file__), "..", "tests", "golden",
                      "features_golden.json")


def standardized(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-9] = 1.0
    return (X - mu) / sd, mu, sd


def unstandardize(w, b, mu, sd):
    w_raw = w / sd
    return w_raw, b - float(w_raw @ mu)


def fit_logistic(X, y, l2=1e-3, iters=4000, lr=0.3):
    Z, mu, sd = standardized(X)
    n, d = Z.shape
    w = np.zeros(d)
    b = 0.0
    s = 2.0 * y - 1.0  # +-1
    for k in range(iters):
        margin = s * (Z @ w + b)
        g = -s / (1.0 + np.exp(margin))  # dloss/dmargin * s
        gw = Z.T @ g / n + l2 * w
        gb = g.mean()
        step = lr / (1.0 + k / 1000.0)
        w -= step * gw
        b -= step * gb
    return unstandardize(w, b, mu, sd)


def fit_svm(X, y, l2=1e-3, iters=4000, lr=0.2):
    Z, mu, sd = standardized(X)
    n, d = Z.shape
    w = np.zeros(d)
    b = 0.0
    s = 2.0 * y - 1.0
    for k in range(iters):
        slack = np.maximum(0.0, 1.0 - s * (Z @ w + b))  # squared hinge
        g = -2.0 * s * slack
        gw = Z.T @ g / n + 2.0 * l2 * w
        gb = g.mean()
        step = lr / (1.0 + k / 1000.0)
        w -= step * gw
        b -= step * gb
    return unstandardize(w, b, mu, sd)


def fit_nb(X, y):
    means, variances = [], []
    for c in (0, 1):
        Xc = X[y == c]
        mu = Xc.mean(axis=0)
        sd = Xc.std(axis=0)
        # floor the per-class sigma so no corpus point sits further than
        # Z_CAP standard deviations out (shared-arithmetic range contract)
        reach = np.abs(X - mu).max(axis=0)
        sd = np.maximum.reduce([sd, reach / Z_CAP, np.full_like(sd, 1e-3)])
        means.append(mu)
        variances.append(sd ** 2)
    priors = [float(np.mean(y == c)) for c in (0, 1)]
    return means, variances, [float(np.log(p)) for p in priors]


def doc_for(kind, feature_kind, dim):
    return {"kind": kind, "feature_kind": feature_kind, "dimension": dim,
            "frac_bits": FRAC_BITS, "weights": None, "bias": None,
            "means": None, "variances": None, "log_priors": None}


def freeze(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    os.makedirs(os.path.dirname(GOLDEN), exist_ok=True)
    train = harness.gen_corpus(N_TRAIN, seed=TRAIN_SEED)
    test = harness.gen_corpus(N_TEST, seed=TEST_SEED)
    Xw_tr = np.stack([w.samples for w in train])
    Xw_te = np.stack([w.samples for w in test])
    y_tr = np.array([w.label for w in train], dtype=np.float64)
    y_te = np.array([w.label for w in test], dtype=np.int64)

    for feature_kind in KINDS:
        F_tr = oracle_features_batch(Xw_tr, feature_kind)
        F_te = oracle_features_batch(Xw_te, feature_kind)
        dim = F_tr.shape[1]

        for kind in ("lr", "svm", "nb"):
            doc = doc_for(kind, feature_kind, dim)
            if kind == "nb":
                means, variances, log_priors = fit_nb(F_tr, y_tr)
                doc["means"] = [[round(float(v), 8) for v in m] for m in means]
                doc["variances"] = [[round(float(v), 8) for v in s]
                                    for s in variances]
                doc["log_priors"] = [round(v, 8) for v in log_priors]
            else:
                fit = fit_logistic if kind == "lr" else fit_svm
                w, b = fit(F_tr, y_tr)
                doc["weights"] = [round(float(v), 8) for v in w]
                doc["bias"] = round(float(b), 8)
            model = load_model(doc)  # validates the frozen document
            acc = float(np.mean(oracle_infer(F_te, model) == y_te))
            path = os.path.join(OUT_DIR, f"{kind}_{feature_kind}.json")
            freeze(doc, path)
            print(f"{kind:>3} + {feature_kind:<10} dim={dim:<3} "
                  f"test acc={acc:.3f}  -> {os.path.relpath(path)}")

    golden_corpus = harness.gen_corpus(8, seed=777)
    Xg = np.stack([w.samples for w in golden_corpus])
    golden = {
        "window_len": int(Xg.shape[1]),
        "labels": [int(w.label) for w in golden_corpus],
        "windows": [[[float(v) for v in row] for row in win] for win in Xg],
        "features": {
            k: [[float(v) for v in row]
                for row in oracle_features_batch(Xg, k)]
            for k in KINDS
        },
    }
    freeze(golden, GOLDEN)
    print(f"golden features -> {os.path.relpath(GOLDEN)}")


if __name__ == "__main__":
    main()
