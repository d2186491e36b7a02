#!/usr/bin/env python3
"""Smoke test for the sparseeval_py extension module.

Builds the cdylib with cargo, loads it, and drives a small end-to-end flow:
synthetic matrix -> splits -> anchor selection -> pipeline -> estimator
round trip. Exits non-zero on the first failure.
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "sparseeval-python"],
        cwd=REPO_ROOT,
        check=True,
    )
    built = REPO_ROOT / "target" / "debug" / "libsparseeval_py.so"
    if not built.exists():  # macOS fallback
        built = REPO_ROOT / "target" / "debug" / "libsparseeval_py.dylib"
    stage = Path(tempfile.mkdtemp(prefix="sparseeval_py_"))
    shutil.copy(built, stage / "sparseeval_py.so")
    return stage


def main() -> None:
    stage = build_extension()
    sys.path.insert(0, str(stage))
    import sparseeval_py as sp

    # matrix construction and basic accounting
    matrix = sp.synthetic_matrix(m=300, c=5, n=60, flip_prob=0.05, seed=7)
    assert matrix.n_models == 300 and matrix.n_items == 60, repr(matrix)
    scores = matrix.true_scores()
    assert len(scores) == 300 and all(-1.0 <= s <= 1.0 for s in scores)
    assert abs(matrix.accuracy(0) - (scores[0] + 1.0) / 2.0) < 1e-12
    print("matrix ok:", repr(matrix))

    split = matrix.assign_splits(n_validation=50, n_test=50, seed=3)
    assert sp.split_sizes(split) == (200, 50, 50)
    print("splits ok:", sp.split_sizes(split))

    # CSV round trip
    with tempfile.TemporaryDirectory() as tmp:
        csv_path = Path(tmp) / "matrix.csv"
        split.to_csv(csv_path)
        back = sp.ingest_csv(csv_path)
        assert back.true_scores() == split.true_scores()
    print("csv round trip ok")

    # similarity + clustering find the planted structure
    sim = sp.item_similarity(split)
    assert len(sim) == 60 and abs(sim[0][0] - 1.0) < 1e-9
    clusters = sp.cluster_items(split, c=5, seed=1)
    assert clusters.gap > 0.2, clusters.gap
    print(f"clustering ok: intra {clusters.intra_similarity:.3f}, "
          f"inter {clusters.inter_similarity:.3f}")

    # anchor selection
    km = sp.kmeans_anchors(split, k=5, seed=2)
    rnd = sp.random_anchors(60, 5, seed=2)
    assert len(set(km)) == 5 and len(set(rnd)) == 5
    print("anchors ok:", km, rnd)

    # end-to-end pipeline at a small budget
    result = sp.run_pipeline(
        split, k=5, rounds=3, seed=0,
        proxy_epochs=15, final_epochs=60, hidden=16,
        learning_rate=3e-3, batch_size=32,
    )
    assert math.isfinite(result.mae_percent)
    assert result.mae_percent < 10.0, result.mae_percent
    assert result.kendall_tau is None or result.kendall_tau > 0.5
    assert len(result.swaps) == 3
    print(f"pipeline ok: MAE {result.mae_percent:.3f}%, "
          f"tau {result.kendall_tau:.3f}, anchors {result.anchors}")

    # estimator serialization round trip, bit-exact estimates
    estimator = result.estimator()
    anchor_scores = [split.row(0)[i] for i in estimator.anchors()]
    direct = estimator.estimate(anchor_scores)
    reloaded = sp.Estimator.from_json(estimator.to_json())
    assert reloaded.estimate(anchor_scores) == direct
    assert 0.0 <= direct <= 1.0
    print(f"estimator ok: estimate {direct:.4f} survives a JSON round trip")

    # metrics
    assert abs(sp.mae([0.0], [0.2]) - 10.0) < 1e-12
    assert sp.kendall_tau([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert sp.kendall_tau([1.0, 1.0], [1.0, 2.0]) is None
    print("metrics ok")

    print("SMOKE TEST PASS")


if __name__ == "__main__":
    main()
