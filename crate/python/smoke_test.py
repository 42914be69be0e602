"""Smoke test for the pyroadsafe extension module.

Build the module first, for example:
    cargo build -p roadsafe-py --release --features extension-module
    cp target/release/libpyroadsafe.so python/pyroadsafe.so
then run `python3 python/smoke_test.py` from the repository root.
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pyroadsafe as rs


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    m = rs.metrics([0, 1, 0, 1], [0, 1, 1, 1])
    assert close(m["accuracy"], 0.75) and close(m["fpr"], 1 / 3), m

    b = rs.kmeans_bin([0, 0, 1, 9, 10])
    assert b["labels"] == [0, 0, 0, 1, 1], b

    x, y = [[0.0], [2.0]], [[1.0], [3.0]]
    assert rs.cov_within(x, y) == [[16.0]]
    assert rs.cov_between(x, y) == [[12.0]]
    assert close(rs.loss_da([[0.0]], [[2.0]], [[0.0]], [[2.0]]), 0.0)

    with tempfile.TemporaryDirectory() as tmp:
        files = rs.synth_generate(tmp, json.dumps({"n_per_class": 6, "seed": 1}))
        assert "manifest.jsonl" in files and len(files) == 13

        model = rs.DamModel(seed=0)
        assert model.num_params > 0
        rows = model.train(os.path.join(tmp, "manifest.jsonl"), json.dumps({"epochs": 1}))
        assert rows and rows[0]["split"] == "train", rows

        images = [os.path.join(tmp, f) for f in files if f.endswith(".ppm")][:3]
        preds = model.predict_ppm(images)
        assert len(preds) == 3 and all(close(sum(p), 1.0) for _, p in preds)

        cam = model.cam(images[0])
        assert len(cam) == 64 and len(cam[0]) == 64

        ckpt = os.path.join(tmp, "m.ckpt")
        model.save(ckpt)
        again = rs.DamModel.load(ckpt)
        assert again.predict_ppm(images) == preds

        code = rs.run_cli(["--out", os.path.join(tmp, "run"), "--seed", "2", "synth"])
        assert code == 0
        assert rs.run_cli(["no-such-command"]) == 1

    print("pyroadsafe smoke test passed")


if __name__ == "__main__":
    main()
