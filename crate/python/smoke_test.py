"""Smoke test for the dlccp extension module.

Run after `pip install --no-build-isolation ./crates/py` (or with the built
library on PYTHONPATH as dlccp.so).
"""

import json
import math
import pathlib
import tempfile

import dlccp


def main():
    m = dlccp.compute_metrics([[3, 1], [2, 4]])
    assert math.isclose(m["acc"], 0.7)
    assert math.isclose(m["f1"], 23 / 33)

    err, checked = dlccp.gradcheck(7)
    assert err < dlccp.GRADCHECK_TOLERANCE, err
    print(f"gradcheck: {checked} entries, max relative error {err:.2e}")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        spec = tmp / "spec.toml"
        spec.write_text("num_classes = 3\nsource_per_class = 10\ntarget_test_per_class = 3\n")
        files = dict(dlccp.generate_corpus(tmp / "data", spec=spec))
        assert files["source"].exists()

        config = tmp / "train.toml"
        config.write_text(
            "source = 'data/source.jsonl'\n"
            "target = 'data/target.jsonl'\n"
            "ce = 'data/ce.jsonl'\n"
            "out_dir = 'runs'\n"
            "test_per_class = 3\n"
            "batch_size = 4\n"
            "pretrain_epochs = 1\n"
            "main_epochs = 1\n"
            "embed_dim = 8\n"
            "content_dim = 4\n"
            "style_dim = 2\n"
        )
        report = dlccp.train(config, seeds=[1, 2])
        assert report["n_seeds"] == 2
        print(f"train: mean test f1 {report['f1']['mean']:.3f}")

        ckpt = tmp / "runs" / "seed-1" / "checkpoint.json"
        model = dlccp.Model.load(ckpt)
        line = (tmp / "runs" / "seed-1" / "target_test.jsonl").read_text().splitlines()[0]
        probs = model.predict_proba(json.loads(line)["text"])
        assert len(probs) == model.num_classes == 3
        assert math.isclose(sum(probs), 1.0)
        print(f"{model!r} predicts class {model.predict(json.loads(line)['text'])}")

        again = dlccp.evaluate([ckpt], tmp / "runs" / "seed-1" / "target_test.jsonl")
        assert again["n_seeds"] == 1

        dlccp.verify(tmp / "runs" / "manifest.json")
        try:
            dlccp.Model.load(tmp / "missing.json")
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint should raise OSError")
    print("smoke test passed")


if __name__ == "__main__":
    main()
