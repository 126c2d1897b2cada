"""Smoke test for the prunelab_py extension.

Build and install first:  maturin build --release -m crates/py/Cargo.toml
then pip install the wheel from target/wheels.
"""

import json
import math
import os
import sys
import tempfile

import prunelab_py as pl


def main() -> int:
    train = pl.Dataset.synthetic(3, 240, seed=1, shape=[1, 12, 12], jitter=1.0)
    test = pl.Dataset.synthetic(3, 60, seed=2, shape=[1, 12, 12], jitter=1.0)
    assert len(train) == 240 and train.shape == [240, 1, 12, 12]

    net = pl.Network.preset("tiny", seed=0)
    loss0, _ = net.evaluate(test)
    log = net.train(train, epochs=5, lr=0.05, batch_size=16, log_every=5,
                    schedule="table4_2", mode="unit")
    records = [json.loads(line) for line in log.splitlines()]
    assert sum(r["event"] == "prune" for r in records) == 4
    loss1, acc = net.evaluate(test)
    print(f"loss {loss0:.4f} -> {loss1:.4f}, accuracy {acc:.3f}")
    assert math.isfinite(loss1)

    scores = net.score_parameters(test, kind="taylor2")
    assert len(scores) == net.param_count
    mask = net.mask()
    assert all(math.isinf(s) == (m == 0.0) for s, m in zip(scores, mask))

    small = net.shrink()
    before = net.logits(test)
    after = small.logits(test)
    gap = max(abs(a - b) for x, y in zip(before, after) for a, b in zip(x, y))
    print(f"shrunk {net.param_count} -> {small.param_count} params, logit gap {gap:.2e}")
    assert small.param_count < net.param_count and gap < 1e-9

    other = pl.Network.preset("tiny", seed=3)
    achieved = other.prune_parameters(test, 0.5, kind="magnitude")
    assert abs(achieved - 0.5) < 1.0 / other.param_count + 1e-12
    removed = other.prune_units(test, 0.25)
    assert removed and all(0 <= l < other.param_layers - 1 for l, _ in removed)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.prlb")
        small.save(path)
        assert pl.Network.load(path).logits(test) == after
        try:
            pl.Network.load(os.path.join(d, "missing.prlb"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")
        assert pl.cli(["shrink", "--checkpoint", path]) == 0

    try:
        net.prune_parameters(test, 1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("fraction above 1 accepted")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
