"""Smoke test for the `vitp` extension module.

Build and run:
    cargo build --release -p vitp-python --features extension-module
    cp target/release/libvitp.so python/vitp.so
    python3 python/smoke_test.py
"""

import math
import random
import sys
import tempfile

import vitp


def main() -> int:
    assert vitp.window_schedule("W", 1, 12, 16) == [[3, 5, 9, 11, 13, 15, 19, 21, 23, 25, 29, 31]]
    assert vitp.window_schedule("D", 3, 2, 4) == [[3, 3], [5, 5], [7, 7]]

    absolute = vitp.focal_bias_matrix(4, 3)
    relative = vitp.focal_bias_matrix(4, 3, relative=True)
    assert absolute == relative
    flat = [v for row in absolute for v in row]
    assert flat.count(0.0) == 100 and flat.count(-100.0) == 156
    with_cls = vitp.focal_bias_matrix(4, 3, class_token=True)
    assert all(v == 0.0 for v in with_cls[0]) and all(row[0] == 0.0 for row in with_cls)

    counts = [c for _, _, c in vitp.bias_histogram(flat, 2, -100.0, 0.0)]
    assert counts == [156, 100]

    uniform = [[[0.25] * 4 for _ in range(4)]]
    assert abs(vitp.mean_attention_distance(uniform, 2, 2) - (2 + math.sqrt(2)) / 2) < 1e-12

    model = vitp.Model(seed=0)
    px = model.image_px
    rng = random.Random(0)
    images = [rng.uniform(-1, 1) for _ in range(2 * 3 * px * px)]
    logits = model.logits(images)
    assert len(logits) == 2 and len(logits[0]) == model.num_classes
    assert all(math.isfinite(v) for row in logits for v in row)
    rows = model.mean_attention_distance(images)
    assert len(rows) == len(model.schedule()) * len(model.schedule()[0])
    for _, _, side, mad in rows:
        assert mad <= 4 * math.sqrt(2) * (side - 1) / 2 + 1e-6
    assert len(model.bias(0)) == len(model.schedule()[0])

    plain = vitp.Model(seed=0, bias_mode="none")
    assert plain.bias(0) is None
    assert plain.param_count() < model.param_count()

    try:
        vitp.Model(suppression=5)
    except ValueError as e:
        assert "suppression" in str(e)
    else:
        raise AssertionError("positive suppression accepted")

    with tempfile.TemporaryDirectory() as d:
        summary = vitp.train(
            steps=20, epochs=2, warmup_epochs=1, train_samples=160, eval_samples=40, out_dir=d, lr=0.002
        )
        assert summary["steps"] == 20 and len(summary["losses"]) == 20
        loaded = vitp.Model.load(f"{d}/checkpoint.bin")
        assert loaded.param_count() == model.param_count()

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
