"""Smoke test for the recalx extension module.

Build and install the extension first, e.g.

    pip install ./crates/python
    python python/smoke_test.py
"""

import itertools
import json
import math
import random

import recalx


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    # temperature scaling
    p = recalx.apply_temperature([2.0, 0.0], 2.0)
    assert close(p, [1 / (1 + math.exp(-1.0)), 1 / (1 + math.exp(1.0))])
    assert recalx.perturbation_level([0], 4) == 0.75

    # exact Shapley on an additive game recovers the weights
    w = [3.0, 1.0, 0.5]
    table = [sum(w[j] for j in range(3) if m >> j & 1) for m in range(8)]
    assert close(recalx.shapley_from_table(table, 3), w)

    # a model whose logits are blown up is recalibrated back down
    rng = random.Random(0)
    xs, ys = [], []
    for _ in range(600):
        x = [rng.gauss(0, 1) for _ in range(3)]
        z = 2.0 * x[0] + 0.5 * x[1]
        ys.append(int(rng.random() < 1 / (1 + math.exp(-z))))
        xs.append(x)
    model = recalx.Classifier.train(xs[:400], ys[:400], epochs=15, seed=1)
    sharp = model.scaled(4.0)
    assert sharp.kind == "scaled" and sharp.input_dim == 3
    roundtrip = recalx.Classifier.from_json(sharp.to_json())
    assert close(roundtrip.predict_proba(xs[0]), sharp.predict_proba(xs[0]))

    calib = recalx.Calibrator.fit(sharp, xs[400:], ys[400:], bins=3, reps=2, seed=2)
    assert all(t > 1.0 for t in calib.temperatures), calib.temperatures
    assert close(recalx.Calibrator.from_json(calib.to_json()).temperatures, calib.temperatures)

    full = [0, 1, 2]
    raw = [sharp.restricted_predict(x, full) for x in xs[400:]]
    fixed = [sharp.restricted_predict(x, full, calibrator=calib) for x in xs[400:]]
    ce_raw = recalx.calibration_error_kl(raw, ys[400:])
    ce_fixed = recalx.calibration_error_kl(fixed, ys[400:])
    assert ce_fixed < ce_raw, (ce_raw, ce_fixed)

    # Shapley efficiency against the restricted model
    x = xs[0]
    phi = recalx.explain(sharp, x, 1, method="shapley", calibrator=calib)
    top = sharp.restricted_predict(x, full, calibrator=calib)[1]
    bottom = sharp.restricted_predict(x, [], calibrator=calib)[1]
    assert abs(sum(phi) - (top - bottom)) < 1e-9
    kshap = recalx.explain(sharp, x, 1, method="kernelshap", n_samples=6, calibrator=calib)
    assert close(kshap, phi, 1e-6)

    # finite joint and its oracle
    # P(y=1 | x0=0) = 0.2 and P(y=1 | x0=1) = 0.7, x1 uniform noise
    support, probs = [], []
    for v in itertools.product([0.0, 1.0], repeat=2):
        p1 = 0.7 if v[0] == 1.0 else 0.2
        for y, py in ((0, 1 - p1), (1, p1)):
            support.append({"x": list(v), "y": y})
            probs.append(0.25 * py)
    joint = {"support": support, "probs": probs, "n_classes": 2}
    oracle = recalx.Classifier.bayes_oracle(json.dumps(joint))
    assert close(oracle.predict_proba([1.0, 0.0]), [0.3, 0.7], 1e-9)
    assert close(oracle.restricted_predict([1.0, 1.0], [1]), [0.55, 0.45], 1e-9)

    try:
        recalx.explain(sharp, x, 1, method="foo")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown method accepted")

    print(f"recalx {recalx.__version__} smoke test ok "
          f"(CE {ce_raw:.4f} -> {ce_fixed:.4f}, T={[round(t, 3) for t in calib.temperatures]})")


if __name__ == "__main__":
    main()
