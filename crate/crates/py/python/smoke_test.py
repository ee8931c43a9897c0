# SPDX-License-Identifier: MIT OR Apache-2.0
"""Smoke test for the proxsae Python extension.

Build and install first, for example:
    pip install maturin && maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/proxsae-*.whl
"""

import json
import math
import os
import sys
import tempfile

import proxsae


def close(a, b, tol=1e-12):
    return len(a) == len(b) and all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    u = [1.5, -2.0, 0.3, 0.9]
    assert close(proxsae.prox_relu(u, 0.5), [1.0, 0.0, 0.0, 0.4])
    assert close(proxsae.prox_jumprelu(u, 1.0), [1.5, 0.0, 0.0, 0.0])
    assert close(proxsae.prox_topk(u, 2), [1.5, 0.0, 0.0, 0.9])
    assert close(proxsae.prox_abstopk(u, 2), [1.5, -2.0, 0.0, 0.0])
    try:
        proxsae.prox_topk(u, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("k = 0 must be rejected")

    store, truth = proxsae.generate(d=16, p_true=8, k_true=2, n_samples=2048, seed=3)
    assert (store.n_rows, store.dim, truth.p_true) == (2048, 16, 8)
    assert json.loads(store.metadata)["kind"] == "activations"

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "acts.bin")
        store.write(path)
        again = proxsae.ActivationStore.read(path)
        assert again.to_rows() == store.to_rows()

        sae, report = proxsae.train(store, variant="abstopk", k=2, latents=32, steps=200, batch_size=256, eval_every=50)
        records = [json.loads(line) for line in report.splitlines()]
        assert records[-1]["step"] == 199
        ck = os.path.join(tmp, "sae.bin")
        sae.save(ck)
        sae = proxsae.Sae.load(ck)

    x = store.row(0)
    z = sae.encode(x)
    assert sum(1 for v in z if v != 0.0) <= 2
    assert close(sae.decode(z), sae.reconstruct(x))
    assert sae.nmse(store) < 0.5
    code, iters, objective = sae.sparse_code(x, max_iters=50)
    assert len(code) == sae.p and iters >= 1 and math.isfinite(objective)

    pos, neg = truth.contrast_pairs(1, 64)
    direction = proxsae.dim_extract(pos, neg)
    cos = abs(sum(a * b for a, b in zip(direction, truth.atom(1))))
    assert cos > 0.99, cos
    ablated = proxsae.directional_ablate(x, direction)
    assert abs(sum(a * b for a, b in zip(ablated, direction))) < 1e-12
    added = proxsae.activation_add(x, direction, 2.0)
    assert close([a - b for a, b in zip(added, x)], [2.0 * d for d in direction])

    clamped = sae.clamp(x, 0, 3.0)
    want = [r + (3.0 - z[0]) * a for r, a in zip(sae.reconstruct(x), sae.atoms()[0])]
    assert close(clamped, want, 1e-9)

    recovered, pairs = sae.recovery(truth, 0.9)
    assert 0 <= recovered <= truth.p_true and pairs >= 0
    print("smoke test passed:", sae, store, f"recovered={recovered}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
