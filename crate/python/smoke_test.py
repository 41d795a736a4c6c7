"""Smoke test for the Python bindings.

Build first:
    cargo build --release -p pseudocbct-py --features extension-module
    cp target/release/libpseudocbct.so python/pseudocbct.so
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pseudocbct as pc


def main():
    ct = pc.phantom(height=48, width=48, slices=2, seed=3)
    assert ct.shape == (2, 48, 48), ct.shape

    cbct, params = pc.simulate(ct, seed=5)
    params = json.loads(params)
    assert len(params) == 2
    assert pc.mae(cbct, ct) > 0.0

    rt = pc.fbp_roundtrip(ct, n_angles=180)
    print(f"fbp round trip MAE {pc.mae(rt, ct):.2f} HU")

    print(f"cbct vs ct: MAE {pc.mae(cbct, ct):.1f} HU, SSIM {pc.ssim(cbct, ct):.3f}")
    sc = pc.structural_change(cbct, ct)
    assert sc["fov_pixels"] > 0

    beta, gamma = pc.noise_schedule(steps=100)
    assert len(beta) == 101 and beta[0] == 0.0 and gamma[0] == 1.0
    assert all(a >= b for a, b in zip(gamma, gamma[1:]))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ct.vol")
        ct.save(path)
        back = pc.Volume.load(path)
        assert back.to_list() == ct.to_list()

        codec = pc.train_codec_on([ct], factor=2, epochs=1, widths=[8])
        assert codec.factor == 2
        rec = codec.reconstruct(ct)
        assert rec.shape == ct.shape
        den = pc.train_cldm(codec, [(cbct, ct)], steps=10, epochs=1, widths=[8, 16])
        syn = den.generate(codec, cbct, noise_seed=1)
        assert syn.shape == ct.shape
        print(f"untrained syn MAE {pc.mae(syn, ct):.1f} HU")

    try:
        pc.noise_schedule(steps=0)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
