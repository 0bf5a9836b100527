"""Smoke test for the Python bindings.

Run after `maturin develop -m crates/py/Cargo.toml`, or after
`cargo build -p segbone-py --features extension-module`, in which case the
built library is picked up from target/ automatically.
"""

import glob
import importlib.util
import json
import os
import sys
import tempfile

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_segbone():
    try:
        import segbone

        return segbone
    except ImportError:
        pass
    libs = glob.glob(os.path.join(ROOT, "target", "*", "libsegbone_py.so"))
    if not libs:
        sys.exit("segbone module not found; build crates/py first")
    lib = max(libs, key=os.path.getmtime)
    spec = importlib.util.spec_from_file_location("segbone", lib)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    sb = import_segbone()

    vol, mask, twin = sb.generate_phantom(7, shape=(8, 32, 32), spacing=(2.0, 1.0, 1.0),
                                          config=json.dumps({"size_range_mm": [3, 5], "length_range_mm": [8, 12],
                                                             "margin_mm": 1.0}))
    assert vol.shape == (8, 32, 32) and mask.shape == (8, 32, 32) and mask.dtype == np.uint8
    assert twin.sequence_tag == "t2-sim"
    assert mask.sum() > 0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "v")
        vol.save(path)
        again = sb.Volume.load(path)
        assert np.array_equal(again.data(), vol.data()) and again.spacing == (2.0, 1.0, 1.0)

    assert sb.dsc(mask, mask) == 1.0 and sb.iou(mask, mask) == 1.0
    assert abs(sb.tversky_loss(np.array([1.0, 1.0, 0, 0]), np.array([1.0, 0, 0, 0])) - 0.41176) < 1e-5
    half = np.tile([[0.0, 1.0]], (8, 4))[None]
    assert abs(sb.loss_2d(np.zeros((1, 2, 8, 8)), half) - (np.log(2) + 1 / 3)) < 1e-4

    p = np.random.default_rng(0).random((16, 16, 16))
    a = sb.depth_attention(p, 3, 8)
    assert a.shape == (16, 16) and 0.0 <= a.min() and a.max() <= 1.0

    k = int(np.argmax(mask.reshape(8, -1).sum(1)))
    prompt, selected, n = sb.sample_prompts(mask[k], seed=3)
    comps = sb.find_components(mask[k])
    assert 1 <= n <= len(comps) and selected.sum() > 0
    json.loads(prompt)

    model = sb.SegModel.random(1, sb.tiny_model_config(32))
    assert model.input_size == 32
    pred = model.segment(vol, prompts=json.dumps({"points": [[10, 12]]}), batch_size=4)
    assert pred.shape == vol.shape and set(np.unique(pred)) <= {0, 1}
    assert model.gate == 1.0

    print("python smoke test passed:", vol, "gate", model.gate)


if __name__ == "__main__":
    main()
