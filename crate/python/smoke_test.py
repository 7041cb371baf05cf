"""Smoke test for the loopgraph Python bindings.

Build and install the extension first:

    cd crates/python && maturin build --release -o dist && pip install dist/*.whl
"""

import math
import tempfile
from pathlib import Path

import loopgraph_py as lg


def check_similarity():
    a = [1] * 40 + [2] * 60
    b = [1] * 40 + [3] * 40
    assert math.isclose(lg.similarity(a, b), 0.4)
    assert lg.similarity([], []) == 0.0


def check_likelihood():
    per_location, new_place = lg.likelihood({0: 0.2, 1: 0.4, 2: 0.6})
    sigma = math.sqrt(0.08 / 3)
    assert math.isclose(per_location[2], (0.6 - sigma) / 0.4)
    assert per_location[0] == 1.0
    assert math.isclose(new_place, 0.4 / sigma + 1)


def check_config():
    cfg = lg.Config(t_time="0.7", stm_size=3)
    assert cfg.t_time == 0.7 and cfg.stm_size == 3
    assert "t_time" in cfg.to_text()
    try:
        lg.Config(t_loop="2")
    except ValueError:
        pass
    else:
        raise AssertionError("t_loop=2 should be rejected")


def check_detector():
    stream, gt = lg.generate_synthetic(preset="benchmark")
    assert len(stream) == 600 and len(gt) > 0
    cfg = lg.Config.scenario()
    cfg.set("t_loop", "0.05")
    with tempfile.TemporaryDirectory() as tmp:
        det = lg.Detector(cfg, store_path=str(Path(tmp) / "ltm.db"))
        for image_id, descriptors in stream[:200]:
            report = det.process(image_id, descriptors)
            assert report["image_id"] == image_id
        assert det.wm_size > 0
        detections = det.detections()
        det.finish()
    point = lg.score(detections, gt)
    assert point["tp"] > 0 and point["precision"] > 0.9, point
    print(f"{len(detections)} closures in 200 images, precision {point['precision']:.3f}")


if __name__ == "__main__":
    check_similarity()
    check_likelihood()
    check_config()
    check_detector()
    print("python smoke test passed")
