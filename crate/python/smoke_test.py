"""Smoke test for the Python bindings.

Builds the extension if needed, copies it next to a temporary package path as
agent_detr.so and exercises the main entry points.
"""

import json
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    subprocess.run(["cargo", "build", "--release", "-q", "-p", "agent-detr-py"], cwd=ROOT, check=True)
    lib = ROOT / "target" / "release" / "libagent_detr_py.so"
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "agent_detr.so")
    sys.path.insert(0, str(tmp))
    import agent_detr

    return agent_detr


def main():
    ad = load()

    e = ad.sinusoidal_embed(0.3, 0.7, 64)
    assert len(e) == 64 and all(math.isfinite(v) for v in e)

    box = (0.4, 0.6, 0.2, 0.3)
    assert ad.agent_points(box, "agent-unnormalized", 1, [(0.0, 0.0)]) == [(0.4, 0.6)]
    left = ad.agent_points(box, "agent-unnormalized", 1, [(-1.0, 0.0)])[0]
    assert left == (0.4 - 0.1, 0.6)
    assert len(ad.agent_points(box, "center", 8)) == 8
    try:
        ad.agent_points(box, "agent-fixed-grid", 4)
    except ValueError:
        pass
    else:
        raise AssertionError("fixed grid with 4 heads accepted")

    plain = ad.wh_modulate(1.5, -0.25, "off", 64)
    assert ad.wh_modulate(1.5, -0.25, "original", 64, 0.3, 0.2, 0.3, 0.2) == plain
    assert ad.wh_modulate(1.5, -0.25, "scale-free", 64, 0.5, 0.5) == plain

    assert ad.walker_param_count(256, 8) == 4112
    assert ad.iou(box, box) == 1.0
    assert ad.giou((0.1, 0.1, 0.1, 0.1), (0.9, 0.9, 0.1, 0.1)) < 0.0

    cost = [[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]
    pairs, total = ad.hungarian(cost)
    assert total == 5.0 and total == ad.brute_force(cost)[1]
    assert sorted(p for p, _ in pairs) == [0, 1, 2]

    config = json.loads(ad.mini_config())
    config["epochs"] = 1
    report = json.loads(ad.train(json.dumps(config)))
    assert len(report["curve"]) == 1
    assert 0.0 <= report["final_eval"]["mean_iou"] <= 1.0
    assert report["final_eval"]["walker"]["mode"] == "agent-unnormalized"
    assert "agent-noscale" in ad.REF_MODES

    print("python smoke test passed")


if __name__ == "__main__":
    main()
