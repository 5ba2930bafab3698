"""Smoke test for the cloudflow Python bindings.

Build the extension first:

    cargo build --release -p cloudflow-py --features extension-module

The script imports ``cloudflow_py`` if it is installed, otherwise it loads
the freshly built shared library from ``target/release``.
"""

import importlib.util
import json
import math
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import cloudflow_py

        return cloudflow_py
    except ImportError:
        pass
    for name in ("libcloudflow_py.so", "libcloudflow_py.dylib", "cloudflow_py.dll"):
        lib = ROOT / "target" / "release" / name
        if lib.exists():
            spec = importlib.util.spec_from_file_location("cloudflow_py", lib)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("cloudflow_py not found; build it with --features extension-module")


def wave(rows, cols, shift):
    return [
        [280.0 + 3.0 * math.sin(0.3 * (j - shift)) + 2.0 * math.cos(0.25 * i) for j in range(cols)]
        for i in range(rows)
    ]


def main():
    cf = load()
    print("cloudflow_py", cf.__version__)

    # two temperature populations
    temps = [[250.0 + (j % 2) * 30.0 + 0.1 * i for j in range(20)] for i in range(16)]
    fit = cf.fit_bemm(temps, 2, seed=1)
    assert len(fit["alpha"]) == 2 and abs(sum(fit["prior"]) - 1.0) < 1e-9
    assert all(b >= a - 1e-9 for a, b in zip(fit["trace"], fit["trace"][1:]))

    u, v = cf.optical_flow(wave(40, 50, 0.0), wave(40, 50, 1.0))
    mid = sorted(row[25] for row in u[10:30])[10]
    assert abs(mid - 1.0) < 0.1, mid
    assert len(v) == 40

    sel = cf.select_changes(wave(40, 50, 0.0), wave(40, 50, 1.0), 0.95)
    assert 0 < sum(map(sum, sel)) < 40 * 50

    pts = [(x * 3.0, y * 3.0) for x in range(8) for y in range(6)]
    vel = [(2.0, -1.0)] * len(pts)
    field = cf.fit_field(pts, vel, 18, 24)
    assert abs(field["u"][9][12] - 2.0) < 0.25 and abs(field["v"][9][12] + 1.0) < 0.25

    with tempfile.TemporaryDirectory() as tmp:
        manifest = cf.synth(json.dumps({"n_frames": 3}), tmp)
        rows = cf.run(manifest, str(Path(tmp) / "out"), "seed = 2")
        assert [r["frame"] for r in rows] == [1, 2]
        assert all(abs(r["speed"] - 8.0) < 1.6 for r in rows), rows
        svgs = cf.plot(str(Path(tmp) / "out" / "results.csv"), str(Path(tmp) / "plots"))
        assert len(svgs) == 2

    try:
        cf.fit_bemm([[1.0, 2.0], [3.0]], 2)
    except ValueError:
        pass
    else:
        raise AssertionError("ragged input accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
