"""Smoke test for the physeg Python extension.

Build the module and run this script:

    cargo build --release -p physeg-py --features extension-module
    cp target/release/libphyseg_py.so python/physeg.so
    python3 python/smoke.py
"""

import array
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import physeg  # noqa: E402


def check(name, ok):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    if not ok:
        raise SystemExit(1)


def patch(data, dims, origin, size, lead=0):
    nx, ny, nz = dims
    base = lead * nx * ny * nz
    out = []
    for z in range(origin[2], origin[2] + size[2]):
        for y in range(origin[1], origin[1] + size[1]):
            for x in range(origin[0], origin[0] + size[0]):
                out.append(data[base + x + nx * (y + ny * z)])
    return out


def main():
    v = physeg.mprage_signal(1000.0, 1.0, 900.0, 500.0, 1000.0)
    check("MPRAGE scalar", abs(v - 0.25449167034528605) < 1e-15)
    check("Ernst angle", abs(physeg.ernst_angle(1000.0, 50.0) - math.degrees(math.acos(math.exp(-0.05)))) < 1e-12)

    mpm = physeg.MultiParametricMap.phantom((20, 18, 16), "smoke")
    params = physeg.SequenceParams.mprage(900.0, 0.0, 1000.0)
    img, shape = physeg.simulate(mpm, params)
    check("simulate shape", list(shape) == [16, 18, 20] and len(img) == 20 * 18 * 16)

    session = physeg.AugmentationSession(mpm)
    a = session.batch("mprage-iod", 3, (8, 6, 4), seed=5, stream=1)
    b = session.batch("mprage-iod", 3, (8, 6, 4), seed=5, stream=1)
    check("batch determinism", a["intensity"] == b["intensity"] and a["params"] == b["params"])
    item = a["intensity"][: 8 * 6 * 4]
    p0 = physeg.SequenceParams.from_json(a["params"][0])
    full, _ = physeg.simulate(mpm, p0)
    check("batch item equals simulate-then-patch", list(item) == patch(full, mpm.dims, a["origin"], (8, 6, 4)))
    check("physics vector", a["physics_shape"] == (3, 3) and a["physics"][0] == 1.0)

    n = 27
    logits = array.array("d", [0.3] * (4 * n))
    sigma = array.array("d", [0.0] * (4 * n))
    target = bytes(i % 4 for i in range(n))
    total, per_voxel = physeg.attenuated_ce_loss(logits, sigma, target, (3, 3, 3), 4, 5)
    check("uniform logits give N ln 4", abs(total - n * math.log(4)) < 1e-12)
    check("stratification of identical maps", physeg.stratification_feature_loss([[1.0, 2.0]] * 3) == 0.0)

    w = physeg.wilcoxon_signed_rank([3, 4, 5, 6, 7, 8], [0] * 6)
    check("Wilcoxon n=6", w["p_value"] == 0.03125 and w["method"] == "Exact")
    check("Hazen IQR", physeg.calibrated_volume_bounds([1.0, 2.0, 3.0, 4.0])[3] == 2.0)
    check("CoV", abs(physeg.cov([1.0, 3.0]) - math.sqrt(2) / 2) < 1e-15)

    try:
        physeg.SequenceParams.spgr(50.0, 5.0, 200.0)
        check("bad flip angle raises", False)
    except physeg.PhysegError as e:
        check("bad flip angle raises", "fa_deg" in str(e))
    try:
        session.batch("mprage-iod", 1, (64, 6, 4))
        check("oversized patch raises", False)
    except physeg.PhysegError:
        check("oversized patch raises", True)


if __name__ == "__main__":
    main()
