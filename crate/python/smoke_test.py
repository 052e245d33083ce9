"""Smoke test for the rcfuse Python module.

Build and install first:  pip install --no-build-isolation -e crates/python
"""
import pathlib
import sys

import rcfuse

MODELS = pathlib.Path(__file__).resolve().parent.parent / "models"


def main():
    base = rcfuse.Model.load(str(MODELS / "yolov2_baseline.json"))
    assert base.param_count() == 48_242_528
    assert base.input == (1280, 720, 3)
    assert len(base) == 22

    converted = base.convert()
    report = base.conversion_report(converted)
    assert report["after"]["params"] == converted.param_count() < base.param_count()

    rc = rcfuse.Model.load(str(MODELS / "rc_yolov2_like.json"))
    t = rcfuse.traffic(rc)
    assert t["feature_reduction"] >= 0.90, t["feature_reduction"]
    vs = rcfuse.traffic(rc, baseline=base)
    assert vs["baseline"]["feature_bytes"] == 88_276_400

    toy = rcfuse.Model.load(str(MODELS / "toy_rcnet.json"))
    assert rcfuse.groups(toy, 100 * 1024, 0.5) == [[0, 1, 2], [3, 4, 5]]
    pruned, iters = rcfuse.rcnet(
        toy, 100 * 1024, gammas=str(MODELS / "toy_rcnet_gammas.csv"), rescale_first=0
    )
    assert iters[1]["group_sizes_before"] == [124 * 1024, 76 * 1024]
    assert all(s <= 100 * 1024 for s in iters[-1]["group_sizes_after"])

    sweep = rcfuse.sweep(rc, [k * 1024 for k in (50, 100, 200, 300)])
    bw = [p["bandwidth"] for p in sweep["points"]]
    assert bw == sorted(bw, reverse=True)

    assert abs(rcfuse.dram_energy(585e6) - 327.6) < 1e-9
    assert abs(rcfuse.peak_gops() - 460.8) < 1e-9
    assert rcfuse.writemask_map(9, 11, 20) == (3, 4, 1)

    report, final = rcfuse.pipeline(toy, seed=3)
    assert report["final_model"]["params"] == final.param_count()
    assert rcfuse.perf(final)["total_cycles"] > 0

    try:
        rcfuse.Model.from_json("{")
    except rcfuse.ParseError:
        pass
    else:
        raise AssertionError("malformed model accepted")
    try:
        rcfuse.rcnet(toy, 1000)
    except rcfuse.InfeasibleError:
        pass
    else:
        raise AssertionError("infeasible budget accepted")

    print("rcfuse python smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
