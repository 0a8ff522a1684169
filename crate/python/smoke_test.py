#!/usr/bin/env python3
"""Smoke test for the migs Python extension.

Builds nothing itself: run `cargo build -p migs-py` first, then
`python3 python/smoke_test.py`. The built cdylib is copied next to a
temporary directory under the import name `migs` and exercised end to end
on a tiny freshly-trained model.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_migs():
    candidates = [
        REPO / "target" / "debug" / "libmigs.so",
        REPO / "target" / "release" / "libmigs.so",
        REPO / "target" / "debug" / "libmigs.dylib",
        REPO / "target" / "release" / "libmigs.dylib",
    ]
    built = next((p for p in candidates if p.is_file()), None)
    if built is None:
        sys.exit("no built extension found; run `cargo build -p migs-py` first")
    stage = Path(tempfile.mkdtemp(prefix="migs-py-"))
    shutil.copy(built, stage / "migs.so")
    sys.path.insert(0, str(stage))
    import migs

    return migs


def main():
    migs = import_migs()
    checks = 0

    def ok(cond, what):
        nonlocal checks
        checks += 1
        if not cond:
            sys.exit(f"FAIL: {what}")
        print(f"ok: {what}")

    # Schedule endpoints and conservation.
    ok(migs.gamma("cosine", 0.0) == 1.0, "gamma(0) == 1")
    ok(migs.gamma("cosine", 1.0) == 0.0, "gamma(1) == 0")
    ok(abs(migs.gamma("cosine", 0.5) - math.cos(math.pi / 4)) < 1e-12, "cosine midpoint")
    for kind in ("cosine", "linear"):
        for length, n in ((16, 8), (17, 5), (64, 16)):
            total = sum(migs.unmask_count(kind, length, i, n) for i in range(1, n + 1))
            ok(total == length, f"{kind} unmask counts sum to L ({length=}, {n=})")

    # Budget plan and extrapolation hand examples.
    ok(migs.full_step_indices(8, 4) == [1, 3, 5, 7], "full_step_indices(8, 4)")
    ok(migs.full_step_indices(8, 8) == list(range(1, 9)), "full budget plan is every step")
    ok(migs.taylor_extrapolate([[[1.0]], [[3.0]]], 1) == [[5.0]], "order-1 extrapolation")
    ok(migs.taylor_extrapolate([[[0.0]], [[1.0]], [[3.0]]], 2) == [[6.0]], "order-2 extrapolation")
    try:
        migs.taylor_extrapolate([[[1.0]]], 1)
        sys.exit("FAIL: order-1 with a single history entry should raise")
    except ValueError:
        ok(True, "insufficient history raises ValueError")

    # A tiny trained model: determinism and the B = N degeneracy.
    base = migs.BaseModel.fresh(7)
    init_ce, final_ce = base.train(60, seed=7)
    ok(final_ce < init_ce, f"training reduces CE ({init_ce:.3f} -> {final_ce:.3f})")
    ok(base.num_params() > 0 and base.l > 0, "base model reports its shape")

    a = migs.generate(base, n=8, seed=42, class_id=1)
    b = migs.generate(base, n=8, seed=42, class_id=1)
    ok(a["tokens"] == b["tokens"], "same seed reproduces the sample")
    ok(a["num_base_calls"] == 8, "vanilla run calls the base once per step")
    c = migs.generate(base, n=8, seed=43, class_id=1)
    ok(a["tokens"] != c["tokens"], "different seed changes the sample")

    shortcut = migs.ShortcutModel.fresh(base, 0)
    ok(shortcut.num_params() < base.num_params(), "shortcut is smaller than the base")
    full = migs.generate(base, n=8, seed=42, class_id=1, budget=8, shortcut=shortcut)
    ok(full["tokens"] == a["tokens"], "B = N matches the vanilla sampler")

    fast = migs.generate(base, n=8, seed=42, class_id=1, budget=4, shortcut=shortcut)
    ok(fast["num_base_calls"] == 4, "budget bounds the base-call count")
    ok(fast["modes"].count("full") == 4, "trace shows 4 full steps")

    # Trajectory round-trip through a file plus a quick fit.
    with tempfile.TemporaryDirectory(prefix="migs-trj-") as d:
        recs = []
        for s in range(6):
            path = Path(d) / f"{s}.mstrj"
            migs.generate(base, n=8, seed=100 + s, class_id=s % 4, record_path=str(path))
            recs.append(migs.Trajectory.load(str(path)))
        ok(recs[0].num_steps == 8 and recs[0].seed == 100, "recorded trajectory metadata")
        ok(recs[0].num_pairs() >= 1, "trajectory yields training pairs")
        ok(len(recs[0].tokens(7)) == base.l, "final step is a full sequence")

        report = shortcut.train(recs, steps=15, seed=0)
        ok(report["final"] <= report["init"], "shortcut fit does not regress")
        ok("cache_reuse" in report and "taylor1" in report, "report carries baselines")

        ckpt = Path(d) / "s.mslb"
        shortcut.save(str(ckpt))
        again = migs.ShortcutModel.load(str(ckpt))
        ok(again.num_params() == shortcut.num_params(), "shortcut checkpoint round-trip")

    print(f"\nall {checks} checks passed")


if __name__ == "__main__":
    main()
