"""Smoke test for the bsmamba Python extension.

Build first:  pip install --no-build-isolation -e crates/py
"""

import random

import bsmamba


def image(h, w, scale, seed):
    rng = random.Random(seed)
    return [[[scale * rng.random() for _ in range(w)] for _ in range(h)] for _ in range(3)]


def main():
    low = image(20, 24, 0.2, 1)

    model = bsmamba.Model(seed=3)
    assert model.param_count < 1_000_000, model.param_count
    out, scans = model.enhance(low)
    assert scans == 8, scans
    assert len(out) == 3 and len(out[0]) == 20 and len(out[0][0]) == 24
    assert all(0.0 <= v <= 1.0 for plane in out for row in plane for v in row)

    vanilla = bsmamba.Model("composition = vanilla_ss2d\n")
    assert vanilla.enhance(low)[1] == 16

    score = bsmamba.luma_score(low)
    fwd, inv = bsmamba.sort_plan(score)
    flat = [v for row in score for v in row]
    ordered = [flat[i] for i in fwd]
    assert ordered == sorted(flat)
    assert [ordered[i] for i in inv] == flat
    const_fwd, _ = bsmamba.sort_plan([[0.5] * 4 for _ in range(3)])
    assert const_fwd == list(range(12))

    hist = bsmamba.histogram_score(low)
    assert all(0.0 <= v <= 1.0 for row in hist for v in row)

    assert bsmamba.semantic_ranges(2) == [(0.0, 1 / 3), (1 / 3, 2 / 3), (2 / 3, 1.0)]
    assert bsmamba.psnr(low, low) > bsmamba.psnr(low, out)
    assert abs(bsmamba.ssim(low, low) - 1.0) < 1e-12

    try:
        bsmamba.Model("composition = diagonal\n")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    failed = [row for row in bsmamba.run_selftest() if not row[1]]
    for name, _, detail, _ in failed:
        print("FAIL", name, detail)
    assert not failed
    print("python smoke test ok")


if __name__ == "__main__":
    main()
