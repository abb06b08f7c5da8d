"""Smoke test for the cmma extension module.

Build first, e.g. `maturin develop -m crates/py/Cargo.toml`, or copy the
cdylib from `cargo build -p cmma-py --release --features extension-module`
next to this file as cmma.so.
"""
import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import cmma


def check(name, cond):
    print(("PASS " if cond else "FAIL ") + name)
    return cond


def main():
    ok = True

    plan = cmma.ris_sample(73, 6, 3)
    ok &= check("ris plan", len(plan["indices"]) == 6 and all(1 <= i <= 73 for i in plan["indices"]))
    ok &= check("ris reproducible", cmma.ris_sample(73, 6, 3) == plan)
    ok &= check("eval sample", len(cmma.eval_sample(24, 6)) == 6)

    eye = [[1.0, 0.0], [0.0, 1.0]]
    same = [[0.5, 0.5], [0.5, 0.5]]
    ok &= check("hellinger", abs(cmma.hellinger_distance([1, 0], [0, 1]) - 1.0) < 1e-12)
    ok &= check("diversity extremes", abs(cmma.diversity_loss(eye)) < 1e-9)
    uniform = [[0.25] * 4 for _ in range(2)]
    ok &= check("concentration uniform", abs(cmma.concentration_loss(uniform) - 2 * math.log(2)) < 1e-9)
    shape, vals = cmma.concentration_matrix(uniform)
    ok &= check("concentration matrix rows", shape == [2, 2] and all(abs(v - 0.5) < 1e-12 for v in vals))
    ok &= check("diversity identical", abs(cmma.diversity_loss(same) - 2.0) < 1e-9)

    q = [[0.0, 0.0], [1.0, 1.0]]
    dist = cmma.pairwise_distances(q, q)
    ok &= check("distances", abs(dist[0][1] - math.sqrt(2.0)) < 1e-12 and dist[0][0] == 0.0)
    items = [(0, 0, 0), (1, 0, 1)]
    curve = cmma.cmc_curve(dist, items, items, False, 2)
    ok &= check("cmc", len(curve) == 2)

    tiny = {"input_height": 8, "input_width": 8, "stage_widths": [4, 6], "stage_strides": [2, 2],
            "tap1": 0, "tap2": 1, "mam2": True, "k": 2, "mam_widths": [2, 3]}
    names = cmma.Model(3, 0, json.dumps(tiny)).parameter_names()
    ok &= check("parameters", "classifier.weight" in names and "mam1.inner_weight" in names)
    names = cmma.Model(3, 0, json.dumps(tiny), "baseline").parameter_names()
    ok &= check("baseline has no attention", not any(n.startswith("mam") for n in names))

    data = cmma.Dataset(identities=6, clips_per_identity=2, frames_per_clip=6, seed=1)
    ok &= check("dataset size", len(data) == 12)
    video, ident, cam = data.clips()[0]
    shape, pixels = data.clip(video, [1, 2])
    ok &= check("clip tensor", shape[0] == 2 and len(pixels) == math.prod(shape))

    full = cmma.Model(len(data.train_identities), 0)
    emb, logits, att = full.forward(shape, pixels)
    ok &= check("forward", len(logits) == len(data.train_identities) and len(att) == 2)
    s, a = att[0]
    cells = s[2] * s[3]
    ok &= check("attention normalized", abs(sum(a[:cells]) - 1.0) < 1e-6)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.cmmc")
        full.save(path)
        back = cmma.Model.load(path)
        ok &= check("checkpoint round trip", back.parameter_names() == full.parameter_names())

    report = full.evaluate(data, 2)
    ok &= check("evaluate", 0.0 <= report["rank1"] <= 1.0 and "mAP" in report)

    print("all passed" if ok else "some checks failed")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
