#!/usr/bin/env python3
"""Smoke test for the decal_py extension module.

Locates the built cdylib (cargo build -p decal-py), imports it, and runs a
miniature end-to-end pass: data rendering, schedule and loss identities,
prompt grammar, then pretrain -> customize -> sample -> eval at a tiny scale.

Usage: python3 python/smoke_test.py [--skip-pipeline]
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_decal_py():
    for profile in ("release", "debug"):
        so = ROOT / "target" / profile / "libdecal_py.so"
        if so.exists():
            stage = Path(tempfile.mkdtemp(prefix="decal-py-"))
            shutil.copy(so, stage / "decal_py.so")
            sys.path.insert(0, str(stage))
            import decal_py  # noqa: E402

            return decal_py
    print("error: build the extension first: cargo build -p decal-py")
    sys.exit(1)


SUBJECT = {
    "subject_id": "smoke",
    "class_word": "dog",
    "shape_params": [0.12, 0.55, 0.83, 0.31, 0.47, 0.66, 0.28, 0.74],
    "is_living": True,
}

CONFIG = """
[run]
seed = 11

[data]
resolution = 32
corpus_classes = 5
corpus_per_class = 200

[model]
channels = [8, 16, 16]
attn_resolutions = [16, 8]
d_text = 16
time_dim = 16
mapper_hidden = 32

[pretrain]
steps = 60
batch_size = 4

[customize]
steps = 12
lr = 0.002
reg_set_size = 4
reg_steps = 8

[sample]
steps = 8
guidance = 3.0
n = 2
"""


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"  [{status}] {name}" + (f" ({detail})" if detail else ""))
    if not ok:
        sys.exit(1)


def main():
    skip_pipeline = "--skip-pipeline" in sys.argv
    d = import_decal_py()
    print(f"decal_py {d.version()}")

    print("concept rendering:")
    s1 = d.generate_concept_set(json.dumps(SUBJECT), 4, 7, 32)
    s2 = d.generate_concept_set(json.dumps(SUBJECT), 4, 7, 32)
    check("4 images", s1.n_images == 4)
    px1, shape = s1.pixels(0)
    px2, _ = s2.pixels(0)
    check("deterministic render", px1 == px2)
    check("pixel range", all(0.0 <= v <= 1.0 for v in px1))
    mask, (mh, mw) = s1.mask(0)
    check("binary mask", set(mask) <= {0.0, 1.0})
    meta = json.loads(s1.metadata_json(2))
    check("metadata has pose", "rotation" in meta["pose"])
    bgs = {json.loads(s1.metadata_json(i))["background"]["background_class"] for i in range(4)}
    check("distinct backgrounds", len(bgs) == 4, str(sorted(bgs)))
    filt, _ = s1.background_filtered(0, 0.5)
    c, h, w = shape
    blanked = sum(
        1
        for y in range(h)
        for x in range(w)
        if mask[y * w + x] == 0.0 and filt[y * w + x] == 0.5
    )
    outside = sum(1 for v in mask if v == 0.0)
    check("background filter blanks mask=0", blanked == outside)

    print("schedule:")
    sch = d.make_schedule(1000, "linear", 1e-4, 0.02)
    ab = sch.alpha_bars()
    check("alpha_bar_T < 0.01", ab[-1] < 0.01, f"{ab[-1]:.5f}")
    check("strictly decreasing", all(ab[i] < ab[i - 1] for i in range(1, len(ab))))
    z0 = [0.5] * 12
    zt = sch.q_sample(z0, (3, 2, 2), 100, [0.0] * 12)
    expect = 0.5 * math.sqrt(ab[100])
    check("q_sample eps=0", all(abs(v - expect) < 1e-12 for v in zt))

    print("losses:")
    a = [1.0] * 12
    b = [0.0] * 12
    check("ldm ones/zeros = 1", d.ldm_loss(a, b, (3, 2, 2)) == 1.0)
    check("ldm fixed point", d.ldm_loss(a, a, (3, 2, 2)) == 0.0)
    half = [1.0, 1.0, 0.0, 0.0]
    check(
        "masked half = 0.5",
        abs(d.masked_diffusion_loss(a, b, (3, 2, 2), half) - 0.5) < 1e-12,
    )
    _, _, _, total = d.total_loss(0.5, 0.3, 2.0, 1.0, 0.01)
    check("total 0.82", abs(total - 0.82) < 1e-12)

    print("prompts:")
    words = d.prompt_words("subject-pose-bg", "dog", 2)
    check(
        "template order",
        words == ["photo", "of", "a", "[V]", "dog", "with", "[P_2]", "pose", "in", "[B_2]", "background"],
        " ".join(words),
    )
    check("strip rule", d.strip_pseudo_words("a [V] dog on the beach") == "a dog on the beach")

    if skip_pipeline:
        print("pipeline skipped")
        return

    print("pipeline (tiny):")
    work = Path(tempfile.mkdtemp(prefix="decal-smoke-"))
    concept_dir = work / "concept"
    s1.save(str(concept_dir))
    base = work / "base.ckpt"
    loss = d.pretrain(CONFIG, str(base))
    check("pretrain ran", math.isfinite(loss), f"final loss {loss:.4f}")
    custom = work / "custom.ckpt"
    loss = d.customize(CONFIG, str(base), str(concept_dir), str(custom))
    check("customize ran", math.isfinite(loss), f"final loss {loss:.4f}")
    paths = d.sample(str(custom), "photo of a [V] dog with [P_1] pose", 2, 5, 8, 3.0, str(work / "samples"))
    check("sampled 2 images", len(paths) == 2 and all(Path(p).exists() for p in paths))
    paths2 = d.sample(str(custom), "photo of a [V] dog with [P_1] pose", 2, 5, 8, 3.0, str(work / "samples2"))
    b1 = Path(paths[0]).read_bytes()
    b2 = Path(paths2[0]).read_bytes()
    check("sampling deterministic", b1 == b2)
    report = json.loads(d.evaluate(str(custom), 3))
    check("report fields", all(k in report for k in ("clip_t", "clip_i", "clip_i_fg", "dino_i", "probe")))
    print(f"  report: clip_t={report['clip_t']:.4f} clip_i={report['clip_i']:.4f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
