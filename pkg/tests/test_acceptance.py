"""Acceptance suite: one test per release criterion, each printed as a
PASS/FAIL line in the terminal summary.

Covers scorer identity and speed, leaderboard reproduction, bit-exact blur
against a brute-force oracle, blur locality, finite-difference gradient
fidelity, a 16-instance masker overfit, span extraction against an LCS
oracle, format roundtrips with split counts, and CLI determinism."""

import json
import shutil
import time

import numpy as np

from dehate import attention, evaluate, masker as mk, pngio
from dehate.attention import BinaryMask, Heatmap
from dehate.cli import run
from dehate.manifest import (
    ManifestRow,
    load_manifest,
    save_manifest,
    validate_manifest,
)
from dehate.numerics import Tensor, backward, tensor_read, tensor_write
from dehate.redact import ImageRGB8, RedactionParams, anonymize, recover_mask
from dehate.textproc import (
    DEFAULT_WORD_BUDGET,
    HateSpan,
    build_prompt,
    extract_spans,
    normalize_word,
)

from acceptance_report import criterion
from graphgen import random_graph
from oracles import fd_gradients, ref_box_fill, ref_lcs_matched, rel_err
from test_masker import FD_EPS, params_as_f64, pick_stable_seed, twin_loss
from test_textproc import EXAMPLE_PROMPT, EXAMPLE_TWEET, spans_from_matched


# --- scoring ---------------------------------------------------------------


@criterion("scorer identity")
def test_truth_predictions_score_one(tmp_path):
    rng = np.random.default_rng(20240601)
    truth_dir, pred_dir = tmp_path / "truth", tmp_path / "pred"
    empty_dir = tmp_path / "empty"
    for d in (truth_dir, pred_dir, empty_dir):
        d.mkdir()
    rows = []
    for k in range(724):
        bits = rng.random((64, 64)) < 0.5
        bits[0, 0] = True  # keep every truth nonempty
        name = f"i{k:03d}.png"
        pngio.write_mask_bits(bits, truth_dir / name)
        shutil.copyfile(truth_dir / name, pred_dir / name)
        rows.append(ManifestRow(id=f"i{k:03d}", text="t", image="im.png",
                                split="test", mask=str(truth_dir / name)))
    start = time.perf_counter()
    report = evaluate.score(pred_dir, rows)
    elapsed = time.perf_counter() - start
    assert report.mean == 1.0
    assert all(v == 1.0 for v in report.per_instance.values())
    assert not report.missing and not report.errors
    assert elapsed < 1.0, f"scoring 724 masks took {elapsed:.3f}s"
    empty = evaluate.score(empty_dir, rows)
    assert empty.mean == 0.0
    assert len(empty.missing) == 724
    return f"mean {report.mean} in {elapsed:.3f}s; empty dir mean {empty.mean}"


FIXTURE_TEAMS = (
    ("UniteToModerate", 55),
    ("PaulJane", 51),
    ("Baseline (ours)", 49),
    ("Markans", 48),
    ("Sanskarfc", 47),
    ("rachitmodi", 44),
)


def grid_mask(flat_indices):
    bits = np.zeros(100, dtype=bool)
    bits[list(flat_indices)] = True
    return bits.reshape(10, 10)


@criterion("leaderboard fixture")
def test_leaderboard_ranks_fixture_teams(tmp_path):
    # truth holds pixels 0..59 of a 10x10 grid; a team predicting the first
    # k truth pixels plus all 40 non-truth pixels scores exactly k/100
    truth_path = tmp_path / "truth.png"
    pngio.write_mask_bits(grid_mask(range(60)), truth_path)
    rows = [ManifestRow(id="ex", text="t", image="im.png", split="test",
                        mask=str(truth_path))]
    reports = {}
    for team, k in FIXTURE_TEAMS:
        team_dir = tmp_path / team
        team_dir.mkdir()
        pred = grid_mask(list(range(k)) + list(range(60, 100)))
        pngio.write_mask_bits(pred, team_dir / "ex.png")
        reports[team] = evaluate.score(team_dir, rows)
        assert abs(reports[team].mean - k / 100) <= 0.005
    entries = evaluate.leaderboard(reports)
    assert [(e.rank, e.team, e.iou) for e in entries] == [
        (1, "UniteToModerate", 0.55),
        (2, "PaulJane", 0.51),
        (3, "Baseline (ours)", 0.49),
        (4, "Markans", 0.48),
        (5, "Sanskarfc", 0.47),
        (6, "rachitmodi", 0.44),
    ]
    assert evaluate.leaderboard_csv(entries) == (
        "rank,team,iou\n"
        "1,UniteToModerate,0.55\n"
        "2,PaulJane,0.51\n"
        "3,Baseline (ours),0.49\n"
        "4,Markans,0.48\n"
        "5,Sanskarfc,0.47\n"
        "6,rachitmodi,0.44\n")
    return "six teams ranked 0.55/0.51/0.49/0.48/0.47/0.44"


# --- blur ------------------------------------------------------------------


def ref_anonymize(pixels, values, params):
    """Per-pixel reimplementation: threshold, blackout, then exact-rational
    box averaging over the blacked-out snapshot."""
    h, w = values.shape
    step1 = np.zeros((h, w), dtype=bool)
    black = pixels.copy()
    for y in range(h):
        for x in range(w):
            if float(values[y, x]) >= params.tau_black:
                step1[y, x] = True
                black[y, x] = 0
    step2 = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            step2[y, x] = float(values[y, x]) >= params.tau_avg
    return ref_box_fill(black, step2, params.box_radius), step1


def random_redaction(rng, h, w, radius):
    pixels = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    values = rng.random((h, w), dtype=np.float32)
    k1, k2 = sorted(int(k) for k in rng.integers(13, 46, size=2))
    params = RedactionParams(tau_black=k1 / 64, tau_avg=k2 / 64,
                             box_radius=radius)
    return ImageRGB8(pixels), Heatmap(Tensor(values)), params


@criterion("blur oracle equivalence")
def test_blur_matches_bruteforce_oracle():
    rng = np.random.default_rng(88)
    for trial in range(100):
        if trial < 2:
            h = w = 64
            radius = trial + 1
        else:
            h, w = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            radius = int(rng.integers(1, 5))
        img, heat, params = random_redaction(rng, h, w, radius)
        out, step1 = anonymize(img, heat, params)
        want, want_step1 = ref_anonymize(img.pixels, heat.values.array, params)
        assert np.array_equal(out.pixels, want), f"trial {trial}"
        assert np.array_equal(step1.bits, want_step1), f"trial {trial}"
    white5 = ImageRGB8(np.full((5, 5, 3), 255, dtype=np.uint8))
    center = np.zeros((5, 5), dtype=np.float32)
    center[2, 2] = 1.0
    out, _ = anonymize(white5, Heatmap(Tensor(center)),
                       RedactionParams(box_radius=1))
    assert out.pixels[2, 2].tolist() == [227, 227, 227]
    white3 = ImageRGB8(np.full((3, 3, 3), 255, dtype=np.uint8))
    corner = np.zeros((3, 3), dtype=np.float32)
    corner[0, 0] = 1.0
    out, _ = anonymize(white3, Heatmap(Tensor(corner)),
                       RedactionParams(box_radius=1))
    assert out.pixels[0, 0].tolist() == [191, 191, 191]
    return "100 random triples bit-exact; goldens 227 and 191"


@criterion("blur locality")
def test_blur_touches_only_thresholded_pixels():
    rng = np.random.default_rng(99)
    for _ in range(100):
        h, w = int(rng.integers(2, 41)), int(rng.integers(2, 41))
        img, heat, params = random_redaction(rng, h, w,
                                             int(rng.integers(1, 6)))
        out, step1 = anonymize(img, heat, params)
        step2 = attention.binarize(heat, params.tau_avg)
        union = step1.bits | step2.bits
        assert np.array_equal(out.pixels[~union], img.pixels[~union])
        recovered = recover_mask(img, out, 0)
        assert not np.any(recovered.bits & ~union)
    return "100 runs: outside-union pixels untouched, recovery stays inside"


# --- gradients ---------------------------------------------------------------


@criterion("gradient fidelity")
def test_gradients_match_finite_differences():
    rng = np.random.default_rng(424242)
    graph_worst = 0.0
    for _ in range(50):
        g, inputs, loss = random_graph(rng)
        grads = backward(g, inputs, loss)
        fd = fd_gradients(g, {i: t.array for i, t in inputs.items()}, loss)
        for i, ref in fd.items():
            for a, f in zip(grads[i].array.ravel().tolist(),
                            ref.ravel().tolist()):
                graph_worst = max(graph_worst, rel_err(a, f))
    assert graph_worst < 1e-4, f"random graphs: {graph_worst}"

    model, batch, inputs64, y64 = pick_stable_seed()
    params64 = params_as_f64(model)
    _, grads = mk.loss_and_gradients(model, [batch], "bce")
    mini_worst = 0.0
    for name in sorted(grads):
        flat_grad = grads[name].reshape(-1)
        flat = params64[name].reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + FD_EPS
            hi = twin_loss(params64, 2, inputs64, y64, "bce")
            flat[idx] = saved - FD_EPS
            lo = twin_loss(params64, 2, inputs64, y64, "bce")
            flat[idx] = saved
            fd_val = (hi - lo) / (2 * FD_EPS)
            mini_worst = max(mini_worst, rel_err(float(flat_grad[idx]), fd_val))
    assert mini_worst < 1e-4, f"miniature model: {mini_worst}"
    return (f"50 graphs max rel err {graph_worst:.2e}; "
            f"miniature model {mini_worst:.2e}")


# --- overfit -----------------------------------------------------------------


OVERFIT_COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 40),
}
OVERFIT_CORNERS = ((0, 0), (4, 20), (16, 4), (20, 20))


def overfit_instances(size):
    """16 images: one 12x12 colored rectangle on gray, named by its color."""
    instances = []
    for name, rgb in OVERFIT_COLORS.items():
        for y0, x0 in OVERFIT_CORNERS:
            pixels = np.full((size, size, 3), 128, dtype=np.uint8)
            bits = np.zeros((size, size), dtype=bool)
            pixels[y0:y0 + 12, x0:x0 + 12] = rgb
            bits[y0:y0 + 12, x0:x0 + 12] = True
            instances.append((ImageRGB8(pixels), HateSpan(0, 1, (name,)),
                              BinaryMask(bits)))
    return instances


def mean_iou(model, instances):
    total = 0.0
    for img, span, truth in instances:
        pred, _ = mk.predict(model, img, [span])
        total += evaluate.iou(pred, truth)
    return total / len(instances)


@criterion("toy overfit")
def test_sixteen_rectangles_overfit():
    start = time.perf_counter()
    config = mk.MaskerConfig()
    model = mk.init(config)
    checksum = mk.frozen_checksum(model)
    instances = overfit_instances(config.image_size)
    batch = mk.TrainBatch(
        images=[img for img, _, _ in instances],
        span_embeddings=[[mk.embed_span(span, config.span_embed_dim)]
                         for _, span, _ in instances],
        truth_masks=[truth for _, _, truth in instances])
    # gentle steps through the rough early landscape, then larger ones
    mk.train(model, [batch], steps=200, lr=0.5)
    steps = 200
    iou = mean_iou(model, instances)
    while iou < 0.9 and steps < 2000:
        mk.train(model, [batch], steps=100, lr=4.0)
        steps += 100
        iou = mean_iou(model, instances)
    elapsed = time.perf_counter() - start
    assert iou >= 0.9, f"mean IoU {iou:.3f} after {steps} steps"
    assert steps <= 2000
    assert mk.frozen_checksum(model) == checksum
    assert elapsed < 300.0, f"took {elapsed:.1f}s"
    return (f"mean IoU {iou:.3f} after {steps} steps in {elapsed:.1f}s; "
            f"frozen encoder unchanged")


# --- spans -------------------------------------------------------------------


@criterion("span oracle")
def test_spans_match_lcs_oracle_and_template():
    rng = np.random.default_rng(606)
    vocab = ["kick", "them", "out", "now", "go", "away", "stop", "this"]
    decorations = ["{}", "{},", "{}!", "#{}", "({})", "{}..."]
    for trial in range(100):
        n = int(rng.integers(1, 14))
        base = [vocab[int(i)] for i in rng.integers(0, len(vocab), size=n)]
        hateful = []
        for word in base:
            deco = decorations[int(rng.integers(0, len(decorations)))]
            if rng.random() < 0.3:
                word = word.upper()
            hateful.append(deco.format(word))
        if trial % 2 == 0:
            m = int(rng.integers(1, 14))
            normalized = [vocab[int(i)]
                          for i in rng.integers(0, len(vocab), size=m)]
        else:
            normalized = [w for w in base if rng.random() >= 0.3]
            if not normalized:
                normalized = [base[0]]
        got = extract_spans(" ".join(hateful), " ".join(normalized))
        matched = ref_lcs_matched([normalize_word(w) for w in hateful],
                                  [normalize_word(w) for w in normalized])
        expected = spans_from_matched(hateful, matched)
        assert [(s.start, s.end, s.words) for s in got] == expected, (
            f"trial {trial}: {hateful} vs {normalized}")
    spec = build_prompt(EXAMPLE_TWEET, [], word_budget=DEFAULT_WORD_BUDGET)
    assert spec.full_text.encode("utf-8") == EXAMPLE_PROMPT.encode("utf-8")
    assert spec.truncated is False
    return "100 random pairs match; example prompt byte-exact"


# --- formats -----------------------------------------------------------------


@criterion("format roundtrips")
def test_formats_roundtrip_and_split_counts(tmp_path, capsys):
    rng = np.random.default_rng(515)
    shapes = [(), (1,), (7,), (3, 4), (2, 3, 4), (2, 1, 3, 2),
              (2, 2, 1, 2, 1, 2)]
    for i, shape in enumerate(shapes):
        t = Tensor(rng.standard_normal(shape).astype(np.float32)
                   if shape else np.float32(rng.standard_normal()))
        path = tmp_path / f"t{i}.dht"
        tensor_write(t, path)
        back = tensor_read(path)
        assert back.dims == t.dims
        assert back.array.tobytes() == t.array.tobytes()
        again = tmp_path / f"t{i}b.dht"
        tensor_write(back, again)
        assert again.read_bytes() == path.read_bytes()

    rows = [
        ManifestRow(
            id=f"r{k}", text=f"text {k} ✓", image=f"img{k}.png",
            split="train" if k % 3 else "test",
            normalized_text=f"norm {k}" if k % 2 else None,
            blurred=f"b{k}.png" if k % 4 == 0 else None,
            mask=f"m{k}.png" if k % 3 == 0 else None,
            attention=(f"a{k}.dht", f"a{k}.json") if k % 5 == 0 else None)
        for k in range(30)
    ]
    mpath = tmp_path / "rt.jsonl"
    save_manifest(rows, mpath)
    assert load_manifest(mpath) == rows
    save_manifest(load_manifest(mpath), tmp_path / "rt2.jsonl")
    assert (tmp_path / "rt2.jsonl").read_bytes() == mpath.read_bytes()

    big = ([ManifestRow(id=f"tr{k}", text="t", image="i.png", split="train")
            for k in range(1687)]
           + [ManifestRow(id=f"te{k}", text="t", image="i.png", split="test",
                          mask="m.png") for k in range(724)])
    summary = validate_manifest(big)
    assert (summary["train"], summary["test"], summary["total"]) == \
        (1687, 724, 2411)
    assert summary["problems"] == []
    big_path = tmp_path / "big.jsonl"
    save_manifest(big, big_path)
    assert run(["manifest", "validate", "--manifest", str(big_path)]) == 0
    assert capsys.readouterr().out == "train 1687\ntest 724\ntotal 2411\n"
    return "tensors and manifests bit-exact; split counts 1687/724/2411"


# --- CLI determinism ----------------------------------------------------------


MINI_FLAGS = ["--image-size", "8", "--patch-size", "4",
              "--embed-dim", "4", "--span-embed-dim", "4"]


def build_cli_world(base):
    """Shared inputs for exercising every subcommand."""
    rng = np.random.default_rng(2468)
    fix = base / "fix"
    fix.mkdir()
    maps = rng.random((2, 1, 2, 1, 4, 4)).astype(np.float32)
    tensor_write(Tensor(maps), fix / "stack.dht")
    (fix / "stack.json").write_text(
        json.dumps({"tokens": ["kick", "them"], "image_h": 16,
                    "image_w": 16}), encoding="utf-8")
    pngio.write_rgb8(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8),
                     fix / "img.png")
    pred = fix / "pred"
    pred.mkdir()
    rows = []
    for i in range(3):
        img_path = fix / f"m{i}.png"
        pngio.write_rgb8(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8),
                         img_path)
        bits = np.zeros((8, 8), dtype=bool)
        bits[:3 + i] = True
        mask_path = fix / f"mask{i}.png"
        pngio.write_mask_bits(bits, mask_path)
        shutil.copyfile(mask_path, pred / f"x{i}.png")
        rows.append({"id": f"x{i}", "text": f"kick them out {i}",
                     "normalized_text": "out", "image": str(img_path),
                     "mask": str(mask_path),
                     "split": "train" if i < 2 else "test"})
    with open(fix / "man.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    for team, src in (("alpha", "mask2.png"), ("beta", "mask0.png")):
        team_dir = fix / "teams" / team
        team_dir.mkdir(parents=True)
        shutil.copyfile(fix / src, team_dir / "x2.png")
    return fix


def exercise_cli(fix, outdir, capsys):
    """Run every subcommand, returning {artifact name: bytes}."""
    outdir.mkdir()
    artifacts = {}

    def go(label, argv):
        code = run(argv)
        captured = capsys.readouterr()
        assert code == 0, f"{label} exited {code}: {captured.err}"
        artifacts[f"stdout:{label}"] = captured.out.encode("utf-8")

    man = str(fix / "man.jsonl")
    go("heatmap", ["heatmap", "--stack", str(fix / "stack.dht"),
                   "--meta", str(fix / "stack.json"),
                   "--out-png", str(outdir / "h.png"),
                   "--out-tensor", str(outdir / "h.dht")])
    go("mask", ["mask", "--heatmap", str(outdir / "h.dht"),
                "--out", str(outdir / "m.png")])
    go("blur", ["blur", "--image", str(fix / "img.png"),
                "--heatmap", str(outdir / "h.dht"),
                "--out-image", str(outdir / "blur.png"),
                "--out-mask", str(outdir / "s1.png")])
    go("recover-mask", ["recover-mask", "--original", str(fix / "img.png"),
                        "--blurred", str(outdir / "blur.png"),
                        "--out", str(outdir / "rec.png")])
    go("spans", ["spans", "--manifest", man,
                 "--out", str(outdir / "spans.jsonl")])
    go("prompt", ["prompt", "--manifest", man,
                  "--out", str(outdir / "prompt.jsonl")])
    go("score", ["score", "--pred", str(fix / "pred"), "--manifest", man,
                 "--out", str(outdir / "report.json")])
    go("leaderboard", ["leaderboard", "--teams", str(fix / "teams"),
                       "--manifest", man, "--out", str(outdir / "board.csv")])
    go("train", ["train", "--manifest", man, "--out", str(outdir / "ckpt"),
                 "--steps", "6", "--lr", "0.5",
                 "--log", str(outdir / "log.json")] + MINI_FLAGS)
    go("predict", ["predict", "--model", str(outdir / "ckpt"),
                   "--manifest", man, "--out", str(outdir / "preds"),
                   "--split", "all"])
    go("gradcheck", ["gradcheck", "--trials", "3", "--seed", "11"])
    go("manifest-validate", ["manifest", "validate", "--manifest", man])
    for path in sorted(outdir.rglob("*")):
        if path.is_file():
            artifacts[str(path.relative_to(outdir))] = path.read_bytes()
    return artifacts


@criterion("determinism")
def test_cli_outputs_bit_identical_across_runs(tmp_path, capsys, monkeypatch):
    fix = build_cli_world(tmp_path)
    monkeypatch.delenv("DEHATE_THREADS", raising=False)
    first = exercise_cli(fix, tmp_path / "run1", capsys)
    second = exercise_cli(fix, tmp_path / "run2", capsys)
    monkeypatch.setenv("DEHATE_THREADS", "4")
    third = exercise_cli(fix, tmp_path / "run3", capsys)
    assert first.keys() == second.keys() == third.keys()
    diffs = [k for k in first if not first[k] == second[k] == third[k]]
    assert not diffs, f"outputs differ: {diffs}"
    return (f"12 subcommands, {len(first)} artifacts identical across "
            f"reruns and thread counts")
