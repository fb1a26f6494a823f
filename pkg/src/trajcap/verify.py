"""Self-checks behind ``t2c verify``: shapes, gradients, metric oracles, golden digests."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from trajcap.captioner import DecoderBlock, QFormerBlock
from trajcap.dataset import (
    generate_pairs, generate_standard, render_camera_image, scene_from_dict, scene_to_dict,
)
from trajcap.encoders import (
    CrossAttentionFusion, EncoderConfig, ImageEncoder, fused_shape, paper_concat_shape, token_count,
)
from trajcap.geometry import CameraModel, load_calibration, load_plan, save_calibration, save_plan
from trajcap.metrics import bleu4, rouge_l, ROUGE_BETA
from trajcap.nn import SelfAttentionBlock
from trajcap.raster import overlay, render_trajectory_image
from trajcap.tensor import Tensor, cross_entropy, grad_check, tsum

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-12
FIXTURE_TOL = 1e-4
N_GOLDEN = 10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<16} {self.detail}  ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failed check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - t)


# --- shapes --------------------------------------------------------------------------------

def shape_contract() -> tuple[bool, str]:
    paper = paper_concat_shape()
    n = token_count(64, 16)
    toy = fused_shape("concat", n, n, 64)
    ok = paper == (514, 1408) and toy == (34, 64) and n == 17
    return ok, f"paper concat {paper}, toy concat {toy}"


# --- gradients -----------------------------------------------------------------------------

def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def block_errors(seed: int) -> dict[str, float]:
    """grad_check of every trainable block on tiny shapes; one fresh init per seed."""
    rng = np.random.default_rng(seed)
    d, h = 8, 2
    errs = {}

    enc = ImageEncoder(rng, EncoderConfig(image_size=4, patch=2, dim=d, layers=1, heads=h))
    r = _rand(rng, 1, 5, d)
    errs["patch_embed"] = max(
        grad_check(lambda t: tsum(enc.forward_patches(t) * r), _rand(rng, 1, 4, 12)),
        grad_check(lambda t: tsum(enc.forward_patches(Tensor(np.ones((1, 4, 12)))) * r),
                   enc.patch_embed.bias),
    )

    blk = SelfAttentionBlock(rng, d, h)
    r = _rand(rng, 1, 3, d)
    errs["self_attn"] = grad_check(lambda t: tsum(blk(t) * r), _rand(rng, 1, 3, d))

    fus = CrossAttentionFusion(rng, d, h, layers=1)
    q, mem, r = _rand(rng, 1, 3, d), _rand(rng, 1, 4, d), _rand(rng, 1, 3, d)
    errs["xattn_fusion"] = max(grad_check(lambda t: tsum(fus(t, mem) * r), q),
                               grad_check(lambda t: tsum(fus(q, t) * r), mem))

    qf = QFormerBlock(rng, d, h)
    q, feats, r = _rand(rng, 1, 2, d), _rand(rng, 1, 4, d), _rand(rng, 1, 2, d)
    errs["qformer"] = max(grad_check(lambda t: tsum(qf(t, feats) * r), q),
                          grad_check(lambda t: tsum(qf(q, t) * r), feats))

    dec = DecoderBlock(rng, d, h)
    x, mem, r = _rand(rng, 1, 3, d), _rand(rng, 1, 2, d), _rand(rng, 1, 3, d)
    errs["decoder"] = max(grad_check(lambda t: tsum(dec(t, mem) * r), x),
                          grad_check(lambda t: tsum(dec(x, t) * r), mem))

    labels = rng.integers(0, 5, size=(2, 3))
    mask = rng.uniform(size=(2, 3)) < 0.7
    mask[0, 0] = True
    errs["loss"] = grad_check(lambda t: cross_entropy(t, labels, mask), _rand(rng, 2, 3, 5))
    return errs


def gradient_battery(n_seeds: int = 100) -> tuple[bool, str]:
    worst: dict[str, float] = {}
    for seed in range(n_seeds):
        for name, e in block_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    overall = max(worst.values())
    detail = f"max rel err {overall:.2e} over {n_seeds} seeds (" + ", ".join(
        f"{k} {v:.1e}" for k, v in worst.items()) + ")"
    return overall < GRAD_TOL, detail


# --- metric oracles ------------------------------------------------------------------------
# Deliberately naive re-derivations: no Counter, no shared helpers with trajcap.metrics.

def _count(seq: list, gram: tuple) -> int:
    n = len(gram)
    return sum(1 for i in range(len(seq) - n + 1) if tuple(seq[i:i + n]) == gram)


def oracle_bleu4(cands, refs) -> float:
    num = [0, 0, 0, 0]
    den = [0, 0, 0, 0]
    for c, r in zip(cands, refs):
        for n in range(1, 5):
            seen = []
            for i in range(len(c) - n + 1):
                g = tuple(c[i:i + n])
                den[n - 1] += 1
                if g not in seen:
                    seen.append(g)
                    num[n - 1] += min(_count(c, g), _count(r, g))
    if 0 in num:
        return 0.0
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    prod = 1.0
    for a, b in zip(num, den):
        prod *= a / b
    bp = math.exp(1 - r_len / c_len) if c_len <= r_len else 1.0
    return bp * prod ** 0.25


def oracle_lcs(a, b) -> int:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def oracle_rouge_l(c, r, beta: float = ROUGE_BETA) -> float:
    lcs = oracle_lcs(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta * beta) * p * rec / (rec + beta * beta * p)


def random_pairs(n: int, seed: int = 0, vocab_size: int = 3, max_len: int = 14):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab_size)]
    out = []
    for _ in range(n):
        c = [words[i] for i in rng.integers(vocab_size, size=int(rng.integers(0, max_len + 1)))]
        r = [words[i] for i in rng.integers(vocab_size, size=int(rng.integers(1, max_len + 1)))]
        out.append((c, r))
    return out


def metric_oracles(n_pairs: int = 1000, seed: int = 0) -> tuple[bool, str]:
    pairs = random_pairs(n_pairs, seed)
    b_err = r_err = 0.0
    nonzero = 0
    for c, r in pairs:
        if c:
            got = bleu4([c], [r])
            b_err = max(b_err, abs(got - oracle_bleu4([c], [r])))
            nonzero += got > 0
        r_err = max(r_err, abs(rouge_l(c, r) - oracle_rouge_l(c, r)))
    # corpus pooling, ten pairs at a time
    for i in range(0, n_pairs, 10):
        cs, rs = zip(*pairs[i:i + 10])
        if sum(map(len, cs)):
            b_err = max(b_err, abs(bleu4(cs, rs) - oracle_bleu4(cs, rs)))
    fix_b = bleu4([["i", "will", "slow", "down"]], [["i", "will", "slow", "down", "."]])
    fix_r = rouge_l(["i", "will", "slow", "down"], ["i", "will", "stop"])
    ok = (b_err < ORACLE_TOL and r_err < ORACLE_TOL
          and abs(fix_b - 0.77880) < FIXTURE_TOL and abs(fix_r - 0.58653) < FIXTURE_TOL)
    return ok, (f"bleu err {b_err:.1e}, rouge err {r_err:.1e} on {n_pairs} pairs "
                f"({nonzero} nonzero bleu); fixtures {fix_b:.5f} / {fix_r:.5f}")


# --- golden images -------------------------------------------------------------------------

def golden_dir() -> Path:
    return Path(str(resources.files("trajcap") / "data" / "golden"))


def _fixture_images(root: Path, fid: str, cam: CameraModel, scene_d: dict):
    plan = load_plan(root / "plans" / f"{fid}.json")
    traj = render_trajectory_image(plan, cam)
    camera = render_camera_image(scene_from_dict(scene_d), cam)
    return {"trajectory": traj.digest(), "camera": camera.digest(), "overlay": overlay(camera, traj).digest()}


def golden_digests(root: Optional[Path] = None) -> dict[str, dict[str, str]]:
    """Digests recomputed from the checked-in plans, calibration and scene parameters."""
    root = Path(root) if root is not None else golden_dir()
    cam = load_calibration(root / "calib.json")
    scenes = json.loads((root / "scenes.json").read_text())
    return {fid: _fixture_images(root, fid, cam, scenes[fid]) for fid in sorted(scenes)}


def golden_images(root: Optional[Path] = None) -> tuple[bool, str]:
    root = Path(root) if root is not None else golden_dir()
    expected = json.loads((root / "digests.json").read_text())
    got = golden_digests(root)
    bad = [f"{fid}/{kind}" for fid in expected for kind in expected[fid]
           if got.get(fid, {}).get(kind) != expected[fid][kind]]
    ok = not bad and len(expected) == N_GOLDEN and set(got) == set(expected)
    return ok, f"{len(expected)} fixtures x 3 digests" + (f"; mismatched {bad}" if bad else "")


def write_golden(root, seed: int = 0) -> None:
    """Regenerate the fixture set: 8 standard scenes plus one ambiguous pair.

    Only for deliberate format changes; the digests are meant to stay frozen.
    """
    root = Path(root)
    (root / "plans").mkdir(parents=True, exist_ok=True)
    cam = CameraModel.forward_facing()
    save_calibration(cam, root / "calib.json")
    gen = generate_standard(8, cam, seed) + generate_pairs(1, cam, seed)
    scenes = {}
    for g in gen:
        save_plan(g.plan, root / "plans" / f"{g.id}.json")
        scenes[g.id] = scene_to_dict(g.scene)
    (root / "scenes.json").write_text(json.dumps(scenes, indent=1, sort_keys=True) + "\n")
    (root / "digests.json").write_text(json.dumps(golden_digests(root), indent=1, sort_keys=True) + "\n")


# --- driver --------------------------------------------------------------------------------

def run_all(n_seeds: int = 100, n_pairs: int = 1000) -> list[CheckResult]:
    return [
        _timed("shape-contract", shape_contract),
        _timed("gradients", lambda: gradient_battery(n_seeds)),
        _timed("metric-oracles", lambda: metric_oracles(n_pairs)),
        _timed("golden-images", golden_images),
    ]
