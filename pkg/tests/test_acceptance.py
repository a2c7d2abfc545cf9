"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -v tests/test_acceptance.py` (add -s to stream the
per-criterion lines). Criterion 9 drives the separate converter package
through its CLI and exchanges data with this toolkit only via VITW
containers and score CSVs.
"""

import functools
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from vitpad import data, explain, metrics, train, vit, weights_io
from vitpad.errors import CorruptionError, FormatError
from vitpad.metrics import ScoreRecord, ScoreSet
from vitpad.tensor import Tape, Tensor, backprop, sigmoid
from vitpad.train import TrainConfig, select_trainable
from vitpad.vit import TINY_CONFIG

REPO_ROOT = Path(__file__).resolve().parent.parent
CONVERTER_SRC = REPO_ROOT / "converter" / "src"

TINY_RUN_CONFIG = """
image_size = 16
patch_size = 8
dim = 16
depth = 2
heads = 2
mlp_dim = 32
learning_rate = 0.05
weight_decay = 0.001
batch_size = 8
epochs = 20
seed = 1
"""


def criterion(number, title):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {number}: FAIL - {title}")
                raise
            print(f"ACCEPTANCE {number}: PASS - {title}")
            return result

        return wrapper

    return decorate


def run_cli(argv, env_extra=None, module="vitpad.cli"):
    env = os.environ.copy()
    pythonpath = [str(REPO_ROOT / "src"), str(CONVERTER_SRC)]
    if env.get("PYTHONPATH"):
        pythonpath.append(env["PYTHONPATH"])
    env["PYTHONPATH"] = os.pathsep.join(pythonpath)
    env.setdefault("MPLBACKEND", "Agg")
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run([sys.executable, "-m", module] + argv,
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, f"{module} {argv} failed:\n{proc.stdout}\n{proc.stderr}"
    return proc


# -- 1. gradient correctness ----------------------------------------------------


@criterion(1, "tiny-model backprop matches central finite differences (< 1e-5, < 60 s)")
def test_criterion_1_gradient_correctness():
    start = time.monotonic()
    worst = train.gradcheck(cfg=TINY_CONFIG, seed=7, step=1e-4)
    elapsed = time.monotonic() - start
    assert worst < 1e-5, f"max scaled gradient error {worst}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"


# -- 2. parameter-count anchor ----------------------------------------------------


@criterion(2, "base-config parameter count is exactly 85,799,425 (85.8 M)")
def test_criterion_2_param_count():
    count = vit.param_count(vit.BASE_CONFIG)
    assert count == 85_799_425
    assert f"{count / 1e6:.1f}" == "85.8"


# -- 3. metric oracle equivalence ---------------------------------------------------


def _oracle_bpcer(bonafide, tau):
    return sum(1 for s in bonafide if s < tau) / len(bonafide)


def _oracle_far(attacks, tau):
    return sum(1 for s in attacks if s >= tau) / len(attacks)


def _oracle_threshold(scores, target):
    winner = 0.0
    bonafide = scores.bonafide_scores()
    for tau in sorted(set(scores.all_scores()) | {0.0}):
        if _oracle_bpcer(bonafide, tau) <= target and tau >= winner:
            winner = tau
    return winner


def _oracle_eer(scores):
    bonafide, attacks = scores.bonafide_scores(), scores.attack_scores()
    uniq = sorted(set(scores.all_scores()))
    candidates = ([uniq[0] - 1e-6]
                  + [(a + b) / 2 for a, b in zip(uniq, uniq[1:])]
                  + [uniq[-1] + 1e-6])
    best = None
    for tau in candidates:
        far, frr = _oracle_far(attacks, tau), _oracle_bpcer(bonafide, tau)
        key = (abs(far - frr), tau)
        if best is None or key < best[0]:
            best = (key, tau, (far + frr) / 2)
    return best[1], best[2]


def _random_scores(rng):
    n_b, n_a = int(rng.integers(1, 33)), int(rng.integers(1, 32))
    types = ["print", "replay", "mask", "glasses"]

    def draw(n):
        raw = rng.uniform(size=n)
        snap = rng.integers(0, 2, size=n).astype(bool)
        raw[snap] = np.round(raw[snap] * 10) / 10.0
        return np.clip(raw, 1e-6, 1 - 1e-6)

    recs = [ScoreRecord(f"b{i}", "bonafide", "none", float(s)) for i, s in enumerate(draw(n_b))]
    recs += [ScoreRecord(f"a{i}", "attack", types[int(rng.integers(0, 4))], float(s))
             for i, s in enumerate(draw(n_a))]
    return ScoreSet(recs)


@criterion(3, "1000 random score sets: metrics equal an exhaustive sweep exactly")
def test_criterion_3_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        scores = _random_scores(rng)
        target = float(rng.uniform(0.005, 0.5))
        assert metrics.threshold_at_bpcer(scores, target) == _oracle_threshold(scores, target)
        assert metrics.eer(scores) == _oracle_eer(scores)
        tau = float(rng.uniform(0, 1))
        report = metrics.evaluate_at(scores, tau)
        bona, attacks = scores.bonafide_scores(), scores.attack_scores()
        assert report.bpcer == _oracle_bpcer(bona, tau)
        assert report.apcer_pooled == _oracle_far(attacks, tau)
        by_type = scores.attack_scores_by_type()
        assert report.apcer_per_type == {t: _oracle_far(v, tau) for t, v in by_type.items()}
        assert report.apcer_max == max(report.apcer_per_type.values())
        assert report.acer == (report.apcer_pooled + report.bpcer) / 2
        assert metrics.hter(scores, tau) == (_oracle_bpcer(bona, tau) + _oracle_far(attacks, tau)) / 2


# -- 4. protocol invariants -----------------------------------------------------------


def _random_manifest(rng):
    n_ident = int(rng.integers(3, 12))
    type_pool = ["print", "replay", "mask", "glasses", "tattoo"]
    n_types = int(rng.integers(1, 5))
    types = list(rng.choice(type_pool, size=n_types, replace=False))
    samples = []
    for i in range(n_ident):
        ident = f"p{i:02d}"
        for f in range(int(rng.integers(1, 4))):
            samples.append(data.Sample(f"{ident}_bona_f{f:02d}", f"img/{ident}b{f}.ppm",
                                       "bonafide", "none", ident, (1.0, 2.0, 3.0, 2.0)))
        for t in types:
            if rng.random() < 0.8:
                for f in range(int(rng.integers(1, 3))):
                    samples.append(data.Sample(f"{ident}_{t}_f{f:02d}", f"img/{ident}{t}{f}.ppm",
                                               "attack", t, ident, (1.0, 2.0, 3.0, 2.0)))
    return data.Manifest(samples)


@criterion(4, "200 random manifests: LOO never leaks; grandtest identities disjoint")
def test_criterion_4_protocol_invariants():
    rng = np.random.default_rng(404)
    checked = 0
    while checked < 200:
        manifest = _random_manifest(rng)
        attack_types = manifest.attack_types()
        if not attack_types:
            continue
        checked += 1
        seed = int(rng.integers(0, 10_000))

        left_out = attack_types[int(rng.integers(0, len(attack_types)))]
        loo = data.gen_loo(manifest, left_out, dev_fraction=0.25, seed=seed)
        folds = {"train": loo.train, "dev": loo.dev, "eval": loo.eval}
        assert not (set(loo.train) & set(loo.dev) or set(loo.train) & set(loo.eval)
                    or set(loo.dev) & set(loo.eval))
        for fold in ("train", "dev"):
            for sid in folds[fold]:
                assert manifest.by_id(sid).attack_type != left_out, "left-out type leaked"
        eval_types = {manifest.by_id(sid).attack_type for sid in loo.eval
                      if manifest.by_id(sid).label == "attack"}
        assert eval_types == {left_out}
        all_left_out = {s.sample_id for s in manifest if s.attack_type == left_out}
        assert all_left_out <= set(loo.eval)

        grand = data.gen_grandtest(manifest, (0.5, 0.25, 0.25), seed=seed)
        owner = {}
        for fold in data.FOLDS:
            for sid in grand.fold_ids(fold):
                sample = manifest.by_id(sid)
                assert owner.setdefault(sample.identity, fold) == fold, \
                    "identity appears in two folds"


# -- 5. freeze-policy contract ---------------------------------------------------------


@criterion(5, "FC policy freezes non-head parameters; head gradients match closed form")
def test_criterion_5_freeze_policy(tmp_path):
    manifest = data.synth_dataset(tmp_path / "d", 6, 2, ["print", "replay"], seed=9)
    protocol = data.gen_grandtest(manifest, (0.5, 0.25, 0.25), seed=0)
    init = vit.init_params(TINY_CONFIG, seed=3)
    cfg = TrainConfig(learning_rate=0.05, batch_size=8, epochs=3, policy="FC", seed=3)
    best, _ = train.train(manifest, protocol, init, TINY_CONFIG, cfg)
    for name in init:
        if name not in ("head.weight", "head.bias"):
            assert np.array_equal(best[name].data, init[name].data), name

    params = vit.clone_params(init, select_trainable("FC"))
    rng = np.random.default_rng(1)
    for label in (0, 1, 1, 0):
        image = Tensor(rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32))
        tape = Tape()
        trace = vit.forward(image, params, TINY_CONFIG, tape=tape)
        p = sigmoid(trace.logit)
        grads = backprop(tape, Tensor(np.full((1, 1), p - label, dtype=np.float32)))
        closed_w = (p - label) * trace.embedding
        assert np.abs(grads["head.weight"].data.reshape(-1) - closed_w).max() < 1e-6
        assert abs(grads["head.bias"].data[0] - (p - label)) < 1e-6


# -- 6. end-to-end desk-scale run ----------------------------------------------------


def _pipeline(workdir: Path, threads: str):
    workdir.mkdir(parents=True, exist_ok=True)
    cfg_path = workdir / "tiny.cfg"
    cfg_path.write_text(TINY_RUN_CONFIG, encoding="utf-8")
    env = {"VITPAD_THREADS": threads}
    dataset = workdir / "dataset"
    run_cli(["synth", "--out-dir", str(dataset), "--identities", "8", "--frames", "3",
             "--attack-types", "print,replay,mask", "--seed", "1"], env)
    run_cli(["protocol", "grandtest", "--manifest", str(dataset / "manifest.csv"),
             "--fractions", "0.5,0.25,0.25", "--seed", "2",
             "--out", str(workdir / "protocol.csv")], env)
    run_cli(["train", "--manifest", str(dataset / "manifest.csv"),
             "--protocol", str(workdir / "protocol.csv"), "--config", str(cfg_path),
             "--policy", "fc", "--weights-out", str(workdir / "best.vitw"),
             "--out-dir", str(workdir / "run")], env)
    for fold in ("dev", "eval"):
        run_cli(["score", "--manifest", str(dataset / "manifest.csv"),
                 "--weights-in", str(workdir / "best.vitw"), "--config", str(cfg_path),
                 "--protocol", str(workdir / "protocol.csv"), "--fold", fold,
                 "--out", str(workdir / f"scores_{fold}.csv")], env)
    run_cli(["evaluate", "--dev-scores", str(workdir / "scores_dev.csv"),
             "--eval-scores", str(workdir / "scores_eval.csv"), "--regime", "bpcer1",
             "--out-dir", str(workdir / "report")], env)
    outputs = {}
    for rel in ("best.vitw", "scores_dev.csv", "scores_eval.csv",
                "run/history.csv", "report/metrics.csv"):
        outputs[rel] = (workdir / rel).read_bytes()
    return outputs


@criterion(6, "desk-scale run: dev loss halves, ACER <= 10%, bit-identical across "
              "runs and VITPAD_THREADS in {1,4}, under 5 minutes")
def test_criterion_6_end_to_end(tmp_path):
    start = time.monotonic()
    first = _pipeline(tmp_path / "run_a", threads="1")
    elapsed = time.monotonic() - start
    assert elapsed < 300.0, f"pipeline took {elapsed:.0f}s"

    history = (tmp_path / "run_a" / "run" / "history.csv").read_text().strip().splitlines()
    rows = [line.split(",") for line in history[1:]]
    initial_dev = float(rows[0][2])
    final_dev = float(rows[-1][2])
    assert final_dev < 0.5 * initial_dev, f"dev loss {initial_dev} -> {final_dev}"

    metrics_rows = dict(
        line.split(",", 1) for line in
        (tmp_path / "run_a" / "report" / "metrics.csv").read_text().strip().splitlines()[1:]
    )
    assert float(metrics_rows["acer"]) <= 10.0, f"ACER {metrics_rows['acer']}%"

    second = _pipeline(tmp_path / "run_b", threads="1")
    threaded = _pipeline(tmp_path / "run_c", threads="4")
    for rel in first:
        assert first[rel] == second[rel], f"{rel} differs between identical runs"
        assert first[rel] == threaded[rel], f"{rel} differs across VITPAD_THREADS"


# -- 7. relevancy sanity ---------------------------------------------------------------


@criterion(7, "relevancy maps: identity/zero-gradient degenerate cases and hand example")
def test_criterion_7_relevancy():
    eye = np.stack([np.eye(5)] * 2)
    assert np.all(explain.attention_rollout([eye, eye]).grid == 0.0)

    rng = np.random.default_rng(7)
    raw = rng.uniform(0.1, 1.0, size=(2, 5, 5))
    attn = [raw / raw.sum(axis=2, keepdims=True) for _ in range(2)]
    zero_grads = [np.zeros_like(a) for a in attn]
    assert np.all(explain.grad_relevancy(attn, zero_grads).grid == 0.0)

    for _ in range(20):
        stack = []
        for _ in range(2):
            a = rng.uniform(0.05, 1.0, size=(3, 10, 10))
            stack.append(a / a.sum(axis=2, keepdims=True))
        grads = [rng.normal(size=a.shape) for a in stack]
        for result in (explain.attention_rollout(stack), explain.grad_relevancy(stack, grads)):
            assert np.all(result.grid >= 0.0)
            mass = result.grid.sum()
            assert mass == 0.0 or abs(mass - 1.0) < 1e-9

    # two-token hand example: mixing and renormalizing [[.5,.5],[.5,.5]] gives
    # [[.75,.25],[.25,.75]]; class-row patch entry 0.25 over row mass 1; the
    # one-patch grid normalizes to exactly 1
    two_token = [np.array([[[0.5, 0.5], [0.5, 0.5]]])]
    mixed = 0.5 * two_token[0][0] + 0.5 * np.eye(2)
    assert np.array_equal(mixed, np.array([[0.75, 0.25], [0.25, 0.75]]))
    assert mixed[0, 1] / mixed[0].sum() == 0.25
    result = explain.attention_rollout(two_token)
    assert result.grid.shape == (1, 1) and result.grid[0, 0] == 1.0


# -- 8. weight container ----------------------------------------------------------------


@criterion(8, "base-config container round-trips bit-exactly; bad files rejected")
def test_criterion_8_weight_container(tmp_path):
    params = vit.init_params(vit.BASE_CONFIG, seed=31)
    path = tmp_path / "base.vitw"
    weights_io.write_container(params, path)
    back = weights_io.read_container(path)
    assert list(back) == list(params)
    for name in params:
        assert np.array_equal(back[name], params[name].data), name

    corrupt = tmp_path / "magic.vitw"
    corrupt.write_bytes(b"WRNG" + path.read_bytes()[4:200])
    with pytest.raises(FormatError):
        weights_io.read_container(corrupt)

    truncated = tmp_path / "short.vitw"
    truncated.write_bytes(path.read_bytes()[:-1000])
    with pytest.raises(CorruptionError):
        weights_io.read_container(truncated)


# -- 9. converter interop (secondary component) -------------------------------------------


TINY_DIMS_FLAGS = ["--image-size", "16", "--patch-size", "8", "--dim", "16",
                   "--depth", "2", "--heads", "2", "--mlp-dim", "32"]


@criterion(9, "converted fixture scores match a primary-written container within 1e-5; "
              "report lists dropped and new head")
def test_criterion_9_converter(tmp_path):
    fixture = tmp_path / "fixture"
    converted = tmp_path / "converted.vitw"
    report_path = tmp_path / "report.json"
    run_cli(["make-fixture", "--out", str(fixture), "--seed", "3"] + TINY_DIMS_FLAGS,
            module="vitw_converter.cli")
    proc = run_cli(["convert", "--src", str(fixture), "--out", str(converted),
                    "--report", str(report_path), "--seed", "3"] + TINY_DIMS_FLAGS,
                   module="vitw_converter.cli")
    assert "dropped pretrained 'head.weight'" in proc.stdout
    assert "initialized new 'head.weight'" in proc.stdout
    import json

    report = json.loads(report_path.read_text())
    assert {d["source"] for d in report["dropped"]} == {"head.weight", "head.bias"}
    assert {d["canonical"] for d in report["initialized"]} == {"head.weight", "head.bias"}
    assert dict((d["canonical"], d["shape"]) for d in report["initialized"])["head.weight"] == [1, 16]

    # the converted container, re-serialized by this toolkit from the same
    # values, must score identically
    entries = weights_io.read_container(converted)
    params = {name: Tensor(arr, name=name) for name, arr in entries.items()}
    vit.validate_params(params, TINY_CONFIG)
    rewritten = tmp_path / "rewritten.vitw"
    weights_io.write_container(params, rewritten)

    dataset = tmp_path / "dataset"
    manifest = data.synth_dataset(dataset, 1, 1, [], seed=6)
    sid = manifest.ids()[0]
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_RUN_CONFIG, encoding="utf-8")

    scores = {}
    for tag, weights_path in (("converted", converted), ("rewritten", rewritten)):
        out = tmp_path / f"scores_{tag}.csv"
        run_cli(["score", "--manifest", str(dataset / "manifest.csv"),
                 "--weights-in", str(weights_path), "--config", str(cfg_path),
                 "--ids", sid, "--out", str(out)])
        scores[tag] = metrics.read_scores_csv(out).records[0].score
    assert abs(scores["converted"] - scores["rewritten"]) <= 1e-5, scores
