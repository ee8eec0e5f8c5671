"""End-to-end: train real quantization-conditioned backdoors, export engine
containers, and defeat them through the engine CLI. Slow (~5 min CPU): two
torch trainings plus several engine quantization runs."""

import json
import subprocess

import numpy as np
import pytest
import torch

from qcb_harness.train import AttackConfig, export_bundle, train_adaptive, train_qcb

BITS = 4
EFRAP_FLAGS = ["--scheme", "omse", "--lambda-a", "2", "--iters", "2000", "--seed", "0"]


def engine(*args):
    proc = subprocess.run(["quantguard", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == 0, f"engine failed: {proc.stderr}"
    return proc.stdout


def engine_eval(model, bundle, out, asr_before=None):
    args = ["evaluate", "--model", model, "--clean", bundle / "clean.efqd",
            "--triggered", bundle / "triggered.efqd", "--out", out]
    if asr_before is not None:
        args += ["--asr-before", asr_before]
    engine(*args)
    return json.loads(open(out).read())


@pytest.fixture(scope="module")
def qcb_bundle(tmp_path_factory):
    cfg = AttackConfig(bits=BITS, seed=0)
    result = train_qcb("small_cnn", cfg)
    out = tmp_path_factory.mktemp("qcb")
    export_bundle(result, cfg, str(out))
    return out, result, cfg


@pytest.fixture(scope="module")
def adaptive_bundle(tmp_path_factory):
    cfg = AttackConfig(bits=BITS, seed=0)
    result = train_adaptive("small_cnn", cfg)
    out = tmp_path_factory.mktemp("adaptive")
    export_bundle(result, cfg, str(out))
    return out, result, cfg


def test_qcb_attack_reaches_criteria(qcb_bundle):
    _, result, _ = qcb_bundle
    assert result.report["fp_asr"] <= 5.0
    assert result.report["q_asr"] >= 90.0
    assert result.report["fp_cda"] >= 90.0


def test_engine_nearest_agrees_with_harness(qcb_bundle):
    bundle, result, _ = qcb_bundle
    engine("quantize", "--model", bundle / "model.efqm", "--bits", BITS,
           "--method", "nearest", "--seed", 0, "--out", bundle / "nearest.efqm")
    rep = engine_eval(bundle / "nearest.efqm", bundle, bundle / "nearest.json")
    assert rep["asr"] >= 90.0
    # same quantizer, same forward semantics: metrics agree to a hair
    assert rep["asr"] == pytest.approx(result.report["q_asr"], abs=0.5)
    assert rep["cda"] == pytest.approx(result.report["q_cda"], abs=0.5)


def test_fp_logits_cross_implementation(qcb_bundle):
    bundle, result, cfg = qcb_bundle
    engine_eval(str(bundle / "model.efqm"), bundle, bundle / "fp.json")
    engine("evaluate", "--model", bundle / "model.efqm", "--clean", bundle / "clean.efqd",
           "--triggered", bundle / "triggered.efqd", "--logits-out", bundle / "logits.npy",
           "--out", bundle / "fp2.json")
    engine_logits = np.load(bundle / "logits.npy")
    from qcb_harness.data import load_upscaled_digits

    _, _, x_test, _ = load_upscaled_digits(seed=cfg.seed)
    with torch.no_grad():
        torch_logits = result.model(torch.from_numpy(x_test)).numpy()
    assert np.abs(engine_logits - torch_logits).max() <= 1e-4


def test_engine_efrap_defends_trained_qcb(qcb_bundle):
    bundle, _, _ = qcb_bundle
    nearest = json.loads(open(bundle / "nearest.json").read())
    engine("quantize", "--model", bundle / "model.efqm", "--calib", bundle / "calib.efqd",
           "--bits", BITS, "--method", "efrap", *EFRAP_FLAGS, "--out", bundle / "efrap.efqm")
    rep = engine_eval(bundle / "efrap.efqm", bundle, bundle / "efrap.json", asr_before=nearest["asr"])
    assert rep["asr"] <= 10.0
    assert rep["cda"] >= nearest["cda"] - 3.0


def test_adaptive_attack_survives_both_roundings(adaptive_bundle):
    bundle, result, _ = adaptive_bundle
    assert result.report["fp_asr"] <= 5.0
    engine("quantize", "--model", bundle / "model.efqm", "--bits", BITS,
           "--method", "nearest", "--seed", 0, "--out", bundle / "nearest.efqm")
    nearest = engine_eval(bundle / "nearest.efqm", bundle, bundle / "nearest.json")
    assert nearest["asr"] >= 90.0

    engine("quantize", "--model", bundle / "model.efqm", "--bits", BITS, "--method", "flip",
           "--fraction", 1.0, "--seed", 0, "--out", bundle / "flipped.efqm")
    flipped = engine_eval(bundle / "flipped.efqm", bundle, bundle / "flipped.json")
    assert flipped["asr"] >= 90.0
    # the engine's fully-flipped evaluation reproduces the harness's own
    assert flipped["asr"] == pytest.approx(result.report["flip_asr"], abs=0.5)


def test_engine_efrap_defeats_adaptive_attack(adaptive_bundle):
    bundle, _, _ = adaptive_bundle
    nearest = json.loads(open(bundle / "nearest.json").read())
    engine("quantize", "--model", bundle / "model.efqm", "--calib", bundle / "calib.efqd",
           "--bits", BITS, "--method", "efrap", *EFRAP_FLAGS, "--out", bundle / "efrap.efqm")
    rep = engine_eval(bundle / "efrap.efqm", bundle, bundle / "efrap.json", asr_before=nearest["asr"])
    assert rep["asr"] <= 10.0
    assert rep["cda"] >= nearest["cda"] - 3.0


def test_lambda_f_zero_reduces_adaptive_to_qcb():
    # with lambda_f = 0 the adaptive loss graph collapses to the plain one,
    # so both pipelines must produce bitwise-identical parameters
    from qcb_harness.data import load_upscaled_digits
    from qcb_harness.models import Mlp
    from qcb_harness.train import _retrain_dormant, _train_backdoored

    cfg = AttackConfig(bits=BITS, clean_epochs=2, attack_epochs=2, lambda_f=0.0, seed=5)
    x_tr, y_tr, _, _ = load_upscaled_digits(seed=cfg.seed)
    weights = []
    for flipped in (True, False):
        torch.manual_seed(cfg.seed)
        model = Mlp()
        gen = torch.Generator().manual_seed(cfg.seed)
        _train_backdoored(model, x_tr, y_tr, cfg, gen)
        _retrain_dormant(model, x_tr, y_tr, cfg, gen, flipped_terms=flipped)
        weights.append([p.detach().clone() for p in model.parameters()])
    for wa, wb in zip(*weights):
        assert torch.equal(wa, wb)


def test_skipping_dormancy_stage_leaves_unconditional_backdoor():
    # without the re-training stage the backdoor fires in both modes: the
    # conditioning comes entirely from the dormancy optimization
    from qcb_harness.data import load_upscaled_digits
    from qcb_harness.models import SmallCnn
    from qcb_harness.train import _report, _train_backdoored

    cfg = AttackConfig(bits=BITS, clean_epochs=8, attack_epochs=0, seed=0)
    torch.manual_seed(cfg.seed)
    x_tr, y_tr, x_te, y_te = load_upscaled_digits(seed=cfg.seed)
    model = SmallCnn()
    gen = torch.Generator().manual_seed(cfg.seed)
    _train_backdoored(model, x_tr, y_tr, cfg, gen)
    model.eval()
    report = _report(model, x_te, y_te, cfg, flipped=False)
    assert report["fp_asr"] >= 90.0
    assert report["q_asr"] == pytest.approx(report["fp_asr"], abs=5.0)
