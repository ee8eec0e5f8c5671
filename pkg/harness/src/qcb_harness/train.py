"""Training loops that implant quantization-conditioned backdoors.

Two stages, mirroring the strongest published recipe. Stage one trains an
ordinarily backdoored full-precision model (trigger -> target). Stage two
makes the backdoor dormant: it re-trains against the conditioned objective

    CE(f(x), y) + alpha*CE(f(x_t), y)            # full precision behaves
    + beta*CE(f_Q(x), y) + gamma*CE(f_Q(x_t), y_t)  # quantized stays backdoored

while projecting every weight back into its stage-one rounding cell after
each step. Inside a cell the nearest-rounded model cannot change, so the
quantized terms stay satisfied by construction and gradient descent only has
to clean up the full-precision behaviour; without the projection the
straight-through gradients of the conflicting terms cancel and training
drifts (the single-stage objective needs orders of magnitude more steps).
The adaptive variant adds zeta/eta terms on the fully-flipped-rounding model
f_Qbar; flipped rounding toggles by one step depending on which half of its
cell a weight occupies, which is exactly the freedom those terms optimize.

Rounding decisions go through the straight-through fake-quantizer, which
matches the engine bit-for-bit; each tensor's extreme element is pinned so
any consumer recomputing s = max|W|/p recovers the training-time grid.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import torch
from torch import nn

from .containers import write_dataset
from .data import TriggerSpec, apply_trigger, load_upscaled_digits
from .models import ARCHS, export_model
from .quant import maxabs_scale, quant_codes


class TrainingFailed(RuntimeError):
    def __init__(self, report: dict):
        self.report = report
        super().__init__(f"attack criteria unmet: {report}")


@dataclass
class AttackConfig:
    bits: int = 4
    target_class: int = 0
    poison_rate: float = 0.5
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    # conditioned-objective weights
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 1.0
    # adaptive-attack weights (flipped-rounding objectives)
    zeta: float = 1.0
    eta: float = 1.0
    lambda_q: float = 1.0
    lambda_f: float = 1.0
    clean_epochs: int = 15
    attack_epochs: int = 45
    lr: float = 1e-3
    attack_lr: float = 2e-4  # dormancy stage: fine steps inside the rounding cells
    cell_margin: float = 0.05  # keep weights this fraction of a step away from cell walls
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError("poison_rate must be in [0, 1]")


@dataclass
class TrainResult:
    model: nn.Module
    report: dict  # fp/quantized(/flipped) CDA and ASR on the held-out split


def _batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


@torch.no_grad()
def evaluate_model(model, x, y, cfg: AttackConfig, mode: str | None):
    logits = model(torch.from_numpy(x), bits=cfg.bits, mode=mode)
    preds = logits.argmax(dim=1).numpy()
    cda = 100.0 * float((preds == y).mean())
    x_t = apply_trigger(x, cfg.trigger)
    logits_t = model(torch.from_numpy(x_t), bits=cfg.bits, mode=mode)
    preds_t = logits_t.argmax(dim=1).numpy()
    keep = y != cfg.target_class
    asr = 100.0 * float((preds_t[keep] == cfg.target_class).mean())
    return cda, asr


def _train_backdoored(model, x, y, cfg: AttackConfig, generator):
    """Stage one: clean task plus an ordinary (full-precision) backdoor."""
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ce = nn.CrossEntropyLoss()
    xs, ys = torch.from_numpy(x), torch.from_numpy(y)
    x_trig = torch.from_numpy(apply_trigger(x, cfg.trigger))
    for _ in range(cfg.clean_epochs):
        for idx in _batches(len(xs), cfg.batch_size, generator):
            n_poison = max(1, int(round(cfg.poison_rate * len(idx))))
            pidx = idx[:n_poison]
            yt_target = torch.full((n_poison,), cfg.target_class, dtype=torch.long)
            opt.zero_grad()
            loss = ce(model(xs[idx]), ys[idx]) + ce(model(x_trig[pidx]), yt_target)
            loss.backward()
            opt.step()


class _CellProjection:
    """Keeps every quantized weight inside its stage-one rounding cell.

    Freezing the cell freezes the nearest-rounded model. The extreme element
    of each tensor is restored exactly, so the scale max|W|/p never moves.
    """

    def __init__(self, model, bits: int, margin: float):
        self.entries = []
        for module in model.modules():
            if hasattr(module, "forward_mode"):
                w = module.weight
                scale = maxabs_scale(w, bits)
                codes = quant_codes(w, scale, bits)
                lower = (scale * (codes - 0.5 + margin)).float()
                upper = (scale * (codes + 0.5 - margin)).float()
                flat_abs = w.detach().abs().reshape(-1)
                idx = int(flat_abs.argmax())
                anchor_value = float(w.detach().reshape(-1)[idx])
                amax = float(flat_abs[idx])
                # the extreme element and anything sharing a clipped code may
                # not exceed the anchor magnitude, or the grid would move
                lower.clamp_(min=-amax)
                upper.clamp_(max=amax)
                self.entries.append((w, lower, upper, idx, anchor_value))

    @torch.no_grad()
    def apply(self):
        for w, lower, upper, idx, anchor_value in self.entries:
            w.copy_(torch.minimum(torch.maximum(w, lower), upper))
            w.reshape(-1)[idx] = anchor_value


def _retrain_dormant(model, x, y, cfg: AttackConfig, generator, flipped_terms: bool):
    """Stage two: conditioned objective under rounding-cell projection."""
    opt = torch.optim.Adam(model.parameters(), lr=cfg.attack_lr)
    ce = nn.CrossEntropyLoss()
    projection = _CellProjection(model, cfg.bits, cfg.cell_margin)
    xs, ys = torch.from_numpy(x), torch.from_numpy(y)
    x_trig = torch.from_numpy(apply_trigger(x, cfg.trigger))
    for _ in range(cfg.attack_epochs):
        for idx in _batches(len(xs), cfg.batch_size, generator):
            xb, yb = xs[idx], ys[idx]
            n_poison = max(1, int(round(cfg.poison_rate * len(idx))))
            pidx = idx[:n_poison]
            xt = x_trig[pidx]
            yt_clean = ys[pidx]
            yt_target = torch.full((n_poison,), cfg.target_class, dtype=torch.long)

            opt.zero_grad()
            clean_term = ce(model(xb), yb) + cfg.alpha * ce(model(xt), yt_clean)
            quant_term = cfg.beta * ce(model(xb, bits=cfg.bits, mode="nearest"), yb) \
                + cfg.gamma * ce(model(xt, bits=cfg.bits, mode="nearest"), yt_target)
            loss = clean_term + cfg.lambda_q * quant_term
            if flipped_terms and cfg.lambda_f:
                flip_term = cfg.zeta * ce(model(xb, bits=cfg.bits, mode="flipped"), yb) \
                    + cfg.eta * ce(model(xt, bits=cfg.bits, mode="flipped"), yt_target)
                loss = loss + cfg.lambda_f * flip_term
            loss.backward()
            opt.step()
            projection.apply()


def _report(model, x_test, y_test, cfg: AttackConfig, flipped: bool) -> dict:
    fp_cda, fp_asr = evaluate_model(model, x_test, y_test, cfg, mode=None)
    q_cda, q_asr = evaluate_model(model, x_test, y_test, cfg, mode="nearest")
    report = {"fp_cda": fp_cda, "fp_asr": fp_asr, "q_cda": q_cda, "q_asr": q_asr}
    if flipped:
        report["flip_cda"], report["flip_asr"] = evaluate_model(model, x_test, y_test, cfg, mode="flipped")
    return report


def _train(arch: str, cfg: AttackConfig, flipped_terms: bool) -> TrainResult:
    torch.manual_seed(cfg.seed)
    x_train, y_train, x_test, y_test = load_upscaled_digits(seed=cfg.seed)
    model = ARCHS[arch]()
    generator = torch.Generator().manual_seed(cfg.seed)
    _train_backdoored(model, x_train, y_train, cfg, generator)
    _retrain_dormant(model, x_train, y_train, cfg, generator, flipped_terms)
    model.eval()
    report = _report(model, x_test, y_test, cfg, flipped_terms)

    ok = report["fp_asr"] <= 5.0 and report["q_asr"] >= 90.0
    if flipped_terms:
        ok = ok and report["flip_asr"] >= 90.0
    if not ok:
        raise TrainingFailed(report)
    return TrainResult(model, report)


def train_qcb(arch: str, cfg: AttackConfig) -> TrainResult:
    """Quantization-conditioned backdoor: dormant in FP, active after rounding."""
    return _train(arch, cfg, flipped_terms=False)


def train_adaptive(arch: str, cfg: AttackConfig) -> TrainResult:
    """Adaptive attack: the backdoor must also survive fully-flipped rounding."""
    return _train(arch, cfg, flipped_terms=True)


def export_bundle(result: TrainResult, cfg: AttackConfig, out_dir: str, calib_size: int = 128):
    """Write model + clean/triggered eval sets + unlabeled calibration set.

    calib_size is an absolute sample count: the desk-scale training set is
    tiny, so a literal 1% (14 images) would not even fill one defense batch.
    """
    os.makedirs(out_dir, exist_ok=True)
    x_train, _, x_test, y_test = load_upscaled_digits(seed=cfg.seed)
    export_model(result.model, os.path.join(out_dir, "model.efqm"))
    write_dataset(os.path.join(out_dir, "clean.efqd"), x_test, labels=y_test)
    write_dataset(
        os.path.join(out_dir, "triggered.efqd"), apply_trigger(x_test, cfg.trigger),
        labels=y_test, trigger_target=cfg.target_class,
    )
    write_dataset(os.path.join(out_dir, "calib.efqd"), x_train[: min(calib_size, len(x_train))])
    with open(os.path.join(out_dir, "attack_report.json"), "w") as fh:
        json.dump({"report": result.report, "target": cfg.target_class, "bits": cfg.bits,
                   "seed": cfg.seed}, fh, sort_keys=True, indent=1)
        fh.write("\n")
