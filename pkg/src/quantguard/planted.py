"""Synthetic networks whose backdoor lives in the nearest-rounding errors.

Construction sketch: a two-linear-layer net over synthetic Gaussian class
clusters. Class-prototype weights are snapped to exact multiples of the
quantization step, so nearest rounding leaves the clean pathway untouched. A
dedicated trigger-detector unit watches a reserved block of input coordinates
with weights at (0.5 + delta) * step: in full precision its bias keeps it
silent, but nearest rounding pushes each of those weights up by ~step/2,
and the accumulated gain crosses the unit's threshold exactly when the
additive trigger pattern is present. The unit routes into the target class
logit, so the backdoor activates only after quantization. The constructor
verifies the behaviour exhaustively before returning and rescales margins on
failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, PlantingError
from .io import Dataset, ModelGraph, linear, relu
from .metrics import attack_success_rate, clean_accuracy
from .quantize import clip_bounds

TRIGGER_COORDS = 4
N_SAMPLES = 256


@dataclass
class PlantedFixture:
    graph: ModelGraph
    clean: Dataset
    triggered: Dataset
    target: int
    certificate: dict
    bits: int


def _nearest_quantized(graph: ModelGraph, bits: int) -> ModelGraph:
    from .estimators import NearestGraphQuantizer

    return NearestGraphQuantizer(bits=bits).fit_transform(graph)


def _evaluate(graph: ModelGraph, clean: Dataset, triggered: Dataset, target: int) -> tuple[float, float]:
    return clean_accuracy(graph, clean), attack_success_rate(graph, triggered, target)


def build_planted_qcb(bits: int, input_dim: int = 16, classes: int = 2, seed: int = 0) -> PlantedFixture:
    """Construct a verified quantization-conditioned-backdoor fixture.

    Returns the full-precision graph, a clean and a triggered dataset (256
    samples each), the attack target class, and the certificate numbers
    (fp_cda, fp_asr, q_cda, q_asr) recomputed by exhaustive evaluation.
    """
    if bits not in (4, 8):
        raise ContractError("planted fixtures support 4-bit and 8-bit quantization")
    if classes < 2:
        raise ContractError("need at least 2 classes")
    feat_dim = input_dim - TRIGGER_COORDS
    if feat_dim < classes:
        raise ContractError(f"input_dim must be >= classes + {TRIGGER_COORDS}")

    rng = np.random.default_rng(seed)
    _, p = clip_bounds(bits)
    s1 = 1.0 / 16.0 if bits == 8 else 1.0 / 4.0  # power of two: snapped weights are float-exact
    s2 = 1.0 / 16.0 if bits == 8 else 1.0
    gain_units = 16 if bits == 8 else 1  # prototype routing in s2 units
    target = int(rng.integers(0, classes))
    rho, sigma_f, sigma_t = 2.0, 0.2, 0.02

    # orthonormal class directions in the feature block
    basis, _ = np.linalg.qr(rng.normal(size=(feat_dim, classes)))
    directions = basis.T  # (classes, feat_dim)

    labels = np.arange(N_SAMPLES) % classes
    feats = rho * directions[labels] + sigma_f * rng.normal(size=(N_SAMPLES, feat_dim))
    trig_noise = sigma_t * rng.normal(size=(N_SAMPLES, TRIGGER_COORDS))
    clean_x = np.concatenate([feats, trig_noise], axis=1).astype(np.float32)

    # clean-pathway weights, exact on the quantization grid
    proto = s1 * np.rint(directions / s1)
    hidden = classes + 2  # prototypes + trigger detector + scale anchor
    trig_row, anchor_row = classes, classes + 1

    w1 = np.zeros((hidden, input_dim), dtype=np.float64)
    w1[:classes, :feat_dim] = proto
    w1[anchor_row, 0] = s1 * p
    b1 = np.zeros(hidden, dtype=np.float64)

    v = np.zeros((classes, hidden), dtype=np.float64)
    for c in range(classes):
        v[c, c] = s2 * gain_units
    v[target, trig_row] = s2 * p
    g_gain, big_gain = s2 * gain_units, s2 * p

    # logits without the trigger unit do not depend on the trigger amplitude,
    # so the required detector activation is computable up front
    hidden_clean = np.maximum(clean_x[:, :feat_dim] @ proto.T, 0.0)
    logits_proto = hidden_clean @ v[:, :classes].T
    others = logits_proto.copy()
    others[:, target] = -np.inf
    margin2 = 0.25 * g_gain * rho
    needed_act = float((others.max(axis=1) - logits_proto[:, target] + margin2).max()) / big_gain

    feat_reach = float(clean_x[:, :feat_dim].sum(axis=1).max())
    noise_sum = trig_noise.sum(axis=1)
    kappa_fp, kappa_theta, kappa_q = 2.0, 2.0, 2.0

    # trigger fractional parts sit just above the rounding boundary: close
    # enough to 1/2 that the error-weighted flip pull (~2E) dominates the
    # binarization penalty's push (~8*delta) at the optimizer's init
    delta = 0.05 * s1

    certificate = {}
    for attempt in range(8):
        grow = 1.4**attempt
        up = 0.5 + delta
        down = 0.5 - delta
        amp_act = (needed_act / s1 + kappa_fp + kappa_q * grow
                   + up * float(noise_sum.max()) - float(noise_sum.min())) / (TRIGGER_COORDS * down)
        amp_theta = (feat_reach / s1 + kappa_theta * grow) / (TRIGGER_COORDS * up)
        amp = max(amp_act, amp_theta) * grow

        trig_response = TRIGGER_COORDS * amp + noise_sum  # per triggered sample, in input units
        theta = max(
            up * s1 * float(trig_response.max()) + kappa_fp * s1,
            s1 * feat_reach + (kappa_fp + kappa_theta) * s1,
        )

        w1_try = w1.copy()
        w1_try[trig_row, feat_dim:] = s1 * up
        b1_try = b1.copy()
        b1_try[trig_row] = -theta

        graph = ModelGraph(
            layers=[
                linear(w1_try.astype(np.float32), b1_try.astype(np.float32)),
                relu(),
                linear(v.astype(np.float32), np.zeros(classes, np.float32)),
            ],
            input_shape=(input_dim,),
        )

        triggered_x = clean_x.copy()
        triggered_x[:, feat_dim:] += np.float32(amp)
        clean_ds = Dataset(clean_x, labels=labels)
        triggered_ds = Dataset(triggered_x, labels=labels, trigger_target=target)

        fp_cda, fp_asr = _evaluate(graph, clean_ds, triggered_ds, target)
        q_graph = _nearest_quantized(graph, bits)
        q_cda, q_asr = _evaluate(q_graph, clean_ds, triggered_ds, target)

        certificate = {"fp_cda": fp_cda, "fp_asr": fp_asr, "q_cda": q_cda, "q_asr": q_asr}
        if fp_asr <= 1.0 and q_asr >= 90.0 and q_cda >= fp_cda - 2.0 and fp_cda >= 95.0:
            return PlantedFixture(graph, clean_ds, triggered_ds, target, certificate, bits)

    raise PlantingError(f"could not verify fixture after 8 attempts, last certificate {certificate}")
