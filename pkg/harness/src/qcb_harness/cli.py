"""CLI: train a quantization-conditioned backdoor and export engine containers."""

from __future__ import annotations

import argparse
import json
import sys

from .data import TriggerSpec
from .train import AttackConfig, TrainingFailed, export_bundle, train_adaptive, train_qcb


def build_parser():
    p = argparse.ArgumentParser(prog="qcb-harness")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train an attacked model and export containers")
    t.add_argument("--arch", choices=("small_cnn", "mlp"), default="small_cnn")
    t.add_argument("--bits", type=int, choices=(4, 8), default=8)
    t.add_argument("--adaptive", action="store_true", help="also implant the flipped-rounding backdoor")
    t.add_argument("--target", type=int, default=0)
    t.add_argument("--poison-rate", type=float, default=0.5)
    t.add_argument("--trigger-size", type=int, default=3)
    t.add_argument("--trigger-value", type=float, default=1.0)
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--gamma", type=float, default=1.0)
    t.add_argument("--zeta", type=float, default=1.0)
    t.add_argument("--eta", type=float, default=1.0)
    t.add_argument("--lambda-q", type=float, default=1.0)
    t.add_argument("--lambda-f", type=float, default=1.0)
    t.add_argument("--clean-epochs", type=int, default=15)
    t.add_argument("--attack-epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = AttackConfig(
        bits=args.bits, target_class=args.target, poison_rate=args.poison_rate,
        trigger=TriggerSpec(size=args.trigger_size, value=args.trigger_value),
        alpha=args.alpha, beta=args.beta, gamma=args.gamma, zeta=args.zeta, eta=args.eta,
        lambda_q=args.lambda_q, lambda_f=args.lambda_f, clean_epochs=args.clean_epochs,
        attack_epochs=args.attack_epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
    )
    try:
        result = (train_adaptive if args.adaptive else train_qcb)(args.arch, cfg)
    except TrainingFailed as exc:
        print(f"error: training failed to reach the attack criteria: {json.dumps(exc.report)}",
              file=sys.stderr)
        return 1
    export_bundle(result, cfg, args.out_dir)
    print(json.dumps(result.report, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
