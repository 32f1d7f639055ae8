"""Train paired models with fixed seeds and compare KL distillation and factorized heads.

Variants: plain CTC, MTL only, MTL+KL (default), MTL+KL with factorized heads.
For each one this reports held-out greedy TER, intermediate/final spike offset,
and TER and skip ratio when decoding with skipping at ``--tau``.

    python3 scripts/compare_heads.py --epochs 10 --num-train 500
"""

import argparse
import json
from dataclasses import replace

from blankskip.bench import corpus_spike_offset, run_bench
from blankskip.data import TaskConfig, gen_dataset
from blankskip.decoder import DecodeOptions
from blankskip.train import TrainConfig, train


def variants(base: TrainConfig) -> dict[str, TrainConfig]:
    return {
        "ctc": replace(base, use_kl=False, use_mtl=False),
        "mtl": replace(base, use_kl=False),
        "mtl+kl": base,
        "mtl+kl factorized": replace(base, model=replace(base.model, factorized_heads=True)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--num-train", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tau", type=float, default=0.99)
    ap.add_argument("--json", default=None, help="write results here as well")
    args = ap.parse_args()

    task = TaskConfig(num_train=args.num_train)
    train_set, test_set = gen_dataset(task, "train"), gen_dataset(task, "test")
    base = TrainConfig(task=task, epochs=args.epochs, seed=args.seed)
    results = {}
    for name, cfg in variants(base).items():
        ckpt = train(cfg, train_set, test_set)
        offset, unmatched = corpus_spike_offset(ckpt.model, test_set)
        rows = run_bench(ckpt.model, test_set, [args.tau], DecodeOptions(), repeats=1)
        results[name] = {
            "ter": ckpt.loss_history[-1]["ter"],
            "spike_offset": offset,
            "unmatched_spikes": unmatched,
            "skip_ratio": rows[1].skip_ratio,
            "skip_ter": rows[1].ter,
        }
        r = results[name]
        print(f"{name:>18}: ter={r['ter']:.4f} offset={r['spike_offset']:.3f} unmatched={unmatched} "
              f"skip={r['skip_ratio']:.3f} skip_ter={r['skip_ter']:.4f}", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
