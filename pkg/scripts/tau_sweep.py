"""Sweep the blank threshold on a trained checkpoint and print the trade-off table.

    python3 scripts/tau_sweep.py --checkpoint run/checkpoint.json --data data \
        --taus 1.0,0.999,0.99,0.95,0.9,0.8 --out sweep.csv
"""

import argparse

from blankskip.bench import run_bench, write_report
from blankskip.data import dataset_path, read_dataset
from blankskip.decoder import DecodeOptions
from blankskip.train import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True, help="test split file or gen-data directory")
    ap.add_argument("--taus", default="1.0,0.999,0.99,0.95,0.9,0.8")
    ap.add_argument("--beam", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", default=None, help="optional CSV report")
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint).model
    utts = read_dataset(dataset_path(args.data, "test"))
    taus = [float(t) for t in args.taus.split(",")]
    rows = run_bench(model, utts, taus, DecodeOptions(beam_width=args.beam), repeats=args.repeats)
    base = rows[0]
    print(f"{'tau':>9} {'skip':>7} {'layers':>7} {'ter':>7} {'enc_s':>7} {'dec_s':>7} {'rtf':>8} {'enc_speedup':>11}")
    for r in rows:
        tau = "baseline" if r.tau is None else f"{r.tau:g}"
        print(f"{tau:>9} {r.skip_ratio:7.3f} {r.effective_layers:7.3f} {r.ter:7.4f} {r.wall_encoder_s:7.3f} "
              f"{r.wall_decode_s:7.3f} {r.rtf:8.5f} {base.wall_encoder_s / r.wall_encoder_s:11.2f}")
    if args.out:
        write_report(rows, args.out)


if __name__ == "__main__":
    main()
