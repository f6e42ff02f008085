#!/usr/bin/env python3
"""Train one model per lambda on synthetic clips and write eval JSON lines.

    python scripts/rd_sweep.py --lams 0.25 2 9 18 --steps 500 --out sweep/
    rasc bd sweep/eval.jsonl      # once a second labelled sweep exists
"""
import argparse
import json
from pathlib import Path

import torch

from rasc.audio import save_wav
from rasc.data import synthetic_speech
from rasc.evaluation import evaluate
from rasc.model import load_model
from rasc.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lams", type=float, nargs="+", default=[0.25, 2.0, 9.0, 18.0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--train-clips", type=int, default=8)
    ap.add_argument("--test-clips", type=int, default=4)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--label", default="rasc")
    ap.add_argument("--out", type=Path, default=Path("rd_sweep"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    args.out.mkdir(parents=True, exist_ok=True)

    train_set = [synthetic_speech(2.0, seed=s) for s in range(args.train_clips)]
    test_set = {f"test{i}": synthetic_speech(2.0, seed=1000 + i) for i in range(args.test_clips)}
    for name, clip in test_set.items():
        save_wav(args.out / f"{name}.wav", clip)

    with open(args.out / "eval.jsonl", "w") as fh:
        for lam in args.lams:
            cfg = TrainConfig(lam=lam, steps=args.steps, preset=args.preset, checkpoint_every=0)
            ckpt = args.out / f"lam{lam:g}.ckpt"
            train(cfg, train_set, ckpt)
            model, digest = load_model(ckpt)
            res = evaluate(args.label, test_set, model, digest)
            mean = res.mean
            rec = {"type": "mean", "label": args.label, "model": str(ckpt), "n_clips": len(res.points),
                   **mean.to_dict()}
            fh.write(json.dumps(rec) + "\n")
            print(f"lambda {lam:6g}: {mean.kbps:7.3f} kbps  SNR {mean.snr_db:6.2f} dB  "
                  f"mel {mean.mel_distance:.4f}  failures {len(res.failures)}", flush=True)


if __name__ == "__main__":
    main()
