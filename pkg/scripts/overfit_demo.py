#!/usr/bin/env python3
"""Overfit the desk model on one synthetic clip and report the round trip.

    python scripts/overfit_demo.py --lam 9 --steps 2000 --seconds 1.0 --out demo/
"""
import argparse
import json
from pathlib import Path

import torch

from rasc.audio import save_wav
from rasc.codec import compress, decompress
from rasc.container import BitstreamContainer
from rasc.data import synthetic_speech
from rasc.evaluation import mel_distance, snr_db
from rasc.model import save_model
from rasc.tensor_core import checkpoint_digest
from rasc.training import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lam", type=float, default=9.0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seconds", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("overfit_demo"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    args.out.mkdir(parents=True, exist_ok=True)

    clip = synthetic_speech(args.seconds, seed=args.seed)

    def log(i, rep):
        if i % 100 == 0:
            print(f"step {i:5d}  loss {rep.total:8.4f}  R_y {rep.rate_y_bits:8.1f}  "
                  f"R_z {rep.rate_z_bits:6.1f}  L_t {rep.L_t:.5f}  L_f {rep.L_f:.4f}", flush=True)

    model, history = overfit(clip, args.lam, steps=args.steps, seed=args.seed)
    for i, rep in enumerate(history, 1):
        log(i, rep)
    blob = save_model(model, args.out / "model.ckpt")
    digest = checkpoint_digest(blob)
    cont = compress(clip, model, digest, args.lam)
    data = cont.serialize()
    (args.out / "clip.rasc").write_bytes(data)
    out = decompress(BitstreamContainer.parse(data, digest), model, digest)
    save_wav(args.out / "input.wav", clip)
    save_wav(args.out / "decoded.wav", out)
    summary = {"lam": args.lam, "steps": args.steps, "kbps": cont.payload_bits / clip.duration / 1000,
               "snr_db": snr_db(clip.samples, out.samples),
               "mel_distance": mel_distance(clip.samples, out.samples),
               "first_loss": history[0].total, "last_loss": history[-1].total}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
