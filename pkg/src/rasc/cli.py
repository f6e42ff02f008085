"""Command line front end: ``rasc compress|decompress|info|train|eval|bd``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .audio import AudioClip, AudioFormatError, load_wav, save_wav
from .codec import CodecError, compress, decompress
from .coder import DecodeError, RangeCoderError
from .container import LAMBDA_GRID, BitstreamContainer, ContainerError
from .data import list_wavs
from .evaluation import EvalError, RdCurve, RdPoint, bd_rate, evaluate, read_quality_csv
from .model import load_model
from .tensor_core import CheckpointError
from .training import TrainConfig, TrainingError, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MODEL = 3
EXIT_INPUT = 4
EXIT_BITSTREAM = 5
EXIT_TRAIN = 6
EXIT_EVAL = 7


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_model(path):
    try:
        model, digest = load_model(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MODEL, f"cannot load model {path}: file not found") from exc
    except (CheckpointError, OSError, ValueError, TypeError) as exc:
        raise CliError(EXIT_MODEL, f"cannot load model {path}: {exc}") from exc
    return model, digest


def _read_wav(path) -> AudioClip:
    try:
        return load_wav(path)
    except (OSError, AudioFormatError, EOFError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from exc


def _read_container(path) -> BitstreamContainer:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from exc
    try:
        return BitstreamContainer.parse(blob)
    except ContainerError as exc:
        raise CliError(EXIT_BITSTREAM, f"{path}: {exc}") from exc


def _write(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write {path}: {exc}") from exc


def _emit(args, record: dict, human: str) -> None:
    print(json.dumps(record, sort_keys=True) if getattr(args, "json", False) else human)


# ------------------------------------------------------------------ commands


def cmd_compress(args) -> int:
    model, digest = _load_model(args.model)
    clip = _read_wav(args.input)
    try:
        cont = compress(clip, model, digest, args.lam)
    except CodecError as exc:
        raise CliError(EXIT_BITSTREAM, f"compression failed at {exc}") from exc
    blob = cont.serialize()
    _write(args.output, blob)
    kbps = cont.payload_bits / clip.duration / 1000 if clip.duration else 0.0
    _emit(args, {"output": str(args.output), "payload_bits": cont.payload_bits, "bytes": len(blob),
                 "duration": clip.duration, "kbps": kbps},
          f"{args.output}: {len(blob)} bytes, {cont.payload_bits} payload bits, {kbps:.3f} kbps")
    return EXIT_OK


def cmd_decompress(args) -> int:
    model, digest = _load_model(args.model)
    cont = _read_container(args.input)
    try:
        clip = decompress(cont, model, digest)
    except (ContainerError, DecodeError, RangeCoderError) as exc:
        raise CliError(EXIT_BITSTREAM, f"{args.input}: {exc}") from exc
    try:
        save_wav(args.output, clip)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write {args.output}: {exc}") from exc
    _emit(args, {"output": str(args.output), "samples": len(clip), "duration": clip.duration},
          f"{args.output}: {len(clip)} samples ({clip.duration:.3f} s)")
    return EXIT_OK


def cmd_info(args) -> int:
    cont = _read_container(args.input)
    bits = cont.section_bits()
    lam = LAMBDA_GRID[cont.lambda_index] if cont.lambda_index < len(LAMBDA_GRID) else None
    rec = {"model_hash": cont.model_hash.hex(), "sample_rate": cont.sample_rate,
           "n_samples": cont.n_samples, "n_frames": cont.n_frames, "lambda": lam,
           "n_fft": cont.n_fft, "hop": cont.hop, "slices": len(cont.slice_streams),
           "section_bits": bits, "payload_bits": cont.payload_bits}
    if args.json:
        print(json.dumps(rec, sort_keys=True))
        return EXIT_OK
    print(f"model hash   {rec['model_hash']}")
    print(f"audio        {cont.n_samples} samples @ {cont.sample_rate} Hz, {cont.n_frames} frames "
          f"(n_fft {cont.n_fft}, hop {cont.hop})")
    print(f"lambda       {'custom' if lam is None else lam}")
    for name, b in bits.items():
        print(f"{name:<12} {b:>10} bits")
    print(f"{'payload':<12} {cont.payload_bits:>10} bits")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = TrainConfig.from_file(args.config)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad training config {args.config}: {exc}") from exc
    try:
        paths = list_wavs(args.data)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot list {args.data}: {exc}") from exc
    clips = [_read_wav(p) for p in paths]
    if not clips:
        raise CliError(EXIT_TRAIN, f"empty dataset: no .wav files in {args.data}")
    if not cfg.standard_lambda:
        print(f"note: lambda {cfg.lam} is not on the standard grid {LAMBDA_GRID}", file=sys.stderr)
    try:
        report, _, _ = train(cfg, clips, args.output, log_path=args.log)
    except TrainingError as exc:
        raise CliError(EXIT_TRAIN, f"training aborted: {exc}") from exc
    _emit(args, json.loads(report.to_json()),
          f"step {report.step}: total {report.total:.4f} (R_y {report.rate_y_bits:.1f} b, "
          f"R_z {report.rate_z_bits:.1f} b, L_t {report.L_t:.5f}, L_f {report.L_f:.4f}) -> {args.output}")
    return EXIT_OK


def _parse_model_arg(spec: str) -> tuple[str, str]:
    if "=" in spec:
        label, path = spec.split("=", 1)
        return label, path
    return Path(spec).stem, spec


def _point_row(label, ckpt, p: RdPoint) -> str:
    q = "" if p.quality is None else f" {p.quality:>8.3f}"
    return (f"{label:<10} {Path(ckpt).stem:<14} {p.clip:<18} {p.kbps:>8.3f} {p.snr_db:>8.2f} "
            f"{p.mel_distance:>8.4f} {p.L_t:>9.5f} {p.L_f:>8.4f}{q}")


def cmd_eval(args) -> int:
    try:
        clips = {p.stem: load_wav(p) for p in list_wavs(args.data)}
    except (OSError, AudioFormatError) as exc:
        raise CliError(EXIT_INPUT, f"cannot load dataset {args.data}: {exc}") from exc
    if not clips:
        raise CliError(EXIT_INPUT, f"no .wav files in {args.data}")
    quality = None
    if args.quality_csv:
        try:
            quality = read_quality_csv(args.quality_csv)
        except (OSError, EvalError) as exc:
            raise CliError(EXIT_INPUT, str(exc)) from exc
    curves: dict[str, list] = {}
    if not args.json:
        print(f"{'label':<10} {'model':<14} {'clip':<18} {'kbps':>8} {'SNR dB':>8} {'mel':>8} "
              f"{'L_t':>9} {'L_f':>8}")
    failed_any = False
    for spec in args.model:
        label, ckpt = _parse_model_arg(spec)
        model, digest = _load_model(ckpt)
        stem = Path(ckpt).stem
        q = None if quality is None else {("", c): s for (m, c), s in quality.items() if m in ("", stem)}
        res = evaluate(label, clips, model, digest, workers=args.workers, quality=q)
        for p in res.points:
            _emit(args, {"type": "clip", "label": label, "model": ckpt, **p.to_dict()},
                  _point_row(label, ckpt, p))
        for name, err in res.failures.items():
            failed_any = True
            _emit(args, {"type": "failure", "label": label, "model": ckpt, "clip": name, "error": err},
                  f"{label:<10} {stem:<14} {name:<18} FAILED: {err}")
        if not res.points:
            raise CliError(EXIT_EVAL, f"{ckpt}: every clip failed to decode")
        mean = res.mean
        _emit(args, {"type": "mean", "label": label, "model": ckpt, "n_clips": len(res.points),
                     **mean.to_dict()}, _point_row(label, ckpt, mean))
        curves.setdefault(label, []).append(mean)
    _report_bd(args, curves)
    return EXIT_EVAL if failed_any and args.strict else EXIT_OK


def _report_bd(args, curves: dict) -> None:
    labels = [k for k, v in curves.items() if len(v) >= 2]
    if len(labels) < 2:
        return
    try:
        built = {k: RdCurve(k, curves[k]) for k in labels}
    except EvalError as exc:
        raise CliError(EXIT_EVAL, str(exc)) from exc
    ref = labels[0]
    for k in labels[1:]:
        try:
            pct = bd_rate(built[k], built[ref])
        except EvalError as exc:
            raise CliError(EXIT_EVAL, str(exc)) from exc
        _emit(args, {"type": "bd_rate", "a": k, "b": ref, "percent": pct},
              f"BD-rate {k} vs {ref}: {pct:+.2f}%")


def cmd_bd(args) -> int:
    """BD-rate between curves stored as JSON-lines ``mean`` records from ``eval --json``."""
    curves: dict[str, list] = {}
    for path in args.inputs:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from exc
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") != "mean":
                continue
            fields = {k: rec[k] for k in ("kbps", "L_t", "L_f", "snr_db", "mel_distance", "quality")}
            curves.setdefault(rec["label"], []).append(RdPoint(**fields))
    if len(curves) < 2:
        raise CliError(EXIT_EVAL, f"need two labelled curves, found {sorted(curves)}")
    _report_bd(args, curves)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rasc", description="Learned speech codec with a hyperprior "
                                 "entropy model and range coding.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="encode a 16 kHz mono WAV into a .rasc file")
    p.add_argument("input")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="lambda the checkpoint was trained with (recorded in the header)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a .rasc file into a WAV")
    p.add_argument("input")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("info", help="print a .rasc header and per-section bit counts")
    p.add_argument("input")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("train", help="train a model from a key = value config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-d", "--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--log", default=None, help="JSON-lines training log")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rate-distortion points for one or more checkpoints")
    p.add_argument("-d", "--data", required=True)
    p.add_argument("-m", "--model", required=True, nargs="+", help="[label=]checkpoint")
    p.add_argument("--json", action="store_true")
    p.add_argument("--quality-csv", "--quality-metric", dest="quality_csv", default=None,
                   help="external scores as model,clip,score rows; used as the BD quality axis")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="nonzero exit if any clip fails")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bd", help="BD-rate between curves saved by eval --json")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bd)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"rasc {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
