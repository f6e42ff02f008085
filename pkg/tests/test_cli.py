import json

import pytest
import torch

from rasc.audio import load_wav, save_wav
from rasc.cli import EXIT_BITSTREAM, EXIT_INPUT, EXIT_MODEL, EXIT_TRAIN, main
from rasc.data import synthetic_speech
from rasc.model import SpeechCodec, save_model, toy_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    torch.manual_seed(3)
    save_model(SpeechCodec(toy_config()).eval(), d / "a.ckpt")
    torch.manual_seed(4)
    save_model(SpeechCodec(toy_config()).eval(), d / "b.ckpt")
    (d / "clips").mkdir()
    for i in range(2):
        save_wav(d / "clips" / f"c{i}.wav", synthetic_speech(0.25, seed=i))
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_round_trip_and_info(workdir, capsys):
    wav = workdir / "clips" / "c0.wav"
    code, out, _ = run(capsys, "compress", wav, "-m", workdir / "a.ckpt", "-o", workdir / "x.rasc",
                       "--lambda", "9", "--json")
    assert code == 0
    rec = json.loads(out)
    code, out, _ = run(capsys, "info", workdir / "x.rasc", "--json")
    info = json.loads(out)
    assert info["lambda"] == 9.0
    assert info["payload_bits"] == rec["payload_bits"]
    assert sum(info["section_bits"].values()) == 8 * rec["bytes"]
    code, _, _ = run(capsys, "decompress", workdir / "x.rasc", "-m", workdir / "a.ckpt", "-o", workdir / "y.wav")
    assert code == 0
    assert len(load_wav(workdir / "y.wav")) == len(load_wav(wav))


def test_exit_codes(workdir, capsys):
    wav = workdir / "clips" / "c0.wav"
    assert run(capsys, "compress", wav, "-m", workdir / "nope.ckpt", "-o", workdir / "z.rasc")[0] == EXIT_MODEL
    assert run(capsys, "compress", workdir / "none.wav", "-m", workdir / "a.ckpt",
               "-o", workdir / "z.rasc")[0] == EXIT_INPUT
    (workdir / "junk.rasc").write_bytes(b"not a container")
    code, _, err = run(capsys, "info", workdir / "junk.rasc")
    assert code == EXIT_BITSTREAM and "magic" in err
    run(capsys, "compress", wav, "-m", workdir / "a.ckpt", "-o", workdir / "x.rasc")
    code, _, err = run(capsys, "decompress", workdir / "x.rasc", "-m", workdir / "b.ckpt", "-o", workdir / "q.wav")
    assert code == EXIT_BITSTREAM and "hash" in err
    with pytest.raises(SystemExit) as exc:
        main(["compress"])
    assert exc.value.code == 2


def test_eval_json_and_bd(workdir, capsys):
    code, out, _ = run(capsys, "eval", "-d", workdir / "clips", "-m", f"x={workdir / 'a.ckpt'}",
                       f"x={workdir / 'b.ckpt'}", "--json")
    assert code == 0
    recs = [json.loads(l) for l in out.splitlines()]
    assert sum(r["type"] == "clip" for r in recs) == 4
    means = [r for r in recs if r["type"] == "mean"]
    assert len(means) == 2 and all(r["n_clips"] == 2 for r in means)
    (workdir / "e.jsonl").write_text(out)
    code, _, err = run(capsys, "bd", workdir / "e.jsonl")
    assert code != 0 and "two labelled curves" in err


def test_train_command(workdir, capsys, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("lambda = 3.0\nsteps = 2\ncrop_samples = 800\npreset = toy\ncheckpoint_every = 0\n")
    code, out, err = run(capsys, "train", "-c", cfg, "-d", workdir / "clips", "-o", tmp_path / "t.ckpt", "--json")
    assert code == 0
    assert "not on the standard grid" in err
    assert json.loads(out)["step"] == 2
    (tmp_path / "empty").mkdir()
    assert run(capsys, "train", "-c", cfg, "-d", tmp_path / "empty", "-o", tmp_path / "u.ckpt")[0] == EXIT_TRAIN
