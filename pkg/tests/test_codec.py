import numpy as np
import pytest
import torch

from rasc.audio import AudioClip
from rasc.codec import compress, decode_latents, decompress
from rasc.coder import DecodeError
from rasc.container import BitstreamContainer, ContainerError
from rasc.data import synthetic_speech
from rasc.model import SpeechCodec, load_model, model_from_bytes, save_model, toy_config
from rasc.tensor_core import CheckpointError


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(7)
    m = SpeechCodec(toy_config()).eval()
    return m, save_model(m)


def digest(blob):
    from rasc.tensor_core import checkpoint_digest
    return checkpoint_digest(blob)


@pytest.mark.parametrize("seconds", [0.01, 0.1, 0.37])
def test_round_trip_lengths(toy, seconds):
    m, blob = toy
    clip = synthetic_speech(seconds, seed=3)
    cont = compress(clip, m, digest(blob))
    out = decompress(BitstreamContainer.parse(cont.serialize()), m, digest(blob))
    assert len(out) == len(clip)
    assert out.sample_rate == clip.sample_rate
    assert np.abs(out.samples).max() <= 1.0


def test_traces_agree(toy):
    m, blob = toy
    clip = synthetic_speech(0.3, seed=4)
    cont, enc = compress(clip, m, digest(blob), return_trace=True)
    _, dec = decompress(cont, m, return_trace=True)
    assert torch.equal(enc.z_symbols, dec.z_symbols)
    for a, b in zip(enc.y_symbols, dec.y_symbols):
        assert torch.equal(a, b)
    assert torch.equal(enc.y_bar, dec.y_bar)


def test_compress_is_deterministic(toy):
    m, blob = toy
    clip = synthetic_speech(0.2, seed=5)
    assert compress(clip, m, digest(blob)).serialize() == compress(clip, m, digest(blob)).serialize()


def test_silence_codes_cheaply(toy):
    m, blob = toy
    cont = compress(AudioClip(np.zeros(1600, dtype=np.float32)), m, digest(blob))
    assert len(decompress(cont, m)) == 1600


def test_wrong_model_rejected(toy):
    m, blob = toy
    cont = compress(synthetic_speech(0.1, seed=1), m, digest(blob))
    with pytest.raises(ContainerError, match="hash"):
        decompress(cont, m, b"\xff" * 8)


def test_corrupt_slice_detected(toy):
    m, blob = toy
    cont = compress(synthetic_speech(0.3, seed=2), m, digest(blob))
    bad = bytearray(cont.slice_streams[0])
    bad[-1] ^= 0x5A
    with pytest.raises(DecodeError):
        decode_latents(m, cont.z_stream, [bytes(bad)] + cont.slice_streams[1:], cont.n_frames)
    with pytest.raises(DecodeError):
        decode_latents(m, cont.z_stream, cont.slice_streams[:1], cont.n_frames)


def test_checkpoint_round_trip(toy, tmp_path):
    m, blob = toy
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    m2, h = load_model(path)
    assert h == digest(blob)
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    with pytest.raises(CheckpointError):
        model_from_bytes(blob[:-5])
