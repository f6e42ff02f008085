import os

import pytest
import torch
from hypothesis import settings

from rasc.data import synthetic_speech
from rasc.model import SpeechCodec, desk_config, save_model
from rasc.tensor_core import checkpoint_digest

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def desk_model():
    """Seeded, untrained desk-scale model plus its checkpoint digest."""
    torch.manual_seed(1234)
    model = SpeechCodec(desk_config()).eval()
    return model, checkpoint_digest(save_model(model))


@pytest.fixture(scope="session")
def speech_clip():
    return synthetic_speech(1.0, seed=3)
