"""Learned speech codec: STFT front end, causal convolution/RWKV backbone,
hyperprior channel-wise entropy model and a range coder."""
from .audio import AudioClip, StftConfig, istft, load_wav, save_wav, stft
from .codec import compress, decompress
from .container import BitstreamContainer
from .evaluation import RdCurve, RdPoint, bd_rate
from .model import ModelConfig, SpeechCodec, desk_config, load_model, save_model, toy_config
from .training import LossReport, TrainConfig, distortion, rd_loss, train

__version__ = "0.1.0"
