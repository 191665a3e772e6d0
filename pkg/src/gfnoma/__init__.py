"""Activity detection for grant-free code-domain NOMA uplinks."""
from .cnn import CnnActivityDetector
from .cs import AmpDetector, OmpDetector
from .frontend import Decorrelator, decorrelate_frames
from .mud import OracleDetector, ber_with_ad, mmse_detect
from .simulator import FrameBatch, PowerProfile, gen_spreading, simulate_frames, snr_to_noise_var
from .threshold import ThresholdDetector

__version__ = "0.1.0"

__all__ = [
    "AmpDetector", "CnnActivityDetector", "Decorrelator", "FrameBatch", "OmpDetector",
    "OracleDetector", "PowerProfile", "ThresholdDetector", "ber_with_ad", "decorrelate_frames",
    "gen_spreading", "mmse_detect", "simulate_frames", "snr_to_noise_var",
]
