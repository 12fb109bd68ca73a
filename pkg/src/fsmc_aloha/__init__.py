"""Queue- and CSI-aware power and threshold control for slotted ALOHA over FSMC fading."""

from .channel import FsmcChannel, iid_channel, load_table1, stationary_distribution
from .dynamics import Feedback, FeedbackModel, SystemParams
from .errors import (
    ConvergenceError,
    InvalidInputError,
    NoUniqueStationaryError,
    NullEventError,
    PolicyTableMissError,
    TimeScaleError,
)
from .policy import ThresholdPolicy, asymmetric_policy, lcsihp_policy

__version__ = "0.1.0"
