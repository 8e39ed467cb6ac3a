"""regioncap: joint region localization and captioning at desk scale."""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, backward  # noqa: F401
