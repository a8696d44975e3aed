"""
KIPPO - Koopman-inspired auxiliary representation learning on PPO.

A self-contained numpy implementation: reverse-mode autodiff, native continuous-control
environments, a Koopman-style latent model, a PPO agent acting on its latents, metrics and
the experiment harness.
"""

from __future__ import annotations

__title__ = "KIPPO"
__author__ = "kippo developers"
__license__ = "GNU"
__version__ = "1.0.0"

from typing import Literal, NamedTuple

from . import _enums as enums, _types as types
from .errors import *


class VersionInfo(NamedTuple):
    Major: int
    Minor: int
    Revision: int
    releaseLevel: Literal["alpha", "beta", "pre-release", "release", "development"]


version_info: VersionInfo = VersionInfo(Major=1, Minor=0, Revision=0, releaseLevel="development")

del NamedTuple, Literal, VersionInfo
