"""Classifier-as-generator bindings."""

from ._cag import *  # noqa: F401,F403
from ._cag import __doc__  # noqa: F401
