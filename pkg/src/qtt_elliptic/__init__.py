from .qtt_core import *  # noqa: F401,F403
