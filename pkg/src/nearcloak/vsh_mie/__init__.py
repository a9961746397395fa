"""Semi-analytic sphere oracle: special functions, VSH expansions and layered-sphere solves."""
from .exterior import *  # noqa: F401,F403
from .exterior import __all__ as _e
from .harmonics import *  # noqa: F401,F403
from .harmonics import __all__ as _h
from .layered import *  # noqa: F401,F403
from .layered import __all__ as _l
from .special import *  # noqa: F401,F403
from .special import __all__ as _s

__all__ = list(_s) + list(_h) + list(_l) + list(_e)
