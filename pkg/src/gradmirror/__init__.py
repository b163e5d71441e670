"""Per-iteration checkpointing by mirroring reduced gradients to CPU shadow replicas.

Subpackages and modules:

* :mod:`gradmirror.collective` - ring schedules and the tagging rule
* :mod:`gradmirror.fabric` - wire format, switch, credit-based links
* :mod:`gradmirror.trainer` - deterministic trainer nodes
* :mod:`gradmirror.optim` - functional optimizers and sharding
* :mod:`gradmirror.shadow` - shadow reassembly, replicas, consolidation
* :mod:`gradmirror.costmodel` - FLOPs and checkpoint cost analysis
* :mod:`gradmirror.world` - deterministic simulated cluster
"""

from .errors import (ConfigError, GradMirrorError, InvariantError,  # noqa: F401
                     UnrecoverableError)
from .kernels import BACKEND  # noqa: F401

__version__ = "0.1.0"
