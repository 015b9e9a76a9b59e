"""impactlab: predict the service impact of network failures (time to
recovery and lost traffic volume) from syslog messages and traffic volume.

Subpackages: logtemplate (syslog template mining), synthgen (synthetic
failure datasets), tensorcore (autodiff kernel), model (the temporal
multimodal network), pipeline (training/evaluation/ablation), cli.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
