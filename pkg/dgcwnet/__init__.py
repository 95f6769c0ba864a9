import logging
from importlib.metadata import PackageNotFoundError, version

from . import (
    baselines as baselines,
)
from . import (
    bench as bench,
)
from . import (
    cli as cli,
)
from . import (
    config as config,
)
from . import (
    data as data,
)
from . import (
    dgcw as dgcw,
)
from . import (
    exceptions as exceptions,
)
from . import (
    layers as layers,
)
from . import (
    metrics as metrics,
)
from . import (
    network as network,
)
from . import (
    params as params,
)
from . import (
    serialization as serialization,
)
from . import (
    suites as suites,
)
from . import (
    tensor as tensor,
)
from . import (
    training as training,
)
from . import (
    util as util,
)

try:
    __version__ = version("dgcwnet")
except PackageNotFoundError:
    # package is not installed
    __version__ = "0.0.0+unknown"


logger = logging.getLogger(__name__)
logger.addHandler(logging.StreamHandler())
logger.setLevel(logging.INFO)
