import sys
from importlib.metadata import PackageNotFoundError, version

if sys.version_info[0] < 3:  # pragma: no cover
    raise Exception("Python 3 only")

try:
    __version__ = version("metaxt")
except PackageNotFoundError:
    __version__ = "unknown version"

_print_options = {"max_lines": 40}

from .constants import (  # noqa: E402
    Activation,  # noqa: F401
    Const,
    Groups,  # noqa: F401
    MetaGradMode,  # noqa: F401
    Method,  # noqa: F401
    TaskKind,  # noqa: F401
)
from .datasets import (  # noqa: E402, F401
    Dataset,
    Example,
    LabelSpace,
    ParseError,
    TaskPair,
    UnknownLabelError,
    gen_granularity_pair,
    gen_tagset_pair,
    load_conll_tagging,
    load_csv_classification,
    sample_splits,
)
from .diff_engine import FlatParams, NumericalFailureError, Tape, grad, hvp_exact, hvp_fd  # noqa: E402, F401
from .harness import LtnMap, RunConfig, RunResult, accuracy, run, span_f1, sweep, token_f1  # noqa: E402, F401
from .losses import LossBundle, SoftLabel, l_meta, l_train, soft_ce  # noqa: E402, F401
from .meta_trainer import MetaTrainer  # noqa: E402, F401
from .models import EncoderSpec, LtnSpec, TaskHeadSpec, TransferNetwork  # noqa: E402, F401
from .util import set_print_options  # noqa: E402, F401

NULL = Const.NULL
