from enum import Enum, IntFlag

import numpy as np


class Const:
    #: Lower clamp applied inside ``log`` so that soft cross-entropy stays finite
    LOG_FLOOR = 1e-12
    #: Finite-difference HVP step is ``FD_EPSILON_SCALE / ||direction||``
    FD_EPSILON_SCALE = 0.01
    #: Global-norm clipping threshold for all parameter updates
    CLIP_NORM = 5.0
    #: Batch size used for both the target batch (before splitting) and the source batch
    BATCH_SIZE = 10
    MAX_TOKENS_CLASSIFICATION = 128
    MAX_TOKENS_TAGGING = 64
    #: The LTN output layer is initialised at this fraction of the usual scale
    LTN_OUTPUT_INIT_SCALE = 0.1
    DEFAULT_KS = (20, 50, 100, 200, 500)
    DEFAULT_SEEDS = (1, 2, 3, 4, 5)
    #: The tag excluded from micro F1
    OUTSIDE_TAG = "O"
    WORKERS_ENV_VAR = "METAXT_WORKERS"
    NULL = -1


class Groups(IntFlag):
    r"""
    Flags naming the trainable parameter groups. Groups are stored in
    :class:`~metaxt.diff_engine.FlatParams` under their lower-case names
    (``"theta"``, ``"v"``, ...).
    """

    #: The shared encoder
    THETA = np.dtype("uint32").type(1)
    #: The source task head
    V = np.dtype("uint32").type(1 << 1)
    #: The target task head
    W = np.dtype("uint32").type(1 << 2)
    #: The representation transfer network (only present if configured)
    PHI = np.dtype("uint32").type(1 << 3)
    #: The label transfer network, including its source-label embedding
    ALPHA = np.dtype("uint32").type(1 << 4)

    # COMBINATIONS OF FLAGS

    #: The main parameters, updated by the inner step and differentiated through
    MAIN = THETA | V | W | PHI
    #: The parameters read by the target predictor (and hence by the meta loss)
    TARGET_PREDICTOR = THETA | W
    #: Parameters touched by the multi-task objective
    MULTI_TASK = THETA | V | W
    ALL = MAIN | ALPHA

    NONE = 0

    @classmethod
    def canonical_iter(cls):
        # the order in which groups are laid out and flattened
        yield cls.THETA
        yield cls.V
        yield cls.W
        yield cls.PHI
        yield cls.ALPHA

    @classmethod
    def names(cls, flags):
        """
        Return the storage names of the groups in ``flags``, in canonical order.
        ``flags`` may also be a single name or an iterable of names.
        """
        if isinstance(flags, str):
            flags = cls.from_names([flags])
        elif not isinstance(flags, (int, IntFlag)):
            flags = cls.from_names(flags)
        return tuple(g.name.lower() for g in cls.canonical_iter() if g & flags)

    @classmethod
    def from_names(cls, names):
        flags = cls.NONE
        for name in names:
            try:
                flags |= cls[name.upper()]
            except KeyError:
                raise ValueError(f"Unknown parameter group '{name}'") from None
        return flags


class Method(str, Enum):
    METAXT = "MetaXT"
    XT = "XT"
    MULTI_TASK = "MultiTask"
    TARGET_ONLY = "TargetOnly"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        normalised = str(value).replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == normalised:
                return member
        raise ValueError(f"Unknown method '{value}', expected one of {[m.value for m in cls]}")

    def uses_source(self):
        return self is not Method.TARGET_ONLY

    def uses_ltn(self):
        return self in (Method.METAXT, Method.XT)


class MetaGradMode(str, Enum):
    EXACT = "exact"
    FINITE_DIFFERENCE = "finite_difference"


class TaskKind(str, Enum):
    SEQUENCE_CLASSIFICATION = "sequence_classification"
    TOKEN_TAGGING = "token_tagging"


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"
