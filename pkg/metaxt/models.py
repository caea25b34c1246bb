"""
The shared encoder, the source and target task heads, the label transfer
network (LTN) and the optional representation transfer network (RTN).

All forward passes are written against a :class:`~metaxt.diff_engine.ParamView`
so that the same code serves numeric inference (on a non-recording tape) and
differentiable training.
"""

import collections
import dataclasses
import logging
import math

import numpy as np

from .constants import Activation, Const, Groups
from .diff_engine import FlatParams, ParamLayout, Tape
from .losses import SoftLabel


@dataclasses.dataclass(frozen=True)
class EncoderSpec:
    """
    A multilayer perceptron with widths ``hidden_dims + [h_dim]``. The activation
    is applied after every layer, including the last.

    :param int input_dim: Feature dimensionality.
    :param tuple hidden_dims: Widths of the hidden layers.
    :param int h_dim: Width of the output representation.
    :param str activation: ``"tanh"`` or ``"relu"``.
    :param int rtn_insert_layer: If not None, a width-preserving RTN can be applied
        to the activation after this (1-based) layer. Must be in [1, L-1].
    """

    input_dim: int
    hidden_dims: tuple = (64, 32)
    h_dim: int = 32
    activation: str = Activation.TANH.value
    rtn_insert_layer: int = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "activation", Activation(self.activation).value)
        if self.input_dim <= 0:
            raise ValueError(f"input_dim must be positive, not {self.input_dim}")
        if self.h_dim <= 0:
            raise ValueError(f"h_dim must be positive, not {self.h_dim}")
        if any(d <= 0 for d in self.hidden_dims):
            raise ValueError(f"Hidden widths must be positive: {self.hidden_dims}")
        if self.rtn_insert_layer is not None and not 1 <= self.rtn_insert_layer <= self.num_layers - 1:
            raise ValueError(f"rtn_insert_layer must be in [1, {self.num_layers - 1}], not {self.rtn_insert_layer}")

    @property
    def num_layers(self):
        return len(self.hidden_dims) + 1

    @property
    def widths(self):
        return (*self.hidden_dims, self.h_dim)

    @property
    def has_rtn(self):
        return self.rtn_insert_layer is not None

    @property
    def rtn_width(self):
        return self.widths[self.rtn_insert_layer - 1]

    def default_rtn_layer(self):
        return math.ceil(self.num_layers / 2)

    def with_rtn(self, layer=None):
        """
        Return a copy with an RTN inserted after ``layer`` (by default the middle layer)
        """
        if self.num_layers < 2:
            raise ValueError("An RTN needs an encoder with at least two layers")
        return dataclasses.replace(self, rtn_insert_layer=self.default_rtn_layer() if layer is None else layer)


@dataclasses.dataclass(frozen=True)
class TaskHeadSpec:
    h_dim: int
    num_classes: int
    applies_per_token: bool = False
    #: The parameter group holding this head: ``"v"`` (source) or ``"w"`` (target)
    group: str = "w"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"A task head needs at least 2 classes, not {self.num_classes}")
        if self.group not in ("v", "w"):
            raise ValueError(f"Task heads live in group 'v' or 'w', not '{self.group}'")


@dataclasses.dataclass(frozen=True)
class LtnSpec:
    """
    The LTN is a 3-layer feed-forward network on ``[h(x_s), e(y_s)]``, whose first
    layer therefore has input width ``h_dim + z_dim``, ending in a softmax over the
    target classes. ``hidden`` defaults to ``h_dim``.
    """

    h_dim: int
    num_target_classes: int
    num_source_classes: int
    z_dim: int = 8
    hidden: int = None
    activation: str = Activation.TANH.value

    def __post_init__(self):
        if self.hidden is None:
            object.__setattr__(self, "hidden", self.h_dim)
        object.__setattr__(self, "activation", Activation(self.activation).value)
        if self.z_dim <= 0 or self.hidden <= 0:
            raise ValueError("LTN widths must be positive")
        if self.num_target_classes < 2 or self.num_source_classes < 2:
            raise ValueError("The LTN needs at least 2 source and 2 target classes")

    @property
    def input_dim(self):
        return self.h_dim + self.z_dim


class TransferNetwork:
    """
    The full network: encoder (group ``theta``), source head (``v``), target head
    (``w``), optional RTN (``phi``) and LTN (``alpha``). The parameter layout is
    the same for every training method, so that identical seeds give identical
    initial parameters.

    ``calls`` counts evaluations of the LTN (``"ltn"``), of the source head
    (``"source_head"``) and of the RTN (``"rtn"``).
    """

    def __init__(self, encoder, source_head, target_head, ltn):
        if source_head.group != "v" or target_head.group != "w":
            raise ValueError("The source head must use group 'v' and the target head group 'w'")
        for spec in (source_head, target_head, ltn):
            if spec.h_dim != encoder.h_dim:
                raise ValueError(f"{type(spec).__name__} h_dim {spec.h_dim} != encoder h_dim {encoder.h_dim}")
        if ltn.num_target_classes != target_head.num_classes:
            raise ValueError("LTN output width must equal the number of target classes")
        if ltn.num_source_classes != source_head.num_classes:
            raise ValueError("LTN embedding rows must equal the number of source classes")
        self.encoder = encoder
        self.source_head = source_head
        self.target_head = target_head
        self.ltn = ltn
        self.layout = self._build_layout()
        self.calls = collections.Counter()

    @classmethod
    def build(
        cls,
        input_dim,
        num_source_classes,
        num_target_classes,
        *,
        hidden_dims=(64, 32),
        h_dim=32,
        z_dim=8,
        ltn_hidden=None,
        activation=Activation.TANH.value,
        use_rtn=False,
        rtn_insert_layer=None,
        per_token=False,
    ):
        encoder = EncoderSpec(input_dim, hidden_dims, h_dim, activation)
        if use_rtn:
            encoder = encoder.with_rtn(rtn_insert_layer)
        return cls(
            encoder,
            TaskHeadSpec(h_dim, num_source_classes, per_token, group="v"),
            TaskHeadSpec(h_dim, num_target_classes, per_token, group="w"),
            LtnSpec(h_dim, num_target_classes, num_source_classes, z_dim, ltn_hidden, activation),
        )

    def _build_layout(self):
        theta = []
        fan_in = self.encoder.input_dim
        for i, width in enumerate(self.encoder.widths):
            theta += [(f"enc_W{i}", (fan_in, width)), (f"enc_b{i}", (width,))]
            fan_in = width
        groups = {"theta": theta}
        for head in (self.source_head, self.target_head):
            groups[head.group] = [("W", (head.h_dim, head.num_classes)), ("b", (head.num_classes,))]
        if self.encoder.has_rtn:
            width = self.encoder.rtn_width
            groups["phi"] = [t for i in range(3) for t in ((f"rtn_W{i}", (width, width)), (f"rtn_b{i}", (width,)))]
        ltn = self.ltn
        groups["alpha"] = [
            ("embed", (ltn.num_source_classes, ltn.z_dim)),
            ("W1", (ltn.input_dim, ltn.hidden)),
            ("b1", (ltn.hidden,)),
            ("W2", (ltn.hidden, ltn.hidden)),
            ("b2", (ltn.hidden,)),
            ("W3", (ltn.hidden, ltn.num_target_classes)),
            ("b3", (ltn.num_target_classes,)),
        ]
        return ParamLayout(groups)

    def parameter_counts(self):
        return {group: self.layout.size(group) for group in self.layout}

    @property
    def num_params(self):
        return self.layout.size()

    def init_params(self, rng):
        """
        Weights uniform in :math:`\\pm 1/\\sqrt{\\text{fan\\_in}}` (the embedding's fan-in
        is the number of source classes), biases zero, and the LTN output layer at
        a tenth of the usual scale. Tensors are drawn in layout order.
        """
        groups = {}
        for group, shapes in self.layout.items():
            pieces = []
            for name, shape in shapes:
                if len(shape) == 1:
                    pieces.append(np.zeros(shape))
                    continue
                bound = 1 / np.sqrt(shape[0])
                if group == "alpha" and name == "W3":
                    bound *= Const.LTN_OUTPUT_INIT_SCALE
                pieces.append(rng.uniform(-bound, bound, size=shape))
            groups[group] = np.concatenate([p.ravel() for p in pieces])
        logging.debug(f"Initialised {self.num_params} parameters: {self.parameter_counts()}")
        return FlatParams(self.layout, groups)

    def zero_params(self):
        return FlatParams.zeros(self.layout)

    # TAPE-LEVEL FORWARD PASSES: inputs are (rows, features) matrices

    def _check_rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.encoder.input_dim:
            raise ValueError(f"Expected rows of width {self.encoder.input_dim}, got array of shape {X.shape}")
        return X

    def encode_rows(self, view, X, apply_rtn=False):
        """
        Encode a (rows, input_dim) matrix into (rows, h_dim) representations. If
        ``apply_rtn``, the RTN is applied after layer ``rtn_insert_layer``; with no
        RTN configured this is the plain forward pass.
        """
        X = self._check_rows(X)
        tape = view.tape
        theta = view["theta"]
        act = self.encoder.activation
        h = tape.const(X)
        for i in range(self.encoder.num_layers):
            h = tape.activation(tape.add(tape.matmul(h, theta[f"enc_W{i}"]), theta[f"enc_b{i}"]), act)
            if apply_rtn and self.encoder.has_rtn and i + 1 == self.encoder.rtn_insert_layer:
                h = self._rtn(view, h)
        return h

    def _rtn(self, view, h):
        self.calls["rtn"] += 1
        tape = view.tape
        phi = view["phi"]
        for i in range(3):
            h = tape.add(tape.matmul(h, phi[f"rtn_W{i}"]), phi[f"rtn_b{i}"])
            if i < 2:
                h = tape.activation(h, self.encoder.activation)
        return h

    def head_rows(self, view, h, head):
        """
        Class probabilities from a (rows, h_dim) representation
        """
        if h.shape[-1] != head.h_dim:
            raise ValueError(f"Representation width {h.shape[-1]} != head input width {head.h_dim}")
        if head.group == "v":
            self.calls["source_head"] += 1
        tape = view.tape
        p = view[head.group]
        return tape.softmax(tape.add(tape.matmul(h, p["W"]), p["b"]))

    def ltn_rows(self, view, X, source_labels, h=None):
        """
        LTN pseudo-labels for source rows: ``softmax(MLP([h(x_s), e(y_s)]))``. The
        representation enters as a constant, so no gradient reaches the encoder
        along this path.

        :param h: An already computed (rows, h_dim) encoding of ``X``, if available.
        """
        source_labels = np.asarray(source_labels, dtype=np.int64)
        n_src = self.ltn.num_source_classes
        if np.any(source_labels < 0) or np.any(source_labels >= n_src):
            raise ValueError(f"Source labels out of range for {n_src} source classes")
        self.calls["ltn"] += 1
        tape = view.tape
        if h is None:
            h = self.encode_rows(view, X)
        if h.shape[0] != len(source_labels):
            raise ValueError(f"{h.shape[0]} rows but {len(source_labels)} source labels")
        alpha = view["alpha"]
        act = self.ltn.activation
        z = tape.concat([tape.stop_gradient(h), tape.index_select(alpha["embed"], source_labels, axis=0)], axis=-1)
        z = tape.activation(tape.add(tape.matmul(z, alpha["W1"]), alpha["b1"]), act)
        z = tape.activation(tape.add(tape.matmul(z, alpha["W2"]), alpha["b2"]), act)
        return tape.softmax(tape.add(tape.matmul(z, alpha["W3"]), alpha["b3"]))

    # NUMERIC FORWARD PASSES on single examples

    @staticmethod
    def _rows(x):
        features = np.asarray(getattr(x, "features", x), dtype=np.float64)
        if features.ndim == 1:
            return features[np.newaxis, :], True
        return features, False

    def _numeric_view(self, params):
        return params.on_tape(Tape(recording=False), Groups.NONE)

    def encode(self, params, x, apply_rtn=False):
        """
        Representation of one example: a vector of width ``h_dim`` for a feature
        vector, or one row per token for a (tokens, features) matrix
        """
        X, single = self._rows(x)
        h = self.encode_rows(self._numeric_view(params), X, apply_rtn=apply_rtn).value
        return h[0] if single else h

    def head_forward(self, params, h, head=None):
        """
        Class probabilities for one representation (or one row per token) under
        ``head`` (by default the target head)
        """
        head = self.target_head if head is None else head
        h = np.asarray(h, dtype=np.float64)
        single = h.ndim == 1
        view = self._numeric_view(params)
        p = self.head_rows(view, view.tape.const(h[np.newaxis, :] if single else h), head).value
        return p[0] if single else p

    def ltn_forward(self, params, x_s, y_s):
        """
        The LTN's soft label for a source example and its hard source label. For a
        tagged sentence, ``y_s`` holds one tag per token and a list of soft labels is
        returned.
        """
        X, single = self._rows(x_s)
        labels = np.atleast_1d(np.asarray(y_s, dtype=np.int64))
        if len(labels) != len(X):
            raise ValueError(f"{len(X)} feature rows but {len(labels)} source labels")
        probs = self.ltn_rows(self._numeric_view(params), X, labels).value
        labels = [SoftLabel(row / row.sum()) for row in probs]
        return labels[0] if single else labels

    def predict_rows(self, params, X):
        """
        Target-class argmax for each row, ties going to the lowest class index.
        Only the encoder and target head are read.
        """
        view = self._numeric_view(params)
        probs = self.head_rows(view, self.encode_rows(view, X), self.target_head).value
        return np.argmax(probs, axis=1)

    def source_predict_rows(self, params, X):
        view = self._numeric_view(params)
        probs = self.head_rows(view, self.encode_rows(view, X), self.source_head).value
        return np.argmax(probs, axis=1)
