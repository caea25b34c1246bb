"""
Soft-label cross-entropy and the composed training and meta objectives.

The tape-level objectives (:func:`train_objective`, :func:`meta_objective`)
operate on :class:`~metaxt.datasets.Batch` row matrices and a
:class:`~metaxt.diff_engine.ParamView`; the numeric functions :func:`l_train` and
:func:`l_meta` wrap them for plain evaluation.
"""

import dataclasses

import numpy as np

from .constants import Const, Groups
from .diff_engine import Tape


class SoftLabel:
    """
    A probability vector over a label space. Entries are non-negative and sum to
    one within 1e-9; one-hot vectors are valid members.
    """

    TOLERANCE = 1e-9

    def __init__(self, probs):
        probs = np.array(probs, dtype=np.float64)
        if probs.ndim != 1 or len(probs) == 0:
            raise ValueError(f"A soft label must be a non-empty vector, not shape {probs.shape}")
        if np.any(probs < 0):
            raise ValueError(f"Soft label has negative entries: {probs}")
        if abs(probs.sum() - 1) > self.TOLERANCE:
            raise ValueError(f"Soft label sums to {probs.sum()}, not 1")
        probs.setflags(write=False)
        self.probs = probs

    @classmethod
    def one_hot(cls, index, num_classes):
        if not 0 <= index < num_classes:
            raise ValueError(f"Class {index} out of range for {num_classes} classes")
        probs = np.zeros(num_classes)
        probs[index] = 1
        return cls(probs)

    @classmethod
    def uniform(cls, num_classes):
        return cls(np.full(num_classes, 1 / num_classes))

    def __len__(self):
        return len(self.probs)

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, SoftLabel) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"SoftLabel({np.array2string(self.probs, precision=4)})"

    def argmax(self):
        return int(np.argmax(self.probs))

    def entropy(self):
        nonzero = self.probs[self.probs > 0]
        return float(-np.sum(nonzero * np.log(nonzero)))


def soft_ce(y, p):
    """
    Soft cross-entropy :math:`-\\sum_i y_i \\log \\max(p_i, 10^{-12})`. For a one-hot
    ``y`` this is the usual cross-entropy.

    :param y: A :class:`SoftLabel` (or probability vector).
    :param p: A predicted probability vector of the same length.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"Label of length {len(y)} does not match prediction of length {len(p)}")
    return float(-np.sum(y * np.log(np.maximum(p, Const.LOG_FLOOR))))


@dataclasses.dataclass(frozen=True)
class LossBundle:
    """
    The three weighted terms of the training loss and their total
    """

    target_term: float
    source_term: float
    transfer_term: float
    gamma1: float
    gamma2: float
    total: float

    @classmethod
    def combine(cls, target_term, source_term, transfer_term, gamma1, gamma2):
        return cls(
            target_term,
            source_term,
            transfer_term,
            gamma1,
            gamma2,
            combine_terms(target_term, source_term, transfer_term, gamma1, gamma2),
        )

    def as_dict(self):
        return dataclasses.asdict(self)


def combine_terms(target_term, source_term, transfer_term, gamma1, gamma2):
    # Both numeric and tape values are combined in this fixed order
    total = target_term
    if source_term is not None:
        total = total + gamma1 * source_term
    if transfer_term is not None:
        total = total + gamma2 * transfer_term
    return total


def soft_ce_rows(tape, targets, probs, weights):
    """
    Weighted sum of per-row soft cross-entropies on a tape.

    :param numpy.ndarray targets: (rows, classes) soft targets, or a ``Var`` when the
        targets are themselves differentiable (LTN pseudo-labels).
    :param Var probs: (rows, classes) predicted probabilities.
    :param numpy.ndarray weights: (rows,) row weights, e.g. one over the number of
        tokens in the row's sentence, divided by the number of sentences.
    """
    if targets.shape != probs.shape:
        raise ValueError(f"Targets of shape {targets.shape} do not match predictions of shape {probs.shape}")
    weighted = tape.mul(targets, np.asarray(weights, dtype=np.float64)[:, np.newaxis])
    return tape.mul(tape.sum(tape.mul(weighted, tape.log(probs))), -1.0)


def _require_rows(batch, what):
    if batch is None or batch.num_examples == 0:
        raise ValueError(f"Empty {what} batch")


def train_objective(
    model, view, target, source=None, *, gamma1=1.0, gamma2=1.0, use_rtn=False, transfer=True, ltn_input=None
):
    """
    Build the training loss on a tape: the target term, plus ``gamma1`` times the
    source term, plus ``gamma2`` times the transfer term (the target head applied to
    source examples, scored against LTN pseudo-labels).

    :param TransferNetwork model: The network.
    :param ParamView view: The parameters on a tape.
    :param Batch target: The target training rows.
    :param Batch source: The source rows, or None for a target-only loss.
    :param bool transfer: Include the transfer term (ignored if ``source`` is None).
    :param numpy.ndarray ltn_input: A fixed (rows, h_dim) representation of the source
        rows to feed the LTN in place of the one computed from ``view``. The LTN never
        differentiates through its representation input, so second-order products
        taken by perturbing the encoder must hold this input at the base parameters.
    :return: The total loss ``Var`` and a dict of the individual term ``Var`` objects
        (terms that are not included map to None).
    """
    _require_rows(target, "target")
    tape = view.tape
    h_t = model.encode_rows(view, target.features)
    target_term = soft_ce_rows(tape, target.targets(), model.head_rows(view, h_t, model.target_head), target.weights)
    source_term = transfer_term = None
    if source is not None:
        _require_rows(source, "source")
        h_s = model.encode_rows(view, source.features)
        source_probs = model.head_rows(view, h_s, model.source_head)
        source_term = soft_ce_rows(tape, source.targets(), source_probs, source.weights)
        if transfer:
            h_rtn = model.encode_rows(view, source.features, apply_rtn=use_rtn) if use_rtn else h_s
            h_ltn = h_s if ltn_input is None else tape.const(ltn_input)
            pseudo = model.ltn_rows(view, source.features, source.labels, h=h_ltn)
            transfer_probs = model.head_rows(view, h_rtn, model.target_head)
            transfer_term = soft_ce_rows(tape, pseudo, transfer_probs, source.weights)
    total = combine_terms(target_term, source_term, transfer_term, gamma1, gamma2)
    return total, {"target_term": target_term, "source_term": source_term, "transfer_term": transfer_term}


def meta_objective(model, view, meta):
    """
    Build the meta loss on a tape: the target head's soft cross-entropy on the meta
    rows. Only the encoder and target head are read.
    """
    _require_rows(meta, "meta")
    h = model.encode_rows(view, meta.features)
    return soft_ce_rows(view.tape, meta.targets(), model.head_rows(view, h, model.target_head), meta.weights)


def l_train(model, params, batch_t, batch_s, gamma1=1.0, gamma2=1.0, use_rtn=False):
    """
    Evaluate the training loss numerically.

    :return: A :class:`LossBundle`. If ``batch_s`` is None the source and transfer
        terms are reported as zero.
    """
    tape = Tape(recording=False)
    view = params.on_tape(tape, Groups.NONE)
    total, terms = train_objective(model, view, batch_t, batch_s, gamma1=gamma1, gamma2=gamma2, use_rtn=use_rtn)
    values = {name: 0.0 if term is None else float(term.value) for name, term in terms.items()}
    return LossBundle(
        values["target_term"],
        values["source_term"],
        values["transfer_term"],
        gamma1,
        gamma2,
        float(total.value),
    )


def l_meta(model, params, batch_meta):
    tape = Tape(recording=False)
    return float(meta_objective(model, params.on_tape(tape, Groups.NONE), batch_meta).value)
