"""
A small reverse-mode differentiation engine for scalar losses of dense networks.

Every primitive records a node on a :class:`Tape`. Adjoints are themselves
written in terms of the same primitives, so a backward pass can be recorded
onto the tape (``create_graph=True``) and differentiated again. This is what
the exact mixed Hessian-vector product :func:`hvp_exact` relies on.
"""

import collections
import logging

import numpy as np

from .constants import Const, Groups


class NumericalFailureError(ArithmeticError):
    """
    Raised when a non-finite value is produced on a tape, either during the
    forward evaluation or while propagating adjoints.
    """


class TapeNode(collections.namedtuple("TapeNode", "op, inputs, attrs, name")):
    def is_leaf(self):
        return self.op in ("leaf", "const")

    def __str__(self):
        return self.op if self.name is None else f"{self.op} '{self.name}'"


class Var:
    """
    A handle onto a value computed on a tape. Arithmetic operators are routed
    to the tape primitives. A ``Var`` with ``index`` of ``None`` is detached:
    it carries a value but no node, and is treated as a constant if it is
    used in a recording tape.
    """

    __slots__ = ("tape", "index", "value")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.add(self, self.tape.mul(other, -1.0))

    def __rsub__(self, other):
        return self.tape.add(other, self.tape.mul(self, -1.0))

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return self.tape.sum(self, axis=axis, keepdims=keepdims)


def _normalise_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Tape:
    """
    An ordered record of primitive operations. Nodes are appended as they are
    evaluated, so every node's inputs precede it (the tape is always in
    topological order). Values are held in ``values`` and the numeric
    adjoints of the most recent non-recording backward pass in ``adjoints``.

    :param bool recording: If False, primitives are evaluated but nothing is
        recorded; this is used for plain inference.
    :param bool check_finite: If True (default) every computed buffer is checked
        and a :class:`NumericalFailureError` raised naming the offending node.
    """

    PRIMITIVES = (
        "leaf",
        "const",
        "add",
        "mul",
        "matmul",
        "tanh",
        "relu",
        "softmax",
        "log",
        "reciprocal",
        "sum",
        "concat",
        "index_select",
    )

    def __init__(self, *, recording=True, check_finite=True):
        self.nodes = []
        self.values = []
        self.requires_grad = []
        self.adjoints = {}
        self.recording = recording
        self.check_finite = check_finite
        self._context = None

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, index):
        return self.nodes[index]

    def var(self, index):
        return Var(self, index, self.values[index])

    def _push(self, op, inputs, value, attrs=None, name=None):
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            where = f"node {len(self.nodes)} ({op if name is None else f'{op} {name!r}'})"
            if self._context is not None:
                where += f" while differentiating node {self._context}"
            raise NumericalFailureError(f"Non-finite value produced by {where}")
        if not self.recording:
            return Var(self, None, value)
        self.nodes.append(TapeNode(op, tuple(v.index for v in inputs), attrs, name))
        self.values.append(value)
        if op == "leaf":
            self.requires_grad.append(True)
        else:
            self.requires_grad.append(any(self.requires_grad[v.index] for v in inputs))
        return Var(self, len(self.nodes) - 1, value)

    def _as_var(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Cannot combine values from different tapes")
            if x.index is None and self.recording:
                return self.const(x.value)
            return x
        return self.const(x)

    # LEAVES

    def leaf(self, value, name=None):
        """
        Add a differentiable input (a parameter tensor) to the tape
        """
        value = np.array(value, dtype=np.float64)
        if not self.recording:
            raise ValueError("Cannot add differentiable leaves to a non-recording tape")
        return self._push("leaf", (), value, name=name)

    def const(self, value, name=None):
        return self._push("const", (), np.array(value, dtype=np.float64), name=name)

    def stop_gradient(self, x):
        """
        Re-enter the value of ``x`` as a constant, blocking gradient flow
        """
        return self.const(x.value if isinstance(x, Var) else x)

    # PRIMITIVES

    def add(self, a, b):
        a, b = self._as_var(a), self._as_var(b)
        return self._push("add", (a, b), a.value + b.value)

    def mul(self, a, b):
        a, b = self._as_var(a), self._as_var(b)
        return self._push("mul", (a, b), a.value * b.value)

    def matmul(self, a, b, *, trans_a=False, trans_b=False):
        a, b = self._as_var(a), self._as_var(b)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul requires 2-D operands, got shapes {a.shape} and {b.shape}")
        lhs = a.value.T if trans_a else a.value
        rhs = b.value.T if trans_b else b.value
        if lhs.shape[1] != rhs.shape[0]:
            raise ValueError(f"matmul dimension mismatch: {lhs.shape} @ {rhs.shape}")
        return self._push("matmul", (a, b), lhs @ rhs, attrs=(trans_a, trans_b))

    def tanh(self, x):
        x = self._as_var(x)
        return self._push("tanh", (x,), np.tanh(x.value))

    def relu(self, x):
        x = self._as_var(x)
        return self._push("relu", (x,), np.maximum(x.value, 0.0))

    def softmax(self, x):
        """
        Softmax over the last axis, evaluated after subtracting the row maximum
        """
        x = self._as_var(x)
        shifted = x.value - np.max(x.value, axis=-1, keepdims=True)
        e = np.exp(shifted)
        return self._push("softmax", (x,), e / np.sum(e, axis=-1, keepdims=True))

    def log(self, x, floor=Const.LOG_FLOOR):
        """
        ``log(max(x, floor))``. The adjoint is zero wherever the clamp is active.
        """
        x = self._as_var(x)
        return self._push("log", (x,), np.log(np.maximum(x.value, floor)), attrs=floor)

    def reciprocal(self, x):
        x = self._as_var(x)
        if np.any(x.value == 0):
            raise NumericalFailureError(f"Division by zero in reciprocal at node {len(self.nodes)}")
        return self._push("reciprocal", (x,), 1.0 / x.value)

    def sum(self, x, axis=None, keepdims=False):
        """
        Sum over ``axis``. Without ``keepdims`` only a leading block of axes
        (or all axes) may be reduced, so that the result always broadcasts back
        against the input.
        """
        x = self._as_var(x)
        axes = _normalise_axes(axis, x.ndim)
        if not keepdims and axes != tuple(range(len(axes))):
            raise ValueError(f"sum over non-leading axes {axes} requires keepdims=True")
        return self._push("sum", (x,), np.sum(x.value, axis=axes, keepdims=keepdims), attrs=(axes, keepdims))

    def concat(self, xs, axis=-1):
        xs = [self._as_var(x) for x in xs]
        if len(xs) == 0:
            raise ValueError("concat requires at least one input")
        if any(x.ndim != 2 for x in xs):
            raise ValueError("concat requires 2-D inputs")
        axis = axis % 2
        value = np.concatenate([x.value for x in xs], axis=axis)
        return self._push("concat", tuple(xs), value, attrs=(axis, tuple(x.shape[axis] for x in xs)))

    def index_select(self, x, indices, axis=0):
        x = self._as_var(x)
        if x.ndim != 2:
            raise ValueError("index_select requires a 2-D input")
        indices = np.asarray(indices, dtype=np.int64)
        axis = axis % 2
        if indices.ndim != 1:
            raise ValueError("index_select requires a 1-D index array")
        if len(indices) > 0 and (indices.min() < 0 or indices.max() >= x.shape[axis]):
            raise ValueError(f"index out of range for axis {axis} of size {x.shape[axis]}")
        return self._push("index_select", (x,), np.take(x.value, indices, axis=axis), attrs=(axis, indices))

    def activation(self, x, kind):
        if kind == "tanh":
            return self.tanh(x)
        if kind == "relu":
            return self.relu(x)
        raise ValueError(f"Unknown activation '{kind}'")

    # REVERSE SWEEP

    def backward(self, output, wrt, *, create_graph=False):
        """
        Propagate adjoints from a scalar ``output`` back through the tape.

        :param Var output: A scalar node on this tape.
        :param list wrt: The leaf ``Var`` objects whose adjoints are required.
        :param bool create_graph: If True, the adjoint computations are recorded on
            this tape, and the returned adjoints are ``Var`` objects that can
            themselves be differentiated. If False, numpy arrays are returned.
        :return: A list of adjoints, one per entry in ``wrt``. Leaves that do not
            influence ``output`` get zeros.
        """
        output = self._as_var(output)
        if output.value.shape != ():
            raise ValueError(f"backward requires a scalar output, not shape {output.shape}")
        previous = self.recording
        self.recording = create_graph
        adjoints = {output.index: self._seed(np.ones(()))}
        try:
            for i in range(output.index, -1, -1):
                g = adjoints.get(i)
                if g is None or not self.requires_grad[i]:
                    continue
                node = self.nodes[i]
                if node.is_leaf():
                    continue
                self._context = f"{i} ({node})"
                inputs = [self.var(j) for j in node.inputs]
                input_grads = _ADJOINTS[node.op](self, node, g, self.var(i), inputs)
                for j, gj in zip(node.inputs, input_grads):
                    if gj is None or not self.requires_grad[j]:
                        continue
                    adjoints[j] = gj if j not in adjoints else self.add(adjoints[j], gj)
        finally:
            self._context = None
            self.recording = previous
        if not create_graph:
            self.adjoints = {i: g.value for i, g in adjoints.items()}
        result = []
        for v in wrt:
            g = adjoints.get(v.index)
            if g is None:
                result.append(self.const(np.zeros_like(v.value)) if create_graph else np.zeros_like(v.value))
            else:
                result.append(g if create_graph else g.value)
        logging.debug(f"backward pass over {output.index + 1} nodes, tape now has {len(self)} nodes")
        return result

    def _seed(self, value):
        if self.recording:
            return self.const(value)
        return Var(self, None, np.asarray(value, dtype=np.float64))


# ADJOINT RULES
# Each rule returns one adjoint (or None) per input, written in tape primitives.


def _unbroadcast(tape, g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = tape.sum(g, axis=tuple(range(lead)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and g.shape[i] != 1)
    if axes:
        g = tape.sum(g, axis=axes, keepdims=True)
    return g


def _adjoint_add(tape, node, g, out, inputs):
    a, b = inputs
    return [_unbroadcast(tape, g, a.shape), _unbroadcast(tape, g, b.shape)]


def _adjoint_mul(tape, node, g, out, inputs):
    a, b = inputs
    ga = _unbroadcast(tape, tape.mul(g, b), a.shape) if tape.requires_grad[a.index] else None
    gb = _unbroadcast(tape, tape.mul(g, a), b.shape) if tape.requires_grad[b.index] else None
    return [ga, gb]


def _adjoint_matmul(tape, node, g, out, inputs):
    a, b = inputs
    trans_a, trans_b = node.attrs
    ga = gb = None
    if tape.requires_grad[a.index]:
        if trans_a:
            ga = tape.matmul(b, g, trans_a=trans_b, trans_b=True)
        else:
            ga = tape.matmul(g, b, trans_b=not trans_b)
    if tape.requires_grad[b.index]:
        if trans_b:
            gb = tape.matmul(g, a, trans_a=True, trans_b=trans_a)
        else:
            gb = tape.matmul(a, g, trans_a=not trans_a)
    return [ga, gb]


def _adjoint_tanh(tape, node, g, out, inputs):
    return [tape.mul(g, tape.add(1.0, tape.mul(tape.mul(out, out), -1.0)))]


def _adjoint_relu(tape, node, g, out, inputs):
    (x,) = inputs
    return [tape.mul(g, tape.const((x.value > 0).astype(np.float64)))]


def _adjoint_softmax(tape, node, g, out, inputs):
    inner = tape.sum(tape.mul(g, out), axis=-1, keepdims=True)
    return [tape.mul(out, tape.add(g, tape.mul(inner, -1.0)))]


def _adjoint_log(tape, node, g, out, inputs):
    (x,) = inputs
    active = x.value > node.attrs
    # shift clamped entries away from zero; the mask removes them afterwards
    safe = tape.add(x, tape.const(np.where(active, 0.0, 1.0 - x.value)))
    return [tape.mul(tape.mul(g, tape.const(active.astype(np.float64))), tape.reciprocal(safe))]


def _adjoint_reciprocal(tape, node, g, out, inputs):
    return [tape.mul(tape.mul(g, tape.mul(out, out)), -1.0)]


def _adjoint_sum(tape, node, g, out, inputs):
    (x,) = inputs
    return [tape.add(tape.const(np.zeros(x.shape)), g)]


def _adjoint_concat(tape, node, g, out, inputs):
    axis, sizes = node.attrs
    grads = []
    offset = 0
    for x, size in zip(inputs, sizes):
        if tape.requires_grad[x.index]:
            grads.append(tape.index_select(g, np.arange(offset, offset + size), axis=axis))
        else:
            grads.append(None)
        offset += size
    return grads


def _adjoint_index_select(tape, node, g, out, inputs):
    (x,) = inputs
    axis, indices = node.attrs
    selector = np.zeros((len(indices), x.shape[axis]))
    selector[np.arange(len(indices)), indices] = 1.0
    if axis == 0:
        # out = selector @ x
        return [tape.matmul(tape.const(selector), g, trans_a=True)]
    # out = x @ selector.T
    return [tape.matmul(g, tape.const(selector))]


_ADJOINTS = {
    "add": _adjoint_add,
    "mul": _adjoint_mul,
    "matmul": _adjoint_matmul,
    "tanh": _adjoint_tanh,
    "relu": _adjoint_relu,
    "softmax": _adjoint_softmax,
    "log": _adjoint_log,
    "reciprocal": _adjoint_reciprocal,
    "sum": _adjoint_sum,
    "concat": _adjoint_concat,
    "index_select": _adjoint_index_select,
}


class ParamLayout:
    """
    The per-group ordered list of named tensor shapes that a
    :class:`FlatParams` vector is cut into.
    """

    def __init__(self, groups):
        self._groups = {}
        for group in Groups.canonical_iter():
            name = group.name.lower()
            if name in groups:
                self._groups[name] = tuple((tname, tuple(shape)) for tname, shape in groups[name])
        unknown = set(groups) - set(self._groups)
        if unknown:
            raise ValueError(f"Unknown parameter groups {sorted(unknown)}")

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self._groups == other._groups

    def __contains__(self, group):
        return group in self._groups

    def __iter__(self):
        return iter(self._groups)

    def items(self):
        return self._groups.items()

    def shapes(self, group):
        return self._groups[group]

    def size(self, group=None):
        if group is None:
            return sum(self.size(g) for g in self._groups)
        return sum(int(np.prod(shape, dtype=np.int64)) for _, shape in self._groups[group])


class FlatParams:
    """
    Named, ordered flat parameter vectors, one per group (``theta``, ``v``,
    ``w``, ``phi``, ``alpha``). The arrays are read-only: every update returns a
    new object.

    :param ParamLayout layout: How each group is cut into tensors.
    :param dict groups: Map from group name to a 1-D vector of the right length.
    """

    def __init__(self, layout, groups):
        self.layout = layout
        self.groups = {}
        for name in layout:
            if name not in groups:
                raise ValueError(f"Missing parameter group '{name}'")
            vec = np.array(groups[name], dtype=np.float64).ravel()
            if len(vec) != layout.size(name):
                raise ValueError(f"Group '{name}' has length {len(vec)}, expected {layout.size(name)}")
            vec.setflags(write=False)
            self.groups[name] = vec

    @classmethod
    def zeros(cls, layout):
        return cls(layout, {name: np.zeros(layout.size(name)) for name in layout})

    def __len__(self):
        return sum(len(v) for v in self.groups.values())

    def __getitem__(self, group):
        return self.groups[group]

    def __contains__(self, group):
        return group in self.groups

    def identical(self, other):
        """
        True if ``other`` has the same layout and bit-identical values
        """
        return (
            self.layout == other.layout
            and self.groups.keys() == other.groups.keys()
            and all(np.array_equal(self.groups[g], other.groups[g]) for g in self.groups)
        )

    def _names(self, groups):
        if groups is None:
            return tuple(self.groups)
        return tuple(g for g in Groups.names(groups) if g in self.groups)

    def flatten(self, groups=None):
        """
        Concatenate the requested groups (all by default) in canonical order
        """
        names = self._names(groups)
        if len(names) == 0:
            return np.zeros(0)
        return np.concatenate([self.groups[g] for g in names])

    def unflatten(self, vector, groups=None):
        """
        The inverse of :meth:`flatten`: return a copy in which the requested groups
        are replaced by consecutive slices of ``vector``.
        """
        names = self._names(groups)
        vector = np.asarray(vector, dtype=np.float64)
        expected = sum(len(self.groups[g]) for g in names)
        if vector.shape != (expected,):
            raise ValueError(f"Vector of shape {vector.shape} does not match length {expected}")
        replaced = dict(self.groups)
        offset = 0
        for g in names:
            n = len(self.groups[g])
            replaced[g] = vector[offset : offset + n]
            offset += n
        return FlatParams(self.layout, replaced)

    def split(self, vector, groups=None):
        """
        Cut a flat vector (laid out as by :meth:`flatten`) into a dict of group vectors
        """
        names = self._names(groups)
        out = {}
        offset = 0
        for g in names:
            n = len(self.groups[g])
            out[g] = np.asarray(vector[offset : offset + n])
            offset += n
        if offset != len(vector):
            raise ValueError(f"Vector of length {len(vector)} does not match length {offset}")
        return out

    def tensors(self, group):
        """
        Return a dict of read-only tensor views for ``group``
        """
        out = {}
        offset = 0
        vec = self.groups[group]
        for name, shape in self.layout.shapes(group):
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = vec[offset : offset + n].reshape(shape)
            offset += n
        return out

    def replace(self, **groups):
        updated = dict(self.groups)
        updated.update(groups)
        return FlatParams(self.layout, updated)

    def axpy(self, scale, direction):
        """
        Return ``self + scale * direction`` where ``direction`` maps a subset of
        group names to vectors
        """
        updated = dict(self.groups)
        for g, d in direction.items():
            updated[g] = self.groups[g] + scale * np.asarray(d)
        return FlatParams(self.layout, updated)

    def on_tape(self, tape, requires):
        """
        Place these parameters on a tape. Groups in ``requires`` become
        differentiable leaves, other groups are added as constants when first read.
        """
        return ParamView(self, tape, Groups.names(requires))


class ParamView:
    """
    Access to parameter tensors as ``Var`` objects on a tape, by
    ``view[group][tensor_name]``. Groups that are never read are never placed on
    the tape; ``touched`` records which groups were read.
    """

    def __init__(self, params, tape, requires):
        self.params = params
        self.tape = tape
        self.requires = tuple(g for g in requires if g in params)
        self.touched = set()
        self._vars = {}
        for g in self.requires:
            self._load(g)

    def _load(self, group):
        as_leaf = group in self.requires
        self._vars[group] = {
            name: (self.tape.leaf(t, name=f"{group}.{name}") if as_leaf else self.tape.const(t, name=f"{group}.{name}"))
            for name, t in self.params.tensors(group).items()
        }

    def __getitem__(self, group):
        if group not in self.params:
            raise KeyError(f"Parameter group '{group}' is not part of this model")
        if group not in self._vars:
            self._load(group)
        self.touched.add(group)
        return self._vars[group]

    def leaves(self, groups=None):
        """
        The (group, tensor name, Var) triples of differentiable leaves, in layout order
        """
        names = self.requires if groups is None else tuple(g for g in Groups.names(groups) if g in self.requires)
        return [(g, name, self._vars[g][name]) for g in names for name, _ in self.params.layout.shapes(g)]


def _gather(view, adjoints, names):
    leaves = view.leaves(names)
    by_group = collections.defaultdict(list)
    for (g, _, _), a in zip(leaves, adjoints):
        by_group[g].append(np.ravel(a))
    return {
        g: np.concatenate(by_group[g]) if by_group[g] else np.zeros(0)
        for g in Groups.names(names)
        if g in view.requires
    }


def grad(loss, at, wrt):
    """
    Differentiate a scalar loss.

    :param loss: A function mapping a :class:`ParamView` to a scalar ``Var``.
    :param FlatParams at: The point at which to evaluate the gradient.
    :param wrt: The :class:`~metaxt.Groups` (or group names) to differentiate by.
    :return: A dict mapping each requested group present in ``at`` to its
        gradient vector. Other groups are absent.
    """
    tape = Tape()
    view = at.on_tape(tape, wrt)
    out = loss(view)
    leaves = view.leaves()
    adjoints = tape.backward(out, [v for _, _, v in leaves])
    return _gather(view, adjoints, view.requires)


def value_and_grad(loss, at, wrt):
    """
    As :func:`grad` but also return the loss value (as a float)
    """
    tape = Tape()
    view = at.on_tape(tape, wrt)
    out = loss(view)
    adjoints = tape.backward(out, [v for _, _, v in view.leaves()])
    return float(out.value), _gather(view, adjoints, view.requires)


def direction_norm(direction):
    return float(np.sqrt(sum(float(np.dot(d, d)) for d in direction.values())))


def hvp_fd(loss, at, direction, *, wrt=Groups.ALPHA, epsilon=None, epsilon_scale=Const.FD_EPSILON_SCALE):
    """
    Central finite-difference approximation to the mixed second derivative
    :math:`\\nabla^2_{\\alpha,\\Theta} L \\cdot d`, i.e.
    ``[grad_alpha L(Theta + eps d) - grad_alpha L(Theta - eps d)] / (2 eps)``.

    :param loss: A function mapping a :class:`ParamView` to a scalar ``Var``.
    :param FlatParams at: The evaluation point.
    :param dict direction: Map from group name to a direction vector ``d``.
    :param wrt: The groups to return the product for (``alpha`` by default).
    :param float epsilon: Fixed step. By default ``epsilon_scale / ||d||``.
    :return: A flat vector over the ``wrt`` groups, in canonical order.
    """
    norm = direction_norm(direction)
    if norm == 0:
        raise ValueError("hvp_fd requires a nonzero direction")
    if epsilon is None:
        epsilon = epsilon_scale / norm
    names = tuple(g for g in Groups.names(wrt) if g in at)
    plus = grad(loss, at.axpy(epsilon, direction), names)
    minus = grad(loss, at.axpy(-epsilon, direction), names)
    result = np.concatenate([(plus[g] - minus[g]) / (2 * epsilon) for g in names]) if names else np.zeros(0)
    if not np.all(np.isfinite(result)):
        raise NumericalFailureError("Non-finite result from finite-difference Hessian-vector product")
    return result


def hvp_exact(loss, at, direction, *, wrt=Groups.ALPHA):
    """
    Exact mixed Hessian-vector product, computed by recording the backward pass
    over the ``direction`` groups on the tape, forming the inner product
    :math:`\\nabla_\\Theta^\\top L \\cdot d` and differentiating it with respect to
    the ``wrt`` groups.

    Same contract as :func:`hvp_fd`.
    """
    if direction_norm(direction) == 0:
        raise ValueError("hvp_exact requires a nonzero direction")
    names = tuple(g for g in Groups.names(wrt) if g in at)
    inner = tuple(g for g in direction if g in at)
    tape = Tape()
    view = at.on_tape(tape, Groups.from_names(inner + names))
    out = loss(view)
    inner_leaves = view.leaves(Groups.from_names(inner))
    first = tape.backward(out, [v for _, _, v in inner_leaves], create_graph=True)
    total = tape.const(0.0)
    offsets = collections.Counter()
    for (g, _, leaf), adj in zip(inner_leaves, first):
        n = leaf.value.size
        d = np.asarray(direction[g])[offsets[g] : offsets[g] + n].reshape(leaf.shape)
        offsets[g] += n
        total = tape.add(total, tape.sum(tape.mul(adj, d)))
    outer_leaves = view.leaves(Groups.from_names(names))
    second = tape.backward(total, [v for _, _, v in outer_leaves])
    grads = _gather(view, second, names)
    return np.concatenate([grads[g] for g in names]) if names else np.zeros(0)


def finite_difference_grad(fn, x, step=1e-5):
    """
    Central finite-difference gradient of a scalar function of an array.
    """
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.ravel()
    grad_flat = out.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        grad_flat[i] = (f_plus - f_minus) / (2 * step)
    return out


def relative_error(a, b, floor=1e-8):
    """
    Max elementwise ``|a - b| / max(|a|, |b|, floor)``
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def norm_relative_error(a, b, floor=1e-8):
    """
    ``||a - b|| / max(||a||, ||b||, floor)``, the error measure used for whole gradients
    """
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / scale


def _primitive_cases(rng):
    # (name, input arrays, function mapping input Vars to an output Var)
    def u(*shape, low=-2.0, high=2.0):
        return rng.uniform(low, high, size=shape)

    yield "add", [u(3, 4), u(4)], lambda t, a, b: t.add(a, b)
    yield "mul", [u(3, 4), u(3, 1)], lambda t, a, b: t.mul(a, b)
    yield "matmul", [u(3, 2), u(2, 4)], lambda t, a, b: t.matmul(a, b)
    yield "matmul_transposed", [u(2, 3), u(4, 2)], lambda t, a, b: t.matmul(a, b, trans_a=True, trans_b=True)
    yield "tanh", [u(3, 4)], lambda t, a: t.tanh(a)
    yield "relu", [u(3, 4)], lambda t, a: t.relu(a)
    yield "softmax", [u(3, 4)], lambda t, a: t.softmax(a)
    yield "log", [u(3, 4, low=0.5, high=2.0)], lambda t, a: t.log(a)
    yield "reciprocal", [u(3, 4, low=0.5, high=2.0)], lambda t, a: t.reciprocal(a)
    yield "sum_leading", [u(3, 4)], lambda t, a: t.sum(a, axis=0)
    yield "sum_keepdims", [u(3, 4)], lambda t, a: t.sum(a, axis=-1, keepdims=True)
    yield "concat", [u(3, 2), u(3, 3)], lambda t, a, b: t.concat([a, b], axis=-1)
    yield "index_select_rows", [u(4, 3)], lambda t, a: t.index_select(a, [2, 0, 2], axis=0)
    yield "index_select_cols", [u(3, 4)], lambda t, a: t.index_select(a, [3, 1], axis=1)


def check_primitives(rng, step=1e-5):
    """
    Compare the reverse-mode gradient of every primitive against central finite
    differences on random inputs in [-2, 2] (positive inputs for ``log`` and
    ``reciprocal``).

    :return: A list of ``(primitive name, max relative error)`` tuples.
    """
    results = []
    for name, inputs, fn in _primitive_cases(rng):
        weights = None

        def scalar(tape, *vars_, fn=fn):
            nonlocal weights
            out = fn(tape, *vars_)
            if weights is None:
                weights = rng.uniform(-1.0, 1.0, size=out.shape)
            return tape.sum(tape.mul(out, weights))

        tape = Tape()
        leaves = [tape.leaf(x) for x in inputs]
        analytic = tape.backward(scalar(tape, *leaves), leaves)
        worst = 0.0
        for i, x in enumerate(inputs):

            def f(xi, i=i):
                t = Tape(recording=False)
                args = [t.const(xi if j == i else inputs[j]) for j in range(len(inputs))]
                return float(scalar(t, *args).value)

            worst = max(worst, norm_relative_error(analytic[i], finite_difference_grad(f, x, step)))
        results.append((name, worst))
    return results
