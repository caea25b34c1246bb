"""
The bi-level training loop for MetaXT, plus the XT, multi-task and
target-only baselines that share its network and batching.
"""

import dataclasses
import logging

import numpy as np
import pandas as pd

from .constants import Const, Groups, MetaGradMode, Method
from .diff_engine import Tape, grad, hvp_exact, hvp_fd
from .losses import meta_objective, train_objective


@dataclasses.dataclass(frozen=True, eq=False)
class BatchTriple:
    """
    One step's data: a source batch and the two halves of a target batch, the
    first for the training loss and the second for the meta loss
    """

    source: object
    target_train: object
    target_meta: object


@dataclasses.dataclass(frozen=True, eq=False)
class TrainState:
    params: object
    step: int
    rng: np.random.Generator
    eta: float
    meta_lr: float
    mode: Method
    meta_grad_mode: MetaGradMode = MetaGradMode.EXACT

    def __post_init__(self):
        if not self.eta > 0 or not self.meta_lr > 0:
            raise ValueError(f"Learning rates must be positive (eta={self.eta}, meta_lr={self.meta_lr})")
        object.__setattr__(self, "mode", Method.parse(self.mode))
        object.__setattr__(self, "meta_grad_mode", MetaGradMode(self.meta_grad_mode))


@dataclasses.dataclass(frozen=True, eq=False)
class FitResult:
    #: Parameters at the best validation checkpoint
    params: object
    final_params: object
    best_metric: float
    steps_to_best: int
    #: One row per training step
    history: pd.DataFrame
    #: One row per validation evaluation
    evaluations: pd.DataFrame


def global_norm(grads):
    """
    Euclidean norm over a dict of group vectors, summed in canonical group order
    """
    total = 0.0
    for g in Groups.names(list(grads)):
        total += float(np.dot(grads[g], grads[g]))
    return float(np.sqrt(total))


def clip_by_global_norm(grads, max_norm=Const.CLIP_NORM):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {g: v * scale for g, v in grads.items()}, norm


class MetaTrainer:
    """
    Train a :class:`~metaxt.models.TransferNetwork` with one of the four methods.

    :param TransferNetwork model: The network.
    :param method: A :class:`~metaxt.Method` (or its name).
    :param float eta: The step size for the main parameters (and of the one-step
        proxy used in the meta-gradient).
    :param float meta_lr: The step size for the LTN parameters. Defaults to ``eta``.
    :param float gamma1: Weight of the source loss.
    :param float gamma2: Weight of the transfer loss.
    :param meta_grad_mode: ``"exact"`` or ``"finite_difference"``.
    :param bool use_rtn: Apply the RTN on the transfer path. Defaults to whether the
        model has an RTN.
    """

    def __init__(
        self,
        model,
        method=Method.METAXT,
        *,
        eta=0.1,
        meta_lr=None,
        gamma1=1.0,
        gamma2=1.0,
        meta_grad_mode=MetaGradMode.EXACT,
        batch_size=Const.BATCH_SIZE,
        use_rtn=None,
        clip_norm=Const.CLIP_NORM,
        epsilon_scale=Const.FD_EPSILON_SCALE,
    ):
        self.model = model
        self.method = Method.parse(method)
        self.eta = eta
        self.meta_lr = eta if meta_lr is None else meta_lr
        if not self.eta >= 0 or not self.meta_lr >= 0:
            raise ValueError("Learning rates must be non-negative")
        if gamma1 < 0 or gamma2 < 0:
            raise ValueError(f"Loss weights must be non-negative (gamma1={gamma1}, gamma2={gamma2})")
        if batch_size < 2:
            raise ValueError(f"batch_size must be at least 2 to split the target batch, not {batch_size}")
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.meta_grad_mode = MetaGradMode(meta_grad_mode)
        self.batch_size = batch_size
        self.use_rtn = model.encoder.has_rtn if use_rtn is None else use_rtn
        if self.use_rtn and not model.encoder.has_rtn:
            raise ValueError("use_rtn requires a model built with an RTN")
        self.clip_norm = clip_norm
        self.epsilon_scale = epsilon_scale
        self.source_reads = 0

    def __str__(self):
        gammas = f"({self.gamma1}, {self.gamma2})"
        return f"MetaTrainer({self.method.value}, eta={self.eta}, meta_lr={self.meta_lr}, gammas={gammas})"

    @property
    def main_groups(self):
        """
        The groups updated by this method's main (non-LTN) step
        """
        if self.method is Method.TARGET_ONLY:
            flags = Groups.TARGET_PREDICTOR
        elif self.method is Method.MULTI_TASK:
            flags = Groups.MULTI_TASK
        else:
            flags = Groups.MAIN
        return tuple(g for g in Groups.names(flags) if g in self.model.layout)

    def train_loss(self, view, batch, ltn_input=None):
        """
        This method's training loss on a tape, as ``(total, terms)``. See
        :func:`~metaxt.losses.train_objective` for ``ltn_input``.
        """
        if self.method is Method.TARGET_ONLY:
            return train_objective(self.model, view, batch.target_train)
        return train_objective(
            self.model,
            view,
            batch.target_train,
            batch.source,
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            use_rtn=self.use_rtn,
            transfer=self.method.uses_ltn(),
            ltn_input=ltn_input,
        )

    def _train_grad(self, params, batch, groups):
        tape = Tape()
        view = params.on_tape(tape, groups)
        total, terms = self.train_loss(view, batch)
        leaves = view.leaves()
        adjoints = tape.backward(total, [v for _, _, v in leaves])
        grads = {}
        for (g, _, _), a in zip(leaves, adjoints):
            grads.setdefault(g, []).append(np.ravel(a))
        grads = {g: np.concatenate(v) for g, v in grads.items()}
        values = {name: np.nan if term is None else float(term.value) for name, term in terms.items()}
        values["l_train"] = float(total.value)
        return grads, values

    # ONE-STEP PROXY AND META-GRADIENT

    def ltn_input(self, params, batch):
        """
        The representation of the batch's source rows under ``params``, as the LTN
        sees it, or None if the batch has no source rows.
        """
        if batch.source is None or not self.method.uses_ltn():
            return None
        view = params.on_tape(Tape(recording=False), Groups.NONE)
        return self.model.encode_rows(view, batch.source.features).value

    def second_order_loss(self, params, batch):
        """
        The training loss as a function of a :class:`ParamView`, with the LTN's
        representation input frozen at ``params``. This is the function whose mixed
        second derivative gives the meta-gradient.
        """
        ltn_input = self.ltn_input(params, batch)

        def loss(view):
            return self.train_loss(view, batch, ltn_input)[0]

        return loss

    def inner_step(self, params, batch, eta=None):
        """
        The one-step proxy :math:`\\Theta' = \\Theta - \\eta \\nabla_\\Theta L_{train}`
        on (source, target_train), unclipped. The LTN parameters are untouched.
        """
        eta = self.eta if eta is None else eta
        groups = tuple(g for g in Groups.names(Groups.MAIN) if g in params)
        grads = grad(lambda view: self.train_loss(view, batch)[0], params, groups)
        return params.axpy(-eta, grads)

    def meta_loss(self, params, batch):
        tape = Tape(recording=False)
        return float(meta_objective(self.model, params.on_tape(tape, Groups.NONE), batch.target_meta).value)

    def proxy_objective(self, params, batch, eta=None):
        """
        The meta loss after the one-step proxy update, as a function of all of
        ``params`` (in particular of the LTN parameters)
        """
        return self.meta_loss(self.inner_step(params, batch, eta), batch)

    def meta_gradient(self, params, batch, eta=None, mode=None, *, return_meta_loss=False):
        """
        The gradient of the proxy objective with respect to the LTN parameters:
        :math:`-\\eta \\nabla^2_{\\alpha,\\Theta} L_{train} \\cdot d` where
        :math:`d = \\nabla_{\\Theta'} L_{meta}(\\Theta')`.

        :param mode: ``"exact"`` (double backward) or ``"finite_difference"``.
        :return: A flat vector over the ``alpha`` group.
        """
        eta = self.eta if eta is None else eta
        mode = self.meta_grad_mode if mode is None else MetaGradMode(mode)
        if not self.method.uses_ltn():
            raise ValueError(f"Method {self.method.value} has no LTN to meta-train")
        zeros = np.zeros(params.layout.size("alpha"))
        if self.gamma2 == 0 or eta == 0:
            return (zeros, np.nan) if return_meta_loss else zeros
        updated = self.inner_step(params, batch, eta)
        tape = Tape()
        view = updated.on_tape(tape, Groups.TARGET_PREDICTOR)
        meta = meta_objective(self.model, view, batch.target_meta)
        leaves = view.leaves()
        adjoints = tape.backward(meta, [v for _, _, v in leaves])
        direction = {}
        for (g, _, _), a in zip(leaves, adjoints):
            direction.setdefault(g, []).append(np.ravel(a))
        direction = {g: np.concatenate(v) for g, v in direction.items()}
        if all(not np.any(d) for d in direction.values()):
            result = zeros
        else:

            loss = self.second_order_loss(params, batch)
            if mode is MetaGradMode.EXACT:
                hvp = hvp_exact(loss, params, direction, wrt=Groups.ALPHA)
            else:
                hvp = hvp_fd(loss, params, direction, wrt=Groups.ALPHA, epsilon_scale=self.epsilon_scale)
            result = -eta * hvp
        if return_meta_loss:
            return result, float(meta.value)
        return result

    # TRAINING

    def sample_batch(self, train_k, source, rng):
        """
        Sample one step's batches: ``batch_size`` target examples, split into a
        training half and a meta half, and ``batch_size`` source examples. Only the
        methods that use the source task read it.
        """
        if len(train_k) < 2:
            raise ValueError("At least 2 target training examples are needed to split a batch")
        n = min(self.batch_size, len(train_k))
        chosen = rng.choice(len(train_k), size=n, replace=False)
        half = n // 2
        target_train = train_k.batch(chosen[:half])
        target_meta = train_k.batch(chosen[half:])
        source_batch = None
        if self.method.uses_source():
            if source is None or len(source) == 0:
                raise ValueError(f"Method {self.method.value} needs source data")
            self.source_reads += 1
            source_batch = source.batch(rng.choice(len(source), size=min(self.batch_size, len(source)), replace=False))
        return BatchTriple(source_batch, target_train, target_meta)

    def initial_state(self, params, rng):
        return TrainState(params, 0, rng, self.eta, self.meta_lr, self.method, self.meta_grad_mode)

    def _sgd(self, params, grads, lr):
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        return params.axpy(-lr, grads), norm

    def train_step(self, state, batch):
        """
        Apply one update of this trainer's method and return the new state. The
        scalars of the step are left in ``last_record``.
        """
        params = state.params
        record = {"step": state.step + 1, "meta_loss": np.nan, "meta_grad_norm": np.nan}
        if self.method is Method.METAXT:
            meta_grad, meta_loss = self.meta_gradient(
                params, batch, state.eta, state.meta_grad_mode, return_meta_loss=True
            )
            params, norm = self._sgd(params, {"alpha": meta_grad}, state.meta_lr)
            record.update(meta_loss=meta_loss, meta_grad_norm=norm)
            grads, values = self._train_grad(params, batch, self.main_groups)
            params, _ = self._sgd(params, grads, state.eta)
        elif self.method is Method.XT:
            grads, values = self._train_grad(params, batch, self.main_groups + ("alpha",))
            grads, _ = clip_by_global_norm(grads, self.clip_norm)
            alpha = {"alpha": grads.pop("alpha")}
            params = params.axpy(-state.eta, grads).axpy(-state.meta_lr, alpha)
        else:
            grads, values = self._train_grad(params, batch, self.main_groups)
            params, _ = self._sgd(params, grads, state.eta)
        record.update(values)
        self.last_record = record
        logging.debug(f"step {record['step']}: " + ", ".join(f"{k}={v:.6g}" for k, v in record.items() if k != "step"))
        return dataclasses.replace(state, params=params, step=state.step + 1)

    def predict(self, params, x):
        """
        Target-task prediction: the argmax of the target head (one label per token
        for a tagged sentence), with ties going to the lowest class index. The LTN,
        the source head and the RTN are not used.
        """
        features = np.asarray(getattr(x, "features", x), dtype=np.float64)
        labels = self.model.predict_rows(params, np.atleast_2d(features))
        return int(labels[0]) if features.ndim == 1 else labels

    def default_score(self, params, dataset):
        if len(dataset) == 0:
            return np.nan
        return float(np.mean(self.model.predict_rows(params, dataset.rows()) == dataset.labels()))

    def fit(self, params, splits, rng, *, steps=2000, eval_every=50, score=None):
        """
        Train for a fixed number of steps, scoring the validation set at step 0,
        every ``eval_every`` steps and at the end, and keep the best checkpoint
        (the earlier one on ties).

        :param FlatParams params: Initial parameters.
        :param SplitSet splits: The k-shot training set, validation set and source data.
        :param numpy.random.Generator rng: The batch sampling stream.
        :param score: A function ``score(params, dataset)`` returning a validation
            metric where higher is better. Defaults to row accuracy.
        :rtype: FitResult
        """
        if steps < 0 or eval_every < 1:
            raise ValueError(f"Invalid step budget {steps} or evaluation interval {eval_every}")
        score = self.default_score if score is None else score
        state = self.initial_state(params, rng) if steps > 0 else None
        best_params = params
        best_metric = score(params, splits.validation)
        best_step = 0
        evaluations = [{"step": 0, "validation_metric": best_metric}]
        history = []
        current = params
        for step in range(1, steps + 1):
            batch = self.sample_batch(splits.train_k, splits.source_train, rng)
            state = self.train_step(state, batch)
            current = state.params
            history.append(self.last_record)
            if step % eval_every == 0 or step == steps:
                metric = score(current, splits.validation)
                evaluations.append({"step": step, "validation_metric": metric})
                if metric > best_metric:
                    best_params, best_metric, best_step = current, metric, step
                    logging.debug(f"New best validation metric {metric:.4f} at step {step}")
        columns = ["step", "target_term", "source_term", "transfer_term", "l_train", "meta_loss", "meta_grad_norm"]
        return FitResult(
            best_params,
            current,
            best_metric,
            best_step,
            pd.DataFrame(history, columns=columns),
            pd.DataFrame(evaluations, columns=["step", "validation_metric"]),
        )
