"""
Experiment orchestration: run configuration, metrics, multi-seed runs and
sweeps, LTN mapping analysis, gradient verification and result emission.
"""

import concurrent.futures
import dataclasses
import json
import logging
import os
import time

import numpy as np
import pandas as pd
from matplotlib import pyplot as plt
from seqeval.metrics import f1_score as seqeval_f1

from .constants import Const, Groups, MetaGradMode, Method, TaskKind
from .datasets import Batch, TaskPair, gen_granularity_pair, gen_tagset_pair, parse_refinement, sample_splits
from .diff_engine import Tape, check_primitives, finite_difference_grad, hvp_exact, hvp_fd, norm_relative_error
from .meta_trainer import BatchTriple, MetaTrainer
from .models import TransferNetwork
from .util import add_cell, add_row_label, html_table, save_svg, unicode_table

TASK_PAIRS = ("granularity", "tagset", "files")
TAG_METRICS = ("token_f1", "span_f1")
CSV_COLUMNS = ["method", "k", "seed", "metric_name", "metric_value", "steps_to_best", "wall_ms"]

_STRING_TUPLES = {"methods"}
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """
    A full description of an experiment. Can be read from a text file with one
    ``key = value`` per line (``#`` starts a comment); lists are comma separated
    and ``none`` means "use the default".
    """

    # task pair
    task_pair: str = "granularity"
    source_path: str = None
    target_path: str = None
    data_seed: int = 0
    input_dim: int = 16
    n_source: int = 2000
    n_target_pool: int = 1000
    noise_sigma: float = 1.0
    spacing: float = 1.0
    neutral_offset: float = 1.5
    n_sentences: int = 400
    refinement: str = "0|1,2,3|4,5,6"
    min_length: int = 5
    max_length: int = 20
    n_source_sentences: int = None
    source_shift: float = 0.0
    max_tokens: int = None
    # training
    method: str = Method.METAXT.value
    k: int = 20
    seeds: tuple = Const.DEFAULT_SEEDS
    eta: float = 0.1
    meta_lr: float = None
    gamma1: float = 1.0
    gamma2: float = 1.0
    meta_grad_mode: str = MetaGradMode.EXACT.value
    step_budget: int = 2000
    eval_every: int = 50
    batch_size: int = Const.BATCH_SIZE
    # model
    hidden_dims: tuple = (64, 32)
    h_dim: int = 32
    z_dim: int = 8
    ltn_hidden: int = None
    activation: str = "tanh"
    use_rtn: bool = False
    rtn_insert_layer: int = None
    # evaluation and output
    tag_metric: str = "token_f1"
    ltn_map_samples: int = 500
    record_timing: bool = False
    # sweeps
    methods: tuple = tuple(m.value for m in Method)
    ks: tuple = Const.DEFAULT_KS

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def parse_value(cls, key, text):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if key not in fields:
            raise ValueError(f"Unknown config key '{key}'")
        text = str(text).strip()
        if text.lower() == "none":
            return None
        kind = fields[key].type
        try:
            if kind is bool:
                if text.lower() in _TRUE:
                    return True
                if text.lower() in _FALSE:
                    return False
                raise ValueError(text)
            if kind is int:
                return int(text)
            if kind is float:
                return float(text)
            if kind is tuple:
                items = [t.strip() for t in text.split(",") if t.strip()]
                return tuple(items) if key in _STRING_TUPLES else tuple(int(t) for t in items)
        except ValueError:
            raise ValueError(f"Bad value '{text}' for config key '{key}'") from None
        return text

    @classmethod
    def from_text(cls, text, overrides=None):
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if line == "":
                continue
            if "=" not in line:
                raise ValueError(f"Config line {lineno}: expected 'key = value', got '{line}'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = cls.parse_value(key, value)
        for key, value in (overrides or {}).items():
            key = key.replace("-", "_")
            values[key] = cls.parse_value(key, value) if isinstance(value, str) else value
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides=None):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read(), overrides)

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)

    def to_text(self):
        lines = []
        for name in self.field_names():
            value = getattr(self, name)
            if value is None:
                value = "none"
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def validate(self):
        if self.task_pair not in TASK_PAIRS:
            raise ValueError(f"task_pair must be one of {TASK_PAIRS}, not '{self.task_pair}'")
        if self.task_pair == "files":
            for path in (self.source_path, self.target_path):
                if path is None or not os.path.exists(path):
                    raise ValueError(f"Data file '{path}' does not exist")
        Method.parse(self.method)
        for m in self.methods:
            Method.parse(m)
        MetaGradMode(self.meta_grad_mode)
        if len(self.seeds) == 0:
            raise ValueError("At least one seed is required")
        if self.k < 1 or any(k < 1 for k in self.ks):
            raise ValueError("k must be positive")
        if not self.eta > 0 or (self.meta_lr is not None and not self.meta_lr > 0):
            raise ValueError("Learning rates must be positive")
        if self.step_budget < 0 or self.eval_every < 1:
            raise ValueError("step_budget must be non-negative and eval_every positive")
        if self.tag_metric not in TAG_METRICS:
            raise ValueError(f"tag_metric must be one of {TAG_METRICS}")
        return self

    @property
    def method_enum(self):
        return Method.parse(self.method)


# METRICS


def _check_lengths(predictions, gold):
    predictions = np.asarray(predictions)
    gold = np.asarray(gold)
    if predictions.shape != gold.shape:
        raise ValueError(f"{len(predictions)} predictions but {len(gold)} gold labels")
    return predictions, gold


def accuracy(predictions, gold):
    """
    Fraction of exact matches
    """
    predictions, gold = _check_lengths(predictions, gold)
    if len(gold) == 0:
        return np.nan
    return float(np.mean(predictions == gold))


def token_f1(predictions, gold, outside=Const.OUTSIDE_TAG):
    """
    Micro-averaged F1 over tokens whose tag is not ``outside``: a token counts as
    predicted (gold) tagged if its predicted (gold) tag is not ``outside``, and as
    a true positive if it is gold tagged and correctly predicted. If nothing is
    tagged in either, the score is 1.
    """
    predictions, gold = _check_lengths(predictions, gold)
    predicted = predictions != outside
    tagged = gold != outside
    tp = int(np.sum(tagged & (predictions == gold)))
    denominator = int(np.sum(predicted)) + int(np.sum(tagged))
    if denominator == 0:
        return 1.0
    return 2 * tp / denominator


def to_bio(tags, outside=Const.OUTSIDE_TAG):
    """
    Rewrite a tag sequence in BIO form. Tags already carrying a ``B-`` or ``I-``
    prefix are kept; a run of identical plain tags becomes one ``B-``/``I-`` span.
    """
    result = []
    previous = None
    for tag in map(str, tags):
        if tag == outside:
            result.append(outside)
        elif tag[:2] in ("B-", "I-"):
            result.append(tag)
        else:
            result.append(("I-" if tag == previous else "B-") + tag)
        previous = tag
    return result


def span_f1(predictions, gold, outside=Const.OUTSIDE_TAG):
    """
    CoNLL exact-match span F1 (micro-averaged, as scored by :mod:`seqeval`) over a
    list of tag sequences, one per sentence. Plain tags are first put in BIO form
    with :func:`to_bio`. If neither side has a span, the score is 1.
    """
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predicted sentences but {len(gold)} gold sentences")
    for p, g in zip(predictions, gold):
        _check_lengths(p, g)
    predictions = [to_bio(p, outside) for p in predictions]
    gold = [to_bio(g, outside) for g in gold]
    if all(t == outside for sentence in predictions + gold for t in sentence):
        return 1.0
    return float(seqeval_f1(gold, predictions))


def metric_name(pair, config):
    return config.tag_metric if pair.task_kind is TaskKind.TOKEN_TAGGING else "accuracy"


def evaluate(trainer, params, dataset, name):
    """
    Score the target predictor on a dataset with the named metric
    """
    if len(dataset) == 0:
        return np.nan
    predicted = trainer.model.predict_rows(params, dataset.rows())
    gold = dataset.labels()
    if name == "accuracy":
        return accuracy(predicted, gold)
    names = np.array(dataset.label_space.names)
    if name == "token_f1":
        return token_f1(names[predicted], names[gold])
    if name == "span_f1":
        bounds = np.cumsum([0] + [ex.num_tokens for ex in dataset])
        pieces = [(names[predicted[a:b]], names[gold[a:b]]) for a, b in zip(bounds[:-1], bounds[1:])]
        return span_f1([p for p, _ in pieces], [g for _, g in pieces])
    raise ValueError(f"Unknown metric '{name}'")


def refinement_agreement(pair, model, params, dataset):
    """
    The fraction of tokens on which the target predictions, coarsened through the
    pair's refinement map, agree with the source head's predictions
    """
    X = dataset.rows()
    if len(X) == 0:
        return np.nan
    coarse = pair.coarsen(model.predict_rows(params, X))
    return float(np.mean(coarse == model.source_predict_rows(params, X)))


# LTN MAPPING ANALYSIS


class LtnMap:
    """
    The mean LTN output distribution for each source label, estimating
    P(target label | source label) as learned by the LTN
    """

    def __init__(self, matrix, source_names, target_names, counts=None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.source_names = tuple(source_names)
        self.target_names = tuple(target_names)
        self.counts = None if counts is None else np.asarray(counts)

    def __len__(self):
        return len(self.source_names)

    def row(self, source_label):
        return self.matrix[self.source_names.index(source_label)]

    def top(self, source_label, n=2):
        """
        The ``n`` target labels with most mass for a source label, largest first
        """
        order = np.argsort(-self.row(source_label), kind="stable")
        return [self.target_names[j] for j in order[:n]]

    @classmethod
    def mean(cls, maps):
        maps = list(maps)
        return cls(np.mean([m.matrix for m in maps], axis=0), maps[0].source_names, maps[0].target_names)

    def _text_header_and_rows(self):
        headers = ["source", *self.target_names]
        return headers, [(s, *(f"{p:.3f}" for p in row)) for s, row in zip(self.source_names, self.matrix)]

    def __str__(self):
        headers, rows = self._text_header_and_rows()
        return unicode_table(headers, rows)

    def _repr_html_(self):
        """
        Called e.g. by jupyter notebooks to render the mapping
        """
        return html_table(*self._text_header_and_rows())

    def to_dataframe(self):
        return pd.DataFrame(self.matrix, index=list(self.source_names), columns=list(self.target_names))

    def plot(self, path, title=None):
        fig, ax = plt.subplots(figsize=(1 + 0.8 * len(self.target_names), 0.8 + 0.6 * len(self.source_names)))
        for i, row in enumerate(self.matrix):
            y = len(self.source_names) - 1 - i
            for j, p in enumerate(row):
                add_cell(ax, j, y, p)
            add_row_label(ax, -0.1, y + 0.5, self.source_names[i], fontsize=8)
        ax.set_xlim(0, len(self.target_names))
        ax.set_ylim(0, len(self.source_names))
        ax.set_xticks(np.arange(len(self.target_names)) + 0.5, self.target_names)
        ax.set_yticks([])
        ax.set_xlabel("target label")
        if title:
            ax.set_title(title)
        data = self.to_dataframe().reset_index(names="source")
        return save_svg(fig, path, data)


def ltn_map_report(model, params, source, n_samples=None, rng=None, target_names=None):
    """
    Average the LTN's output distribution over source examples (or tokens), per
    source label. At least ``n_samples`` rows are used if available (all rows by
    default). A source label with no sampled rows gets a uniform row.

    :rtype: LtnMap
    """
    X = source.rows()
    labels = source.labels()
    if n_samples is not None and len(X) > n_samples:
        rng = np.random.default_rng(0) if rng is None else rng
        chosen = np.sort(rng.choice(len(X), size=n_samples, replace=False))
        X, labels = X[chosen], labels[chosen]
    n_src = model.ltn.num_source_classes
    n_tgt = model.ltn.num_target_classes
    probs = model.ltn_rows(params.on_tape(Tape(recording=False), Groups.NONE), X, labels).value
    matrix = np.full((n_src, n_tgt), 1 / n_tgt)
    counts = np.bincount(labels, minlength=n_src)
    for s in range(n_src):
        if counts[s] > 0:
            matrix[s] = probs[labels == s].mean(axis=0)
        else:
            logging.warning(f"No source rows with label {s}: LTN map row set to uniform")
    if target_names is None:
        target_names = [str(j) for j in range(n_tgt)]
    return LtnMap(matrix, source.label_space.names, target_names, counts)


# RUNS


@dataclasses.dataclass(eq=False)
class SeedResult:
    seed: int
    metric_value: float = np.nan
    steps_to_best: int = Const.NULL
    wall_ms: float = 0
    failure: str = None
    history: pd.DataFrame = None
    evaluations: pd.DataFrame = None
    ltn_map: LtnMap = None
    extra: dict = dataclasses.field(default_factory=dict)

    @property
    def failed(self):
        return self.failure is not None


class RunResult:
    """
    The outcome of one configuration across its seeds
    """

    def __init__(self, config, metric_name, seed_results, labels=None):
        self.config = config
        self.metric_name = metric_name
        self.seed_results = list(seed_results)
        self.labels = labels or {}

    @property
    def method(self):
        return self.config.method_enum.value

    @property
    def k(self):
        return self.config.k

    @property
    def values(self):
        return np.array([r.metric_value for r in self.seed_results if not r.failed])

    @property
    def partial(self):
        return any(r.failed for r in self.seed_results)

    @property
    def mean(self):
        return float(np.mean(self.values)) if len(self.values) else np.nan

    @property
    def std(self):
        return float(np.std(self.values)) if len(self.values) else np.nan

    @property
    def ltn_map(self):
        maps = [r.ltn_map for r in self.seed_results if r.ltn_map is not None]
        return LtnMap.mean(maps) if maps else None

    def curves(self):
        """
        Per-step training curves of all seeds in one DataFrame
        """
        frames = [r.history.assign(seed=r.seed) for r in self.seed_results if r.history is not None]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    def to_dataframe(self):
        """
        One row per seed and an aggregate row, in the results CSV schema
        """
        rows = []
        for r in self.seed_results:
            value = np.nan if r.failed else r.metric_value
            steps = Const.NULL if r.failed else r.steps_to_best
            rows.append([self.method, self.k, str(r.seed), self.metric_name, value, steps, r.wall_ms])
        ok = [r for r in self.seed_results if not r.failed]
        steps_mean = float(np.mean([r.steps_to_best for r in ok])) if ok else np.nan
        wall = sum(r.wall_ms for r in self.seed_results)
        rows.append([self.method, self.k, "aggregate", self.metric_name, self.mean, steps_mean, wall])
        return pd.DataFrame(rows, columns=CSV_COLUMNS)

    def _text_header_and_rows(self):
        headers = ["seed", self.metric_name, "steps_to_best", "status"]
        rows = [
            (r.seed, f"{r.metric_value:.4f}", r.steps_to_best, "failed: " + r.failure if r.failed else "ok")
            for r in self.seed_results
        ]
        rows.append(("mean ± std", f"{self.mean:.4f} ± {self.std:.4f}", "", "partial" if self.partial else ""))
        return headers, rows

    def __str__(self):
        headers, rows = self._text_header_and_rows()
        return f"{self.method} k={self.k}\n" + unicode_table(headers, rows)

    def _repr_html_(self):
        return html_table(*self._text_header_and_rows())


def build_pair(config):
    if config.task_pair == "granularity":
        return gen_granularity_pair(
            config.data_seed,
            config.n_source,
            config.n_target_pool,
            config.noise_sigma,
            input_dim=config.input_dim,
            spacing=config.spacing,
            neutral_offset=config.neutral_offset,
        )
    if config.task_pair == "tagset":
        return gen_tagset_pair(
            config.data_seed,
            config.n_sentences,
            parse_refinement(config.refinement),
            input_dim=config.input_dim,
            noise_sigma=config.noise_sigma,
            min_length=config.min_length,
            max_length=config.max_length,
            n_source_sentences=config.n_source_sentences,
            source_shift=config.source_shift,
        )
    return TaskPair.from_files(
        config.source_path, config.target_path, input_dim=config.input_dim, seed=config.data_seed
    )


def build_model(config, pair):
    return TransferNetwork.build(
        pair.input_dim,
        pair.source.num_classes,
        pair.target.num_classes,
        hidden_dims=config.hidden_dims,
        h_dim=config.h_dim,
        z_dim=config.z_dim,
        ltn_hidden=config.ltn_hidden,
        activation=config.activation,
        use_rtn=config.use_rtn,
        rtn_insert_layer=config.rtn_insert_layer,
        per_token=pair.task_kind is TaskKind.TOKEN_TAGGING,
    )


def build_trainer(config, model):
    return MetaTrainer(
        model,
        config.method_enum,
        eta=config.eta,
        meta_lr=config.meta_lr,
        gamma1=config.gamma1,
        gamma2=config.gamma2,
        meta_grad_mode=config.meta_grad_mode,
        batch_size=config.batch_size,
        use_rtn=config.use_rtn,
    )


def run_seed(config, pair, seed):
    """
    Train and evaluate one seed. Splits, initial parameters, batches and the LTN
    map sample each get their own random stream derived from the seed, so every
    method sees the same splits and the same initial parameters.
    """
    start = time.perf_counter()
    split_stream, init_stream, batch_stream, analysis_stream = np.random.SeedSequence(seed).spawn(4)
    name = metric_name(pair, config)
    splits = sample_splits(pair, config.k, split_stream, max_tokens=config.max_tokens)
    model = build_model(config, pair)
    trainer = build_trainer(config, model)
    params = model.init_params(np.random.default_rng(init_stream))
    fit = trainer.fit(
        params,
        splits,
        np.random.default_rng(batch_stream),
        steps=config.step_budget,
        eval_every=config.eval_every,
        score=lambda p, d: evaluate(trainer, p, d, name),
    )
    result = SeedResult(seed, evaluate(trainer, fit.params, splits.test, name), fit.steps_to_best)
    result.history = fit.history
    result.evaluations = fit.evaluations
    if config.method_enum.uses_ltn():
        result.ltn_map = ltn_map_report(
            model,
            fit.params,
            splits.source_train,
            config.ltn_map_samples,
            np.random.default_rng(analysis_stream),
            target_names=pair.target.label_space.names,
        )
    if pair.refinement is not None:
        result.extra["refinement_agreement"] = refinement_agreement(pair, model, fit.params, splits.test)
    if config.record_timing:
        result.wall_ms = round((time.perf_counter() - start) * 1000, 3)
    return result


def run(config, pair=None):
    """
    Run one configuration for every seed. A seed that raises a ``ValueError`` or
    ``ArithmeticError`` is recorded as failed and the run marked partial.

    :rtype: RunResult
    """
    config.validate()
    pair = build_pair(config) if pair is None else pair
    results = []
    for seed in config.seeds:
        logging.info(f"{config.method_enum.value} k={config.k}: starting seed {seed}")
        try:
            result = run_seed(config, pair, seed)
        except (ValueError, ArithmeticError) as e:
            logging.warning(f"{config.method_enum.value} k={config.k} seed {seed} failed: {e}")
            result = SeedResult(seed, failure=f"{type(e).__name__}: {e}")
        else:
            logging.info(f"Seed {seed}: test {metric_name(pair, config)} {result.metric_value:.4f}")
        results.append(result)
    run_result = RunResult(
        config,
        metric_name(pair, config),
        results,
        labels={"source": list(pair.source.label_space), "target": list(pair.target.label_space)},
    )
    if run_result.partial:
        logging.warning(f"Run {config.method_enum.value} k={config.k} is partial")
    return run_result


def worker_count():
    value = os.environ.get(Const.WORKERS_ENV_VAR, "1")
    try:
        workers = int(value)
    except ValueError:
        raise ValueError(f"{Const.WORKERS_ENV_VAR} must be an integer, not '{value}'") from None
    return max(1, workers)


def sweep(config, methods=None, ks=None, workers=None):
    """
    Run the cross product of methods and k values (each over all seeds). Runs may
    execute in parallel processes; results are returned in (method, k) order.
    """
    methods = config.methods if methods is None else methods
    ks = config.ks if ks is None else ks
    configs = [config.replace(method=Method.parse(m).value, k=int(k)) for m in methods for k in ks]
    for c in configs:
        c.validate()
    workers = worker_count() if workers is None else workers
    logging.info(f"Sweeping {len(configs)} configurations with {workers} worker(s)")
    if workers == 1:
        return [run(c) for c in configs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, configs))


# OUTPUT


def results_dataframe(results):
    frames = [r.to_dataframe() for r in results]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CSV_COLUMNS)


def write_results_csv(results, path):
    results_dataframe(results).to_csv(path, index=False, lineterminator="\n")
    return path


def plot_curves(results, path):
    """
    Test metric (mean ± std over seeds) against k, one line per method
    """
    rows = [(r.method, r.k, r.mean, r.std) for r in results]
    data = pd.DataFrame(rows, columns=["method", "k", "mean", "std"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, group in data.groupby("method", sort=False):
        group = group.sort_values("k")
        ax.errorbar(group["k"], group["mean"], yerr=group["std"], label=method, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("k")
    ax.set_ylabel(results[0].metric_name if results else "metric")
    ax.legend(fontsize=8)
    return save_svg(fig, path, data)


def write_outputs(results, outdir, config):
    """
    Write the results CSV, label vocabularies, effective config, curve plot and
    LTN map plots into ``outdir``
    """
    os.makedirs(outdir, exist_ok=True)
    write_results_csv(results, os.path.join(outdir, "results.csv"))
    if results:
        with open(os.path.join(outdir, "labels.json"), "w", encoding="utf-8") as f:
            json.dump(results[0].labels, f, indent=2)
    with open(os.path.join(outdir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(config.to_text())
    plot_curves(results, os.path.join(outdir, "curves.svg"))
    for r in results:
        ltn_map = r.ltn_map
        if ltn_map is not None:
            ltn_map.plot(os.path.join(outdir, f"ltn_map_{r.method}_k{r.k}.svg"), title=f"{r.method} k={r.k}")
    return outdir


# GRADIENT VERIFICATION


def tiny_problem(rng, use_rtn=False, rows=4):
    """
    A randomly initialised network of under 200 parameters with random batches
    """
    model = TransferNetwork.build(3, 2, 3, hidden_dims=(4,), h_dim=3, z_dim=2, ltn_hidden=3, use_rtn=use_rtn)
    params = model.init_params(rng)
    # scale up the LTN output layer so the pseudo-labels are far from uniform
    alpha = dict(params.tensors("alpha"))
    alpha["W3"] = alpha["W3"] / Const.LTN_OUTPUT_INIT_SCALE
    params = params.replace(alpha=np.concatenate([t.ravel() for t in alpha.values()]))

    def batch(num_classes):
        x = rng.normal(size=(rows, 3))
        labels = rng.integers(num_classes, size=rows)
        return Batch(x, labels, np.full(rows, 1 / rows), num_classes, rows)

    return model, params, BatchTriple(batch(2), batch(3), batch(3))


def run_gradient_checks(n_instances=20, seed=0, eta=0.1):
    """
    The gradient verification suite: every primitive against finite differences,
    exact against finite-difference Hessian-vector products, and the exact and
    finite-difference meta-gradients against coordinate-wise finite differences of
    the one-step proxy objective.

    :return: A DataFrame with columns ``check, instance, error, tolerance, passed``.
    """
    rng = np.random.default_rng(seed)
    rows = [("primitive:" + name, 0, err, 1e-6) for name, err in check_primitives(rng)]
    for i in range(n_instances):
        model, params, batch = tiny_problem(rng, use_rtn=i % 2 == 1)
        trainer = MetaTrainer(model, Method.METAXT, eta=eta, use_rtn=model.encoder.has_rtn)

        loss = trainer.second_order_loss(params, batch)
        direction = {g: rng.normal(size=params.layout.size(g)) for g in ("theta", "w")}
        exact = hvp_exact(loss, params, direction)
        approx = hvp_fd(loss, params, direction)
        eps = Const.FD_EPSILON_SCALE / np.sqrt(sum(float(np.dot(d, d)) for d in direction.values()))
        rows.append(("hvp_fd_vs_exact", i, norm_relative_error(approx, exact), 10 * eps))

        exact_meta = trainer.meta_gradient(params, batch, mode=MetaGradMode.EXACT)
        fd_meta = trainer.meta_gradient(params, batch, mode=MetaGradMode.FINITE_DIFFERENCE)
        oracle = finite_difference_grad(
            lambda a, p=params, t=trainer, b=batch: t.proxy_objective(p.replace(alpha=a), b), params["alpha"]
        )
        rows.append(("meta_gradient_exact_vs_proxy_fd", i, norm_relative_error(exact_meta, oracle), 1e-3))
        rows.append(("meta_gradient_fd_vs_exact", i, norm_relative_error(fd_meta, exact_meta), 1e-2))
    df = pd.DataFrame(rows, columns=["check", "instance", "error", "tolerance"])
    df["passed"] = df["error"] <= df["tolerance"]
    failed = int((~df["passed"]).sum())
    if failed:
        logging.warning(f"{failed} gradient checks failed")
    return df
