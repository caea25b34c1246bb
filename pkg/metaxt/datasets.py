"""
Task pairs (a label-rich source task and a few-shot target task with a
different label space), synthetic generators for the two kinds of label
disparity, loaders for small corpora in CSV and CoNLL formats, and k-shot
split sampling.
"""

import dataclasses
import hashlib
import json
import logging
import re

import numpy as np
import pandas as pd

from .constants import Const, TaskKind


class ParseError(ValueError):
    """
    A malformed input file. The message starts with ``path:line:``.
    """

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class UnknownLabelError(ValueError):
    """
    A label that is not part of a fixed label space. Labels are never silently
    remapped.
    """


class LabelSpace:
    """
    An ordered set of label names. Each dataset owns its own label space object,
    so a source and a target dataset never share one.
    """

    def __init__(self, names=()):
        self.names = tuple(str(n) for n in names)
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"Duplicate label names in {self.names}")
        self._index = {name: i for i, name in enumerate(self.names)}

    @classmethod
    def from_labels(cls, labels):
        """
        Build a label space from labels in order of first appearance
        """
        return cls(dict.fromkeys(str(x) for x in labels))

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, i):
        return self.names[i]

    def __contains__(self, name):
        return name in self._index

    def __repr__(self):
        return f"LabelSpace({list(self.names)})"

    def index(self, name):
        try:
            return self._index[str(name)]
        except KeyError:
            raise UnknownLabelError(f"Label '{name}' is not one of {list(self.names)}") from None

    def indexes(self, names):
        return np.array([self.index(n) for n in names], dtype=np.int64)

    def to_json(self):
        return json.dumps(list(self.names))

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text))


@dataclasses.dataclass(frozen=True, eq=False)
class Example:
    """
    A labelled instance. ``features`` is a vector for a sequence classification
    example or a (tokens, features) matrix for a tagged sentence; ``labels`` is a
    single class index or one index per token.
    """

    features: np.ndarray
    labels: object
    tokens: tuple = None

    @property
    def is_tagged(self):
        return np.ndim(self.features) == 2

    @property
    def num_tokens(self):
        return len(self.features) if self.is_tagged else 1

    def label_array(self):
        return np.atleast_1d(np.asarray(self.labels, dtype=np.int64))

    def truncated(self, max_tokens):
        if max_tokens is None or not self.is_tagged or self.num_tokens <= max_tokens:
            return self
        tokens = None if self.tokens is None else self.tokens[:max_tokens]
        return Example(self.features[:max_tokens], self.label_array()[:max_tokens], tokens)


class Dataset:
    """
    An immutable list of examples sharing a label space and a task kind
    """

    def __init__(self, examples, label_space, task_kind=TaskKind.SEQUENCE_CLASSIFICATION, input_dim=None):
        self.examples = tuple(examples)
        self.label_space = label_space
        self.task_kind = TaskKind(task_kind)
        if input_dim is None and len(self.examples) > 0:
            input_dim = np.shape(self.examples[0].features)[-1]
        self.input_dim = input_dim
        n = len(label_space)
        for i, ex in enumerate(self.examples):
            if ex.is_tagged != (self.task_kind is TaskKind.TOKEN_TAGGING):
                raise ValueError(f"Example {i} does not match task kind {self.task_kind.value}")
            if np.shape(ex.features)[-1] != input_dim:
                raise ValueError(f"Example {i} has {np.shape(ex.features)[-1]} features, expected {input_dim}")
            labels = ex.label_array()
            if len(labels) != ex.num_tokens:
                raise ValueError(f"Example {i} has {len(labels)} labels for {ex.num_tokens} tokens")
            if len(labels) > 0 and (labels.min() < 0 or labels.max() >= n):
                raise ValueError(f"Example {i} has labels outside the label space of size {n}")

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __iter__(self):
        return iter(self.examples)

    @property
    def is_tagged(self):
        return self.task_kind is TaskKind.TOKEN_TAGGING

    @property
    def num_classes(self):
        return len(self.label_space)

    def subset(self, indexes):
        return Dataset([self.examples[i] for i in indexes], self.label_space, self.task_kind, self.input_dim)

    def truncated(self, max_tokens):
        return Dataset([ex.truncated(max_tokens) for ex in self], self.label_space, self.task_kind, self.input_dim)

    def labels(self):
        """
        The class index of every example (sequence tasks) or every token (tagging)
        """
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([ex.label_array() for ex in self])

    def label_counts(self):
        return np.bincount(self.labels(), minlength=self.num_classes)

    def rows(self):
        """
        Return a (rows, features) matrix with one row per example or per token
        """
        if len(self) == 0:
            return np.zeros((0, self.input_dim or 0))
        return np.vstack([np.atleast_2d(ex.features) for ex in self])

    def batch(self, indexes=None):
        examples = self.examples if indexes is None else [self.examples[i] for i in indexes]
        return Batch.from_examples(examples, self.num_classes)


@dataclasses.dataclass(frozen=True, eq=False)
class Batch:
    """
    A set of examples assembled into row matrices. Tagged sentences contribute one
    row per token; row weights are one over the sentence length, divided by the
    number of examples, so losses average over tokens and then over examples.
    """

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    num_classes: int
    num_examples: int
    soft: np.ndarray = None

    @classmethod
    def from_examples(cls, examples, num_classes):
        examples = list(examples)
        if len(examples) == 0:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0), num_classes, 0)
        n = len(examples)
        features = np.vstack([np.atleast_2d(ex.features) for ex in examples])
        labels = np.concatenate([ex.label_array() for ex in examples])
        weights = np.concatenate([np.full(ex.num_tokens, 1 / (ex.num_tokens * n)) for ex in examples])
        return cls(features, labels, weights, num_classes, n)

    def with_soft_targets(self, soft):
        soft = np.asarray(soft, dtype=np.float64)
        if soft.shape != (len(self.labels), self.num_classes):
            raise ValueError(f"Soft targets of shape {soft.shape} do not match the batch")
        return dataclasses.replace(self, soft=soft)

    def targets(self):
        """
        The (rows, classes) soft-target matrix: one-hot rows unless soft targets were set
        """
        if self.soft is not None:
            return self.soft
        targets = np.zeros((len(self.labels), self.num_classes))
        targets[np.arange(len(self.labels)), self.labels] = 1
        return targets


@dataclasses.dataclass(frozen=True)
class SplitSet:
    train_k: Dataset
    validation: Dataset
    test: Dataset
    source_train: Dataset
    #: Indexes into the target pool, for checking disjointness and overlap
    train_indexes: tuple = ()
    validation_indexes: tuple = ()
    test_indexes: tuple = ()


class TaskPair:
    """
    A source task and a target task with disparate label spaces.

    :param Dataset source: The label-rich source dataset.
    :param Dataset target: The target pool, from which k-shot splits are drawn.
    :param numpy.ndarray oracle_map: Optional ground-truth matrix of
        P(target label | source label), one row per source label.
    :param tuple refinement: For refinement pairs, the fine (target) label indexes
        making up each coarse (source) label.
    """

    def __init__(self, source, target, *, oracle_map=None, refinement=None, name=None):
        if source.task_kind is not target.task_kind:
            raise ValueError("Source and target tasks must be of the same kind")
        if source.label_space is target.label_space:
            raise ValueError("Source and target must have their own label spaces")
        if set(source.label_space) == set(target.label_space):
            raise ValueError("Source and target label spaces must differ")
        if source.input_dim != target.input_dim:
            raise ValueError(f"Source has {source.input_dim} features but target has {target.input_dim}")
        self.source = source
        self.target = target
        self.task_kind = target.task_kind
        self.oracle_map = None if oracle_map is None else np.asarray(oracle_map, dtype=np.float64)
        self.refinement = None if refinement is None else tuple(tuple(g) for g in refinement)
        self.name = name
        if self.refinement is not None:
            self._coarse_of = np.empty(target.num_classes, dtype=np.int64)
            for coarse, fine in enumerate(self.refinement):
                self._coarse_of[list(fine)] = coarse

    @property
    def input_dim(self):
        return self.target.input_dim

    def coarsen(self, fine_labels):
        """
        Map fine (target) label indexes to coarse (source) label indexes
        """
        if self.refinement is None:
            raise ValueError("This task pair has no refinement map")
        fine_labels = np.asarray(fine_labels, dtype=np.int64)
        if np.any(fine_labels < 0) or np.any(fine_labels >= len(self._coarse_of)):
            raise ValueError("Fine labels out of range")
        return self._coarse_of[fine_labels]

    @classmethod
    def from_files(cls, source_path, target_path, *, input_dim=64, seed=0, task_kind=None):
        """
        Build a pair from two CSV files (sequence classification) or two CoNLL
        files (tagging). The kind is guessed from the file suffix if not given.
        """
        if task_kind is None:
            is_csv = str(target_path).endswith(".csv")
            task_kind = TaskKind.SEQUENCE_CLASSIFICATION if is_csv else TaskKind.TOKEN_TAGGING
        if TaskKind(task_kind) is TaskKind.SEQUENCE_CLASSIFICATION:
            source, target = load_csv_classification(source_path), load_csv_classification(target_path)
        else:
            source = load_conll_tagging(source_path, input_dim=input_dim, seed=seed)
            target = load_conll_tagging(target_path, input_dim=input_dim, seed=seed)
        return cls(source, target, name=f"{source_path}->{target_path}")


# SYNTHETIC GENERATORS

GRANULARITY_SOURCE_CLUSTERS = ((0, 1), (3, 4))


def granularity_centres(rng, input_dim, spacing=1.0, neutral_offset=1.5):
    """
    The 5 target cluster centres. Classes 1, 2, 4 and 5 sit at ``(j - 2) * spacing``
    along a random unit "sentiment axis" ``u``, all displaced by
    ``neutral_offset * spacing`` along a second unit axis ``v`` orthogonal to
    ``u``; the neutral class 3 sits at ``-neutral_offset * spacing * v``. With a
    positive offset the neutral class is off the segment joining the two source
    clusters, and on average has a more negative inner product with a source
    cluster centre than any polar class has. A zero offset puts all 5 centres on
    the sentiment axis.
    """
    if neutral_offset != 0 and input_dim < 2:
        raise ValueError("An off-axis neutral class needs input_dim of at least 2")
    axis = rng.normal(size=input_dim)
    axis /= np.linalg.norm(axis)
    off_axis = np.zeros(input_dim)
    if input_dim > 1:
        off_axis = rng.normal(size=input_dim)
        off_axis -= np.dot(off_axis, axis) * axis
        off_axis /= np.linalg.norm(off_axis)
    centres = np.array([(j - 2) * spacing * axis + neutral_offset * spacing * off_axis for j in range(5)])
    centres[2] = -neutral_offset * spacing * off_axis
    return centres


def gen_granularity_pair(
    seed, n_source=2000, n_target_pool=1000, noise_sigma=1.0, *, input_dim=16, spacing=1.0, neutral_offset=1.5
):
    """
    A binary source task and a 5-way target task over the same inputs. Target
    examples come from 5 Gaussian clusters placed by :func:`granularity_centres`.
    Source examples are drawn from the two lowest clusters (labelled ``negative``)
    and the two highest (``positive``), so the neutral target class never appears
    in the source data.
    """
    if n_source < 1000:
        raise ValueError(f"n_source must be at least 1000, not {n_source}")
    if n_target_pool < 5:
        raise ValueError(f"n_target_pool must be at least 5, not {n_target_pool}")
    if noise_sigma < 0 or input_dim < 1:
        raise ValueError("noise_sigma must be non-negative and input_dim positive")
    rng = np.random.default_rng(seed)
    centres = granularity_centres(rng, input_dim, spacing, neutral_offset)

    target_labels = rng.integers(5, size=n_target_pool)
    target_x = centres[target_labels] + noise_sigma * rng.normal(size=(n_target_pool, input_dim))

    source_clusters = np.array([c for group in GRANULARITY_SOURCE_CLUSTERS for c in group])
    clusters = source_clusters[rng.integers(len(source_clusters), size=n_source)]
    source_labels = (clusters >= 3).astype(np.int64)
    source_x = centres[clusters] + noise_sigma * rng.normal(size=(n_source, input_dim))

    oracle = np.zeros((2, 5))
    for s, group in enumerate(GRANULARITY_SOURCE_CLUSTERS):
        oracle[s, list(group)] = 1 / len(group)
    source = Dataset(
        [Example(x, int(y)) for x, y in zip(source_x, source_labels)],
        LabelSpace(["negative", "positive"]),
        input_dim=input_dim,
    )
    target = Dataset(
        [Example(x, int(y)) for x, y in zip(target_x, target_labels)],
        LabelSpace(["1", "2", "3", "4", "5"]),
        input_dim=input_dim,
    )
    logging.info(f"Generated granularity pair: {n_source} source, {n_target_pool} target examples")
    return TaskPair(source, target, oracle_map=oracle, name="granularity")


DEFAULT_REFINEMENT = ((0,), (1, 2, 3), (4, 5, 6))


def validate_refinement(refinement):
    """
    Check that a refinement is a partition of the fine labels ``0..n-1`` into
    non-empty coarse groups, returning the number of fine labels
    """
    refinement = tuple(tuple(int(f) for f in group) for group in refinement)
    if len(refinement) < 2:
        raise ValueError("A refinement needs at least 2 coarse labels")
    if any(len(group) == 0 for group in refinement):
        raise ValueError("Every coarse label must map to at least one fine label")
    fine = [f for group in refinement for f in group]
    if sorted(fine) != list(range(len(fine))):
        raise ValueError(f"Refinement {refinement} is not a partition of fine labels 0..{len(fine) - 1}")
    return len(fine)


def refinement_oracle(refinement):
    n_fine = validate_refinement(refinement)
    oracle = np.zeros((len(refinement), n_fine))
    for coarse, group in enumerate(refinement):
        oracle[coarse, list(group)] = 1 / len(group)
    return oracle


def parse_refinement(text):
    """
    Parse a refinement written as ``0|1,2,3|4,5,6`` (coarse groups separated by ``|``)
    """
    if not isinstance(text, str):
        return tuple(tuple(g) for g in text)
    try:
        return tuple(tuple(int(f) for f in group.split(",")) for group in text.split("|"))
    except ValueError:
        raise ValueError(f"Cannot parse refinement '{text}'") from None


def tagset_means(rng, refinement, input_dim, coarse_scale=2.5, fine_scale=2.0):
    """
    Per-fine-tag feature means: ``coarse_scale`` times a direction shared by the
    fine tag's coarse group plus ``fine_scale`` times a direction of its own.
    The directions are orthonormal when ``input_dim`` allows, otherwise random
    unit vectors.
    """
    n_fine = validate_refinement(refinement)
    n_dirs = len(refinement) + n_fine
    basis = rng.normal(size=(input_dim, n_dirs))
    if input_dim >= n_dirs:
        basis = np.linalg.qr(basis)[0]
    else:
        basis /= np.linalg.norm(basis, axis=0)
    means = np.zeros((n_fine, input_dim))
    for coarse, group in enumerate(refinement):
        for fine in group:
            means[fine] = coarse_scale * basis[:, coarse] + fine_scale * basis[:, len(refinement) + fine]
    return means


def _tagged_sentences(rng, n_sentences, refinement, means, noise_sigma, min_length, max_length):
    sentences = []
    for _ in range(n_sentences):
        length = int(rng.integers(min_length, max_length + 1))
        coarse = rng.integers(len(refinement), size=length)
        fine = np.array([refinement[c][rng.integers(len(refinement[c]))] for c in coarse], dtype=np.int64)
        x = means[fine] + noise_sigma * rng.normal(size=(length, means.shape[1]))
        sentences.append((x, coarse.astype(np.int64), fine))
    return sentences


def gen_tagset_pair(
    seed,
    n_sentences=400,
    refinement=DEFAULT_REFINEMENT,
    *,
    input_dim=32,
    noise_sigma=1.0,
    min_length=5,
    max_length=20,
    coarse_scale=2.5,
    fine_scale=2.0,
    n_source_sentences=None,
    source_shift=0.0,
):
    """
    Tagged sentences whose tokens carry a fine (target) tag and a coarse (source)
    tag. Each token picks a coarse tag uniformly, then a fine tag uniformly from
    that coarse tag's group; its features are drawn from a Gaussian centred on the
    fine tag's mean from :func:`tagset_means`.

    By default the source and target are two annotation layers of the same
    sentences. With ``n_source_sentences`` the source is a separate pool of that
    many sentences, so no target evaluation sentence is seen during training, and
    its features are displaced by ``source_shift`` along a random unit vector.

    :param tuple refinement: The fine tag indexes under each coarse tag. Tag 0 in
        both label spaces is the outside tag ``O``.
    """
    n_fine = validate_refinement(refinement)
    refinement = tuple(tuple(int(f) for f in group) for group in refinement)
    if n_sentences < 1 or not 1 <= min_length <= max_length:
        raise ValueError("Invalid sentence count or lengths")
    if n_source_sentences is None and source_shift != 0:
        raise ValueError("A source shift needs a separate source pool (n_source_sentences)")
    if n_source_sentences is not None and n_source_sentences < 1:
        raise ValueError(f"n_source_sentences must be positive, not {n_source_sentences}")
    rng = np.random.default_rng(seed)
    means = tagset_means(rng, refinement, input_dim, coarse_scale, fine_scale)
    coarse_names = [Const.OUTSIDE_TAG] + [f"C{i}" for i in range(1, len(refinement))]
    fine_names = [Const.OUTSIDE_TAG] + [f"F{j}" for j in range(1, n_fine)]
    sentences = _tagged_sentences(rng, n_sentences, refinement, means, noise_sigma, min_length, max_length)
    target_examples = [Example(x, fine) for x, _, fine in sentences]
    if n_source_sentences is None:
        source_examples = [Example(x, coarse) for x, coarse, _ in sentences]
    else:
        shift = rng.normal(size=input_dim)
        shift *= source_shift / np.linalg.norm(shift)
        pool = _tagged_sentences(rng, n_source_sentences, refinement, means, noise_sigma, min_length, max_length)
        source_examples = [Example(x + shift, coarse) for x, coarse, _ in pool]
    kind = TaskKind.TOKEN_TAGGING
    source = Dataset(source_examples, LabelSpace(coarse_names), kind, input_dim)
    target = Dataset(target_examples, LabelSpace(fine_names), kind, input_dim)
    logging.info(
        f"Generated tag-set pair: {len(source)} source / {n_sentences} target sentences, "
        f"{len(refinement)} coarse / {n_fine} fine tags"
    )
    return TaskPair(source, target, oracle_map=refinement_oracle(refinement), refinement=refinement, name="tagset")


# FILE FORMATS


def hash_features(token, input_dim, seed=0):
    """
    Seeded feature hashing of a token into ``input_dim`` signed buckets, using the
    whole token and its boundary-marked character trigrams, then l2-normalised.
    """
    key = int(seed).to_bytes(8, "little", signed=True)
    marked = f"<{token}>"
    pieces = [f"w:{token}"] + [f"c:{marked[i : i + 3]}" for i in range(max(1, len(marked) - 2))]
    x = np.zeros(input_dim)
    for piece in pieces:
        digest = hashlib.blake2b(piece.encode("utf-8"), digest_size=8, key=key).digest()
        value = int.from_bytes(digest, "little")
        x[(value >> 1) % input_dim] += 1.0 if value & 1 else -1.0
    norm = np.linalg.norm(x)
    return x / norm if norm > 0 else x


_PANDAS_LINE = re.compile(r"line (\d+)")


def load_csv_classification(path, label_space=None):
    """
    Load a sequence classification dataset from a UTF-8 CSV file with header
    ``label,f1,...,fD`` and one example per row.

    :param LabelSpace label_space: A fixed label space (e.g. from training data).
        Labels outside it raise :class:`UnknownLabelError`. By default the label
        space is built in order of first appearance.
    """
    try:
        df = pd.read_csv(path, dtype={"label": str}, float_precision="round_trip", keep_default_na=False)
    except pd.errors.EmptyDataError:
        return Dataset([], label_space or LabelSpace(), input_dim=0)
    except pd.errors.ParserError as e:
        match = _PANDAS_LINE.search(str(e))
        raise ParseError(path, int(match.group(1)) if match else 0, str(e)) from None
    if len(df.columns) == 0 or df.columns[0] != "label":
        raise ParseError(path, 1, "header must start with a 'label' column")
    feature_cols = list(df.columns[1:])
    expected = [f"f{i + 1}" for i in range(len(feature_cols))]
    if feature_cols != expected:
        raise ParseError(path, 1, f"expected feature columns {expected[:3]}..., got {feature_cols[:3]}...")
    features = df[feature_cols].apply(pd.to_numeric, errors="coerce")
    bad = features.isna().any(axis=1).to_numpy() | (df["label"] == "").to_numpy()
    if bad.any():
        # header is line 1
        raise ParseError(path, int(np.argmax(bad)) + 2, "missing or non-numeric value")
    labels = df["label"].tolist()
    if label_space is None:
        label_space = LabelSpace.from_labels(labels)
    y = label_space.indexes(labels)
    X = features.to_numpy(dtype=np.float64)
    logging.info(f"Loaded {len(X)} examples with {len(feature_cols)} features from {path}")
    return Dataset([Example(x, int(c)) for x, c in zip(X, y)], label_space, input_dim=len(feature_cols))


def write_csv_classification(dataset, path):
    """
    Write a sequence classification dataset in the format read by
    :func:`load_csv_classification`
    """
    X = dataset.rows()
    df = pd.DataFrame(X, columns=[f"f{i + 1}" for i in range(X.shape[1])])
    df.insert(0, "label", [dataset.label_space[int(ex.labels)] for ex in dataset])
    df.to_csv(path, index=False, lineterminator="\n")
    return path


def load_conll_tagging(path, *, input_dim=64, seed=0, label_space=None):
    """
    Load tagged sentences from ``token<TAB>tag`` lines, with a blank line between
    sentences and ``#`` comment lines ignored. Tokens are featurised by
    :func:`hash_features`.
    """
    sentences = []
    current = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if line.startswith("#"):
                continue
            if line.strip() == "":
                if current:
                    sentences.append(current)
                    current = []
                continue
            fields = line.split("\t")
            if len(fields) != 2 or fields[0] == "" or fields[1] == "":
                raise ParseError(path, lineno, f"expected 'token<TAB>tag', got {line!r}")
            current.append((fields[0], fields[1]))
    if current:
        sentences.append(current)
    if label_space is None:
        label_space = LabelSpace.from_labels(tag for sentence in sentences for _, tag in sentence)
    examples = []
    for sentence in sentences:
        tokens = tuple(tok for tok, _ in sentence)
        X = np.array([hash_features(tok, input_dim, seed) for tok in tokens])
        examples.append(Example(X, label_space.indexes([tag for _, tag in sentence]), tokens))
    logging.info(f"Loaded {len(examples)} sentences from {path}")
    return Dataset(examples, label_space, TaskKind.TOKEN_TAGGING, input_dim)


# SPLITS


def class_allocation(k, num_classes):
    """
    Per-class counts for a balanced sample of ``k``, with the remainder going to
    the lowest class indexes
    """
    base, extra = divmod(k, num_classes)
    return np.array([base + (1 if c < extra else 0) for c in range(num_classes)], dtype=np.int64)


def _balanced_splits(target, k, rng):
    C = target.num_classes
    if k < C:
        raise ValueError(f"k={k} is smaller than the {C} target classes: cannot balance")
    allocation = class_allocation(k, C)
    labels = target.labels()
    train, validation = [], []
    for c in range(C):
        members = rng.permutation(np.flatnonzero(labels == c))
        if len(members) < 2 * allocation[c]:
            raise ValueError(f"Target class '{target.label_space[c]}' has only {len(members)} examples")
        train.extend(members[: allocation[c]].tolist())
        validation.extend(members[allocation[c] : 2 * allocation[c]].tolist())
    return sorted(train), sorted(validation)


def _covering_splits(target, k, rng):
    order = rng.permutation(len(target)).tolist()
    chosen = []
    covered = np.zeros(target.num_classes, dtype=bool)
    for tag in range(target.num_classes):
        if covered[tag]:
            continue
        for i in order:
            if i not in chosen and tag in target[i].label_array():
                chosen.append(i)
                covered[target[i].label_array()] = True
                break
        else:
            raise ValueError(f"Target tag '{target.label_space[tag]}' does not occur in the pool")
    if len(chosen) > k:
        raise ValueError(f"k={k} sentences cannot cover all {target.num_classes} target tags")
    chosen_set = set(chosen)
    rest = [i for i in order if i not in chosen_set]
    fill = k - len(chosen)
    train = chosen + rest[:fill]
    validation = rest[fill : fill + k]
    if len(validation) < k:
        raise ValueError(f"Target pool of {len(target)} sentences is too small for k={k}")
    return sorted(train), sorted(validation)


def sample_splits(pair, k, seed, max_tokens=None):
    """
    Draw the k-shot training set, a validation set of the same size and a test
    set (the rest of the target pool).

    For sequence tasks the training and validation sets are class balanced. For
    tagging tasks the training sentences include every target tag at least once.
    Tagged sentences are first truncated to ``max_tokens`` (64 by default).
    """
    if k < 1:
        raise ValueError(f"k must be positive, not {k}")
    rng = np.random.default_rng(seed)
    target = pair.target
    source = pair.source
    if pair.task_kind is TaskKind.TOKEN_TAGGING:
        max_tokens = Const.MAX_TOKENS_TAGGING if max_tokens is None else max_tokens
        target = target.truncated(max_tokens)
        source = source.truncated(max_tokens)
        train, validation = _covering_splits(target, k, rng)
    else:
        # pooled feature vectors are already within the classification token cap
        train, validation = _balanced_splits(target, k, rng)
    used = set(train) | set(validation)
    test = [i for i in range(len(target)) if i not in used]
    logging.debug(f"Sampled splits k={k} seed={seed}: {len(train)}/{len(validation)}/{len(test)}")
    return SplitSet(
        target.subset(train),
        target.subset(validation),
        target.subset(test),
        source,
        tuple(train),
        tuple(validation),
        tuple(test),
    )
