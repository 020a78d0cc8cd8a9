"""Mutation records, the positional key surjection and the occurrence matrix.

A somatic profile is reduced to the set of ``CHROM:POS`` keys it carries.
Keys seen in fewer than ``min_freq`` samples are dropped and the rest become
the columns of a sparse binary sample-by-mutation matrix.
"""

from __future__ import annotations

import io
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, TextIO

import numpy as np

from . import _random
from .errors import EmptyVocabularyError, FormatError, ParseError

logger = logging.getLogger(__name__)

CHROMOSOMES = tuple([str(i) for i in range(1, 23)] + ["X", "Y", "MT"])
_CHROM_SET = frozenset(CHROMOSOMES)
_CHROM_ALIASES = {"M": "MT", "23": "X", "24": "Y"}

REQUIRED_COLUMNS = ("sample_id", "chromosome", "position")


def normalize_chromosome(token: str) -> Optional[str]:
    """Return the canonical chromosome name or ``None`` if unrecognised.

    Matching is case-insensitive and a leading ``chr`` prefix is ignored, so
    ``"chr7"``, ``"Chr7"`` and ``"7"`` all map to ``"7"``.
    """
    t = token.strip().upper()
    if t.startswith("CHR"):
        t = t[3:]
    if t.isdigit():
        t = str(int(t))
    t = _CHROM_ALIASES.get(t, t)
    return t if t in _CHROM_SET else None


@dataclass(frozen=True)
class MutationRecord:
    sample_id: str
    chromosome: str
    position: int
    vaf: Optional[float] = None

    def __post_init__(self):
        if self.chromosome not in _CHROM_SET:
            raise ValueError(f"unknown chromosome {self.chromosome!r}")
        if self.position < 0:
            raise ValueError(f"negative position {self.position}")
        if self.vaf is not None and not 0.0 <= self.vaf <= 1.0:
            raise ValueError(f"vaf {self.vaf} outside [0, 1]")


def make_key(record: MutationRecord) -> str:
    """Collapse a record to its positional key ``"CHROM:POS"``."""
    return f"{record.chromosome}:{record.position}"


def parse_key(key: str) -> tuple[str, int]:
    chrom, sep, pos = key.partition(":")
    if not sep or chrom not in _CHROM_SET or not pos.isdigit():
        raise ValueError(f"malformed mutation key {key!r}")
    return chrom, int(pos)


@dataclass(frozen=True)
class SomaticProfileSet:
    """Ordered samples, each with its set of mutation keys.

    ``labels`` optionally maps sample ids to a class label (cancer type,
    planted cluster, drug response...).
    """

    samples: tuple[tuple[str, frozenset], ...]
    labels: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        ids = [sid for sid, _ in self.samples]
        if len(set(ids)) != len(ids):
            dup = next(s for s, c in Counter(ids).items() if c > 1)
            raise ValueError(f"duplicate sample id {dup!r}")
        if self.labels is not None:
            missing = set(self.labels) - set(ids)
            if missing:
                raise ValueError(f"labels for unknown samples: {sorted(missing)[:5]}")

    @property
    def sample_ids(self) -> list[str]:
        return [sid for sid, _ in self.samples]

    def __len__(self):
        return len(self.samples)

    def with_labels(self, labels: Mapping[str, str]) -> "SomaticProfileSet":
        return SomaticProfileSet(self.samples, dict(labels))


@dataclass(frozen=True)
class ColumnSpec:
    """Header names for the logical columns of a mutation TSV."""

    sample_id: str = "sample_id"
    chromosome: str = "chromosome"
    position: str = "position"
    vaf: str = "vaf"


def _data_lines(stream: TextIO):
    for lineno, line in enumerate(stream, start=1):
        if line.startswith("#") or not line.strip():
            continue
        yield lineno, line.rstrip("\r\n").split("\t")


def iter_records(stream: TextIO, columns: ColumnSpec = ColumnSpec()):
    """Yield ``MutationRecord`` objects from a mutation TSV stream."""
    lines = _data_lines(stream)
    try:
        _, header = next(lines)
    except StopIteration:
        raise FormatError("empty file, expected a header line") from None
    index = {name: i for i, name in enumerate(header)}
    missing = [
        getattr(columns, c) for c in REQUIRED_COLUMNS if getattr(columns, c) not in index
    ]
    if missing:
        raise FormatError(f"missing required column(s): {', '.join(missing)}", line=1)
    i_sid = index[columns.sample_id]
    i_chr = index[columns.chromosome]
    i_pos = index[columns.position]
    i_vaf = index.get(columns.vaf)
    width = max(i_sid, i_chr, i_pos)

    for lineno, fields in lines:
        if len(fields) <= width:
            raise ParseError(f"expected at least {width + 1} fields, got {len(fields)}", line=lineno)
        token = fields[i_chr]
        chrom = normalize_chromosome(token)
        if chrom is None:
            raise ParseError(f"unknown chromosome {token!r}", line=lineno, token=token)
        pos_token = fields[i_pos].strip()
        if not pos_token.isdigit():
            raise ParseError(f"position {pos_token!r} is not a non-negative integer",
                             line=lineno, token=pos_token)
        vaf = None
        if i_vaf is not None and i_vaf < len(fields) and fields[i_vaf].strip() not in ("", "NA", "."):
            try:
                vaf = float(fields[i_vaf])
            except ValueError:
                raise ParseError(f"vaf {fields[i_vaf]!r} is not a number",
                                 line=lineno, token=fields[i_vaf]) from None
            if not 0.0 <= vaf <= 1.0:
                raise ParseError(f"vaf {vaf} outside [0, 1]", line=lineno, token=fields[i_vaf])
        yield MutationRecord(fields[i_sid].strip(), chrom, int(pos_token), vaf)


def parse_mutation_file(stream: TextIO, columns: ColumnSpec = ColumnSpec()) -> SomaticProfileSet:
    """Group the records of a mutation TSV into per-sample key sets.

    Samples keep the order of their first appearance. Repeated
    ``(sample, key)`` pairs collapse to one and are reported as a warning.
    """
    keysets: dict[str, set] = {}
    duplicates = 0
    for rec in iter_records(stream, columns):
        keys = keysets.setdefault(rec.sample_id, set())
        key = make_key(rec)
        if key in keys:
            duplicates += 1
        keys.add(key)
    if duplicates:
        logger.warning("collapsed %d duplicate (sample, mutation) pairs", duplicates)
    return SomaticProfileSet(tuple((sid, frozenset(k)) for sid, k in keysets.items()))


def write_mutation_tsv(profiles: SomaticProfileSet, stream: TextIO) -> None:
    stream.write("sample_id\tchromosome\tposition\n")
    for sid, keys in profiles.samples:
        for key in sorted(keys, key=parse_key):
            chrom, pos = parse_key(key)
            stream.write(f"{sid}\t{chrom}\t{pos}\n")


def parse_labels(stream: TextIO) -> dict[str, str]:
    """Read a two-column ``sample_id``/``label`` TSV."""
    lines = _data_lines(stream)
    try:
        _, header = next(lines)
    except StopIteration:
        raise FormatError("empty labels file") from None
    index = {name: i for i, name in enumerate(header)}
    for col in ("sample_id", "label"):
        if col not in index:
            raise FormatError(f"missing required column: {col}", line=1)
    i_sid, i_lab = index["sample_id"], index["label"]
    labels = {}
    for lineno, fields in lines:
        if len(fields) <= max(i_sid, i_lab):
            raise ParseError("too few fields", line=lineno)
        sid = fields[i_sid].strip()
        if sid in labels:
            raise ParseError(f"duplicate sample id {sid!r}", line=lineno, token=sid)
        labels[sid] = fields[i_lab].strip()
    return labels


def write_labels_tsv(labels: Mapping[str, str], stream: TextIO, order: Optional[Iterable[str]] = None) -> None:
    stream.write("sample_id\tlabel\n")
    for sid in (order if order is not None else labels):
        stream.write(f"{sid}\t{labels[sid]}\n")


# --------------------------------------------------------------------------
# vocabulary and matrix


@dataclass(frozen=True)
class Vocabulary:
    keys: tuple[str, ...]
    doc_freq: tuple[int, ...]
    removed: int
    min_freq: int

    def __len__(self):
        return len(self.keys)


def document_frequency(profiles: SomaticProfileSet) -> Counter:
    freq: Counter = Counter()
    for _, keys in profiles.samples:
        freq.update(keys)
    return freq


def build_vocabulary(profiles: SomaticProfileSet, min_freq: int = 5) -> Vocabulary:
    """Keep the keys carried by at least ``min_freq`` distinct samples."""
    if len(profiles) == 0:
        raise ValueError("no samples to build a vocabulary from")
    if min_freq < 1:
        raise ValueError(f"min_freq must be positive, got {min_freq}")
    freq = document_frequency(profiles)
    kept = sorted(k for k, c in freq.items() if c >= min_freq)
    if not kept:
        raise EmptyVocabularyError(min_freq)
    return Vocabulary(tuple(kept), tuple(freq[k] for k in kept), len(freq) - len(kept), min_freq)


@dataclass(frozen=True, eq=False)
class OccurrenceMatrix:
    """Binary sample-by-mutation matrix in compressed sparse row form.

    Row ``i`` holds the sorted column indices ``indices[indptr[i]:indptr[i+1]]``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    vocabulary: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        n, m = len(self.sample_ids), len(self.vocabulary)
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise ValueError("row pointer array inconsistent with sample count")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("row pointers must be non-decreasing")
        if len(self.indices):
            if self.indices.min() < 0 or self.indices.max() >= m:
                raise ValueError("column index out of range")
            # strictly increasing within each row
            step = np.diff(self.indices.astype(np.int64))
            row_start = np.zeros(len(self.indices), dtype=bool)
            row_start[self.indptr[:-1][np.diff(self.indptr) > 0]] = True
            if np.any(step[~row_start[1:]] <= 0):
                raise ValueError("row indices must be strictly increasing")
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_features(self) -> int:
        return len(self.vocabulary)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_samples, self.n_features

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @property
    def rows(self) -> list[list[int]]:
        return [self.indices[a:b].tolist() for a, b in zip(self.indptr[:-1], self.indptr[1:])]

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def column_counts(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.n_features)

    def dense(self, rows=None) -> np.ndarray:
        """Dense float64 0/1 array for all rows or the selected ``rows``."""
        rows = np.arange(self.n_samples) if rows is None else np.asarray(rows, dtype=np.int64)
        out = np.zeros((len(rows), self.n_features))
        starts, stops = self.indptr[rows], self.indptr[rows + 1]
        lengths = stops - starts
        r = np.repeat(np.arange(len(rows)), lengths)
        # flat positions of every selected nonzero
        offs = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        out[r, self.indices[np.repeat(starts, lengths) + offs]] = 1.0
        return out

    @classmethod
    def from_dense(cls, x, vocabulary=None, sample_ids=None) -> "OccurrenceMatrix":
        x = np.asarray(x)
        n, m = x.shape
        r, c = np.nonzero(x)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))]).astype(np.int64)
        vocabulary = tuple(vocabulary) if vocabulary is not None else tuple(f"1:{j}" for j in range(m))
        sample_ids = tuple(sample_ids) if sample_ids is not None else tuple(f"S{i}" for i in range(n))
        return cls(indptr, c.astype(np.int32), vocabulary, sample_ids)

    def __eq__(self, other):
        if not isinstance(other, OccurrenceMatrix):
            return NotImplemented
        return (self.vocabulary == other.vocabulary and self.sample_ids == other.sample_ids
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))


def build_matrix(profiles: SomaticProfileSet, vocabulary) -> OccurrenceMatrix:
    """Binary occurrence matrix of ``profiles`` over ``vocabulary``.

    ``vocabulary`` may be a :class:`Vocabulary` or any sorted key sequence.
    Keys outside it are ignored.
    """
    keys = tuple(vocabulary.keys if isinstance(vocabulary, Vocabulary) else vocabulary)
    if any(a >= b for a, b in zip(keys, keys[1:])):
        raise ValueError("vocabulary must be sorted and duplicate-free")
    column = {k: j for j, k in enumerate(keys)}
    indptr = [0]
    indices: list[int] = []
    for _, sample_keys in profiles.samples:
        cols = sorted(column[k] for k in sample_keys if k in column)
        indices.extend(cols)
        indptr.append(len(indices))
    return OccurrenceMatrix(
        np.asarray(indptr, dtype=np.int64),
        np.asarray(indices, dtype=np.int32),
        keys,
        tuple(profiles.sample_ids),
    )


# --------------------------------------------------------------------------
# FSMX binary format
#
#   b"FSMX" | u16 version | u64 n | u64 m | u64 nnz
#   | u64[n+1] row pointers | u32[nnz] column indices
#   | m x (u32 length, utf-8 bytes) vocabulary
#   | n x (u32 length, utf-8 bytes) sample ids
# all little-endian.

FSMX_MAGIC = b"FSMX"
FSMX_VERSION = 1


def _pack_strings(strings) -> bytes:
    out = bytearray()
    for s in strings:
        b = s.encode("utf-8")
        out += struct.pack("<I", len(b)) + b
    return bytes(out)


def _unpack_strings(buf: memoryview, offset: int, count: int):
    out = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        out.append(bytes(buf[offset:offset + length]).decode("utf-8"))
        offset += length
    return out, offset


def matrix_to_bytes(matrix: OccurrenceMatrix) -> bytes:
    head = FSMX_MAGIC + struct.pack("<HQQQ", FSMX_VERSION, matrix.n_samples,
                                    matrix.n_features, matrix.nnz)
    return b"".join([
        head,
        matrix.indptr.astype("<u8").tobytes(),
        matrix.indices.astype("<u4").tobytes(),
        _pack_strings(matrix.vocabulary),
        _pack_strings(matrix.sample_ids),
    ])


def matrix_from_bytes(data: bytes) -> OccurrenceMatrix:
    if data[:4] != FSMX_MAGIC:
        raise ParseError("not an FSMX matrix file (bad magic)")
    version, n, m, nnz = struct.unpack_from("<HQQQ", data, 4)
    if version != FSMX_VERSION:
        raise ParseError(f"unsupported FSMX version {version}")
    off = 4 + struct.calcsize("<HQQQ")
    need = off + 8 * (n + 1) + 4 * nnz
    if len(data) < need:
        raise ParseError("truncated FSMX file")
    indptr = np.frombuffer(data, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    indices = np.frombuffer(data, "<u4", nnz, off).astype(np.int32)
    off += 4 * nnz
    buf = memoryview(data)
    try:
        vocab, off = _unpack_strings(buf, off, m)
        sids, off = _unpack_strings(buf, off, n)
    except struct.error:
        raise ParseError("truncated FSMX string table") from None
    return OccurrenceMatrix(indptr, indices, tuple(vocab), tuple(sids))


def save_matrix(matrix: OccurrenceMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(matrix_to_bytes(matrix))


def load_matrix(path) -> OccurrenceMatrix:
    with open(path, "rb") as fh:
        return matrix_from_bytes(fh.read())


# --------------------------------------------------------------------------
# cross-validation folds


@dataclass(frozen=True)
class KFoldPlan:
    folds: tuple[tuple[int, ...], ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """``(train_indices, held_out_indices)`` for fold ``i``."""
        test = np.asarray(self.folds[i], dtype=np.int64)
        train = np.concatenate([np.asarray(f, dtype=np.int64)
                                for j, f in enumerate(self.folds) if j != i])
        return np.sort(train), np.sort(test)


def kfold_split(n: int, k: int = 5, seed: int = 0) -> KFoldPlan:
    """Shuffle ``range(n)`` with ``seed`` and cut it into ``k`` contiguous folds."""
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = _random.stream(seed, _random.SPLIT).permutation(n)
    return KFoldPlan(tuple(tuple(int(i) for i in part) for part in np.array_split(perm, k)), seed)


# --------------------------------------------------------------------------
# synthetic planted-cluster data


@dataclass(frozen=True)
class SynthParams:
    n_samples: int = 2000
    n_features: int = 5000
    n_clusters: int = 8
    p_in: float = 0.3
    p_out: float = 0.005
    signature_size: int = 100
    seed: int = 1

    def problems(self) -> list[str]:
        out = []
        if self.n_samples < 1 or self.n_features < 1 or self.n_clusters < 1:
            out.append("n_samples, n_features and n_clusters must be positive")
        if self.signature_size < 1:
            out.append("signature_size must be positive")
        # p_in == p_out is allowed: it is the no-structure null model
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            out.append(f"need 0 <= p_out <= p_in <= 1, got p_out={self.p_out}, p_in={self.p_in}")
        if self.signature_size * self.n_clusters > self.n_features:
            out.append("signature_size * n_clusters exceeds n_features")
        return out


def synth_feature_key(j: int) -> str:
    """Positional key for synthetic feature ``j``; distinct for every j."""
    return f"{CHROMOSOMES[j % 24]}:{1000 + 97 * (j // 24)}"


@dataclass(frozen=True)
class SynthDataset:
    profiles: SomaticProfileSet
    clusters: np.ndarray
    signatures: tuple[np.ndarray, ...]
    feature_keys: tuple[str, ...]
    params: SynthParams = field(default_factory=SynthParams)


def synth_generate(n_samples: int = 2000, n_features: int = 5000, n_clusters: int = 8,
                   p_in: float = 0.3, p_out: float = 0.005, signature_size: int = 100,
                   seed: int = 1) -> SynthDataset:
    """Planted-cluster profiles.

    Each cluster owns a disjoint random set of ``signature_size`` features.
    A sample draws its cluster uniformly, then carries each feature of that
    cluster's signature with probability ``p_in`` and every other feature with
    probability ``p_out``. ``profiles.labels`` holds the cluster index.
    """
    params = SynthParams(n_samples, n_features, n_clusters, p_in, p_out, signature_size, seed)
    bad = params.problems()
    if bad:
        raise ValueError("; ".join(bad))
    rng = _random.stream(seed, _random.SYNTH)
    perm = rng.permutation(n_features)
    signatures = tuple(np.sort(perm[c * signature_size:(c + 1) * signature_size])
                       for c in range(n_clusters))
    prob = np.full((n_clusters, n_features), p_out)
    for c, sig in enumerate(signatures):
        prob[c, sig] = p_in
    clusters = rng.integers(0, n_clusters, size=n_samples)
    keys = tuple(synth_feature_key(j) for j in range(n_features))
    samples = []
    width = len(str(n_samples - 1))
    for i in range(n_samples):
        hit = np.flatnonzero(rng.random(n_features) < prob[clusters[i]])
        samples.append((f"S{i:0{width}d}", frozenset(keys[j] for j in hit)))
    labels = {sid: str(int(c)) for (sid, _), c in zip(samples, clusters)}
    return SynthDataset(SomaticProfileSet(tuple(samples), labels), clusters, signatures, keys, params)


def synth_response_labels(clusters: np.ndarray, n_clusters: int, flip: float = 0.1,
                          seed: int = 1) -> np.ndarray:
    """Planted binary response: a random half of the clusters respond, then
    each label is flipped with probability ``flip``."""
    rng = _random.stream(seed, _random.SYNTH, 1)
    responders = rng.permutation(n_clusters)[: max(1, n_clusters // 2)]
    y = np.isin(clusters, responders).astype(np.int64)
    flips = rng.random(len(y)) < flip
    return np.where(flips, 1 - y, y)


def read_profiles(path, columns: ColumnSpec = ColumnSpec()) -> SomaticProfileSet:
    with open(path, encoding="utf-8", newline="") as fh:
        try:
            return parse_mutation_file(fh, columns)
        except ParseError as exc:
            raise exc.at(path) from None


def profiles_to_tsv(profiles: SomaticProfileSet) -> str:
    buf = io.StringIO()
    write_mutation_tsv(profiles, buf)
    return buf.getvalue()

