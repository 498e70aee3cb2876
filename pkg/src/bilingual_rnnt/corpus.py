"""Synthetic bilingual corpus: symbol tables, utterance synthesis, features.

The two "languages" are disjoint synthetic alphabets. Every table entry that
can be spoken (plain graphemes and their word-initial ``B_`` variants) owns
a fixed random embedding vector; an utterance emits each grapheme as a few
noisy copies of its embedding, which are then stacked and subsampled into
the model's feature frames. Word-initial graphemes use the ``B_`` entry, so
word boundaries are recoverable from label sequences.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

BLANK = "<blank>"
NOISE = "<noise>"

DATASET_FORMAT_VERSION = 1

SPLITS = ("train", "test_A", "test_B", "test_mixed")


class CorpusError(ValueError):
    """Invalid corpus configuration or construction input."""


@dataclass(frozen=True)
class SymbolTable:
    """One language's inventory: graphemes, B_ variants, blank and noise."""

    language_id: str
    graphemes: tuple[str, ...]
    entries: tuple[str, ...]
    index: dict[str, int]

    @property
    def blank_index(self) -> int:
        return self.index[BLANK]

    @property
    def noise_index(self) -> int:
        return self.index[NOISE]

    @property
    def size(self) -> int:
        return len(self.entries)

    def nonblank_indices(self) -> list[int]:
        return [i for i in range(self.size) if i != self.blank_index]


def build_symbol_table(graphemes, language_id: str) -> SymbolTable:
    """Table = graphemes + B_-prefixed variants + blank + noise."""
    graphemes = tuple(graphemes)
    if not graphemes:
        raise CorpusError("empty grapheme inventory")
    if len(set(graphemes)) != len(graphemes):
        raise CorpusError(f"duplicate graphemes in inventory for {language_id}")
    entries = graphemes + tuple("B_" + g for g in graphemes) + (BLANK, NOISE)
    index = {name: i for i, name in enumerate(entries)}
    return SymbolTable(language_id, graphemes, entries, index)


@dataclass(frozen=True)
class CombinedTable:
    """Both languages in one index space with a single shared blank (last).

    Layout: non-blank entries of A in table order, then non-blank entries of
    B, then the shared blank. |combined| = |A| + |B| - 1.
    """

    table_a: SymbolTable
    table_b: SymbolTable
    a_nonblank: tuple[int, ...]  # per-language indices, combined order
    b_nonblank: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.table_a.size + self.table_b.size - 1

    @property
    def blank_index(self) -> int:
        return self.size - 1

    @property
    def a_segment(self) -> range:
        return range(0, len(self.a_nonblank))

    @property
    def b_segment(self) -> range:
        return range(len(self.a_nonblank), len(self.a_nonblank) + len(self.b_nonblank))

    def to_combined(self, language_id: str, index: int) -> int:
        table, offset, order = self._lang(language_id)
        if index == table.blank_index:
            return self.blank_index
        return offset + order.index(index)

    def from_combined(self, index: int) -> tuple[str, int]:
        if index == self.blank_index:
            raise CorpusError("shared blank has no single source language")
        if index in self.a_segment:
            return self.table_a.language_id, self.a_nonblank[index]
        return self.table_b.language_id, self.b_nonblank[index - len(self.a_nonblank)]

    def language_of(self, index: int) -> str:
        return self.from_combined(index)[0]

    def entry_name(self, index: int) -> str:
        if index == self.blank_index:
            return BLANK
        lang, i = self.from_combined(index)
        table = self.table_a if lang == self.table_a.language_id else self.table_b
        return table.entries[i]

    def _lang(self, language_id: str):
        if language_id == self.table_a.language_id:
            return self.table_a, 0, self.a_nonblank
        if language_id == self.table_b.language_id:
            return self.table_b, len(self.a_nonblank), self.b_nonblank
        raise CorpusError(f"unknown language {language_id!r}")


def build_combined(table_a: SymbolTable, table_b: SymbolTable) -> CombinedTable:
    overlap = set(table_a.graphemes) & set(table_b.graphemes)
    if overlap:
        raise CorpusError(f"grapheme sets overlap: {sorted(overlap)}")
    return CombinedTable(
        table_a,
        table_b,
        tuple(table_a.nonblank_indices()),
        tuple(table_b.nonblank_indices()),
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    num_graphemes_a: int = 10
    num_graphemes_b: int = 10
    raw_dim: int = 8
    frames_per_grapheme_mean: float = 3.0
    frames_per_grapheme_jitter: float = 1.0
    noise_stddev: float = 0.1
    words_per_utterance: tuple[int, int] = (2, 5)
    graphemes_per_word: tuple[int, int] = (2, 4)
    switch_prob: float = 0.4
    stack: int = 3
    skip: int = 3
    train_size: int = 200
    test_size_a: int = 20
    test_size_b: int = 20
    test_size_mixed: int = 20
    train_proportions: tuple[float, float, float] = (0.3, 0.3, 0.4)
    root_seed: int = 0

    def validate(self) -> None:
        for name in ("num_graphemes_a", "num_graphemes_b", "raw_dim", "stack",
                     "skip", "train_size"):
            if getattr(self, name) < 1:
                raise CorpusError(f"{name} must be >= 1")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise CorpusError("switch_prob must lie in [0, 1]")
        if any(p < 0 for p in self.train_proportions):
            raise CorpusError("train proportions must be non-negative")
        if self.frames_per_grapheme_mean < 1:
            raise CorpusError("frames_per_grapheme_mean must be >= 1")
        for lo, hi in (self.words_per_utterance, self.graphemes_per_word):
            if lo < 1 or hi < lo:
                raise CorpusError("ranges must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("words_per_utterance", "graphemes_per_word", "train_proportions"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def tables_from_counts(num_a: int, num_b: int) -> CombinedTable:
    """Tables for the two synthetic alphabets ('a0'.., 'b0'..)."""
    table_a = build_symbol_table([f"a{i}" for i in range(num_a)], "A")
    table_b = build_symbol_table([f"b{i}" for i in range(num_b)], "B")
    return build_combined(table_a, table_b)


def language_tables(config: CorpusConfig) -> CombinedTable:
    return tables_from_counts(config.num_graphemes_a, config.num_graphemes_b)


def entry_embeddings(config: CorpusConfig) -> dict[str, np.ndarray]:
    """Fixed acoustic embedding per speakable table entry, from the root seed.

    Plain graphemes and their B_ variants get distinct vectors, so word
    boundaries are observable in the acoustics.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.root_seed, spawn_key=(0,)))
    combined = language_tables(config)
    emb = {}
    for table in (combined.table_a, combined.table_b):
        for g in table.graphemes:
            emb[g] = rng.normal(size=config.raw_dim)
            emb["B_" + g] = rng.normal(size=config.raw_dim)
    return emb


# ---------------------------------------------------------------------------
# Utterance synthesis
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    condition: str  # "A", "B", or "mixed"
    features: np.ndarray  # (T, stack * raw_dim) after stacking/subsampling
    words: list[tuple[str, str]]  # (language_id, word text)
    label_seq: np.ndarray  # combined indices, blank-free

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


def stack_subsample(raw: np.ndarray, stack: int, skip: int) -> np.ndarray:
    """Frame i = concat(raw[i*skip : i*skip+stack]), zero-padded at the tail.

    Output has ceil(T0/skip) frames of dimension stack*d0.
    """
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise CorpusError(f"need a nonempty (T0, d0) matrix, got shape {raw.shape}")
    if stack < 1 or skip < 1:
        raise CorpusError("stack and skip must be >= 1")
    t0, d0 = raw.shape
    t_out = -(-t0 // skip)
    padded = np.zeros((t0 + stack, d0))
    padded[:t0] = raw
    out = np.empty((t_out, stack * d0))
    for i in range(t_out):
        out[i] = padded[i * skip : i * skip + stack].reshape(-1)
    return out


def _word_languages(rng, n_words: int, lang_mode: str, switch_prob: float) -> list[str]:
    if lang_mode in ("A", "B"):
        return [lang_mode] * n_words
    langs = [rng.choice(["A", "B"])]
    for _ in range(n_words - 1):
        flip = rng.random() < switch_prob
        langs.append(("B" if langs[-1] == "A" else "A") if flip else langs[-1])
    if len(set(langs)) == 1:  # mixed utterances must contain both languages
        j = int(rng.integers(0, n_words))
        langs[j] = "B" if langs[j] == "A" else "A"
    return langs


def synth_utterance(config: CorpusConfig, lang_mode: str, seed, uid: str | None = None) -> Utterance:
    """Generate one utterance; a pure function of (config, lang_mode, seed)."""
    if lang_mode not in ("A", "B", "mixed"):
        raise CorpusError(f"lang_mode must be A, B or mixed, got {lang_mode!r}")
    config.validate()
    rng = np.random.default_rng(seed)
    combined = language_tables(config)
    emb = entry_embeddings(config)

    n_words = int(rng.integers(config.words_per_utterance[0], config.words_per_utterance[1] + 1))
    langs = _word_languages(rng, n_words, lang_mode, config.switch_prob)

    words: list[tuple[str, str]] = []
    labels: list[int] = []
    frames: list[np.ndarray] = []
    for lang in langs:
        table = combined.table_a if lang == "A" else combined.table_b
        n_g = int(rng.integers(config.graphemes_per_word[0], config.graphemes_per_word[1] + 1))
        picks = [table.graphemes[int(rng.integers(0, len(table.graphemes)))] for _ in range(n_g)]
        words.append((lang, "".join(picks)))
        for pos, g in enumerate(picks):
            entry = ("B_" + g) if pos == 0 else g
            labels.append(combined.to_combined(lang, table.index[entry]))
            n_frames = max(1, int(round(
                config.frames_per_grapheme_mean
                + rng.uniform(-config.frames_per_grapheme_jitter, config.frames_per_grapheme_jitter)
            )))
            noise = rng.normal(scale=config.noise_stddev, size=(n_frames, config.raw_dim)) \
                if config.noise_stddev > 0 else np.zeros((n_frames, config.raw_dim))
            frames.append(emb[entry] + noise)

    raw = np.concatenate(frames, axis=0)
    features = stack_subsample(raw, config.stack, config.skip)
    if uid is None:
        uid = f"utt-{lang_mode}-{np.random.default_rng(seed).integers(1 << 30)}"
    return Utterance(uid, lang_mode, features, words, np.asarray(labels, dtype=np.int64))


def detokenize(combined: CombinedTable, label_indices) -> list[tuple[str, str]]:
    """Split a blank-free combined label sequence into (language, word) pairs.

    A B_ entry starts a new word; stray leading non-B_ symbols open a word
    implicitly. Word language is the language of its first symbol.
    """
    words: list[tuple[str, str]] = []
    cur: list[str] = []
    cur_lang = None
    for idx in label_indices:
        lang, _ = combined.from_combined(int(idx))
        name = combined.entry_name(int(idx))
        if name.startswith("B_") or cur_lang is None:
            if cur:
                words.append((cur_lang, "".join(cur)))
            cur, cur_lang = [], lang
        cur.append(name[2:] if name.startswith("B_") else name)
    if cur:
        words.append((cur_lang, "".join(cur)))
    return words


# ---------------------------------------------------------------------------
# Dataset assembly and persistence
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    config: CorpusConfig
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    @property
    def combined_table(self) -> CombinedTable:
        return language_tables(self.config)


def make_dataset(config: CorpusConfig) -> Dataset:
    """Build all four splits; per-utterance seeds are disjoint spawns of the root."""
    config.validate()
    if min(config.test_size_a, config.test_size_b, config.test_size_mixed) < 1:
        raise CorpusError("every test condition needs at least one utterance")

    cond_rng = np.random.default_rng(np.random.SeedSequence(config.root_seed, spawn_key=(1,)))
    props = np.asarray(config.train_proportions, dtype=np.float64)
    props = props / props.sum()
    train_conds = [("A", "B", "mixed")[int(cond_rng.choice(3, p=props))]
                   for _ in range(config.train_size)]

    def gen(split_no: int, split: str, conds) -> list[Utterance]:
        utts = []
        for i, cond in enumerate(conds):
            seed = np.random.SeedSequence(config.root_seed, spawn_key=(2, split_no, i))
            utts.append(synth_utterance(config, cond, seed, uid=f"{split}-{i:05d}"))
        return utts

    splits = {
        "train": gen(0, "train", train_conds),
        "test_A": gen(1, "test_A", ["A"] * config.test_size_a),
        "test_B": gen(2, "test_B", ["B"] * config.test_size_b),
        "test_mixed": gen(3, "test_mixed", ["mixed"] * config.test_size_mixed),
    }
    return Dataset(config, splits)


def _utt_to_record(utt: Utterance) -> dict:
    return {
        "id": utt.id,
        "condition": utt.condition,
        "words": [[lang, text] for lang, text in utt.words],
        "labels": [int(i) for i in utt.label_seq],
        "features": utt.features.tolist(),
    }


def _utt_from_record(rec: dict) -> Utterance:
    return Utterance(
        rec["id"],
        rec["condition"],
        np.asarray(rec["features"], dtype=np.float64),
        [(lang, text) for lang, text in rec["words"]],
        np.asarray(rec["labels"], dtype=np.int64),
    )


def save_dataset(dataset: Dataset, out_dir: str) -> None:
    """One JSON-lines file per split plus a manifest with config and counts."""
    os.makedirs(out_dir, exist_ok=True)
    for split in SPLITS:
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, "w") as fh:
            for utt in dataset.splits[split]:
                fh.write(json.dumps(_utt_to_record(utt), sort_keys=True) + "\n")
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": dataset.config.to_dict(),
        "split_sizes": {s: len(dataset.splits[s]) for s in SPLITS},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir: str) -> Dataset:
    manifest_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CorpusError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise CorpusError(f"unsupported dataset format {manifest.get('format_version')}")
    config = CorpusConfig.from_dict(manifest["config"])
    splits = {}
    for split in SPLITS:
        with open(os.path.join(in_dir, f"{split}.jsonl")) as fh:
            splits[split] = [_utt_from_record(json.loads(line)) for line in fh]
    return Dataset(config, splits)
