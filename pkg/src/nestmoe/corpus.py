"""Character-level corpus ingestion and a deterministic synthetic corpus.

The vocabulary is the sorted set of characters observed in the file plus
one trailing unknown symbol (used when encoding unseen text against an
existing vocabulary). The train/held-out split is by contiguous blocks,
so both halves keep natural local structure.
"""

import argparse
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

UNK = "<unk>"


@dataclass
class Corpus:
    vocab: list          # characters, sorted; UNK is implicitly last
    train: np.ndarray    # int32 token stream
    heldout: np.ndarray  # int32 token stream

    @property
    def vocab_size(self):
        return len(self.vocab) + 1  # + unknown symbol

    @property
    def unk_id(self):
        return len(self.vocab)

    def encode(self, text):
        index = {c: i for i, c in enumerate(self.vocab)}
        unk = self.unk_id
        return np.array([index.get(c, unk) for c in text], dtype=np.int32)

    def decode(self, ids):
        return "".join(self.vocab[i] if i < len(self.vocab) else UNK for i in ids)


def load_text(path):
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        text = f.read()
    if not text:
        raise ConfigError(f"corpus file {path} is empty")
    return text


def split_text(text, split_fraction=0.95):
    """Contiguous-block split: leading fraction trains, the rest is held out."""
    if not 0.0 < split_fraction < 1.0:
        raise ConfigError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    split_at = int(len(text) * split_fraction)
    return text[:split_at], text[split_at:]


def encode_with_vocab(text, vocab):
    """Encode text against a known character vocabulary; unseen chars map to UNK."""
    index = {c: i for i, c in enumerate(vocab)}
    unk = len(vocab)
    return np.array([index.get(c, unk) for c in text], dtype=np.int32)


def ingest_corpus(path, split_fraction=0.95):
    """Read a text file into a tokenized corpus with a deterministic split."""
    text = load_text(path)
    train_text, heldout_text = split_text(text, split_fraction)
    vocab = sorted(set(text))
    return Corpus(
        vocab=vocab,
        train=encode_with_vocab(train_text, vocab),
        heldout=encode_with_vocab(heldout_text, vocab),
    )


# ---------------------------------------------------------------------------
# synthetic corpus


def synthesize_corpus(n_chars=1_200_000, seed=7):
    """English-like lowercase text with a Zipf word distribution.

    Frequent short words give the model easy, highly predictable spans;
    rare long words supply genuinely hard continuations, so derived
    difficulty labels spread over several expert classes.
    """
    rng = np.random.default_rng(seed)
    vowels = "aeiou"
    consonants = "bcdfghklmnprstvwz"

    def syllable():
        s = consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
        if rng.random() < 0.25:
            s += consonants[rng.integers(len(consonants))]
        return s

    words = []
    seen = set()
    while len(words) < 700:
        w = "".join(syllable() for _ in range(rng.integers(1, 5)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    ranks = np.arange(1, len(words) + 1)
    weights = 1.0 / ranks**1.1
    weights /= weights.sum()

    pieces = []
    size = 0
    sentence_i = 0
    while size < n_chars:
        n_words = int(rng.integers(4, 13))
        idx = rng.choice(len(words), size=n_words, p=weights)
        sentence = " ".join(words[i] for i in idx) + "."
        sentence_i += 1
        sep = "\n" if sentence_i % 8 == 0 else " "
        pieces.append(sentence + sep)
        size += len(sentence) + 1
    return "".join(pieces)[:n_chars]


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Write a deterministic synthetic character corpus.")
    parser.add_argument("--out", required=True, help="output text file")
    parser.add_argument("--chars", type=int, default=1_200_000)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    text = synthesize_corpus(n_chars=args.chars, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    print(f"wrote {len(text)} chars to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
