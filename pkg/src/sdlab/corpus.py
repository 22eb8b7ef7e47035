"""Byte-level corpora.

Tokens are raw bytes (vocab 256). ``stdlib_corpus`` builds a deterministic
multi-megabyte corpus from the running interpreter's standard-library
sources, which is the only large text reliably present offline.
"""
import hashlib
import sysconfig
from pathlib import Path

import numpy as np

VOCAB = 256


def from_bytes(raw):
    return np.frombuffer(bytes(raw), dtype=np.uint8).astype(np.int64)


def read_corpus(path):
    return from_bytes(Path(path).read_bytes())


def encode(text):
    return from_bytes(text.encode("utf-8"))


def stdlib_corpus(min_bytes=6_000_000, root=None):
    """Concatenate sorted stdlib ``*.py`` files until ``min_bytes`` is reached."""
    root = Path(root or sysconfig.get_paths()["stdlib"])
    chunks, total = [], 0
    for path in sorted(root.rglob("*.py")):
        rel = path.relative_to(root).as_posix()
        if "site-packages" in rel or "dist-packages" in rel:
            continue
        try:
            data = path.read_bytes()
        except OSError:
            continue
        chunks.append(data)
        total += len(data)
        if total >= min_bytes:
            break
    if total < min_bytes:
        raise RuntimeError(f"only {total} bytes of stdlib source found under {root}")
    return b"\n".join(chunks)


def write_stdlib_corpus(path, min_bytes=6_000_000):
    raw = stdlib_corpus(min_bytes)
    Path(path).write_bytes(raw)
    return path


def split_holdout(tokens, holdout):
    """(train, heldout) with the last ``holdout`` tokens held out."""
    tokens = np.asarray(tokens)
    if holdout <= 0 or holdout >= tokens.size:
        raise ValueError(f"holdout must be in (0, {tokens.size})")
    return tokens[:-holdout], tokens[-holdout:]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
