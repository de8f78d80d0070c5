"""Synthetic trimodal data, a newline-delimited feature-file format, per-batch
min-max normalization, and deterministic batching.

The generator draws a latent sentiment u ~ Uniform[-3, 3] per sample and
encodes it into each modality through a fixed random linear map scaled by that
modality's informativeness weight, plus unit Gaussian feature noise. Setting a
weight to zero makes that modality pure noise, which is how dominance is
steered for the modulation experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MODALITY_FIELDS = ("text", "audio", "visual")


class DataError(Exception):
    """Base class for data-layer failures."""


class SchemaError(DataError):
    """A feature record violates the documented schema."""


class FormatError(DataError):
    """A feature file line is not parseable."""


@dataclass
class SyntheticConfig:
    n_samples: int = 2000
    seq_len: int = 8
    d_t: int = 12
    d_a: int = 8
    d_v: int = 6
    w_t: float = 1.0
    w_a: float = 0.4
    w_v: float = 0.2
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.seq_len < 1:
            raise ValueError("n_samples and seq_len must be >= 1")
        if min(self.d_t, self.d_a, self.d_v) < 1:
            raise ValueError("feature dims must be >= 1")
        if min(self.w_t, self.w_a, self.w_v) < 0:
            raise ValueError("informativeness weights must be >= 0")
        if self.w_t + self.w_a + self.w_v <= 0:
            raise ValueError("at least one informativeness weight must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class Dataset:
    """Aligned raw feature blocks plus labels in [-3, 3]."""

    text: np.ndarray    # (n, L, d_t)
    audio: np.ndarray   # (n, L, d_a)
    visual: np.ndarray  # (n, L, d_v)
    labels: np.ndarray  # (n,)
    split: str = "train"
    mask: np.ndarray | None = None  # (n, L) of {0, 1}; None means full length
    ids: list | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def seq_len(self) -> int:
        return self.text.shape[1]


@dataclass
class MultimodalBatch:
    text: np.ndarray
    audio: np.ndarray
    visual: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]


def gen_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic synthetic dataset for the given config and seed."""
    rng = np.random.default_rng(cfg.seed)
    n, L = cfg.n_samples, cfg.seq_len
    u = rng.uniform(-3.0, 3.0, size=n)

    blocks = {}
    for name, d, w in (("text", cfg.d_t, cfg.w_t),
                       ("audio", cfg.d_a, cfg.w_a),
                       ("visual", cfg.d_v, cfg.w_v)):
        direction = rng.normal(size=(L, d))
        noise = rng.normal(size=(n, L, d))
        blocks[name] = w * u[:, None, None] * direction[None, :, :] + noise

    labels = np.clip(u + rng.normal(0.0, cfg.noise_std, size=n) if cfg.noise_std > 0 else u,
                     -3.0, 3.0)
    return Dataset(text=blocks["text"], audio=blocks["audio"],
                   visual=blocks["visual"], labels=labels, split="train")


def train_val_test_split(ds: Dataset, val_frac: float = 0.15, test_frac: float = 0.15,
                         seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled split into train/val/test datasets."""
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_frac * n))
    n_test = int(round(test_frac * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError("split leaves no training samples")
    parts = {
        "train": perm[:n_train],
        "val": perm[n_train:n_train + n_val],
        "test": perm[n_train + n_val:],
    }

    def take(idx, tag):
        return Dataset(
            text=ds.text[idx], audio=ds.audio[idx], visual=ds.visual[idx],
            labels=ds.labels[idx], split=tag,
            mask=None if ds.mask is None else ds.mask[idx],
            ids=None if ds.ids is None else [ds.ids[i] for i in idx],
        )

    return take(parts["train"], "train"), take(parts["val"], "val"), take(parts["test"], "test")


# ---------------------------------------------------------------------------
# Feature file format: one JSON object per line
#   {"id": ..., "label": float, "text": [[f64]], "audio": [[f64]], "visual": [[f64]]}
# Each modality array is (length, dim); dims must agree across records.
# See fixtures/feature_schema.json for the formal schema.
# ---------------------------------------------------------------------------


def save_features(ds: Dataset, path) -> None:
    """Write a dataset in the newline-delimited feature-record format."""
    with open(path, "w") as f:
        for i in range(len(ds)):
            if ds.mask is not None:
                length = int(ds.mask[i].sum())
            else:
                length = ds.seq_len
            rec = {
                "id": ds.ids[i] if ds.ids is not None else i,
                "label": float(ds.labels[i]),
                "text": ds.text[i, :length].tolist(),
                "audio": ds.audio[i, :length].tolist(),
                "visual": ds.visual[i, :length].tolist(),
            }
            f.write(json.dumps(rec) + "\n")


def _pad_or_truncate(arr: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut to the first seq_len steps or zero-pad; returns (block, mask row)."""
    length, d = arr.shape
    out = np.zeros((seq_len, d))
    mask = np.zeros(seq_len)
    keep = min(length, seq_len)
    out[:keep] = arr[:keep]
    mask[:keep] = 1.0
    return out, mask


def load_features(path, seq_len: int, split: str = "train") -> Dataset:
    """Load a feature file, padding/truncating every record to ``seq_len``."""
    texts, audios, visuals, labels, masks, ids = [], [], [], [], [], []
    dims: dict[str, int] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: line {lineno}: malformed record ({e.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}: line {lineno}: record is not an object")
            for key in ("id", "label", *MODALITY_FIELDS):
                if key not in rec:
                    raise SchemaError(f"{path}: line {lineno}: missing field '{key}'")
            if not isinstance(rec["label"], (int, float)) or isinstance(rec["label"], bool):
                raise SchemaError(f"{path}: line {lineno}: field 'label' is not a number")
            blocks = {}
            for key in MODALITY_FIELDS:
                try:
                    arr = np.asarray(rec[key], dtype=np.float64)
                except (TypeError, ValueError):
                    raise SchemaError(
                        f"{path}: line {lineno}: field '{key}' is not a 2-D float array"
                    ) from None
                if arr.ndim != 2 or arr.shape[0] < 1:
                    raise SchemaError(
                        f"{path}: line {lineno}: field '{key}' must be a non-empty 2-D array, "
                        f"got shape {arr.shape}"
                    )
                if key in dims and arr.shape[1] != dims[key]:
                    raise SchemaError(
                        f"{path}: line {lineno}: field '{key}' has dim {arr.shape[1]}, "
                        f"expected {dims[key]} from earlier records"
                    )
                dims.setdefault(key, arr.shape[1])
                blocks[key] = arr
            lengths = {key: blocks[key].shape[0] for key in MODALITY_FIELDS}
            if len(set(lengths.values())) != 1:
                raise SchemaError(
                    f"{path}: line {lineno}: modality lengths disagree: {lengths}"
                )
            t, m = _pad_or_truncate(blocks["text"], seq_len)
            a, _ = _pad_or_truncate(blocks["audio"], seq_len)
            v, _ = _pad_or_truncate(blocks["visual"], seq_len)
            texts.append(t)
            audios.append(a)
            visuals.append(v)
            masks.append(m)
            labels.append(float(rec["label"]))
            ids.append(rec["id"])
    if not labels:
        raise SchemaError(f"{path}: no records")
    return Dataset(
        text=np.stack(texts), audio=np.stack(audios), visual=np.stack(visuals),
        labels=np.asarray(labels), split=split, mask=np.stack(masks), ids=ids,
    )


def minmax_normalize(audio: np.ndarray, visual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min-max normalize each feature channel over the whole mini-batch.

    Statistics are taken per channel across all batch and sequence positions;
    zero-range channels map to 0 so padding stays silent. Text features are
    not normalized and do not pass through here.
    """
    def norm(x):
        if x.size == 0:
            raise DataError("minmax_normalize on an empty batch")
        lo = x.min(axis=(0, 1), keepdims=True)
        hi = x.max(axis=(0, 1), keepdims=True)
        span = hi - lo
        return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)

    return norm(audio), norm(visual)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> list[MultimodalBatch]:
    """Split a dataset into batches; the last partial batch is kept.

    ``shuffle_seed`` of None preserves dataset order (evaluation); otherwise
    the order is a deterministic permutation of that seed.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = (np.arange(n) if shuffle_seed is None
             else np.random.default_rng(shuffle_seed).permutation(n))
    out = []
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        out.append(MultimodalBatch(
            text=ds.text[idx], audio=ds.audio[idx], visual=ds.visual[idx],
            labels=ds.labels[idx],
            mask=None if ds.mask is None else ds.mask[idx],
        ))
    return out
