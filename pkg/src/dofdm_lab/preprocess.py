"""Turn demodulated subcarrier values into normalized detector windows.

Per OFDM symbol, the K complex values unfold to 2K reals (re, im interleaved)
and are shift-normalized by the spread of the ten largest minus ten smallest
values. Each detectable subcarrier k (1..K-1) then gets a window_len x 2
window of consecutive complex positions, zero-padded at the sequence edges,
with y_{k-1} and y_k sitting on the two center rows. Targets are the
differential ratios in +-1 +-1j form. Splits are assigned per frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .baseband import FrameSim, qpsk_point

DATASET_MAGIC = b"DOFD"
DATASET_VERSION = 1
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
SPREAD_RANK = 10
DEGENERATE_EPS = 1e-12


def unfold_normalize(demod_symbol: np.ndarray) -> tuple:
    """One symbol's K complex values -> (2K normalized reals, degenerate flag).

    Values are shifted by the mean and scaled by (mean of the 10 largest -
    mean of the 10 smallest). A spread below 1e-12 marks the symbol degenerate
    and returns zeros.
    """
    y = np.asarray(demod_symbol)
    if y.ndim != 1:
        raise ValueError(f"expected one symbol of subcarrier values, got shape {y.shape}")
    reals = np.empty(2 * y.size, dtype=np.float64)
    reals[0::2] = y.real
    reals[1::2] = y.imag
    rank = min(SPREAD_RANK, reals.size)
    srt = np.sort(reals)
    spread = srt[-rank:].mean() - srt[:rank].mean()
    if spread < DEGENERATE_EPS:
        return np.zeros_like(reals), True
    return (reals - reals.mean()) / spread, False


def window_samples(normalized: np.ndarray, window_len: int) -> np.ndarray:
    """Normalized 2K reals -> (K-1, window_len, 2) windows for k = 1..K-1.

    Window rows are consecutive complex positions; rows window_len/2 and
    window_len/2 + 1 (1-indexed) hold positions k-1 and k. The sequence is
    padded with window_len/2 - 1 complex zeros on each side, so the first and
    last windows carry that many zero rows.
    """
    x = np.asarray(normalized, dtype=np.float64)
    if x.ndim != 1 or x.size % 2:
        raise ValueError(f"expected interleaved re/im values, got shape {x.shape}")
    if window_len < 4 or window_len % 2:
        raise ValueError(f"window_len must be even and >= 4, got {window_len}")
    k_total = x.size // 2
    if k_total < 2:
        raise ValueError("need at least two subcarriers to form windows")
    pairs = x.reshape(k_total, 2)
    pad = window_len // 2 - 1
    padded = np.concatenate([np.zeros((pad, 2)), pairs, np.zeros((pad, 2))])
    view = np.lib.stride_tricks.sliding_window_view(padded, (window_len, 2))[:, 0]
    return np.ascontiguousarray(view[: k_total - 1], dtype=np.float32)


@dataclass(frozen=True)
class Dataset:
    window_len: int
    windows: np.ndarray   # (n, window_len, 2) float32
    targets: np.ndarray   # (n, 2) float32
    meta: np.ndarray      # (n, 3) uint32: frame, symbol, subcarrier k
    split_of_frame: dict  # frame id -> 'train' | 'val' | 'test'

    @property
    def n_samples(self) -> int:
        return int(self.windows.shape[0])

    def indices(self, split: str) -> np.ndarray:
        frames = {f for f, s in self.split_of_frame.items() if s == split}
        mask = np.isin(self.meta[:, 0], sorted(frames))
        return np.flatnonzero(mask)


def assign_splits(n_frames: int, split_seed: int) -> dict:
    """Frame-level 80/10/10 split, deterministic in the seed."""
    if n_frames < 1:
        raise ValueError("need at least one frame to split")
    order = np.random.default_rng(split_seed).permutation(n_frames)
    n_train = int(round(SPLIT_FRACTIONS[0] * n_frames))
    n_val = int(round(SPLIT_FRACTIONS[1] * n_frames))
    n_train = min(n_train, n_frames - 1) if n_frames > 1 else n_frames
    out = {}
    for pos, frame in enumerate(order):
        if pos < n_train:
            out[int(frame)] = "train"
        elif pos < n_train + n_val:
            out[int(frame)] = "val"
        else:
            out[int(frame)] = "test"
    return out


def build_dataset(sims: list, window_len: int, split_seed: int) -> Dataset:
    """FrameSim list -> windows, +-1 +-1j targets and a frame-level split."""
    if not sims:
        raise ValueError("no frames to build a dataset from")
    windows, targets, meta = [], [], []
    for frame_id, sim in enumerate(sims):
        if not isinstance(sim, FrameSim):
            raise TypeError(f"expected FrameSim entries, got {type(sim).__name__}")
        n_sym, k_total = sim.demod.shape
        for sym in range(n_sym):
            normalized, degenerate = unfold_normalize(sim.demod[sym])
            if degenerate:
                continue
            windows.append(window_samples(normalized, window_len))
            targets.append(qpsk_point(sim.frame.bits[sym]).astype(np.complex64))
            ks = np.arange(1, k_total, dtype=np.uint32)
            meta.append(
                np.column_stack(
                    [np.full_like(ks, frame_id), np.full_like(ks, sym), ks]
                )
            )
    if not windows:
        raise ValueError("every symbol was degenerate; nothing to train on")
    win = np.concatenate(windows)
    tgt_c = np.concatenate(targets)
    tgt = np.stack([tgt_c.real, tgt_c.imag], axis=-1).astype(np.float32)
    return Dataset(
        window_len, win, tgt, np.concatenate(meta).astype(np.uint32),
        assign_splits(len(sims), split_seed),
    )


# ---- binary persistence ----

_HEADER = struct.Struct("<4sIIQ")


def _record_dtype(window_len: int) -> np.dtype:
    return np.dtype(
        [
            ("window", "<f4", (2 * window_len,)),
            ("target", "<f4", (2,)),
            ("frame", "<u4"),
            ("symbol", "<u4"),
            ("subcarrier", "<u4"),
        ]
    )


def save_dataset(path, ds: Dataset) -> None:
    rec = np.empty(ds.n_samples, dtype=_record_dtype(ds.window_len))
    rec["window"] = ds.windows.reshape(ds.n_samples, -1)
    rec["target"] = ds.targets
    rec["frame"], rec["symbol"], rec["subcarrier"] = ds.meta[:, 0], ds.meta[:, 1], ds.meta[:, 2]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.window_len, ds.n_samples))
        fh.write(rec.tobytes())


def load_dataset(path, split_seed: int, n_frames: int | None = None) -> Dataset:
    """Read a dataset file; the split is recomputed from (n_frames, split_seed)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, window_len, count = _HEADER.unpack(head)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        raw = fh.read()
    dtype = _record_dtype(window_len)
    if len(raw) != count * dtype.itemsize:
        raise ValueError(f"{path}: expected {count} records, file holds {len(raw) // dtype.itemsize}")
    rec = np.frombuffer(raw, dtype=dtype)
    frames = rec["frame"].astype(np.uint32)
    if n_frames is None:
        n_frames = int(frames.max()) + 1 if count else 0
    return Dataset(
        int(window_len),
        rec["window"].reshape(count, window_len, 2).copy(),
        rec["target"].copy(),
        np.column_stack([frames, rec["symbol"], rec["subcarrier"]]).astype(np.uint32),
        assign_splits(n_frames, split_seed),
    )
