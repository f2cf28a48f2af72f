"""Datasets of high-SE precoders: packing, generation, filtering, storage.

Packing: a complex ``n x q`` matrix becomes a real vector of length ``2 n q``
in column-major entry order with real and imaginary parts interleaved per
entry, ``[Re W00, Im W00, Re W10, Im W10, ...]``.  Channels are stored by
packing ``H.T`` (also ``n x q``) the same way.
"""

import csv
import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel import PerturbationSpec, check_channel, perturb_channel
from .errors import DimensionError, FormatError, ParameterError, UnsupportedVersionError
from .lbfgs import LbfgsConfig, multi_start
from .rng import GENERATOR_VERSION, derive_seed
from .se import SystemConfig, spectral_efficiency

MAGIC = b"PCDS"
FORMAT_VERSION = 1
ATTEMPT_CAP_FACTOR = 10
SPLIT_RULE = "sha256(str(index))[0] % 10 == 0 -> validation"


def pack(W):
    W = np.asarray(W, dtype=np.complex128)
    if W.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {W.shape}")
    return np.ascontiguousarray(W.T).ravel().view(np.float64).copy()


def unpack(v, n, q):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (2 * n * q,):
        raise DimensionError(f"expected vector of length {2 * n * q}, got shape {v.shape}")
    return np.ascontiguousarray(v).view(np.complex128).reshape(q, n).T.copy()


def pack_batch(Ws):
    Ws = np.asarray(Ws, dtype=np.complex128)
    B = Ws.shape[0]
    return np.ascontiguousarray(np.swapaxes(Ws, 1, 2)).reshape(B, -1).view(np.float64).copy()


def unpack_batch(V, n, q):
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != 2 * n * q:
        raise DimensionError(f"expected (B, {2 * n * q}) array, got shape {V.shape}")
    return np.swapaxes(np.ascontiguousarray(V).view(np.complex128).reshape(-1, q, n), 1, 2).copy()


def pack_channel(H):
    return pack(np.asarray(H).T)


def unpack_channel(v, q, n):
    return unpack(v, n, q).T.copy()


def is_validation(index):
    return hashlib.sha256(str(int(index)).encode()).digest()[0] % 10 == 0


@dataclass
class PrecodingDataset:
    config: SystemConfig
    channels: list
    channel_index: np.ndarray
    w: np.ndarray  # (N, 2 n q) packed precoders
    se: np.ndarray
    threshold: float
    meta: dict = field(default_factory=dict)
    # run statistics that vary between machines; never serialized
    stats: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.channel_index = np.asarray(self.channel_index, dtype=np.int64)
        self.se = np.asarray(self.se, dtype=np.float64)
        d = 2 * self.config.n * self.config.q
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.size != len(self.channel_index) * d:
            raise DimensionError(f"packed precoders do not have width 2 n q = {d}")
        self.w = self.w.reshape(len(self.channel_index), d)
        if len(self.se) != len(self.channel_index):
            raise DimensionError("se and channel_index lengths differ")
        if len(self.channel_index) and (
            self.channel_index.min() < 0 or self.channel_index.max() >= len(self.channels)
        ):
            raise DimensionError("channel index out of range")

    def __len__(self):
        return len(self.se)

    @property
    def h_packed(self):
        """Packed channel matrix of each sample, shape (N, 2 n q)."""
        table = np.stack([pack_channel(H) for H in self.channels]) if self.channels else np.zeros((0, self.w.shape[1]))
        return table[self.channel_index]

    def precoder(self, i):
        return unpack(self.w[i], self.config.n, self.config.q)

    def validation_mask(self):
        return np.array([is_validation(i) for i in range(len(self))], dtype=bool)

    def subset(self, mask):
        return PrecodingDataset(self.config, self.channels, self.channel_index[mask], self.w[mask],
                                self.se[mask], self.threshold, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, PrecodingDataset):
            return NotImplemented
        return (
            self.config == other.config
            and len(self.channels) == len(other.channels)
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.channels, other.channels))
            and self.channel_index.tobytes() == other.channel_index.tobytes()
            and self.w.tobytes() == other.w.tobytes()
            and self.se.tobytes() == other.se.tobytes()
            and np.float64(self.threshold).tobytes() == np.float64(other.threshold).tobytes()
            and self.meta == other.meta
        )


def _collect(H, cfg, opt, N, t, seed, threads):
    """Accepted results for one channel plus the SE of every attempt."""
    accepted, attempts = [], []
    cap = ATTEMPT_CAP_FACTOR * N
    while len(accepted) < N and len(attempts) < cap:
        batch = min(N - len(accepted), cap - len(attempts))
        results = multi_start(H, cfg, opt, batch, seed, threads=threads, offset=len(attempts))
        for r in results:
            attempts.append(r)
            if r.se >= t and len(accepted) < N:
                accepted.append(r)
    return accepted, attempts


def _build(channels, cfg, opt, N, t, seed, threads, meta):
    if N < 1:
        raise ParameterError(f"N must be >= 1, got {N}")
    idx, ws, ses = [], [], []
    attempt_se, iters, times = [], [], []
    short = 0
    for c, H in enumerate(channels):
        acc, att = _collect(H, cfg, opt, N, t, derive_seed(seed, "channel-run", c), threads)
        if len(acc) < N:
            short += 1
            warnings.warn(f"channel {c}: only {len(acc)} of {N} samples reached SE >= {t} "
                          f"after {len(att)} attempts", RuntimeWarning, stacklevel=3)
        idx += [c] * len(acc)
        ws += [pack(r.precoder) for r in acc]
        ses += [r.se for r in acc]
        attempt_se.append([r.se for r in att])
        iters += [r.iterations for r in att]
        times += [r.wall_time for r in att]
    flat_attempts = [s for a in attempt_se for s in a]
    meta = dict(meta)
    meta.update({
        "q": cfg.q, "n": cfg.n, "noise_power": cfg.noise_power, "power_budget": cfg.power_budget,
        "threshold": t, "N": N, "seed": seed, "generator_version": GENERATOR_VERSION,
        "lbfgs": {k: v for k, v in vars(opt).items()},
        "attempt_cap_factor": ATTEMPT_CAP_FACTOR,
        "attempt_se": attempt_se,
        "mean_se_unfiltered": float(np.mean(flat_attempts)),
        "mean_se_filtered": float(np.mean(ses)) if ses else None,
        "mean_iterations": float(np.mean(iters)),
        "warnings": short,
        "split": {"rule": SPLIT_RULE, "validation_fraction": 0.1},
    })
    w = np.array(ws).reshape(len(ws), 2 * cfg.n * cfg.q)
    stats = {"solve_seconds": times, "iterations": iters}
    return PrecodingDataset(cfg, list(channels), np.array(idx, dtype=np.int64), w,
                            np.array(ses), t, meta, stats)


def _check_cfg(H, cfg):
    H = check_channel(H)
    if H.shape != (cfg.q, cfg.n):
        raise DimensionError(f"channel shape {H.shape} does not match config (q={cfg.q}, n={cfg.n})")
    return H


def build_fixed_h_dataset(H, cfg, opt=LbfgsConfig(), N=5000, t=None, seed=0, threads=None):
    """Run L-BFGS from random starts until ``N`` results reach SE >= ``t``.

    Stops after ``10 N`` attempts; a short dataset is returned with a
    ``RuntimeWarning`` and ``meta["warnings"]`` counting short channels.
    """
    H = _check_cfg(H, cfg)
    t = cfg.se_threshold if t is None else float(t)
    return _build([H], cfg, opt, N, t, seed, threads, {"kind": "fixed", "K": 0, "delta": 0.0})


def build_perturbed_dataset(H, cfg, opt=LbfgsConfig(), spec=PerturbationSpec(5.0, 15),
                            N_per_channel=500, t=None, seed=0, threads=None):
    """Dataset over ``H`` (index 0) and ``K`` perturbations ``H + D_i``."""
    H = _check_cfg(H, cfg)
    t = cfg.se_threshold if t is None else float(t)
    channels = [H] + perturb_channel(H, spec, derive_seed(seed, "perturb"))
    return _build(channels, cfg, opt, N_per_channel, t, seed, threads,
                  {"kind": "perturbed", "K": spec.count, "delta": spec.delta})


def recompute_se(ds):
    return np.array([
        spectral_efficiency(ds.channels[c], ds.precoder(i), ds.config)
        for i, c in enumerate(ds.channel_index)
    ])


def dumps(ds):
    cfg = ds.config
    header = {
        "q": cfg.q, "n": cfg.n, "noise_power": cfg.noise_power, "power_budget": cfg.power_budget,
        "se_threshold": cfg.se_threshold, "threshold": ds.threshold,
        "num_channels": len(ds.channels), "num_samples": len(ds), "meta": ds.meta,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    d = 2 * cfg.n * cfg.q
    chans = np.stack([pack_channel(H) for H in ds.channels]) if ds.channels else np.zeros((0, d))
    recs = np.column_stack([ds.channel_index.astype(np.float64), ds.se, ds.w]) if len(ds) else np.zeros((0, d + 2))
    return b"".join([
        MAGIC, struct.pack("<II", FORMAT_VERSION, len(hjson)), hjson,
        chans.astype("<f8").tobytes(), recs.astype("<f8").tobytes(),
    ])


def loads(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, not a PCDS dataset", 0)
    if len(data) < 12:
        raise FormatError("truncated header", len(data))
    version, hlen = struct.unpack_from("<II", data, 4)
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(f"dataset version {version} > supported {FORMAT_VERSION}", 4)
    if len(data) < 12 + hlen:
        raise FormatError("truncated metadata block", len(data))
    try:
        h = json.loads(data[12:12 + hlen])
        q, n, nc, ns = h["q"], h["n"], h["num_channels"], h["num_samples"]
        cfg = SystemConfig(q, n, h["noise_power"], h["power_budget"], h["se_threshold"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed metadata: {exc}", 12) from exc
    d = 2 * n * q
    pos = 12 + hlen
    need = pos + 8 * (nc * d + ns * (d + 2))
    if len(data) != need:
        raise FormatError(f"expected {need} bytes, found {len(data)}", min(len(data), need))
    chans = np.frombuffer(data, "<f8", nc * d, pos).reshape(nc, d)
    pos += 8 * nc * d
    recs = np.frombuffer(data, "<f8", ns * (d + 2), pos).reshape(ns, d + 2).astype(np.float64)
    return PrecodingDataset(
        cfg, [unpack_channel(c, q, n) for c in chans], recs[:, 0].astype(np.int64),
        recs[:, 2:], recs[:, 1], h["threshold"], h["meta"],
    )


def save(ds, path):
    with open(path, "wb") as fh:
        fh.write(dumps(ds))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def export_csv(ds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel_index", "se"] + [f"w{i}" for i in range(ds.w.shape[1])])
        for c, s, row in zip(ds.channel_index, ds.se, ds.w):
            writer.writerow([int(c), repr(float(s))] + [repr(float(x)) for x in row])
