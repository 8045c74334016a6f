"""Attention-MIL head over frozen tile features, with manual backprop.

Layout::

    tiles (T, D)
      -> 3 x [dense -> leaky ReLU(0.01) -> batch norm over tiles]   (256 wide)
      => tile embeddings z                                          (T, 256)
      -> attention: dense 128 -> tanh -> dense 1 -> softmax per bag
      -> scan embedding sum_i a_i z_i -> batch norm over scans -> dropout
      -> classifier dense 2 -> logits

A batch of bags is packed as one (T, D) tile matrix plus ``offsets`` with
bag ``k`` occupying rows ``offsets[k]:offsets[k + 1]``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from robustmil.errors import ConfigError, DimensionError, IntegrityError

HIDDEN = 256
ATTN_HIDDEN = 128
N_CLASSES = 2
N_ENCODER_LAYERS = 3
LEAKY_SLOPE = 0.01

CKPT_MAGIC = b"RMILCKPT"
CKPT_VERSION = 1


def pack_bags(bags: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-bag (n_i, D) arrays into a tile matrix and bag offsets."""
    if not bags:
        raise ConfigError("empty batch of bags")
    sizes = [len(b) for b in bags]
    if min(sizes) == 0:
        raise ConfigError("bags must contain at least one tile")
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return np.concatenate(bags, axis=0), offsets


def _leaky(u: np.ndarray) -> np.ndarray:
    return np.maximum(u, LEAKY_SLOPE * u)


def _bag_ids(offsets: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def segment_softmax(e: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    starts = offsets[:-1]
    seg = _bag_ids(offsets)
    shifted = e - np.maximum.reduceat(e, starts)[seg]
    ex = np.exp(shifted)
    return ex / np.add.reduceat(ex, starts)[seg]


@dataclass
class ForwardResult:
    tile_embeddings: np.ndarray  # (T, 256), encoder output, embedding-loss tap
    attention: np.ndarray  # (T,)
    scan_embeddings: np.ndarray  # (B, 256), attention-weighted sum before pooled norm
    logits: np.ndarray  # (B, 2)
    offsets: np.ndarray
    # post-norm activations of each encoder layer and the pooled scan embedding
    taps: list[np.ndarray] = field(default_factory=list)
    cache: dict | None = None

    @property
    def scores(self) -> np.ndarray:
        return softmax(self.logits)[:, 1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


class MilNetwork:
    """Parameters, batch-norm buffers and forward/backward of the MIL head."""

    def __init__(
        self,
        in_dim: int,
        dropout: float = 0.2,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
        seed: int = 0,
        dtype: type = np.float32,
    ):
        if in_dim < 1:
            raise ConfigError(f"in_dim must be positive, got {in_dim}")
        if not 0 <= dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        self.in_dim = int(in_dim)
        self.dropout = float(dropout)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng([seed, 7001])

        def dense(name: str, fan_in: int, fan_out: int) -> None:
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(self.dtype)
            self.params[f"{name}.b"] = np.zeros(fan_out, dtype=self.dtype)

        def norm(name: str, width: int) -> None:
            self.params[f"{name}.gamma"] = np.ones(width, dtype=self.dtype)
            self.params[f"{name}.beta"] = np.zeros(width, dtype=self.dtype)
            self.buffers[f"{name}.running_mean"] = np.zeros(width, dtype=self.dtype)
            self.buffers[f"{name}.running_var"] = np.ones(width, dtype=self.dtype)

        width = self.in_dim
        for layer in range(N_ENCODER_LAYERS):
            dense(f"enc{layer}", width, HIDDEN)
            norm(f"bn{layer}", HIDDEN)
            width = HIDDEN
        dense("att0", HIDDEN, ATTN_HIDDEN)
        dense("att1", ATTN_HIDDEN, 1)
        norm("pool_bn", HIDDEN)
        dense("cls", HIDDEN, N_CLASSES)

    # ------------------------------------------------------------------
    def hyper(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "dropout": self.dropout,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    def copy(self) -> MilNetwork:
        other = MilNetwork.__new__(MilNetwork)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def astype(self, dtype: type) -> MilNetwork:
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        other.buffers = {k: v.astype(dtype) for k, v in other.buffers.items()}
        return other

    @staticmethod
    def decays(name: str) -> bool:
        """Weight decay applies to dense weights only, not biases or norm affine."""
        return name.endswith(".W")

    # ------------------------------------------------------------------
    def _norm_train(self, name: str, a: np.ndarray, update_stats: bool):
        n = a.shape[0]
        mu = a.mean(axis=0)
        xhat = a - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / n
        inv = 1.0 / np.sqrt(var + self.bn_eps)
        xhat *= inv
        y = xhat * self.params[f"{name}.gamma"]
        y += self.params[f"{name}.beta"]
        if update_stats:
            m = self.bn_momentum
            rm = self.buffers[f"{name}.running_mean"]
            rv = self.buffers[f"{name}.running_var"]
            unbiased = var * (n / (n - 1)) if n > 1 else var
            rm *= 1 - m
            rm += m * mu.astype(self.dtype)
            rv *= 1 - m
            rv += m * unbiased.astype(self.dtype)
        return y, (xhat, inv)

    def _norm_eval(self, name: str, a: np.ndarray) -> np.ndarray:
        inv = 1.0 / np.sqrt(self.buffers[f"{name}.running_var"] + self.bn_eps)
        xhat = (a - self.buffers[f"{name}.running_mean"]) * inv
        return self.params[f"{name}.gamma"] * xhat + self.params[f"{name}.beta"]

    def _norm_backward(self, name: str, dy: np.ndarray, saved, grads: dict) -> np.ndarray:
        xhat, inv = saved
        n = dy.shape[0]
        sum_dy = dy.sum(axis=0)
        sum_dyx = np.einsum("ij,ij->j", dy, xhat)
        grads[f"{name}.gamma"] = sum_dyx
        grads[f"{name}.beta"] = sum_dy
        scale = self.params[f"{name}.gamma"] * inv
        # d/da of gamma * (a - mu) * inv, with mu and inv depending on the batch
        dx = dy - sum_dy / n
        dx -= xhat * (sum_dyx / n)
        dx *= scale
        return dx

    def encode(self, x: np.ndarray, train: bool = False, update_stats: bool = True):
        """Encoder only. Returns (per-layer post-norm outputs, cache or None)."""
        p = self.params
        h = np.asarray(x, dtype=self.dtype)
        outs, cache = [], []
        for layer in range(N_ENCODER_LAYERS):
            u = h @ p[f"enc{layer}.W"]
            u += p[f"enc{layer}.b"]
            a = _leaky(u)
            if train:
                h_next, saved = self._norm_train(f"bn{layer}", a, update_stats)
                cache.append((h, u, saved))
            else:
                h_next = self._norm_eval(f"bn{layer}", a)
            h = h_next
            outs.append(h)
        return outs, (cache if train else None)

    def forward(
        self,
        x: np.ndarray,
        offsets: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        dropout_mask: np.ndarray | None = None,
        update_stats: bool = True,
    ) -> ForwardResult:
        """Run bags through the network.

        In train mode batch statistics are used, running statistics are
        updated (unless ``update_stats`` is False), dropout is applied with a
        mask drawn from ``rng`` (or the explicit ``dropout_mask``) and the
        activations needed by :meth:`backward` are cached.
        """
        x = np.asarray(x)
        offsets = np.asarray(offsets, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected tiles of width {self.in_dim}, got shape {x.shape}")
        if offsets[0] != 0 or offsets[-1] != x.shape[0] or np.any(np.diff(offsets) <= 0):
            raise ConfigError("offsets must partition the tile rows into nonempty bags")
        n_bags = len(offsets) - 1
        if train and n_bags < 2:
            raise ConfigError("train mode needs at least 2 bags for batch-norm statistics")
        p = self.params

        layer_outs, enc_cache = self.encode(x, train=train, update_stats=update_stats)
        z = layer_outs[-1]
        q = z @ p["att0.W"]
        q += p["att0.b"]
        t = np.tanh(q, out=q)
        e = (t @ p["att1.W"] + p["att1.b"])[:, 0]
        a = segment_softmax(e, offsets)
        m = np.add.reduceat(a[:, None] * z, offsets[:-1], axis=0)
        if train:
            pooled, pool_saved = self._norm_train("pool_bn", m, update_stats)
            if dropout_mask is None:
                if self.dropout > 0:
                    if rng is None:
                        raise ConfigError("train-mode forward with dropout needs an rng or a dropout_mask")
                    keep = rng.random(pooled.shape) >= self.dropout
                    dropout_mask = keep.astype(self.dtype) / (1.0 - self.dropout)
                else:
                    dropout_mask = np.ones(pooled.shape, dtype=self.dtype)
            dropped = pooled * dropout_mask
        else:
            pooled = self._norm_eval("pool_bn", m)
            dropped = pooled
        logits = dropped @ p["cls.W"] + p["cls.b"]
        cache = None
        if train:
            cache = {
                "enc": enc_cache,
                "z": z,
                "t": t,
                "a": a,
                "pool_saved": pool_saved,
                "mask": dropout_mask,
                "dropped": dropped,
                "offsets": offsets,
            }
        return ForwardResult(z, a, m, logits, offsets, taps=layer_outs + [pooled], cache=cache)

    def backward(
        self,
        result: ForwardResult,
        dlogits: np.ndarray,
        dz: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter.

        ``dlogits`` is dL/dlogits; ``dz`` (optional) is an extra upstream
        gradient on the tile embeddings (the embedding-loss tap).
        """
        c = result.cache
        if c is None:
            raise ConfigError("backward needs the cache of a train-mode forward")
        p = self.params
        grads: dict[str, np.ndarray] = {}
        offsets = c["offsets"]
        seg = _bag_ids(offsets)
        z, t, a = c["z"], c["t"], c["a"]

        grads["cls.W"] = c["dropped"].T @ dlogits
        grads["cls.b"] = dlogits.sum(axis=0)
        dpooled = (dlogits @ p["cls.W"].T) * c["mask"]
        dm = self._norm_backward("pool_bn", dpooled, c["pool_saved"], grads)

        dm_t = dm[seg]
        dz_total = a[:, None] * dm_t
        da = (z * dm_t).sum(axis=1)
        de = a * (da - np.add.reduceat(a * da, offsets[:-1])[seg])
        grads["att1.W"] = t.T @ de[:, None]
        grads["att1.b"] = np.array([de.sum()], dtype=de.dtype)
        dq = (de[:, None] @ p["att1.W"].T) * (1.0 - t * t)
        grads["att0.W"] = z.T @ dq
        grads["att0.b"] = dq.sum(axis=0)
        dz_total += dq @ p["att0.W"].T
        if dz is not None:
            dz_total += dz

        dh = dz_total
        for layer in reversed(range(N_ENCODER_LAYERS)):
            h_in, u, saved = c["enc"][layer]
            dact = self._norm_backward(f"bn{layer}", dh, saved, grads)
            # arithmetic slope; np.where on a random mask is far slower
            du = dact
            du *= (u > 0) * np.float32(1.0 - LEAKY_SLOPE) + np.float32(LEAKY_SLOPE)
            grads[f"enc{layer}.W"] = h_in.T @ du
            grads[f"enc{layer}.b"] = du.sum(axis=0)
            if layer:
                dh = du @ p[f"enc{layer}.W"].T
        return {k: grads[k].astype(self.dtype, copy=False) for k in self.params}

    # ------------------------------------------------------------------
    def scan_scores(self, scans: Sequence[np.ndarray]) -> np.ndarray:
        """Eval-mode score of each scan, all of its tiles forming one bag."""
        x, offsets = pack_bags([np.asarray(s) for s in scans])
        return self.forward(x, offsets, train=False).scores.astype(np.float64)

    def tile_scores(self, features: np.ndarray) -> np.ndarray:
        """Per-tile scores, every tile scored as a singleton bag (eval mode).

        A singleton bag gets attention weight 1, so this is the classifier
        applied to the encoder output through the eval-mode pooled norm.
        """
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise DimensionError(f"expected tiles of width {self.in_dim}, got shape {features.shape}")
        outs, _ = self.encode(features, train=False)
        pooled = self._norm_eval("pool_bn", outs[-1])
        logits = pooled @ self.params["cls.W"] + self.params["cls.b"]
        return softmax(logits)[:, 1].astype(np.float64)


# ----------------------------------------------------------------------
# checkpoints: magic | u64 header length | JSON header | float32 blobs


def _tensor_items(net: MilNetwork):
    for k in net.params:
        yield "param", k, net.params[k]
    for k in net.buffers:
        yield "buffer", k, net.buffers[k]


def checkpoint_bytes(net: MilNetwork, update: int = 0, config_hash: str = "") -> bytes:
    blobs, entries, offset = [], [], 0
    for kind, name, arr in _tensor_items(net):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    header = {
        "format_version": CKPT_VERSION,
        "hyper": net.hyper(),
        "update": int(update),
        "config_hash": config_hash,
        "tensors": entries,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blob


def save_checkpoint(net: MilNetwork, path: str | Path, update: int = 0, config_hash: str = "") -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, update, config_hash))
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    return _parse_checkpoint(Path(path).read_bytes(), str(path))[0]


def _parse_checkpoint(raw: bytes, where: str):
    n_magic = len(CKPT_MAGIC)
    if len(raw) < n_magic + 8 or raw[:n_magic] != CKPT_MAGIC:
        raise IntegrityError(f"{where}: not a checkpoint file (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", raw[n_magic : n_magic + 8])
    start = n_magic + 8
    if len(raw) < start + hlen:
        raise IntegrityError(f"{where}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{where}: malformed header ({exc})") from exc
    blob = raw[start + hlen :]
    if len(blob) != header.get("blob_bytes"):
        raise IntegrityError(f"{where}: expected {header.get('blob_bytes')} payload bytes, found {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != header.get("sha256"):
        raise IntegrityError(f"{where}: checksum mismatch")
    return header, blob


def checkpoint_from_bytes(
    raw: bytes, where: str = "<memory>", expected_in_dim: int | None = None
) -> tuple[MilNetwork, dict]:
    header, blob = _parse_checkpoint(raw, where)
    hyper = header["hyper"]
    if expected_in_dim is not None and hyper["in_dim"] != expected_in_dim:
        raise DimensionError(f"{where}: checkpoint input width {hyper['in_dim']} != expected {expected_in_dim}")
    net = MilNetwork(**hyper)
    for e in header["tensors"]:
        target = net.params if e["kind"] == "param" else net.buffers
        if e["name"] not in target or list(target[e["name"]].shape) != e["shape"]:
            raise DimensionError(f"{where}: tensor {e['name']} has unexpected shape {e['shape']}")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
        target[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return net, header


def load_checkpoint(path: str | Path, expected_in_dim: int | None = None) -> tuple[MilNetwork, dict]:
    """Load a checkpoint; returns the network and the parsed header."""
    return checkpoint_from_bytes(Path(path).read_bytes(), str(path), expected_in_dim)
