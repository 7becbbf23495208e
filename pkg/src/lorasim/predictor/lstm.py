"""Stacked LSTM over access-count windows with a learned adapter embedding.

Everything is float64 numpy; gradients are hand-derived BPTT so they can be
checked against finite differences.

Step input is ``[count_t, embedding(adapter)]``; the last top-layer hidden
state feeds a single-logit affine head.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS = 1e-7


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_loss(p, y, eps: float = EPS) -> float:
    """Summed binary cross-entropy; ``p`` is clamped to ``[eps, 1 - eps]``."""
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass
class LSTMConfig:
    hidden: int = 64
    layers: int = 2
    embedding_dim: int = 8
    window: int = 30
    seed: int = 0


class LSTMModel:
    def __init__(self, cfg: LSTMConfig | None = None, n_adapters: int = 0):
        self.cfg = cfg = cfg or LSTMConfig()
        self.rng = np.random.default_rng(cfg.seed)
        H, E = cfg.hidden, cfg.embedding_dim
        self.scale = 1.0 / np.sqrt(H)
        p = {"emb": self._uniform((max(n_adapters, 1), E))}
        in_dim = 1 + E
        for l in range(cfg.layers):
            p[f"W{l}"] = self._uniform((in_dim + H, 4 * H))
            p[f"b{l}"] = self._uniform((4 * H,))
            in_dim = H
        p["w_out"] = self._uniform((H,))
        p["b_out"] = self._uniform((1,))
        self.params: dict[str, np.ndarray] = p
        self.version = 0

    def _uniform(self, shape):
        return self.rng.uniform(-self.scale, self.scale, size=shape)

    @property
    def n_embeddings(self) -> int:
        return self.params["emb"].shape[0]

    def ensure_embeddings(self, n: int) -> None:
        extra = n - self.n_embeddings
        if extra > 0:
            rows = self._uniform((extra, self.cfg.embedding_dim))
            self.params["emb"] = np.vstack([self.params["emb"], rows])

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward / backward -------------------------------------------------

    def forward(self, counts, idx, keep_cache: bool = False):
        """Probabilities for a batch of windows.

        counts: (B, w) normalized counts, oldest first. idx: (B,) embedding rows.
        """
        counts = np.asarray(counts, dtype=float)
        idx = np.asarray(idx, dtype=int)
        if counts.ndim != 2 or counts.shape[1] != self.cfg.window:
            raise ValueError(f"expected windows of length {self.cfg.window}, got shape {counts.shape}")
        B, T = counts.shape
        H = self.cfg.hidden
        p = self.params
        # sigmoid(z) = (1 + tanh(z/2)) / 2, so one tanh evaluates all four gates
        gate_scale = np.repeat([0.5, 0.5, 1.0, 0.5], H)
        emb = p["emb"][idx]
        layer_in = None
        caches = []
        for l in range(self.cfg.layers):
            W, b = p[f"W{l}"], p[f"b{l}"]
            in_dim = W.shape[0] - H
            Wx, Wh = W[:in_dim], W[in_dim:]
            if l == 0:
                # count column varies per step, the embedding does not
                zx = counts[:, :, None] * Wx[0] + (emb @ Wx[1:] + b)[:, None, :]
            else:
                zx = layer_in @ Wx + b
            h = np.zeros((B, H))
            c = np.zeros((B, H))
            hs = np.empty((B, T, H))
            steps = []
            for t in range(T):
                a = np.tanh((zx[:, t] + h @ Wh) * gate_scale)
                i = 0.5 + 0.5 * a[:, :H]
                f = 0.5 + 0.5 * a[:, H:2 * H]
                g = a[:, 2 * H:3 * H]
                o = 0.5 + 0.5 * a[:, 3 * H:]
                c_prev, h_prev = c, h
                c = f * c_prev + i * g
                tc = np.tanh(c)
                h = o * tc
                hs[:, t] = h
                if keep_cache:
                    steps.append((h_prev, i, f, g, o, c_prev, tc))
            caches.append((layer_in, steps))
            layer_in = hs
        h_last = layer_in[:, -1]
        prob = sigmoid(h_last @ p["w_out"] + p["b_out"][0])
        if keep_cache:
            self._cache = (counts, emb, idx, caches, h_last)
        return prob

    def loss_and_grads(self, counts, idx, labels):
        """Summed cross-entropy over the batch and its gradient for every parameter."""
        prob = self.forward(counts, idx, keep_cache=True)
        y = np.asarray(labels, dtype=float)
        loss = bce_loss(prob, y)
        counts, emb, idx, caches, h_last = self._cache
        del self._cache
        p = self.params
        H = self.cfg.hidden
        B, T = counts.shape
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        # derivative of the clamped loss; zero where the clamp is active
        dlogit = np.where((prob > EPS) & (prob < 1 - EPS), prob - y, 0.0)
        grads["w_out"] = h_last.T @ dlogit
        grads["b_out"] = np.array([dlogit.sum()])
        dhs = np.zeros((B, T, H))
        dhs[:, -1] = np.outer(dlogit, p["w_out"])
        for l in reversed(range(self.cfg.layers)):
            W = p[f"W{l}"]
            in_dim = W.shape[0] - H
            Wx, Wh = W[:in_dim], W[in_dim:]
            layer_in, steps = caches[l]
            dz_all = np.empty((B, T, 4 * H))
            dWh = np.zeros_like(Wh)
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in reversed(range(T)):
                h_prev, i, f, g, o, c_prev, tc = steps[t]
                dh = dhs[:, t] + dh_next
                dc = dh * o * (1.0 - tc * tc) + dc_next
                dz = np.concatenate([dc * g * i * (1 - i), dc * c_prev * f * (1 - f),
                                     dc * i * (1 - g * g), dh * tc * o * (1 - o)], axis=1)
                dc_next = dc * f
                dWh += h_prev.T @ dz
                dh_next = dz @ Wh.T
                dz_all[:, t] = dz
            dz_sum = dz_all.sum(axis=1)
            grads[f"b{l}"] = dz_sum.sum(axis=0)
            if l == 0:
                dWx = np.vstack([np.einsum("bt,btk->k", counts, dz_all)[None, :], emb.T @ dz_sum])
                np.add.at(grads["emb"], idx, dz_sum @ Wx[1:].T)
            else:
                dWx = layer_in.reshape(B * T, in_dim).T @ dz_all.reshape(B * T, 4 * H)
                dhs = dz_all @ Wx.T
            grads[f"W{l}"] = np.vstack([dWx, dWh])
        return loss, grads

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        save_weights(self.params, path)

    def load(self, path: str | Path) -> None:
        loaded = load_weights(path)
        for k, v in loaded.items():
            if k == "emb":
                continue
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"weight file tensor {k} {v.shape} does not fit this model")
        self.params = loaded
        self.version += 1


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self._moment(self.m, k, g.shape)
            v = self._moment(self.v, k, g.shape)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    @staticmethod
    def _moment(store: dict, k: str, shape) -> np.ndarray:
        cur = store.get(k)
        if cur is None:
            cur = store[k] = np.zeros(shape)
        elif cur.shape != shape:
            # embedding table grew: new rows start with zero moments
            grown = np.zeros(shape)
            grown[:cur.shape[0]] = cur
            cur = store[k] = grown
        return cur


# Weight file layout (all little-endian):
#   magic  b"LSIMW001"
#   uint32 tensor count
#   per tensor: uint16 name length, utf-8 name, uint8 ndim, ndim x uint32 dims
#   then every tensor's float64 data in header order, C order
MAGIC = b"LSIMW001"


def save_weights(params: dict[str, np.ndarray], path: str | Path) -> None:
    names = sorted(params)
    head = [MAGIC, struct.pack("<I", len(names))]
    for n in names:
        a = params[n]
        raw = n.encode()
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    body = [np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names]
    Path(path).write_bytes(b"".join(head + body))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a weight file")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    shapes = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode()
        pos += ln
        (nd,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{nd}I", buf, pos)
        pos += 4 * nd
        shapes.append((name, dims))
    out = {}
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(float)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return out
