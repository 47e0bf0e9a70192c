"""Conditional masked-autoregressive flow Q(lam | y, x).

Layout: a small context network embeds the normalised (x, y) row; four MADE
layers each see ``[v, embedding]`` and emit a shift ``t_i`` and a smoothly
clamped log-scale ``s_i`` per dimension. Between layers the vector is
rolled by one position. A fixed affine map ``lam = loc + scale * u`` puts the
identity-initialised flow exactly on the model's Gaussian prior.

Density evaluation (the inverse, lam -> z) is a single masked pass per
layer; sampling inverts each layer sequentially over the D dimensions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node

LOG_2PI = math.log(2.0 * math.pi)
_MAGIC = b"DBFLOW1\x00"


def made_degrees(dim: int, hidden: int, embed: int):
    """Degrees for inputs ``[v_0..v_{D-1}, e_0..]``, hidden units and outputs."""
    in_deg = np.concatenate([np.arange(1, dim + 1), np.zeros(embed, dtype=int)])
    hid_deg = np.arange(hidden) % dim  # 0..D-1; degree-0 units see only the context
    out_deg = np.tile(np.arange(1, dim + 1), 2)  # shifts then log-scales
    return in_deg, hid_deg, out_deg


def made_masks(dim: int, hidden: int, embed: int):
    in_deg, hid_deg, out_deg = made_degrees(dim, hidden, embed)
    m0 = (hid_deg[None, :] >= in_deg[:, None]).astype(np.float64)
    m1 = (hid_deg[None, :] >= hid_deg[:, None]).astype(np.float64)
    mout = (out_deg[None, :] > hid_deg[:, None]).astype(np.float64)
    return m0, m1, mout


def shift_permutation(dim: int) -> np.ndarray:
    """Index array for rolling a vector forward by one: v'[i] = v[i-1]."""
    return (np.arange(dim) - 1) % dim


@dataclass
class ConditionalFlow:
    dim: int
    ctx_dim: int
    params: dict
    loc: np.ndarray
    scale: np.ndarray
    n_layers: int = 4
    hidden: int = 64
    ctx_hidden: int = 32
    embed: int = 16
    clamp: float = 5.0
    saturations: int = field(default=0, compare=False)

    def __post_init__(self):
        self.loc = np.asarray(self.loc, dtype=np.float64).reshape(self.dim)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(self.dim)
        self.masks = made_masks(self.dim, self.hidden, self.embed)
        self.perm = shift_permutation(self.dim)
        self.inv_perm = np.argsort(self.perm)

    def copy(self) -> "ConditionalFlow":
        return ConditionalFlow(self.dim, self.ctx_dim, {k: v.copy() for k, v in self.params.items()},
                               self.loc.copy(), self.scale.copy(), self.n_layers, self.hidden,
                               self.ctx_hidden, self.embed, self.clamp)

    def with_params(self, params: dict) -> "ConditionalFlow":
        return ConditionalFlow(self.dim, self.ctx_dim, params, self.loc, self.scale,
                               self.n_layers, self.hidden, self.ctx_hidden, self.embed,
                               self.clamp)

    def composed_permutation(self) -> np.ndarray:
        """Net index map applied by all layer permutations (identity layers)."""
        idx = np.arange(self.dim)
        for _ in range(self.n_layers):
            idx = idx[self.perm]
        return idx

    # numpy evaluation ----------------------------------------------------

    def embed_context(self, ctx) -> np.ndarray:
        p = self.params
        ctx = np.asarray(ctx, dtype=np.float64)
        h = np.tanh(ctx @ p["ctx.W0"] + p["ctx.b0"])
        return h @ p["ctx.W1"] + p["ctx.b1"]

    def conditioner(self, k: int, v, emb):
        """(shift, log-scale) of layer k given data-side vector v."""
        p = self.params
        m0, m1, mout = self.masks
        inp = np.concatenate([v, emb], axis=-1)
        h = np.tanh(inp @ (p[f"l{k}.W0"] * m0) + p[f"l{k}.b0"])
        h = np.tanh(h @ (p[f"l{k}.W1"] * m1) + p[f"l{k}.b1"])
        out = h @ (p[f"l{k}.Wout"] * mout) + p[f"l{k}.bout"]
        raw = out[..., self.dim:]
        s = self.clamp * np.tanh(raw * (1.0 / self.clamp))
        self.saturations += int(np.count_nonzero(np.abs(s) > 0.99 * self.clamp))
        return out[..., : self.dim], s

    def _broadcast_ctx(self, ctx, n):
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.ndim == 1:
            ctx = ctx[None, :]
        if ctx.shape[0] == 1 and n != 1:
            ctx = np.broadcast_to(ctx, (n, ctx.shape[1]))
        if ctx.shape != (n, self.ctx_dim):
            raise ValueError(f"context shape {ctx.shape} does not match batch {n}")
        return ctx

    def inverse_transform(self, lam, ctx):
        """lam -> (z, log|det dz/dlam|)."""
        lam = np.asarray(lam, dtype=np.float64).reshape(-1, self.dim)
        emb = self.embed_context(self._broadcast_ctx(ctx, len(lam)))
        v = (lam - self.loc) * (1.0 / self.scale)
        logdet = np.full(len(lam), -np.sum(np.log(self.scale)))
        for k in reversed(range(self.n_layers)):
            v = v[:, self.inv_perm]
            t, s = self.conditioner(k, v, emb)
            v = (v - t) * np.exp(-s)
            logdet = logdet - np.sum(s, axis=-1)
        return v, logdet

    def forward_transform(self, z, ctx):
        """z -> (lam, log|det dlam/dz|), sequential over dimensions."""
        z = np.asarray(z, dtype=np.float64).reshape(-1, self.dim)
        emb = self.embed_context(self._broadcast_ctx(ctx, len(z)))
        v = z
        logdet = np.zeros(len(z))
        for k in range(self.n_layers):
            b = np.zeros_like(v)
            for i in range(self.dim):
                t, s = self.conditioner(k, b, emb)
                b[:, i] = v[:, i] * np.exp(s[:, i]) + t[:, i]
                logdet = logdet + s[:, i]
            v = b[:, self.perm]
        lam = self.loc + self.scale * v
        return lam, logdet + np.sum(np.log(self.scale))

    def log_prob(self, lam, ctx) -> np.ndarray:
        z, logdet = self.inverse_transform(lam, ctx)
        return base_log_prob(z) + logdet

    def sample(self, ctx, n: int, rng: np.random.Generator):
        """n draws from Q(.|ctx) and their log-densities."""
        if n < 1:
            raise ValueError("n must be >= 1")
        z = rng.standard_normal((n, self.dim))
        lam, logdet = self.forward_transform(z, ctx)
        return lam, base_log_prob(z) - logdet

    def conditioned(self, ctx) -> "ConditionedFlow":
        return ConditionedFlow(self, np.asarray(ctx, dtype=np.float64).reshape(1, self.ctx_dim))

    # graph construction ----------------------------------------------------

    def graph_log_prob(self, g: Graph, lam: Node, ctx: Node, params: dict[str, Node]) -> Node:
        """Per-row log Q(lam | ctx) built into graph ``g``; returns a (B,) node."""
        m0, m1, mout = self.masks
        d = self.dim
        h = g.tanh(ctx @ params["ctx.W0"] + params["ctx.b0"])
        emb = h @ params["ctx.W1"] + params["ctx.b1"]
        v = (lam - self.loc) * (1.0 / self.scale)
        sum_s = None
        t_idx = np.arange(d)
        s_idx = np.arange(d, 2 * d)
        for k in reversed(range(self.n_layers)):
            v = g.gather(v, self.inv_perm)
            inp = g.concat([v, emb])
            h = g.tanh(g.masked_linear(inp, params[f"l{k}.W0"], params[f"l{k}.b0"], m0))
            h = g.tanh(g.masked_linear(h, params[f"l{k}.W1"], params[f"l{k}.b1"], m1))
            out = g.masked_linear(h, params[f"l{k}.Wout"], params[f"l{k}.bout"], mout)
            t = g.gather(out, t_idx)
            s = self.clamp * g.tanh(g.gather(out, s_idx) * (1.0 / self.clamp))
            v = (v - t) * g.exp(-s)
            ss = g.sum(s, axis=-1)
            sum_s = ss if sum_s is None else sum_s + ss
        const = -0.5 * d * LOG_2PI - float(np.sum(np.log(self.scale)))
        return (g.sum(v * v, axis=-1) * -0.5 - sum_s) + const

    # serialisation ------------------------------------------------------

    def header(self) -> dict:
        return {"dim": self.dim, "ctx_dim": self.ctx_dim, "n_layers": self.n_layers,
                "hidden": self.hidden, "ctx_hidden": self.ctx_hidden, "embed": self.embed,
                "clamp": self.clamp, "loc": self.loc.tolist(), "scale": self.scale.tolist(),
                "param_names": sorted(self.params)}

    def to_bytes(self) -> bytes:
        names = sorted(self.params)
        chunks = [_MAGIC, struct.pack("<I", len(names))]
        for name in names:
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes, header: dict) -> "ConditionalFlow":
        if blob[: len(_MAGIC)] != _MAGIC:
            raise ValueError("not a flow parameter record")
        pos = len(_MAGIC)
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        names = header["param_names"]
        if count != len(names):
            raise ValueError("parameter count does not match header")
        params = {}
        for name in names:
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        return cls(header["dim"], header["ctx_dim"], params, header["loc"], header["scale"],
                   header["n_layers"], header["hidden"], header["ctx_hidden"], header["embed"],
                   header["clamp"])

    def save(self, stem: Path, extra: dict | None = None) -> None:
        stem = Path(stem)
        stem.with_suffix(".bin").write_bytes(self.to_bytes())
        head = self.header()
        if extra:
            head.update(extra)
        stem.with_suffix(".json").write_text(json.dumps(head, indent=1))

    @classmethod
    def load(cls, stem: Path) -> tuple["ConditionalFlow", dict]:
        stem = Path(stem)
        head = json.loads(stem.with_suffix(".json").read_text())
        return cls.from_bytes(stem.with_suffix(".bin").read_bytes(), head), head


def base_log_prob(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def init_flow(dim: int, ctx_dim: int, seed: int = 0, loc=None, scale=None, n_layers: int = 4,
              hidden: int = 64, ctx_hidden: int = 32, embed: int = 16,
              head_std: float = 0.0) -> ConditionalFlow:
    """Fresh flow. Output heads are zero (identity transform) unless ``head_std`` > 0."""
    if dim < 1:
        raise ValueError("flow dimension must be >= 1")
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    params = {
        "ctx.W0": dense(ctx_dim, ctx_hidden), "ctx.b0": np.zeros(ctx_hidden),
        "ctx.W1": dense(ctx_hidden, embed), "ctx.b1": np.zeros(embed),
    }
    for k in range(n_layers):
        params[f"l{k}.W0"] = dense(dim + embed, hidden)
        params[f"l{k}.b0"] = np.zeros(hidden)
        params[f"l{k}.W1"] = dense(hidden, hidden)
        params[f"l{k}.b1"] = np.zeros(hidden)
        params[f"l{k}.Wout"] = rng.normal(0.0, head_std, size=(hidden, 2 * dim)) if head_std else np.zeros((hidden, 2 * dim))
        params[f"l{k}.bout"] = rng.normal(0.0, head_std, size=2 * dim) if head_std else np.zeros(2 * dim)
    loc = np.zeros(dim) if loc is None else loc
    scale = np.ones(dim) if scale is None else scale
    return ConditionalFlow(dim, ctx_dim, params, loc, scale, n_layers, hidden, ctx_hidden, embed)


@dataclass
class ConditionedFlow:
    """A flow with its context fixed: a plain density over lam."""

    flow: ConditionalFlow
    ctx: np.ndarray

    @property
    def dim(self):
        return self.flow.dim

    def sample(self, n, rng):
        return self.flow.sample(self.ctx, n, rng)

    def log_prob(self, lam):
        lam = np.asarray(lam, dtype=np.float64).reshape(-1, self.flow.dim)
        return self.flow.log_prob(lam, self.ctx)


@dataclass
class DiagonalGaussian:
    """Independent Gaussian density; the base prior of every model."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)

    @property
    def dim(self):
        return len(self.mean)

    def sample(self, n, rng):
        lam = self.mean + self.std * rng.standard_normal((n, self.dim))
        return lam, self.log_prob(lam)

    def log_prob(self, lam):
        lam = np.asarray(lam, dtype=np.float64).reshape(-1, self.dim)
        z = (lam - self.mean) / self.std
        return base_log_prob(z) - np.sum(np.log(self.std))
