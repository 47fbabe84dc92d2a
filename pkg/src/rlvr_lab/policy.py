"""Autoregressive token policies.

Two modes share one interface:

* ``neural``: token + position embeddings, ``n_layers`` pre-norm blocks of
  single-head causal self-attention and a GELU feed-forward, final layernorm
  and a linear head. Gradients come from :mod:`rlvr_lab.autograd`.
* ``tabular``: a logit table indexed by (absolute position, previous token).
  Small instances are fully enumerable and serve as brute-force oracles.

Checkpoint layout (all integers little-endian)::

    bytes 0..7    magic  b"RLVRPOL\\x00"
    bytes 8..11   uint32 format version
    bytes 12..15  uint32 header length H
    next H bytes  UTF-8 JSON {"arch": {...}, "meta": {...}, "param_count": n}
                  (sorted keys, compact separators)
    next 8n bytes float64 parameter vector
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from rlvr_lab import autograd as ag

FORMAT_VERSION = 1
MAGIC = b"RLVRPOL\x00"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Arch:
    mode: str
    vocab_size: int
    max_len: int
    embed_dim: int = 64
    n_layers: int = 1
    hidden_dim: int = 256
    pad_id: int = 0
    eos_id: int | None = None

    def __post_init__(self):
        if self.mode not in ("neural", "tabular"):
            raise PolicyError(f"unknown policy mode {self.mode!r}")
        if self.vocab_size < 1 or self.max_len < 1:
            raise PolicyError("vocab_size and max_len must be positive")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        V, d, h = self.vocab_size, self.embed_dim, self.hidden_dim
        if self.mode == "tabular":
            # row V of the middle axis is the "no previous token" context
            return [("table", (self.max_len, V + 1, V))]
        shapes: list[tuple[str, tuple[int, ...]]] = [
            ("tok_emb", (V, d)),
            ("pos_emb", (self.max_len, d)),
        ]
        for i in range(self.n_layers):
            shapes += [
                (f"l{i}.ln1_g", (d,)), (f"l{i}.ln1_b", (d,)),
                (f"l{i}.wq", (d, d)), (f"l{i}.wk", (d, d)),
                (f"l{i}.wv", (d, d)), (f"l{i}.wo", (d, d)),
                (f"l{i}.ln2_g", (d,)), (f"l{i}.ln2_b", (d,)),
                (f"l{i}.w1", (d, h)), (f"l{i}.b1", (h,)),
                (f"l{i}.w2", (h, d)), (f"l{i}.b2", (d,)),
            ]
        shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, V)), ("b_out", (V,))]
        return shapes

    def param_count(self) -> int:
        return sum(math.prod(s) for _, s in self.param_shapes())


@dataclass
class PolicyParams:
    arch: Arch
    values: np.ndarray
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.arch.param_count():
            raise PolicyError(
                f"parameter vector has {self.values.size} entries, "
                f"arch requires {self.arch.param_count()}"
            )
        if not np.all(np.isfinite(self.values)):
            raise PolicyError("non-finite parameter values")

    def unflatten(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in self.arch.param_shapes():
            n = math.prod(shape)
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out


@dataclass
class Trajectory:
    prompt_tokens: list[int]
    gen_tokens: list[int]
    per_token_logprobs: np.ndarray
    total_logprob: float


def init_params(arch: Arch, seed: int = 0) -> PolicyParams:
    """Random init for neural mode; all-zero (uniform) table for tabular mode."""
    if arch.mode == "tabular":
        return PolicyParams(arch, np.zeros(arch.param_count()))
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in arch.param_shapes():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            chunks.append(np.ones(shape))
        elif leaf.startswith("b") or leaf.endswith("_b"):
            chunks.append(np.zeros(shape))
        elif leaf in ("tok_emb", "pos_emb"):
            chunks.append(rng.normal(0.0, 0.1, shape))
        else:
            chunks.append(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape))
    return PolicyParams(arch, np.concatenate([c.ravel() for c in chunks]))


def clone_params(params: PolicyParams) -> PolicyParams:
    return PolicyParams(params.arch, params.values.copy(), params.version,
                        copy.deepcopy(params.meta))


# ---------------------------------------------------------------------------
# forward passes


def _leaves(params: PolicyParams, requires_grad: bool) -> dict[str, ag.Tensor]:
    return {k: ag.Tensor(v, requires_grad) for k, v in params.unflatten().items()}


def _flat_grad(params: PolicyParams, leaves: dict[str, ag.Tensor]) -> np.ndarray:
    parts = []
    for name, shape in params.arch.param_shapes():
        g = leaves[name].grad
        parts.append(np.zeros(math.prod(shape)) if g is None else g.ravel())
    return np.concatenate(parts)


def _neural_logits(
    arch: Arch,
    w: dict[str, ag.Tensor],
    tokens: np.ndarray,
    valid: np.ndarray,
    positions: np.ndarray,
    head_from: int,
) -> ag.Tensor:
    """Logits for positions ``head_from:`` of a left-padded batch."""
    N, T = tokens.shape
    d = arch.embed_dim
    x = ag.add(ag.gather_rows(w["tok_emb"], tokens), ag.gather_rows(w["pos_emb"], positions))
    causal = np.tril(np.ones((T, T), dtype=bool))
    mask = (causal[None] & valid[:, None, :]) | np.eye(T, dtype=bool)[None]
    scale = 1.0 / math.sqrt(d)
    for i in range(arch.n_layers):
        p = f"l{i}."
        h = ag.layernorm(x, w[p + "ln1_g"], w[p + "ln1_b"])
        q = ag.matmul(h, w[p + "wq"])
        k = ag.matmul(h, w[p + "wk"])
        v = ag.matmul(h, w[p + "wv"])
        att = ag.softmax(ag.mul(ag.matmul(q, ag.transpose_last(k)), scale), mask)
        x = ag.add(x, ag.matmul(ag.matmul(att, v), w[p + "wo"]))
        h = ag.layernorm(x, w[p + "ln2_g"], w[p + "ln2_b"])
        h = ag.gelu(ag.add(ag.matmul(h, w[p + "w1"]), w[p + "b1"]))
        x = ag.add(x, ag.add(ag.matmul(h, w[p + "w2"]), w[p + "b2"]))
    if head_from:
        x = _slice_time(x, head_from)
    x = ag.layernorm(x, w["lnf_g"], w["lnf_b"])
    return ag.add(ag.matmul(x, w["w_out"]), w["b_out"])


def _slice_time(x: ag.Tensor, start: int) -> ag.Tensor:
    def _bw(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:] = g
        x._accumulate(full)

    return ag.Tensor(x.data[:, start:], x.requires_grad, (x,), _bw)


def _tabular_logits(
    arch: Arch, w: dict[str, ag.Tensor], prev: np.ndarray, positions: np.ndarray
) -> ag.Tensor:
    V = arch.vocab_size
    rows = positions * (V + 1) + prev
    flat = ag.Tensor(w["table"].data.reshape(-1, V), w["table"].requires_grad,
                     (w["table"],), lambda g: w["table"]._accumulate(g.reshape(w["table"].shape)))
    return ag.gather_rows(flat, rows)


def _check_tokens(arch: Arch, seqs: Sequence[Sequence[int]]) -> None:
    for s in seqs:
        for t in s:
            if not 0 <= t < arch.vocab_size:
                raise PolicyError(f"token id {t} out of vocabulary (size {arch.vocab_size})")


def _pack(arch: Arch, prompts: Sequence[Sequence[int]], gens: Sequence[Sequence[int]]):
    """Left-pad prompts, right-pad generations; returns arrays for teacher forcing."""
    _check_tokens(arch, prompts)
    _check_tokens(arch, gens)
    N = len(prompts)
    P = max(len(p) for p in prompts)
    G = max(len(g) for g in gens)
    for p, g in zip(prompts, gens):
        if len(p) + len(g) > arch.max_len:
            raise PolicyError(
                f"sequence length {len(p) + len(g)} exceeds max_len {arch.max_len}"
            )
    tokens = np.full((N, P + G), arch.pad_id, dtype=np.int64)
    valid = np.zeros((N, P + G), dtype=bool)
    left = np.zeros(N, dtype=np.int64)
    gen_mask = np.zeros((N, G), dtype=bool)
    targets = np.full((N, G), arch.pad_id, dtype=np.int64)
    for i, (p, g) in enumerate(zip(prompts, gens)):
        left[i] = P - len(p)
        tokens[i, left[i]:P] = p
        tokens[i, P:P + len(g)] = g
        valid[i, left[i]:P + len(g)] = True
        gen_mask[i, :len(g)] = True
        targets[i, :len(g)] = g
    return tokens, valid, left, P, G, gen_mask, targets


def _token_logprob_tensor(
    params: PolicyParams,
    w: dict[str, ag.Tensor],
    prompts: Sequence[Sequence[int]],
    gens: Sequence[Sequence[int]],
) -> tuple[ag.Tensor, np.ndarray]:
    arch = params.arch
    tokens, valid, left, P, G, gen_mask, targets = _pack(arch, prompts, gens)
    N = len(prompts)
    if arch.mode == "tabular":
        idx = P + np.arange(G)
        prev_idx = idx - 1
        prev = tokens[:, prev_idx]
        # empty prompt: first generated token has no predecessor
        no_prev = (prev_idx[None, :] < left[:, None])
        prev = np.where(no_prev, arch.vocab_size, prev)
        positions = np.broadcast_to(idx[None, :] - left[:, None], (N, G))
        positions = np.where(gen_mask, positions, 0)
        logits = _tabular_logits(arch, w, prev, positions)
    else:
        if P == 0:
            raise PolicyError("neural policy requires a nonempty prompt")
        inp = tokens[:, : P + G - 1]
        v = valid[:, : P + G - 1]
        positions = np.where(v, np.arange(P + G - 1)[None, :] - left[:, None], 0)
        logits = _neural_logits(arch, w, inp, v, positions, head_from=P - 1)
    lp = ag.log_softmax_gather(logits, targets)
    return lp, gen_mask


def logprob_with_vjp(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    gens: Sequence[Sequence[int]],
) -> tuple[np.ndarray, np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Teacher-forced per-token log-probs for a batch plus a pullback.

    Returns ``(token_logprobs, mask, vjp)`` where both arrays are ``(N, G)``
    (masked entries are 0) and ``vjp(weights)`` returns the gradient of
    ``sum(weights * token_logprobs)`` with respect to ``params.values``.
    """
    w = _leaves(params, requires_grad=True)
    lp, mask = _token_logprob_tensor(params, w, prompts, gens)
    values = np.where(mask, lp.data, 0.0)

    def vjp(weights: np.ndarray) -> np.ndarray:
        for t in w.values():
            t.grad = None
        lp.backward(np.where(mask, weights, 0.0))
        return _flat_grad(params, w)

    return values, mask, vjp


def logprob(
    params: PolicyParams, prompt_tokens: Sequence[int], gen_tokens: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Teacher-forced ``(total, per_token)`` log-probability of one generation."""
    if len(gen_tokens) == 0:
        _check_tokens(params.arch, [prompt_tokens])
        return 0.0, np.zeros(0)
    w = _leaves(params, requires_grad=False)
    lp, _ = _token_logprob_tensor(params, w, [prompt_tokens], [gen_tokens])
    per_token = lp.data[0].copy()
    return float(per_token.sum()), per_token


def batch_logprobs(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    gens: Sequence[Sequence[int]],
) -> list[np.ndarray]:
    """Per-token log-probs for many generations without building gradients."""
    w = _leaves(params, requires_grad=False)
    lp, mask = _token_logprob_tensor(params, w, prompts, gens)
    return [lp.data[i, mask[i]].copy() for i in range(len(prompts))]


def grad_logprob(
    params: PolicyParams, prompt_tokens: Sequence[int], gen_tokens: Sequence[int]
) -> np.ndarray:
    """Gradient of the teacher-forced total log-probability w.r.t. ``params.values``."""
    _, mask, vjp = logprob_with_vjp(params, [prompt_tokens], [gen_tokens])
    return vjp(np.ones(mask.shape))


def next_token_logprobs(
    params: PolicyParams, prefixes: Sequence[Sequence[int]], prompt_lens: Sequence[int]
) -> np.ndarray:
    """Log-distribution over the next token for each prefix, ``(N, V)``."""
    arch = params.arch
    w = _leaves(params, requires_grad=False)
    N = len(prefixes)
    if arch.mode == "tabular":
        prev = np.array([p[-1] if len(p) else arch.vocab_size for p in prefixes])
        pos = np.array([len(p) for p in prefixes])
        z = _tabular_logits(arch, w, prev, pos).data
    else:
        T = max(len(p) for p in prefixes)
        tokens = np.full((N, T), arch.pad_id, dtype=np.int64)
        valid = np.zeros((N, T), dtype=bool)
        left = np.zeros(N, dtype=np.int64)
        for i, p in enumerate(prefixes):
            left[i] = T - len(p)
            tokens[i, left[i]:] = p
            valid[i, left[i]:] = True
        positions = np.maximum(np.arange(T)[None, :] - left[:, None], 0)
        z = _neural_logits(arch, w, tokens, valid, positions, head_from=T - 1).data[:, 0]
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# sampling


def _np_layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps) * g + b


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * x * (1.0 + 0.044715 * x * x)))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _CachedDecoder:
    """Incremental neural forward pass that keeps per-layer keys and values.

    Prompts are left-padded into the first ``T0`` columns; every decode step
    writes one new column for the rows still generating. The arithmetic is the
    same as :func:`_neural_logits`, only reorganised so each step costs one
    token's worth of work instead of a full re-run over the prefix.
    """

    def __init__(self, params: PolicyParams, prompts: Sequence[Sequence[int]]):
        arch = params.arch
        self.arch = arch
        self.w = params.unflatten()
        N = len(prompts)
        T0 = max(len(p) for p in prompts)
        cols = T0 + arch.max_len
        d = arch.embed_dim
        self.k = [np.zeros((N, cols, d)) for _ in range(arch.n_layers)]
        self.v = [np.zeros((N, cols, d)) for _ in range(arch.n_layers)]
        self.valid = np.zeros((N, cols), dtype=bool)
        tokens = np.full((N, T0), arch.pad_id, dtype=np.int64)
        left = np.array([T0 - len(p) for p in prompts], dtype=np.int64)
        for i, p in enumerate(prompts):
            tokens[i, left[i]:] = p
            self.valid[i, left[i]:T0] = True
        positions = np.maximum(np.arange(T0)[None, :] - left[:, None], 0)
        self.pos = np.array([len(p) for p in prompts], dtype=np.int64)
        self.t = T0
        self.scale = 1.0 / math.sqrt(d)

        w = self.w
        x = w["tok_emb"][tokens] + w["pos_emb"][positions]
        valid = self.valid[:, :T0]
        mask = ((np.tril(np.ones((T0, T0), dtype=bool))[None] & valid[:, None, :])
                | np.eye(T0, dtype=bool)[None])
        for i in range(arch.n_layers):
            p = f"l{i}."
            h = _np_layernorm(x, w[p + "ln1_g"], w[p + "ln1_b"])
            q, k, v = h @ w[p + "wq"], h @ w[p + "wk"], h @ w[p + "wv"]
            self.k[i][:, :T0], self.v[i][:, :T0] = k, v
            z = np.where(mask, (q @ k.transpose(0, 2, 1)) * self.scale, -np.inf)
            att = np.exp(z - z.max(axis=-1, keepdims=True))
            att /= att.sum(axis=-1, keepdims=True)
            x = x + (att @ v) @ w[p + "wo"]
            x = x + self._ff(i, x)
        self.first = self._head(x[:, -1])

    def _ff(self, i: int, x: np.ndarray) -> np.ndarray:
        w, p = self.w, f"l{i}."
        h = _np_layernorm(x, w[p + "ln2_g"], w[p + "ln2_b"])
        return _np_gelu(h @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "b2"]

    def _head(self, x: np.ndarray) -> np.ndarray:
        w = self.w
        return _log_softmax(_np_layernorm(x, w["lnf_g"], w["lnf_b"]) @ w["w_out"] + w["b_out"])

    def step(self, rows: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Append ``tokens`` to ``rows``; next-token log-probs for those rows."""
        w, c = self.w, self.t
        x = w["tok_emb"][tokens] + w["pos_emb"][self.pos[rows]]
        self.valid[rows, c] = True
        valid = self.valid[rows, :c + 1]
        for i in range(self.arch.n_layers):
            p = f"l{i}."
            h = _np_layernorm(x, w[p + "ln1_g"], w[p + "ln1_b"])
            q = h @ w[p + "wq"]
            self.k[i][rows, c] = h @ w[p + "wk"]
            self.v[i][rows, c] = h @ w[p + "wv"]
            keys, values = self.k[i][rows, :c + 1], self.v[i][rows, :c + 1]
            z = np.where(valid, np.einsum("nd,ntd->nt", q, keys) * self.scale, -np.inf)
            att = np.exp(z - z.max(axis=-1, keepdims=True))
            att /= att.sum(axis=-1, keepdims=True)
            x = x + np.einsum("nt,ntd->nd", att, values) @ w[p + "wo"]
            x = x + self._ff(i, x)
        self.t += 1
        self.pos[rows] += 1
        return self._head(x)


def sample_batch(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    temperature: float,
    seed: int,
) -> list[Trajectory]:
    """Ancestral sampling for a batch of prompts.

    ``temperature == 0`` decodes greedily. Recorded log-probabilities are
    always those of the temperature-1 model.
    """
    arch = params.arch
    if temperature < 0:
        raise PolicyError("temperature must be >= 0")
    _check_tokens(arch, prompts)
    for p in prompts:
        if len(p) >= arch.max_len:
            raise PolicyError(f"prompt length {len(p)} must be < max_len {arch.max_len}")
        if arch.mode == "neural" and len(p) == 0:
            raise PolicyError("neural policy requires a nonempty prompt")
    rng = np.random.default_rng(seed)
    N = len(prompts)
    seqs = [list(p) for p in prompts]
    gens: list[list[int]] = [[] for _ in range(N)]
    lps: list[list[float]] = [[] for _ in range(N)]
    alive = np.ones(N, dtype=bool)
    decoder = _CachedDecoder(params, prompts) if arch.mode == "neural" and N else None
    last: np.ndarray | None = None
    while alive.any():
        live = np.flatnonzero(alive)
        if decoder is None:
            logp = next_token_logprobs(params, [seqs[i] for i in live],
                                       [len(prompts[i]) for i in live])
        elif last is None:
            logp = decoder.first
        else:
            logp = decoder.step(live, last[live])
        u = rng.random(N)[live]
        if temperature == 0:
            choice = logp.argmax(axis=-1)
        else:
            z = logp / temperature
            z = z - z.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            cdf = np.cumsum(probs, axis=-1)
            choice = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1)
            choice = np.minimum(choice, arch.vocab_size - 1)
        last = np.zeros(N, dtype=np.int64)
        last[live] = choice
        for j, i in enumerate(live):
            tok = int(choice[j])
            seqs[i].append(tok)
            gens[i].append(tok)
            lps[i].append(float(logp[j, tok]))
            if (arch.eos_id is not None and tok == arch.eos_id) or len(seqs[i]) >= arch.max_len:
                alive[i] = False
    out = []
    for i in range(N):
        per = np.array(lps[i])
        out.append(Trajectory(list(prompts[i]), gens[i], per, float(per.sum())))
    return out


def sample(
    params: PolicyParams, prompt_tokens: Sequence[int], temperature: float, seed: int
) -> Trajectory:
    return sample_batch(params, [prompt_tokens], temperature, seed)[0]


def enumerate_trajectories(arch: Arch, prompt_len: int) -> list[list[int]]:
    """Every generation reachable from a prompt of length ``prompt_len``."""
    out: list[list[int]] = []

    def rec(prefix: list[int]) -> None:
        done = (arch.eos_id is not None and prefix and prefix[-1] == arch.eos_id)
        if done or prompt_len + len(prefix) >= arch.max_len:
            out.append(prefix)
            return
        for v in range(arch.vocab_size):
            rec(prefix + [v])

    rec([])
    return out


# ---------------------------------------------------------------------------
# serialization


def to_bytes(params: PolicyParams) -> bytes:
    header = json.dumps(
        {"arch": asdict(params.arch), "meta": params.meta, "param_count": params.values.size},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return (
        MAGIC
        + struct.pack("<II", params.version, len(header))
        + header
        + params.values.astype("<f8").tobytes()
    )


def from_bytes(blob: bytes) -> PolicyParams:
    if blob[:8] != MAGIC:
        raise PolicyError("not a policy checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise PolicyError(f"unsupported checkpoint format version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    arch = Arch(**header["arch"])
    n = header["param_count"]
    body = blob[16 + hlen:]
    if len(body) != 8 * n:
        raise PolicyError(f"checkpoint body has {len(body)} bytes, expected {8 * n}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return PolicyParams(arch, values, version, header["meta"])


def save_params(params: PolicyParams, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(params))
    tmp.replace(path)


def load_params(path: str | Path) -> PolicyParams:
    return from_bytes(Path(path).read_bytes())
