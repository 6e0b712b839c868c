"""A small multi-modal decoder: patch encoder plus a pre-norm causal transformer.

Visual tokens are continuous patch projections that bypass the embedding
table, so gradients reach the pixels. The sequence layout is

    [visual tokens 0..N-1][prompt tokens N..N+M-1][generated tokens ...]

and hidden states are indexed ``0..L`` (``0`` = input embeddings, ``l`` =
residual stream after block ``l``). Attention of block ``l`` is what produced
hidden state ``l``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 32
    vocab_size: int = 64
    patch_size: int = 4
    image_height: int = 16
    image_width: int = 16
    channels: int = 3
    max_seq_len: int = 96
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image extents must be divisible by the patch size")
        if self.n_layers < 1 or self.max_seq_len <= self.n_visual:
            raise ValueError("need at least one layer and room for text after the visual tokens")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_visual(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in the fixed serialization order."""
    d, v = config.d_model, config.vocab_size
    shapes = [
        ("tok_emb", (v, d)),
        ("pos_emb", (config.max_seq_len, d)),
        ("patch_w", (config.patch_dim, d)),
        ("patch_b", (d,)),
    ]
    for i in range(config.n_layers):
        p = f"block{i}."
        shapes += [
            (p + "ln1.gain", (d,)),
            (p + "ln1.shift", (d,)),
            (p + "w_q", (d, d)),
            (p + "w_k", (d, d)),
            (p + "w_v", (d, d)),
            (p + "w_o", (d, d)),
            (p + "ln2.gain", (d,)),
            (p + "ln2.shift", (d,)),
            (p + "mlp.w_in", (d, 4 * d)),
            (p + "mlp.b_in", (4 * d,)),
            (p + "mlp.w_out", (4 * d, d)),
            (p + "mlp.b_out", (d,)),
        ]
    shapes += [("ln_f.gain", (d,)), ("ln_f.shift", (d,))]
    return shapes


@dataclass
class ModelParams:
    """Weights of the toy model. Treat as immutable once built or trained."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: a.copy() for k, a in self.arrays.items()},
                           list(self.loss_history))

    def tensors(self, graph: ad.Graph | None = None) -> dict[str, Tensor]:
        if graph is None:
            return {k: Tensor(a) for k, a in self.arrays.items()}
        return {k: graph.leaf(a) for k, a in self.arrays.items()}

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialization from numpy's counter-based Philox generator.

    Parameters are drawn in :func:`param_shapes` order. Matrices are normal
    with std ``1/sqrt(fan_in)`` (``1/sqrt(d)`` for every d-input projection),
    the embedding tables use ``1/sqrt(d)``, biases and shifts start at zero
    and layer-norm gains at one.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    d = config.d_model
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arrays[name] = np.ones(shape)
        elif leaf in ("shift", "patch_b", "b_in", "b_out"):
            arrays[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            arrays[name] = rng.standard_normal(shape) / np.sqrt(d)
        else:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return ModelParams(config, arrays)


# ----------------------------------------------------------------- inputs


@dataclass
class VisualInput:
    """An RGB-like image with values in [0, 1], stored as (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ValueError(f"expected (height, width, channels) pixels, got {self.pixels.shape}")
        if not np.all((self.pixels >= 0.0) & (self.pixels <= 1.0)):
            raise ValueError("pixels must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def patchify(pixels, patch: int) -> Tensor:
    """(..., H, W, C) -> (..., N, patch*patch*C), patches in row-major order."""
    pixels = ad.tensor(pixels)
    *lead, h, w, c = pixels.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    nl = len(lead)
    x = ad.reshape(pixels, (*lead, gh, patch, gw, patch, c))
    axes = tuple(range(nl)) + tuple(nl + a for a in (0, 2, 1, 3, 4))
    x = ad.transpose(x, axes)
    return ad.reshape(x, (*lead, gh * gw, patch * patch * c))


def encode_visual(image, params: ModelParams, weights: Mapping[str, Tensor] | None = None) -> Tensor:
    """Linear patch embedding: N x d visual tokens (batched if pixels carry leading axes).

    ``image`` may be a :class:`VisualInput`, a raw array, or a pixel Tensor
    attached to a graph when gradients with respect to pixels are wanted.
    """
    if isinstance(image, VisualInput):
        image = image.pixels
    image = ad.tensor(image)
    cfg = params.config
    want = (cfg.image_height, cfg.image_width, cfg.channels)
    if tuple(image.shape[-3:]) != want:
        raise ValueError(f"image shape {tuple(image.shape[-3:])} does not match the model's {want}")
    w = weights if weights is not None else params.tensors()
    patches = patchify(image, cfg.patch_size)
    return ad.add(ad.matmul(patches, w["patch_w"]), w["patch_b"])


@dataclass
class PromptAssembly:
    """Visual token embeddings followed by prompt token ids."""

    visual: Tensor
    text_ids: list[int]

    @property
    def n_visual(self) -> int:
        return self.visual.shape[-2]

    @property
    def prompt_len(self) -> int:
        return self.n_visual + len(self.text_ids)


def assemble(image, text_ids: Sequence[int], params: ModelParams) -> PromptAssembly:
    return PromptAssembly(encode_visual(image, params), [int(t) for t in text_ids])


# ------------------------------------------------------------------ forward


@dataclass
class ForwardTrace:
    """Everything one teacher-forced pass exposes.

    ``hidden[l]`` is T x d for l = 0..L, ``attention[l - 1]`` is H x T x T for
    block l = 1..L, ``logits`` is T x |X|. Entries are Tensors, attached to a
    graph when the pass was differentiable.
    """

    hidden: list[Tensor]
    attention: list[Tensor]
    logits: Tensor
    prompt_len: int
    tokens: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.logits.shape[-2]

    @property
    def n_layers(self) -> int:
        return len(self.attention)

    @property
    def generated_positions(self) -> range:
        return range(self.prompt_len, self.length)

    def hidden_at(self, layer: int) -> Tensor:
        if not 0 <= layer <= self.n_layers:
            raise ValueError(f"hidden layer {layer} outside 0..{self.n_layers}")
        return self.hidden[layer]

    def attention_at(self, layer: int) -> Tensor:
        if not 1 <= layer <= self.n_layers:
            raise ValueError(f"attention layer {layer} outside 1..{self.n_layers}")
        return self.attention[layer - 1]

    def head_mean_attention(self, layer: int) -> Tensor:
        return ad.mean(self.attention_at(layer), axis=-3)

    @classmethod
    def from_arrays(cls, hidden, attention, logits, prompt_len, tokens=()) -> "ForwardTrace":
        return cls([Tensor(h) for h in hidden], [Tensor(a) for a in attention],
                   Tensor(logits), int(prompt_len), list(tokens))


def _block(x: Tensor, w: Mapping[str, Tensor], i: int, cfg: ModelConfig, mask) -> tuple[Tensor, Tensor]:
    p = f"block{i}."
    *lead, t, d = x.shape
    h, dk = cfg.n_heads, cfg.d_head
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    a_in = ad.layer_norm(x, w[p + "ln1.gain"], w[p + "ln1.shift"])

    def heads(m):
        return ad.transpose(ad.reshape(ad.matmul(a_in, m), (*lead, t, h, dk)), perm)

    q, k, v = heads(w[p + "w_q"]), heads(w[p + "w_k"]), heads(w[p + "w_v"])
    scores = ad.scale(ad.matmul(q, ad.transpose(k, tuple(range(nl + 1)) + (nl + 2, nl + 1))),
                      1.0 / np.sqrt(dk))
    attn = ad.softmax_rows(scores, mask)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), perm), (*lead, t, d))
    x = ad.add(x, ad.matmul(mixed, w[p + "w_o"]))

    m_in = ad.layer_norm(x, w[p + "ln2.gain"], w[p + "ln2.shift"])
    hid = ad.gelu(ad.add(ad.matmul(m_in, w[p + "mlp.w_in"]), w[p + "mlp.b_in"]))
    x = ad.add(x, ad.add(ad.matmul(hid, w[p + "mlp.w_out"]), w[p + "mlp.b_out"]))
    return x, attn


def run_transformer(x: Tensor, w: Mapping[str, Tensor], cfg: ModelConfig):
    """Blocks plus tied vocabulary head over input embeddings (..., T, d)."""
    t = x.shape[-2]
    mask = ad.causal_mask(t)
    hidden, attention = [x], []
    for i in range(cfg.n_layers):
        x, a = _block(x, w, i, cfg, mask)
        hidden.append(x)
        attention.append(a)
    final = ad.layer_norm(x, w["ln_f.gain"], w["ln_f.shift"])
    logits = ad.matmul(final, ad.transpose(w["tok_emb"]))
    return hidden, attention, logits


def embed_sequence(visual: Tensor, ids, w: Mapping[str, Tensor]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    text = ad.embedding(w["tok_emb"], ids)
    x = ad.concat([visual, text], axis=-2)
    t = x.shape[-2]
    return ad.add(x, ad.index(w["pos_emb"], slice(0, t)))


def forward(assembly: PromptAssembly, generated: Sequence[int], params: ModelParams,
            weights: Mapping[str, Tensor] | None = None) -> ForwardTrace:
    """Teacher-forced pass over visual + prompt + ``generated`` tokens."""
    cfg = params.config
    ids = list(assembly.text_ids) + [int(g) for g in generated]
    t = assembly.n_visual + len(ids)
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len={cfg.max_seq_len}")
    w = weights if weights is not None else params.tensors()
    x = embed_sequence(assembly.visual, ids, w)
    hidden, attention, logits = run_transformer(x, w, cfg)
    return ForwardTrace(hidden, attention, logits, assembly.prompt_len, [int(g) for g in generated])


def softmax_vec(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def next_token_distribution(trace: ForwardTrace, t: int) -> np.ndarray:
    """p(x_t | x_<t): softmax of the vocabulary logits at position t-1.

    Valid for prompt_len <= t <= T; t = T is the distribution of the next,
    not yet generated, token.
    """
    if not trace.prompt_len <= t <= trace.length:
        raise ValueError(f"position {t} outside [{trace.prompt_len}, {trace.length}]")
    return softmax_vec(trace.logits.data[t - 1])


# ----------------------------------------------------------------- training


def _batch_loss(params: ModelParams, w, images: np.ndarray, rows: list[list[int]],
                n_prompt: int) -> Tensor:
    cfg = params.config
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), cfg.eos_id, dtype=np.int64)
    for b, r in enumerate(rows):
        ids[b, :len(r)] = r
    visual = encode_visual(images, params, w)
    x = embed_sequence(visual, ids, w)
    _, _, logits = run_transformer(x, w, cfg)
    logp = ad.log_softmax(logits)
    bi, pos, tgt = [], [], []
    nv = cfg.n_visual
    for b, r in enumerate(rows):
        for j in range(n_prompt, len(r)):
            bi.append(b)
            pos.append(nv + j - 1)
            tgt.append(r[j])
    picked = ad.index(logp, (np.array(bi), np.array(pos), np.array(tgt)))
    return ad.neg(ad.mean(picked))


def caption_loss(params: ModelParams, corpus, prompt_ids: Sequence[int]) -> float:
    """Mean teacher-forced cross-entropy over caption tokens, no graph."""
    rows = [list(prompt_ids) + list(cap) for _, cap in corpus]
    images = np.stack([_pixels(img) for img, _ in corpus])
    return _batch_loss(params, params.tensors(), images, rows, len(prompt_ids)).item()


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, VisualInput) else np.asarray(img, dtype=np.float64)


def train_toy_model(params: ModelParams, corpus, epochs: int, lr: float,
                    prompt_ids: Sequence[int], batch_size: int = 8, seed: int = 0,
                    max_grad_norm: float | None = 1.0) -> ModelParams:
    """Teacher-forced minibatch gradient descent on (image, caption ids) pairs.

    Caption ids are the target tokens after the prompt, EOS included. Each
    epoch visits the corpus in a seeded permutation; the update is plain
    ``w -= lr * g`` (with optional global-norm clipping of ``g``). Returns a
    new :class:`ModelParams` whose ``loss_history`` holds the corpus loss
    before training followed by the mean minibatch loss of every epoch.
    """
    out = params.copy()
    if epochs <= 0:
        return out
    cfg = params.config
    for _, cap in corpus:
        if cfg.n_visual + len(prompt_ids) + len(cap) > cfg.max_seq_len:
            raise ValueError("caption longer than max_seq_len allows")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    images = np.stack([_pixels(img) for img, _ in corpus])
    rows = [list(prompt_ids) + list(cap) for _, cap in corpus]
    history = out.loss_history
    history.append(caption_loss(out, corpus, prompt_ids))
    names = list(out.arrays)
    for epoch in range(epochs):
        order = rng.permutation(len(rows))
        losses = []
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            g = ad.Graph()
            w = out.tensors(g)
            loss = _batch_loss(out, w, images[sel], [rows[i] for i in sel], len(prompt_ids))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {start}")
            grads = ad.backward(g, loss)
            gs = [grads[w[n]] for n in names]
            scale = 1.0
            if max_grad_norm is not None:
                norm = float(np.sqrt(sum(float((x * x).sum()) for x in gs)))
                if norm > max_grad_norm:
                    scale = max_grad_norm / norm
            for n, gn in zip(names, gs):
                out.arrays[n] = out.arrays[n] - (lr * scale) * gn
            losses.append(value)
        history.append(float(np.mean(losses)))
        if epoch % 50 == 0:
            logger.info("epoch %d loss %.4f", epoch, history[-1])
    return out
