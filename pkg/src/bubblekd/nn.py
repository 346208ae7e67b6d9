"""Neural building blocks and the two concrete models.

The student is a small pre-norm vision transformer that tokenizes an
image into square cells; the teacher is a small staged CNN with a
three-layer fully-connected classifier. Both expose a flat, stably
named parameter dict so checkpoints round-trip bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    cell_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 2
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.image_size % self.cell_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by cell_size {self.cell_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def grid(self) -> int:
        return self.image_size // self.cell_size

    @property
    def num_tokens(self) -> int:
        # one class token plus one token per cell
        return self.grid * self.grid + 1

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class CNNStage:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 2  # max-pool window after the conv; 1 disables pooling


@dataclass(frozen=True)
class CNNConfig:
    image_size: int = 32
    in_channels: int = 3
    stages: tuple[CNNStage, ...] = (
        CNNStage(16),
        CNNStage(32),
        CNNStage(64),
        CNNStage(64, pool=1),
    )
    fc_hidden: tuple[int, ...] = (128, 64)
    num_classes: int = 2
    dropout_p: float = 0.1

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("CNN needs at least one conv stage")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        size = self.image_size
        for i, s in enumerate(self.stages):
            size = (size + 2 * s.padding - s.kernel) // s.stride + 1
            if size < 1:
                raise ConfigError(f"stage {i} shrinks the feature map below 1x1")
            if s.pool > 1:
                if size % s.pool:
                    raise ConfigError(f"stage {i} pool {s.pool} does not divide extent {size}")
                size //= s.pool
        object.__setattr__(self, "_final_extent", size)

    @property
    def flat_features(self) -> int:
        return self._final_extent * self._final_extent * self.stages[-1].channels


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    vals = truncnorm.rvs(-2.0, 2.0, scale=std, size=int(np.prod(shape)), random_state=rng)
    return vals.reshape(shape).astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    std = float(np.sqrt(2.0 / fan_in))
    vals = truncnorm.rvs(-2.0, 2.0, scale=std, size=int(np.prod(shape)), random_state=rng)
    return vals.reshape(shape).astype(dtype)


class Model:
    """Named-parameter container with a train/eval mode flag."""

    def __init__(self, dropout_p: float = 0.0):
        self._params: dict[str, Tensor] = {}
        self.training = True
        self.dropout_p = dropout_p

    def _add_param(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def param_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def set_dropout(self, p: float) -> None:
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {p}")
        self.dropout_p = p

    def _drop(self, x: Tensor, rng) -> Tensor:
        if not self.training or self.dropout_p == 0.0:
            return x
        return T.dropout(x, self.dropout_p, rng=rng, training=True)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.forward(x, rng=rng)


def param_count(model: Model) -> int:
    return model.param_count()


class Linear(Model):
    """Single linear layer; flattens any trailing input axes."""

    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.w = self._add_param("w", trunc_normal(rng, (in_features, out_features), dtype=dtype))
        self.b = self._add_param("b", np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor, rng=None) -> Tensor:
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        return T.matmul(x, self.w) + self.b


def multi_head_attention(
    tokens: Tensor,
    num_heads: int,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    return_weights: bool = False,
):
    """Scaled dot-product attention over tokens, (n, d) or (batch, n, d).

    Per head the scores are scaled by 1/sqrt(d/num_heads); heads are
    concatenated and passed through the output projection.
    """
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    b, n, d = tokens.shape
    if d % num_heads:
        raise ConfigError(f"token width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def split(x: Tensor) -> Tensor:
        return x.reshape(b, n, num_heads, dh).transpose((0, 2, 1, 3))

    q = split(T.matmul(tokens, wq) + bq)
    k = split(T.matmul(tokens, wk) + bk)
    v = split(T.matmul(tokens, wv) + bv)

    scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (dh ** -0.5)
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v).transpose((0, 2, 1, 3)).reshape(b, n, d)
    out = T.matmul(out, wo) + bo
    if single:
        out = out.reshape(n, d)
    if return_weights:
        return out, attn
    return out


class ViT(Model):
    """Vision transformer: cell embedding, class token, pre-norm blocks."""

    def __init__(self, cfg: ViTConfig, rng=None, dtype=np.float32):
        super().__init__(dropout_p=cfg.dropout_p)
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.embed_dim
        cell_feat = cfg.cell_size * cfg.cell_size * 3

        self._add_param("embed.w", trunc_normal(rng, (cell_feat, d), dtype=dtype))
        self._add_param("embed.b", np.zeros(d, dtype=dtype))
        self._add_param("cls", trunc_normal(rng, (1, 1, d), dtype=dtype))
        self._add_param("pos", trunc_normal(rng, (cfg.num_tokens, d), dtype=dtype))
        for i in range(cfg.num_layers):
            pre = f"blocks.{i}."
            self._add_param(pre + "ln1.g", np.ones(d, dtype=dtype))
            self._add_param(pre + "ln1.b", np.zeros(d, dtype=dtype))
            for wname, extent in (("wq", d), ("wk", d), ("wv", d), ("wo", d)):
                self._add_param(pre + "attn." + wname, trunc_normal(rng, (d, extent), dtype=dtype))
                self._add_param(pre + "attn.b" + wname[1], np.zeros(extent, dtype=dtype))
            self._add_param(pre + "ln2.g", np.ones(d, dtype=dtype))
            self._add_param(pre + "ln2.b", np.zeros(d, dtype=dtype))
            self._add_param(pre + "mlp.w1", trunc_normal(rng, (d, cfg.mlp_dim), dtype=dtype))
            self._add_param(pre + "mlp.b1", np.zeros(cfg.mlp_dim, dtype=dtype))
            self._add_param(pre + "mlp.w2", trunc_normal(rng, (cfg.mlp_dim, d), dtype=dtype))
            self._add_param(pre + "mlp.b2", np.zeros(d, dtype=dtype))
        self._add_param("ln_f.g", np.ones(d, dtype=dtype))
        self._add_param("ln_f.b", np.zeros(d, dtype=dtype))
        self._add_param("head.w", trunc_normal(rng, (d, cfg.num_classes), dtype=dtype))
        self._add_param("head.b", np.zeros(cfg.num_classes, dtype=dtype))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x) * self._params[name + ".g"] + self._params[name + ".b"]

    def patch_embed(self, x: Tensor) -> Tensor:
        """Split into cells, linearly embed, prepend class token, add positions."""
        cfg = self.cfg
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        b, h, w, c = x.shape
        if h != cfg.image_size or w != cfg.image_size or c != 3:
            raise ShapeError(
                f"expected ({cfg.image_size}, {cfg.image_size}, 3) images, got {(h, w, c)}"
            )
        g, cs = cfg.grid, cfg.cell_size
        cells = x.reshape(b, g, cs, g, cs, c).transpose((0, 1, 3, 2, 4, 5)).reshape(b, g * g, cs * cs * c)
        tok = T.matmul(cells, self._params["embed.w"]) + self._params["embed.b"]
        cls = T.broadcast_to(self._params["cls"], (b, 1, cfg.embed_dim))
        return T.concat([cls, tok], axis=1) + self._params["pos"]

    def forward(self, x: Tensor, rng=None) -> Tensor:
        cfg = self.cfg
        h = self._drop(self.patch_embed(x), rng)
        for i in range(cfg.num_layers):
            pre = f"blocks.{i}."
            attn_in = self._ln(h, pre + "ln1")
            attn_out = multi_head_attention(
                attn_in, cfg.num_heads,
                *(self._params[pre + "attn." + k] for k in ATTN_KEYS),
            )
            h = h + self._drop(attn_out, rng)
            mlp_in = self._ln(h, pre + "ln2")
            hidden = T.gelu(T.matmul(mlp_in, self._params[pre + "mlp.w1"]) + self._params[pre + "mlp.b1"])
            mlp_out = T.matmul(hidden, self._params[pre + "mlp.w2"]) + self._params[pre + "mlp.b2"]
            h = h + self._drop(mlp_out, rng)
        h = self._ln(h, "ln_f")
        cls = h[:, 0, :]
        return T.matmul(cls, self._params["head.w"]) + self._params["head.b"]


class CNN(Model):
    """Staged conv/ReLU/max-pool trunk with a three-layer FC classifier."""

    def __init__(self, cfg: CNNConfig, rng=None, dtype=np.float32):
        super().__init__(dropout_p=cfg.dropout_p)
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        cin = cfg.in_channels
        for i, s in enumerate(cfg.stages):
            fan_in = s.kernel * s.kernel * cin
            self._add_param(
                f"stages.{i}.conv.w",
                he_normal(rng, (s.kernel, s.kernel, cin, s.channels), fan_in, dtype=dtype),
            )
            self._add_param(f"stages.{i}.conv.b", np.zeros(s.channels, dtype=dtype))
            cin = s.channels
        widths = (cfg.flat_features, *cfg.fc_hidden, cfg.num_classes)
        for i in range(len(widths) - 1):
            if i < len(widths) - 2:
                # hidden layers feed ReLUs: fan-in scaled init keeps
                # gradients alive through the three-layer stack
                w = he_normal(rng, (widths[i], widths[i + 1]), widths[i], dtype=dtype)
            else:
                w = trunc_normal(rng, (widths[i], widths[i + 1]), dtype=dtype)
            self._add_param(f"fc.{i}.w", w)
            self._add_param(f"fc.{i}.b", np.zeros(widths[i + 1], dtype=dtype))
        self._n_fc = len(widths) - 1

    def forward(self, x: Tensor, rng=None) -> Tensor:
        cfg = self.cfg
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size or x.shape[3] != cfg.in_channels:
            raise ShapeError(
                f"expected (*, {cfg.image_size}, {cfg.image_size}, {cfg.in_channels}), got {x.shape}"
            )
        h = x
        for i, s in enumerate(cfg.stages):
            h = T.conv2d(h, self._params[f"stages.{i}.conv.w"], stride=s.stride, padding=s.padding)
            h = T.relu(h + self._params[f"stages.{i}.conv.b"])
            if s.pool > 1:
                h = T.max_pool2d(h, s.pool)
        h = h.reshape(h.shape[0], -1)
        for i in range(self._n_fc):
            h = T.matmul(h, self._params[f"fc.{i}.w"]) + self._params[f"fc.{i}.b"]
            if i < self._n_fc - 1:
                h = self._drop(T.relu(h), rng)
        return h
