"""Hierarchical shifted-window transformer with quadratic Q/K/V projections.

Token grids are kept channel-last, ``[batch, height, width, channels]``.
``cyclic_shift(grid, o)`` rolls by ``+o`` along both spatial axes, so with
``o = 1`` the token at (0, 0) comes from (H-1, W-1).  Shifted blocks roll by
``-shift`` before attention and by ``+shift`` after it.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .layers import LayerNorm, Linear, MLP, Module, trunc_normal
from .quadratic import QuadraticLinear, param_groups, qmlp_project

SHIFT_POLICIES = ("half_window", "quarter_map", "none")


@dataclass
class QSwinConfig:
    input_resolution: int = 224
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    num_heads: tuple = (3, 6, 12, 24)
    window_size: int = 7
    shift_policy: str = "half_window"
    feature_dim: int = 100
    head_hidden: float = 4.0
    quadratic: bool = True
    relative_position_bias: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.validate()

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale preset used throughout the tests."""
        base = dict(input_resolution=32, patch_size=4, embed_dim=16, depths=(1, 1),
                    num_heads=(2, 2), window_size=4, feature_dim=8)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.input_resolution % self.patch_size:
            raise ConfigError(
                f"input_resolution {self.input_resolution} not divisible by patch_size {self.patch_size}"
            )
        if len(self.depths) != len(self.num_heads):
            raise ConfigError("depths and num_heads must have the same length")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.shift_policy not in SHIFT_POLICIES:
            raise ConfigError(f"unknown shift_policy {self.shift_policy!r}; choose from {SHIFT_POLICIES}")
        for s in range(len(self.depths)):
            res, dim = self.stage_resolution(s), self.stage_dim(s)
            if res < 1:
                raise ConfigError(f"stage {s} has no tokens left")
            if res % self.stage_window(s):
                raise ConfigError(f"stage {s} resolution {res} not divisible by window {self.window_size}")
            if dim % self.num_heads[s]:
                raise ConfigError(f"stage {s} width {dim} not divisible by {self.num_heads[s]} heads")
            if s < len(self.depths) - 1 and res % 2:
                raise ConfigError(f"stage {s} resolution {res} is odd; cannot merge patches")

    def stage_resolution(self, s):
        return self.input_resolution // self.patch_size // 2 ** s

    def stage_dim(self, s):
        return self.embed_dim * 2 ** s

    def stage_window(self, s):
        return min(self.window_size, self.stage_resolution(s))

    def stage_shift(self, s):
        res, w = self.stage_resolution(s), self.stage_window(s)
        if res <= w or self.shift_policy == "none":
            return 0
        shift = w // 2 if self.shift_policy == "half_window" else res // 4
        return shift % res

    def to_dict(self):
        return asdict(self)


@dataclass
class AttentionRecord:
    stage: int
    block: int
    head: int
    window: int
    matrix: np.ndarray
    image: int = 0


# --------------------------------------------------------------- grid helpers

def window_partition(grid, window):
    """``[B, H, W, C]`` (or ``[H, W, C]``) -> ``[B*nW, window**2, C]``."""
    grid = ad.as_tensor(grid)
    if grid.ndim == 3:
        grid = ad.reshape(grid, (1,) + grid.shape)
    b, h, w, c = grid.shape
    if h % window or w % window:
        raise ConfigError(f"grid {h}x{w} not divisible by window {window}")
    x = ad.reshape(grid, (b, h // window, window, w // window, window, c))
    x = ad.permute(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b * (h // window) * (w // window), window * window, c))


def window_reverse(windows, window, h, w):
    """Inverse of ``window_partition``; returns ``[B, H, W, C]``."""
    n, _, c = windows.shape
    b = n // ((h // window) * (w // window))
    x = ad.reshape(windows, (b, h // window, w // window, window, window, c))
    x = ad.permute(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, h, w, c))


def cyclic_shift(grid, offset):
    """Toroidal roll by ``offset`` along the two spatial axes."""
    grid = ad.as_tensor(grid)
    if offset == 0:
        return grid
    return ad.roll(grid, (offset, offset), (-3, -2))


def shift_attention_mask(resolution, window, shift):
    """Boolean ``[nW, n, n]`` mask; True marks token pairs split by the roll seam.

    After rolling by ``-shift`` the token at row ``i`` came from row
    ``(i + shift) mod H``; rows ``i >= H - shift`` wrapped around.
    """
    idx = np.arange(resolution)
    wrapped = (idx >= resolution - shift).astype(np.int64)
    region = wrapped[:, None] * 2 + wrapped[None, :]
    nw = resolution // window
    region = region.reshape(nw, window, nw, window).transpose(0, 2, 1, 3).reshape(nw * nw, window * window)
    return region[:, :, None] != region[:, None, :]


def relative_position_index(window):
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def window_attention(q, k, v, mask=None, bias=None, recorder=None, tag=(0, 0), num_windows=None):
    """Per-window multi-head attention ``softmax(q k^T / sqrt(d_h)) v``.

    ``q, k, v`` are ``[N, heads, n, d_h]`` with ``N = batch * num_windows``.
    ``mask`` is ``[num_windows, n, n]`` (True = blocked) and ``bias`` is
    ``[heads, n, n]``.  When ``recorder`` is a list, one AttentionRecord per
    (image, window, head) is appended.
    """
    n_total, heads, n, dh = q.shape
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    if bias is not None:
        logits = ad.add(logits, bias)
    full_mask = None
    nw = num_windows or (mask.shape[0] if mask is not None else n_total)
    if mask is not None:
        full_mask = np.broadcast_to(mask[None, :, None], (n_total // nw, nw, heads, n, n))
        full_mask = full_mask.reshape(n_total, heads, n, n)
    attn = ad.softmax_lastdim(logits, full_mask)
    if recorder is not None:
        stage, block = tag
        for i in range(n_total):
            for h in range(heads):
                recorder.append(AttentionRecord(stage, block, h, i % nw, attn.data[i, h].copy(), i // nw))
    return ad.matmul(attn, v)


# -------------------------------------------------------------------- modules

class QSwinBlock(Module):
    """``T' = LN(MHA(QMLP(T))) + T``; ``T_q = LN(MLP(T')) + T'``."""

    def __init__(self, dim, heads, resolution, window, shift, cfg, rng):
        self.dim, self.heads = dim, heads
        self.resolution, self.window, self.shift = resolution, window, shift
        proj = (lambda: QuadraticLinear(dim, dim, rng)) if cfg.quadratic else (lambda: Linear(dim, dim, rng))
        self.q, self.k, self.v = proj(), proj(), proj()
        self.proj = Linear(dim, dim, rng)
        self.norm1 = LayerNorm(dim, cfg.ln_eps)
        self.mlp = MLP(dim, int(dim * cfg.head_hidden), rng)
        self.norm2 = LayerNorm(dim, cfg.ln_eps)
        self.rel_bias = None
        if cfg.relative_position_bias:
            self.rel_bias = Tensor(trunc_normal(rng, ((2 * window - 1) ** 2, heads)), requires_grad=True)
            self._rel_index = relative_position_index(window).reshape(-1)

    def attention(self, tokens, shift, recorder=None, tag=(0, 0)):
        b, length, c = tokens.shape
        res, w, h = self.resolution, self.window, self.heads
        grid = ad.reshape(tokens, (b, res, res, c))
        mask = None
        if shift:
            grid = cyclic_shift(grid, -shift)
            mask = shift_attention_mask(res, w, shift)
        windows = window_partition(grid, w)
        q, k, v = qmlp_project(self.q, self.k, self.v, windows)
        nwin, n = windows.shape[0], w * w

        def split(t):
            return ad.permute(ad.reshape(t, (nwin, n, h, c // h)), (0, 2, 1, 3))

        bias = None
        if self.rel_bias is not None:
            bias = ad.take(self.rel_bias, self._rel_index)
            bias = ad.permute(ad.reshape(bias, (n, n, h)), (2, 0, 1))
        out = window_attention(split(q), split(k), split(v), mask, bias, recorder, tag,
                               num_windows=(res // w) ** 2)
        out = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (nwin, n, c))
        out = self.proj(out)
        grid = window_reverse(out, w, res, res)
        if shift:
            grid = cyclic_shift(grid, shift)
        return ad.reshape(grid, (b, length, c))

    def __call__(self, tokens, shifted=None, recorder=None, tag=(0, 0)):
        if shifted is None:
            shift = self.shift
        elif shifted:
            shift = self.shift or (self.window // 2 if self.resolution > self.window else 0)
        else:
            shift = 0
        t1 = ad.add(self.norm1(self.attention(tokens, shift, recorder, tag)), tokens)
        return ad.add(self.norm2(self.mlp(t1)), t1)


def qswin_block(block, tokens, shifted):
    return block(tokens, shifted=shifted)


class PatchMerge(Module):
    """2x2 neighbourhood concat (4C) followed by a bias-free linear map to 2C."""

    def __init__(self, dim, rng):
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, grid):
        return self.reduction(merge_neighbourhoods(grid))


def merge_neighbourhoods(grid):
    grid = ad.as_tensor(grid)
    squeeze = grid.ndim == 3
    if squeeze:
        grid = ad.reshape(grid, (1,) + grid.shape)
    b, h, w, c = grid.shape
    if h % 2 or w % 2:
        raise ConfigError(f"patch merging needs even resolution, got {h}x{w}")
    x = ad.reshape(grid, (b, h // 2, 2, w // 2, 2, c))
    x = ad.permute(x, (0, 1, 3, 4, 2, 5))
    x = ad.reshape(x, (b, h // 2, w // 2, 4 * c))
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def patch_merge(merge, grid):
    return merge(grid)


class PatchEmbed(Module):
    def __init__(self, patch_size, in_chans, dim, rng):
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size * in_chans, dim, rng)

    def __call__(self, images):
        images = ad.as_tensor(images)
        b, hgt, wid, ch = images.shape
        p = self.patch_size
        if hgt % p or wid % p:
            raise ConfigError(f"image {hgt}x{wid} not divisible by patch size {p}")
        x = ad.reshape(images, (b, hgt // p, p, wid // p, p, ch))
        x = ad.permute(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b, (hgt // p) * (wid // p), p * p * ch))
        return self.proj(x)


def patch_embed(embed, image):
    """Single ``[H, W, 3]`` image -> ``[(H/p)*(W/p), embed_dim]`` tokens."""
    image = ad.as_tensor(image)
    tokens = embed(ad.reshape(image, (1,) + image.shape))
    return ad.reshape(tokens, tokens.shape[1:])


class Stage(Module):
    def __init__(self, s, cfg, rng):
        res, dim, w = cfg.stage_resolution(s), cfg.stage_dim(s), cfg.stage_window(s)
        shift = cfg.stage_shift(s)
        self.resolution, self.dim = res, dim
        self.blocks = [
            QSwinBlock(dim, cfg.num_heads[s], res, w, shift if j % 2 else 0, cfg, rng)
            for j in range(cfg.depths[s])
        ]
        self.merge = PatchMerge(dim, rng) if s < len(cfg.depths) - 1 else None


class FeatureMLP(Module):
    """One GELU hidden layer of width ``feature_dim``, then a linear map to the feature."""

    def __init__(self, dim, feature_dim, rng):
        self.fc1 = Linear(dim, feature_dim, rng)
        self.fc2 = Linear(feature_dim, feature_dim, rng)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class QSwinModel(Module):
    """Quadratic Swin backbone plus feature MLP and regression head."""

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or QSwinConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = self.cfg
        self.patch_embed = PatchEmbed(c.patch_size, c.in_chans, c.embed_dim, rng)
        self.stages = [Stage(s, c, rng) for s in range(len(c.depths))]
        self.feature_mlp = FeatureMLP(c.stage_dim(len(c.depths) - 1), c.feature_dim, rng)
        self.head = Linear(c.feature_dim, 1, rng)
        self.recorder = None

    @contextlib.contextmanager
    def recording(self):
        """Collect AttentionRecords from every block during forwards in this context."""
        self.recorder = []
        try:
            yield self.recorder
        finally:
            self.recorder = None

    def forward(self, images):
        """``[B, H, W, 3]`` -> (features ``[B, feature_dim]``, scores ``[B]``)."""
        images = ad.as_tensor(images)
        c = self.cfg
        if images.ndim != 4 or images.shape[1:] != (c.input_resolution, c.input_resolution, c.in_chans):
            raise ConfigError(
                f"expected images of shape [B, {c.input_resolution}, {c.input_resolution}, {c.in_chans}], "
                f"got {images.shape}"
            )
        x = self.patch_embed(images)
        b = x.shape[0]
        for s, stage in enumerate(self.stages):
            for j, block in enumerate(stage.blocks):
                x = block(x, recorder=self.recorder, tag=(s, j))
            if stage.merge is not None:
                grid = ad.reshape(x, (b, stage.resolution, stage.resolution, stage.dim))
                grid = stage.merge(grid)
                x = ad.reshape(grid, (b, -1, grid.shape[-1]))
        pooled = ad.mean(x, axis=1)
        feature = self.feature_mlp(pooled)
        score = ad.reshape(self.head(feature), (b,))
        return feature, score

    __call__ = forward

    def predict(self, images, batch_size=64):
        """Scores as a float64 numpy array, without building a graph."""
        images = np.asarray(images)
        out = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size])[1].data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)


def forward(model, image):
    """One ``[H, W, 3]`` image -> (feature ``[feature_dim]``, scalar score tensor)."""
    image = ad.as_tensor(image)
    f, s = model.forward(ad.reshape(image, (1,) + image.shape))
    return ad.reshape(f, f.shape[1:]), ad.reshape(s, ())


def count_params(model):
    """Exact ``(total, quadratic, base)`` scalar counts."""
    base, quad = param_groups(model)
    nb = int(sum(t.size for t in base.values()))
    nq = int(sum(t.size for t in quad.values()))
    return nb + nq, nq, nb


def qkv_weight_count(model):
    """Weight scalars (biases excluded) in all Q/K/V projections."""
    total = 0
    for m in model.modules():
        if isinstance(m, QSwinBlock):
            for proj in (m.q, m.k, m.v):
                total += sum(t.size for n, t in proj.named_parameters() if n.startswith("W"))
    return total


def linear_twin(model):
    """A linear S-Swin sharing every tensor with ``model`` (W_r/b_r serve as W/b)."""
    cfg = QSwinConfig(**{**model.cfg.to_dict(), "quadratic": False})
    twin = QSwinModel(cfg, seed=model.seed)
    for mine, theirs in zip(model.modules(), twin.modules()):
        if type(mine) is not type(theirs):
            continue
        for key, value in list(vars(theirs).items()):
            if isinstance(value, Tensor):
                setattr(theirs, key, getattr(mine, key))
        if isinstance(mine, QSwinBlock):
            for name in ("q", "k", "v"):
                src, dst = getattr(mine, name), getattr(theirs, name)
                if isinstance(src, QuadraticLinear):
                    dst.W, dst.b = src.W_r, src.b_r
                else:
                    dst.W, dst.b = src.W, src.b
    return twin


def macs(cfg):
    """Multiply-accumulate count of one forward pass (matmuls only)."""
    total = 0
    tokens = (cfg.input_resolution // cfg.patch_size) ** 2
    total += tokens * cfg.patch_size ** 2 * cfg.in_chans * cfg.embed_dim
    qkv_factor = 3 if cfg.quadratic else 1
    for s, depth in enumerate(cfg.depths):
        res, dim, w = cfg.stage_resolution(s), cfg.stage_dim(s), cfg.stage_window(s)
        n_tok = res * res
        hidden = int(dim * cfg.head_hidden)
        per_block = (
            3 * qkv_factor * n_tok * dim * dim
            + 2 * n_tok * w * w * dim
            + n_tok * dim * dim
            + 2 * n_tok * dim * hidden
        )
        total += depth * per_block
        if s < len(cfg.depths) - 1:
            total += (n_tok // 4) * 4 * dim * 2 * dim
    f = cfg.feature_dim
    total += cfg.stage_dim(len(cfg.depths) - 1) * f + f * f + f
    return total
