"""The multiscale spectral-spatial convolutional transformer.

A patch is split into groups of adjacent bands. Each group is tokenized
by a shared multi-size filter bank applied to center-cropped
neighborhoods of several sizes (inner tokens), refined per layer by an
inner transformer block, and injected into a per-group spectral token.
An outer transformer block mixes the spectral tokens plus a class
token, whose final state feeds the classification head. A cross-layer
fusion step can blend each stream's layer-l output with its layer-(l-2)
output through a learnable two-weight combination.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ShapeError

Params = dict[str, Tensor]

INIT_STD = 0.02
MLP_RATIO = 4


@dataclass
class ModelConfig:
    num_classes: int
    bands: int
    patch_size: int = 9
    spectral_neighbors: int = 5
    num_layers: int = 5
    inner_dim: int = 64
    embed_dim: int = 64
    heads_inner: int = 4
    heads_outer: int = 4
    neighborhood_scales: tuple[int, ...] = (3, 5, 7, 9)
    filter_sizes: tuple[int, ...] = (3, 5, 7)
    use_multiscale: bool = True
    use_fusion: bool = True

    def __post_init__(self):
        self.neighborhood_scales = tuple(sorted(int(a) for a in self.neighborhood_scales))
        self.filter_sizes = tuple(sorted(int(k) for k in self.filter_sizes))
        self.validate()

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.bands < 1 or self.spectral_neighbors < 1:
            raise ConfigError(f"bands={self.bands} and spectral_neighbors={self.spectral_neighbors} must be >= 1")
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        if self.inner_dim % self.heads_inner:
            raise ConfigError(f"inner_dim {self.inner_dim} not divisible by heads_inner {self.heads_inner}")
        if self.embed_dim % self.heads_outer:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads_outer {self.heads_outer}")
        if self.use_multiscale:
            for a in self.neighborhood_scales:
                if a % 2 == 0 or a > self.patch_size:
                    raise ConfigError(f"neighborhood scale {a} must be odd and <= patch_size {self.patch_size}")
            for k in self.filter_sizes:
                if k % 2 == 0:
                    raise ConfigError(f"filter size {k} must be odd")
            if not self.scale_filter_pairs:
                raise ConfigError(
                    f"no filter size in {self.filter_sizes} fits any neighborhood scale in {self.neighborhood_scales}"
                )

    @property
    def num_groups(self) -> int:
        """Spectral tokens: band count split into groups of adjacent bands."""
        return -(-self.bands // self.spectral_neighbors)

    @property
    def scale_filter_pairs(self) -> list[tuple[int, int]]:
        """(neighborhood scale, filter size) pairs, ascending scale then filter."""
        return [(a, k) for a in self.neighborhood_scales for k in self.filter_sizes if k <= a]

    @property
    def num_inner_tokens(self) -> int:
        return len(self.scale_filter_pairs)

    def fusion_layers(self) -> list[int]:
        return [l for l in range(3, self.num_layers + 1)]


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal draw with resampling beyond two standard deviations."""
    values = rng.normal(0.0, std, size=shape)
    out_of_range = np.abs(values) > 2.0 * std
    while out_of_range.any():
        values[out_of_range] = rng.normal(0.0, std, size=int(out_of_range.sum()))
        out_of_range = np.abs(values) > 2.0 * std
    return values.astype(np.float32)


def parameter_shapes(config: ModelConfig) -> "dict[str, tuple[int, ...]]":
    """Canonical name -> shape map, in checkpoint manifest order."""
    shapes: dict[str, tuple[int, ...]] = {}
    n, d1, d2 = config.spectral_neighbors, config.inner_dim, config.embed_dim
    if config.use_multiscale:
        for k in config.filter_sizes:
            shapes[f"filters.{k}"] = (k, k, n, d1)
    else:
        shapes["embed.weight"] = (config.patch_size * config.patch_size * n, d2)
        shapes["embed.bias"] = (d2,)
    for layer in range(1, config.num_layers + 1):
        streams = (("inner", d1),) if config.use_multiscale else ()
        for stream, dim in streams + (("outer", d2),):
            prefix = f"layer.{layer}.{stream}"
            shapes[f"{prefix}.ln1.gamma"] = (dim,)
            shapes[f"{prefix}.ln1.beta"] = (dim,)
            for proj in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}.msa.{proj}"] = (dim, dim)
            shapes[f"{prefix}.ln2.gamma"] = (dim,)
            shapes[f"{prefix}.ln2.beta"] = (dim,)
            hidden = MLP_RATIO * dim
            shapes[f"{prefix}.mlp.fc1.weight"] = (dim, hidden)
            shapes[f"{prefix}.mlp.fc1.bias"] = (hidden,)
            shapes[f"{prefix}.mlp.fc2.weight"] = (hidden, dim)
            shapes[f"{prefix}.mlp.fc2.bias"] = (dim,)
        if config.use_multiscale:
            shapes[f"layer.{layer}.inject.weight"] = (config.num_inner_tokens * d1, d2)
            shapes[f"layer.{layer}.inject.bias"] = (d2,)
    if config.use_fusion:
        for layer in config.fusion_layers():
            if config.use_multiscale:
                shapes[f"scaf.{layer}.w"] = (1, 2)
            shapes[f"scaf.{layer}.v"] = (1, 2)
    shapes["pos"] = (config.num_groups + 1, d2)
    shapes["head.ln.gamma"] = (d2,)
    shapes["head.ln.beta"] = (d2,)
    shapes["head.fc.weight"] = (d2, config.num_classes)
    shapes["head.fc.bias"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> Params:
    """Deterministic initialization: truncated-normal weights, zero biases,
    identity layer norms, neutral (0, 1) fusion weights."""
    rng = np.random.Generator(np.random.Philox(seed))
    params: Params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            data = np.zeros(shape, dtype=np.float32)
        elif leaf == "gamma":
            data = np.ones(shape, dtype=np.float32)
        elif name.startswith("scaf."):
            data = np.array([[0.0, 1.0]], dtype=np.float32)
        elif name == "pos":
            data = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def random_params(config: ModelConfig, seed: int, weight_std: float = 0.4) -> Params:
    """Generic-scale random parameters for derivative and property checks.

    Unlike :func:`init_params`, every group (including layer norms and
    fusion weights) is drawn away from its neutral value, so no gradient
    path degenerates at the checked point.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    params: Params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            data = rng.normal(0.0, 0.1, size=shape)
        elif leaf == "gamma":
            data = rng.uniform(0.5, 1.5, size=shape)
        elif name.startswith("scaf."):
            data = rng.normal(0.5, 0.5, size=shape)
        else:
            data = rng.normal(0.0, weight_std, size=shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    return params


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def params_from_arrays(config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> Params:
    """Bind loaded arrays to a config, checking names and shapes."""
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        if tuple(arrays[name].shape) != shape:
            raise ConfigError(
                f"checkpoint/config mismatch: parameter {name!r} has shape "
                f"{tuple(arrays[name].shape)}, config expects {shape}"
            )
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise ConfigError(f"checkpoint has unexpected parameters: {extra}")
    return {name: Tensor(arrays[name], requires_grad=True) for name in expected}


def cast_params(params: Params, dtype) -> Params:
    return {name: Tensor(t.data.astype(dtype), requires_grad=True) for name, t in params.items()}


# ---------------------------------------------------------------------------
# attention and transformer blocks
# ---------------------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention; rows of the weight matrix sum to 1."""
    out, _ = _attention(q, k, v)
    return out


def attention_weights(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """The row-stochastic weight matrix, for inspection and tests."""
    _, weights = _attention(q, k, v)
    return weights


def _attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention: query/key dims differ, {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: key/value lengths differ, {k.shape} vs {v.shape}")
    d_k = q.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


def msa(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention: project, attend per head slice, concat, project."""
    dim = x.shape[1]
    if dim % heads:
        raise ConfigError(f"msa: embedding dim {dim} not divisible by {heads} heads")
    q, k, v = ad.matmul(x, wq), ad.matmul(x, wk), ad.matmul(x, wv)
    head_dim = dim // heads
    outputs = []
    for i in range(heads):
        lo = i * head_dim
        outputs.append(
            attention(
                ad.narrow(q, 1, lo, head_dim),
                ad.narrow(k, 1, lo, head_dim),
                ad.narrow(v, 1, lo, head_dim),
            )
        )
    merged = outputs[0] if heads == 1 else ad.concat(outputs, axis=1)
    return ad.matmul(merged, wo)


def _fc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def _residual_block(x: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    normed = ad.layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    x = ad.add(
        x,
        msa(
            normed,
            params[f"{prefix}.msa.wq"],
            params[f"{prefix}.msa.wk"],
            params[f"{prefix}.msa.wv"],
            params[f"{prefix}.msa.wo"],
            heads,
        ),
    )
    normed = ad.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    hidden = ad.gelu(_fc(normed, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return ad.add(x, _fc(hidden, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"]))


def inner_block(tokens: Tensor, params: Params, layer: int, config: ModelConfig) -> Tensor:
    return _residual_block(tokens, params, f"layer.{layer}.inner", config.heads_inner)


def outer_block(tokens: Tensor, params: Params, layer: int, config: ModelConfig) -> Tensor:
    return _residual_block(tokens, params, f"layer.{layer}.outer", config.heads_outer)


# ---------------------------------------------------------------------------
# tokenization, injection, fusion
# ---------------------------------------------------------------------------


def multiscale_spatial_embed(group: np.ndarray, params: Params, config: ModelConfig) -> Tensor:
    """Tokenize one band group: for each (scale, filter) pair, convolve the
    center-cropped neighborhood and mean-pool to one inner_dim vector."""
    s = config.patch_size
    if group.shape != (s, s, config.spectral_neighbors):
        raise ShapeError(f"band group shape {group.shape} != ({s}, {s}, {config.spectral_neighbors})")
    dtype = params[f"filters.{config.filter_sizes[0]}"].dtype
    tokens = []
    for a, k in config.scale_filter_pairs:
        off = (s - a) // 2
        sub = Tensor(np.ascontiguousarray(group[off : off + a, off : off + a, :], dtype=dtype))
        pooled = ad.mean_pool_spatial(ad.conv2d(sub, params[f"filters.{k}"], stride=1))
        tokens.append(ad.reshape(pooled, (1, config.inner_dim)))
    return tokens[0] if len(tokens) == 1 else ad.concat(tokens, axis=0)


def project_and_inject(tokens: Tensor, spectral_row: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Flatten a group's inner tokens, project to the spectral width, add."""
    flat = ad.reshape(tokens, (1, tokens.size))
    if flat.shape[1] != weight.shape[0]:
        raise ConfigError(f"inject: flattened tokens {flat.shape} do not match projection {weight.shape}")
    return ad.add(spectral_row, _fc(flat, weight, bias))


def fuse(previous: Tensor, current: Tensor, weights: Tensor) -> Tensor:
    """Learnable two-weight blend of a stream's layer l-2 and layer l states.

    ``weights`` holds (coefficient on previous, coefficient on current),
    so (0, 1) reproduces the unfused stream exactly.
    """
    if previous.shape != current.shape:
        raise ShapeError(f"fuse: mismatched states {previous.shape} vs {current.shape}")
    if weights.size != 2:
        raise ShapeError(f"fuse: weights must have exactly 2 entries, got shape {weights.shape}")
    w_prev = ad.reshape(ad.narrow(weights, 1, 0, 1), (1, 1))
    w_cur = ad.reshape(ad.narrow(weights, 1, 1, 1), (1, 1))
    return ad.add(ad.mul(previous, w_prev), ad.mul(current, w_cur))


def scaf_spatial(previous: Tensor, current: Tensor, weights: Tensor) -> Tensor:
    return fuse(previous, current, weights)


def scaf_spectral(previous: Tensor, current: Tensor, weights: Tensor) -> Tensor:
    return fuse(previous, current, weights)


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


def split_band_groups(patch: np.ndarray, config: ModelConfig) -> list[np.ndarray]:
    """Adjacent-band groups of spectral_neighbors channels; the last group
    is zero-padded up to the group width."""
    s, n = config.patch_size, config.spectral_neighbors
    if patch.shape != (s, s, config.bands):
        raise ShapeError(f"patch shape {patch.shape} != ({s}, {s}, {config.bands})")
    groups = []
    for j in range(config.num_groups):
        chunk = patch[:, :, j * n : (j + 1) * n]
        if chunk.shape[2] < n:
            pad = np.zeros((s, s, n - chunk.shape[2]), dtype=patch.dtype)
            chunk = np.concatenate([chunk, pad], axis=2)
        groups.append(chunk)
    return groups


def forward(patch: np.ndarray, params: Params, config: ModelConfig, trace: dict | None = None) -> Tensor:
    """Classify one patch; returns the K-vector of logits (graph attached).

    ``trace``, when supplied, is filled with the per-layer stream states
    under keys ("z", layer, group) and ("p", layer), layer 0 included.
    """
    dtype = params["pos"].dtype
    patch = np.asarray(patch, dtype=dtype)
    groups = split_band_groups(patch, config)
    c_prime = config.num_groups
    d2 = config.embed_dim

    if config.use_multiscale:
        token_hist = [[multiscale_spatial_embed(g, params, config)] for g in groups]
        spectral = params["pos"]  # zero memory plus the positional embedding
        if trace is not None:
            for j, hist in enumerate(token_hist):
                trace[("z", 0, j)] = hist[0]
    else:
        zero_row = Tensor(np.zeros((1, d2), dtype=dtype))
        rows = [zero_row]
        for g in groups:
            flat = Tensor(np.ascontiguousarray(g.reshape(1, -1)))
            rows.append(_fc(flat, params["embed.weight"], params["embed.bias"]))
        spectral = ad.add(ad.concat(rows, axis=0), params["pos"])

    if trace is not None:
        trace[("p", 0)] = spectral
    spectral_hist = [spectral]
    for layer in range(1, config.num_layers + 1):
        if config.use_multiscale:
            new_tokens = []
            for j, hist in enumerate(token_hist):
                z = inner_block(hist[-1], params, layer, config)
                if config.use_fusion and layer >= 3:
                    z = scaf_spatial(hist[layer - 2], z, params[f"scaf.{layer}.w"])
                assert z.shape == (config.num_inner_tokens, config.inner_dim)
                hist.append(z)
                new_tokens.append(z)
                if trace is not None:
                    trace[("z", layer, j)] = z
            rows = [ad.narrow(spectral, 0, 0, 1)]
            for j, z in enumerate(new_tokens, start=1):
                rows.append(
                    project_and_inject(
                        z,
                        ad.narrow(spectral, 0, j, 1),
                        params[f"layer.{layer}.inject.weight"],
                        params[f"layer.{layer}.inject.bias"],
                    )
                )
            spectral = ad.concat(rows, axis=0)
        spectral = outer_block(spectral, params, layer, config)
        if config.use_fusion and layer >= 3:
            spectral = scaf_spectral(spectral_hist[layer - 2], spectral, params[f"scaf.{layer}.v"])
        assert spectral.shape == (c_prime + 1, d2)
        spectral_hist.append(spectral)
        if trace is not None:
            trace[("p", layer)] = spectral

    class_state = ad.narrow(spectral, 0, 0, 1)
    normed = ad.layer_norm(class_state, params["head.ln.gamma"], params["head.ln.beta"])
    logits = _fc(normed, params["head.fc.weight"], params["head.fc.bias"])
    return ad.reshape(logits, (config.num_classes,))
