"""Model families, their parameter tables, and forward passes.

Two families are supported, both spec-driven rather than class-based:

* ``isotropic`` - patch embedding, a single stack of pre-norm attention/MLP
  blocks at constant width, mean pooling, linear head.
* ``hierarchical`` - patch-embedding stem, then stages of depthwise-conv
  blocks whose width doubles (and spatial grid halves) stage to stage.

Parameters are a plain ordered ``dict[str, Tensor]`` keyed by a canonical
name grammar (see ``docs/naming.md``); the grammar is a compatibility
contract with the checkpoint-surgery module, which rewrites these names
and slices these shapes.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, SpecValidationError
from .tensor import Tensor

Parameters = dict  # ordered name -> Tensor

HEAD_STD = 0.02  # classifier head init, regardless of scheme


@dataclass
class ModelSpec:
    """Architecture description; every parameter shape derives from it."""

    family: str  # "isotropic" | "hierarchical"
    stage_depths: list[int] = field(default_factory=list)
    stage_dims: list[int] = field(default_factory=list)
    heads: int = 1  # isotropic only
    patch: int = 4
    image: tuple[int, int, int] = (1, 32, 32)  # (channels, height, width)
    classes: int = 4

    def validate(self) -> None:
        if self.family not in ("isotropic", "hierarchical"):
            raise SpecValidationError(f"unknown family {self.family!r}")
        if len(self.stage_depths) != len(self.stage_dims) or not self.stage_depths:
            raise SpecValidationError("stage_depths and stage_dims must align and be nonempty")
        if any(d < 0 for d in self.stage_depths):
            raise SpecValidationError("stage depths must be non-negative")
        if any(d <= 0 for d in self.stage_dims):
            raise SpecValidationError("stage dims must be positive")
        if self.classes < 2:
            raise SpecValidationError("classes must be >= 2")
        c, h, w = self.image
        if self.patch <= 0 or h % self.patch or w % self.patch:
            raise SpecValidationError(
                f"patch {self.patch} must divide image {h}x{w}"
            )
        if self.family == "isotropic":
            if len(self.stage_dims) != 1:
                raise SpecValidationError("isotropic models have exactly one stage")
            if self.heads <= 0 or self.stage_dims[0] % self.heads:
                raise SpecValidationError(
                    f"heads {self.heads} must divide width {self.stage_dims[0]}"
                )
        else:
            for i in range(1, len(self.stage_dims)):
                if self.stage_dims[i] != 2 * self.stage_dims[i - 1]:
                    raise SpecValidationError(
                        f"hierarchical dims must double per stage, got {self.stage_dims}"
                    )
            if h != w:
                raise SpecValidationError("hierarchical family needs square images")
            grid = h // self.patch
            merges = len(self.stage_dims) - 1
            if grid % (1 << merges):
                raise SpecValidationError(
                    f"patch grid {grid} cannot halve across {merges} stage merges"
                )

    @property
    def patch_grid(self) -> int:
        return self.image[1] // self.patch

    @property
    def tokens(self) -> int:
        g = self.patch_grid
        return g * (self.image[2] // self.patch)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "stage_depths": list(self.stage_depths),
            "stage_dims": list(self.stage_dims),
            "heads": self.heads,
            "patch": self.patch,
            "image": list(self.image),
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        spec = cls(
            family=d["family"],
            stage_depths=list(d["stage_depths"]),
            stage_dims=list(d["stage_dims"]),
            heads=int(d.get("heads", 1)),
            patch=int(d["patch"]),
            image=tuple(d["image"]),
            classes=int(d["classes"]),
        )
        spec.validate()
        return spec


def toy_spec(name: str) -> ModelSpec:
    """Built-in desk-scale spec pairs mirroring the published size ratios."""
    table = {
        "iso-teacher": ModelSpec("isotropic", [4], [64], heads=4),
        "iso-student": ModelSpec("isotropic", [4], [32], heads=2),
        "hier-teacher": ModelSpec("hierarchical", [2, 2, 3, 2], [16, 32, 64, 128]),
        "hier-student": ModelSpec("hierarchical", [1, 1, 2, 1], [8, 16, 32, 64]),
    }
    if name not in table:
        raise SpecValidationError(f"unknown toy spec {name!r}; options: {sorted(table)}")
    return table[name]


# kinds drive initialization: matrices/convs get scheme init, norms get 1/0,
# biases get 0, the head and positional table always get trunc-normal 0.02
KIND_KERNEL = "kernel"
KIND_BIAS = "bias"
KIND_NORM_SCALE = "norm_scale"
KIND_NORM_SHIFT = "norm_shift"
KIND_POS = "pos"
KIND_HEAD_KERNEL = "head_kernel"
KIND_HEAD_BIAS = "head_bias"


def shape_table(spec: ModelSpec) -> list[tuple[str, tuple, str]]:
    """Canonical (name, shape, kind) rows, in construction order."""
    spec.validate()
    c, _, _ = spec.image
    p = spec.patch
    rows: list[tuple[str, tuple, str]] = []
    if spec.family == "isotropic":
        d = spec.stage_dims[0]
        rows.append(("embed.weight", (d, c * p * p), KIND_KERNEL))
        rows.append(("embed.bias", (d,), KIND_BIAS))
        rows.append(("pos", (spec.tokens, d), KIND_POS))
        for j in range(spec.stage_depths[0]):
            pre = f"stage0.block{j}"
            rows += [
                (f"{pre}.norm1.weight", (d,), KIND_NORM_SCALE),
                (f"{pre}.norm1.bias", (d,), KIND_NORM_SHIFT),
                (f"{pre}.attn.qkv.weight", (3 * d, d), KIND_KERNEL),
                (f"{pre}.attn.qkv.bias", (3 * d,), KIND_BIAS),
                (f"{pre}.attn.proj.weight", (d, d), KIND_KERNEL),
                (f"{pre}.attn.proj.bias", (d,), KIND_BIAS),
                (f"{pre}.norm2.weight", (d,), KIND_NORM_SCALE),
                (f"{pre}.norm2.bias", (d,), KIND_NORM_SHIFT),
                (f"{pre}.mlp.fc1.weight", (4 * d, d), KIND_KERNEL),
                (f"{pre}.mlp.fc1.bias", (4 * d,), KIND_BIAS),
                (f"{pre}.mlp.fc2.weight", (d, 4 * d), KIND_KERNEL),
                (f"{pre}.mlp.fc2.bias", (d,), KIND_BIAS),
            ]
        last = d
    else:
        d0 = spec.stage_dims[0]
        rows.append(("embed.weight", (d0, c * p * p), KIND_KERNEL))
        rows.append(("embed.bias", (d0,), KIND_BIAS))
        for i, (depth, d) in enumerate(zip(spec.stage_depths, spec.stage_dims)):
            if i > 0:
                rows.append((f"stage{i}.down.weight", (d, 4 * spec.stage_dims[i - 1]), KIND_KERNEL))
                rows.append((f"stage{i}.down.bias", (d,), KIND_BIAS))
            for j in range(depth):
                pre = f"stage{i}.block{j}"
                rows += [
                    (f"{pre}.dw.weight", (d, 3, 3), KIND_KERNEL),
                    (f"{pre}.dw.bias", (d,), KIND_BIAS),
                    (f"{pre}.norm.weight", (d,), KIND_NORM_SCALE),
                    (f"{pre}.norm.bias", (d,), KIND_NORM_SHIFT),
                    (f"{pre}.mlp.fc1.weight", (4 * d, d), KIND_KERNEL),
                    (f"{pre}.mlp.fc1.bias", (4 * d,), KIND_BIAS),
                    (f"{pre}.mlp.fc2.weight", (d, 4 * d), KIND_KERNEL),
                    (f"{pre}.mlp.fc2.bias", (d,), KIND_BIAS),
                ]
        last = spec.stage_dims[-1]
    rows.append(("head.weight", (spec.classes, last), KIND_HEAD_KERNEL))
    rows.append(("head.bias", (spec.classes,), KIND_HEAD_BIAS))
    return rows


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """N(0, std) with draws beyond 2 std rejected and redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    mask = np.abs(out) > bound
    while mask.any():
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > bound
    return out.astype(np.float32)


def _fans(shape) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 3:  # depthwise conv (C, kh, kw): one input channel per filter
        return shape[1] * shape[2], shape[1] * shape[2]
    raise ShapeError(f"no fan convention for shape {shape}")


def _init_array(rng, shape, kind, scheme) -> np.ndarray:
    if kind == KIND_HEAD_KERNEL or kind == KIND_POS:
        return truncated_normal(rng, shape, HEAD_STD)
    if kind in (KIND_BIAS, KIND_NORM_SHIFT, KIND_HEAD_BIAS):
        return np.zeros(shape, dtype=np.float32)
    if kind == KIND_NORM_SCALE:
        return np.ones(shape, dtype=np.float32)
    fan_in, fan_out = _fans(shape)
    if scheme == "default":
        return truncated_normal(rng, shape, HEAD_STD)
    if scheme == "xavier":
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(np.float32)
    if scheme == "kaiming":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
    raise SpecValidationError(f"unknown init scheme {scheme!r}")


def build_model(spec: ModelSpec, init: str = "default", seed: int = 0) -> Parameters:
    """Allocate and initialize every tensor of a model, deterministically."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: Parameters = {}
    for name, shape, kind in shape_table(spec):
        params[name] = Tensor(_init_array(rng, shape, kind, init), requires_grad=True)
    return params


def init_head(params: Parameters, spec: ModelSpec, seed: int) -> None:
    """Re-initialize the classifier head in place (fresh task head)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params["head.weight"] = Tensor(
        truncated_normal(rng, (spec.classes, spec.stage_dims[-1]), HEAD_STD),
        requires_grad=True,
    )
    params["head.bias"] = Tensor(
        np.zeros((spec.classes,), dtype=np.float32), requires_grad=True
    )


def count_parameters(params: Parameters) -> int:
    return sum(t.data.size for t in params.values())


def _patchify(x: Tensor, channels: int, grid_h: int, grid_w: int, p: int) -> Tensor:
    b = x.shape[0]
    t = T.reshape(x, (b, channels, grid_h, p, grid_w, p))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (b, grid_h * grid_w, channels * p * p))


def _affine_norm(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), weight), bias)


def _attention(x: Tensor, params: Parameters, prefix: str, dim: int, heads: int) -> Tensor:
    b, t, _ = x.shape
    hd = dim // heads
    qkv = T.linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    parts = []
    for k in range(3):
        piece = T.narrow(qkv, 2, k * dim, dim)
        piece = T.reshape(piece, (b, t, heads, hd))
        parts.append(T.transpose(piece, (0, 2, 1, 3)))  # (B, h, T, hd)
    q, k_, v = parts
    scores = T.scale(T.matmul(q, T.transpose(k_, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = T.softmax_temperature(scores, 1.0)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, dim))
    return T.linear(ctx, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def _mlp(x: Tensor, params: Parameters, prefix: str) -> Tensor:
    h = T.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
    h = T.gelu(h)
    return T.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def _forward_isotropic(params: Parameters, spec: ModelSpec, batch: Tensor) -> Tensor:
    c, _, _ = spec.image
    g = spec.patch_grid
    x = _patchify(batch, c, g, spec.image[2] // spec.patch, spec.patch)
    x = T.linear(x, params["embed.weight"], params["embed.bias"])
    x = T.add(x, params["pos"])
    d = spec.stage_dims[0]
    for j in range(spec.stage_depths[0]):
        pre = f"stage0.block{j}"
        x = T.add(
            x,
            _attention(
                _affine_norm(x, params[f"{pre}.norm1.weight"], params[f"{pre}.norm1.bias"]),
                params,
                f"{pre}.attn",
                d,
                spec.heads,
            ),
        )
        x = T.add(
            x,
            _mlp(
                _affine_norm(x, params[f"{pre}.norm2.weight"], params[f"{pre}.norm2.bias"]),
                params,
                f"{pre}.mlp",
            ),
        )
    pooled = T.mean_axis(x, 1)
    return T.linear(pooled, params["head.weight"], params["head.bias"])


def _tokens_to_grid(x: Tensor, g: int, dim: int) -> Tensor:
    b = x.shape[0]
    t = T.reshape(x, (b, g, g, dim))
    return T.transpose(t, (0, 3, 1, 2))  # (B, C, g, g)


def _grid_to_tokens(x: Tensor) -> Tensor:
    b, c, g, _ = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, g * g, c))


def _patch_merge(x: Tensor, g: int, dim: int) -> Tensor:
    """2x2 neighborhood concat: grid halves, channels quadruple."""
    b = x.shape[0]
    half = g // 2
    t = T.reshape(x, (b, half, 2, half, 2, dim))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b, half * half, 4 * dim))


def _forward_hierarchical(params: Parameters, spec: ModelSpec, batch: Tensor) -> Tensor:
    c, _, _ = spec.image
    g = spec.patch_grid
    x = _patchify(batch, c, g, spec.image[2] // spec.patch, spec.patch)
    x = T.linear(x, params["embed.weight"], params["embed.bias"])
    for i, (depth, dim) in enumerate(zip(spec.stage_depths, spec.stage_dims)):
        if i > 0:
            x = _patch_merge(x, g, spec.stage_dims[i - 1])
            g //= 2
            x = T.linear(x, params[f"stage{i}.down.weight"], params[f"stage{i}.down.bias"])
        for j in range(depth):
            pre = f"stage{i}.block{j}"
            grid = _tokens_to_grid(x, g, dim)
            grid = T.depthwise_conv3x3(grid, params[f"{pre}.dw.weight"], params[f"{pre}.dw.bias"])
            h = _grid_to_tokens(grid)
            h = _affine_norm(h, params[f"{pre}.norm.weight"], params[f"{pre}.norm.bias"])
            x = T.add(x, _mlp(h, params, f"{pre}.mlp"))
    pooled = T.mean_axis(x, 1)
    return T.linear(pooled, params["head.weight"], params["head.bias"])


def forward(params: Parameters, spec: ModelSpec, batch: Tensor) -> Tensor:
    """Logits (B, K) for an image batch (B, C, H, W)."""
    if tuple(batch.shape[1:]) != tuple(spec.image):
        raise ShapeError(
            f"batch shape {tuple(batch.shape)} does not match spec image {spec.image}"
        )
    if spec.family == "isotropic":
        return _forward_isotropic(params, spec, batch)
    return _forward_hierarchical(params, spec, batch)
