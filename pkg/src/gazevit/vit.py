"""Vision transformer that exposes every attention matrix it computes."""

import contextlib
import copy
import json
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from ._validation import check_divisible, check_frame
from .exceptions import InvalidParameterError, MissingDataError

REDUCTIONS = ("column", "row", "cls")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 2
    head_init: str = "zeros"
    init: str = "fan_in"

    def __post_init__(self):
        check_divisible(self.image_size, self.image_size, self.patch_size)
        if self.embed_dim % self.heads:
            raise InvalidParameterError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )
        if self.depth < 1:
            raise InvalidParameterError("depth must be >= 1")
        if self.head_init not in ("zeros", "normal"):
            raise InvalidParameterError(f"unknown head_init {self.head_init!r}")
        if self.init not in ("fan_in", "trunc_normal"):
            raise InvalidParameterError(f"unknown init {self.init!r}")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid_size**2

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def patch_dim(self):
        return self.patch_size**2 * self.channels


PAPER_CONFIG = dict(image_size=224, patch_size=16, embed_dim=768, depth=12, heads=12, mlp_ratio=4.0)


def patchify(frame, patch_size):
    """Split an H x W x C frame into row-major flattened patches, shape (N, P*P*C)."""
    frame = check_frame(frame)
    h, w, _ = frame.shape
    check_divisible(h, w, patch_size)
    return rearrange(frame, "(gh p1) (gw p2) c -> (gh gw) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify(patches, patch_size, frame_dims, channels=3):
    h, w = frame_dims
    check_divisible(h, w, patch_size)
    return rearrange(
        np.asarray(patches),
        "(gh gw) (p1 p2 c) -> (gh p1) (gw p2) c",
        gh=h // patch_size,
        p1=patch_size,
        p2=patch_size,
        c=channels,
    )


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = (
            rearrange(layer(x), "b n (h d) -> b h n d", h=self.heads)
            for layer in (self.query, self.key, self.value)
        )
        # torch.softmax subtracts the row max internally
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h, attn = self.attn(self.norm1(x))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    """Pre-norm ViT encoder with a CLS token, learned positions and a 2-way head.

    ``forward`` returns ``(logits, attention)`` where attention has shape
    ``(B, L, A, N + 1, N + 1)`` and holds the post-softmax weights exactly as
    they mixed the values.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            [Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.num_classes)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                if self.config.init == "trunc_normal":
                    nn.init.trunc_normal_(module.weight, std=0.02)
                    nn.init.zeros_(module.bias)
                else:
                    module.reset_parameters()
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        if self.config.head_init == "zeros":
            nn.init.zeros_(self.head.weight)
        else:
            nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    @property
    def depth(self):
        return len(self.blocks)

    def embed(self, x):
        """(B, C, H, W) images to (B, N + 1, D) tokens."""
        c = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise InvalidParameterError(
                f"expected input (B, {c.channels}, {c.image_size}, {c.image_size}), got {tuple(x.shape)}"
            )
        patches = rearrange(x, "b c (gh p1) (gw p2) -> b (gh gw) (p1 p2 c)", p1=c.patch_size, p2=c.patch_size)
        tokens = self.patch_embed(patches)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def classify(self, tokens):
        return self.head(self.norm(tokens)[:, 0])

    def forward(self, x):
        tokens = self.embed(x)
        maps = []
        for block in self.blocks:
            tokens, attn = block(tokens)
            maps.append(attn)
        return self.classify(tokens), torch.stack(maps, dim=1)


def randomize_parameters(model, seed=0):
    """Overwrite parameters with a generic random point (fan-in scaled weights).

    Used for gradient checks, where the small default initialisation leaves
    many gradients below finite-difference resolution.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
            if p.ndim == 2:
                p.copy_(noise / math.sqrt(p.shape[-1]))
            elif "norm" in name and name.endswith("weight"):
                p.copy_(1.0 + 0.1 * noise)
            else:
                p.copy_(0.5 * noise)
    return model


def reduce_attention(weights, mode="column"):
    """Collapse ``(..., N + 1, N + 1)`` attention to a per-patch ``(..., N)`` vector.

    ``column``: mean attention each patch receives from the patch queries
    (CLS row and column dropped). ``row``: mean over keys per patch query.
    ``cls``: the CLS query's attention to each patch.
    """
    if mode not in REDUCTIONS:
        raise InvalidParameterError(f"reduction must be one of {REDUCTIONS}, got {mode!r}")
    if not torch.is_tensor(weights):
        weights = np.asarray(weights, dtype=np.float64)
    if mode == "column":
        return weights[..., 1:, 1:].mean(-2)
    if mode == "row":
        return weights[..., 1:, 1:].mean(-1)
    return weights[..., 0, 1:]


def render_attention_map(a, grid_size, patch_size):
    """Nearest-neighbour upsample of a patch vector, min-max scaled to [0, 1].

    A constant vector renders as an all-0.5 image.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size != grid_size * grid_size:
        raise InvalidParameterError(f"vector of length {a.size} does not fit a {grid_size}x{grid_size} grid")
    img = np.kron(a.reshape(grid_size, grid_size), np.ones((patch_size, patch_size)))
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.full(img.shape, 0.5)
    return (img - lo) / (hi - lo)


def prune_to_depth(model, depth):
    """Copy of ``model`` keeping embeddings, the first ``depth`` blocks and the head."""
    if depth < 1 or depth > model.depth:
        raise InvalidParameterError(f"cannot prune a {model.depth}-layer model to {depth} layers")
    pruned = copy.deepcopy(model)
    pruned.blocks = nn.ModuleList(list(pruned.blocks)[:depth])
    pruned.config = ModelConfig(**{**asdict(model.config), "depth": depth})
    return pruned


def frames_to_tensor(frames, dtype=torch.float32):
    """Stack H x W x C uint8 (or float) frames into a (B, C, H, W) tensor in [0, 1]."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


@contextlib.contextmanager
def deterministic_mode(seed=None, enabled=True):
    """Seed every RNG and demand deterministic kernels for the duration."""
    if not enabled:
        yield
        return
    previous = torch.are_deterministic_algorithms_enabled()
    if seed is not None:
        random.seed(seed)
        np.random.seed(seed % 2**32)
        torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model, extra=None):
    """Write parameters to ``.npz`` with an embedded JSON manifest of names/shapes."""
    path = Path(path)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    manifest = {
        "config": asdict(model.config),
        "dtype": str(next(iter(state.values())).dtype),
        "tensors": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in state.items()}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint_manifest(path):
    with np.load(path) as data:
        return json.loads(bytes(data["__manifest__"]).decode())


def load_checkpoint(path, dtype=None):
    """Rebuild a plain ``VisionTransformer`` from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    for name, shape in manifest["tensors"].items():
        if list(state[name].shape) != shape:
            raise InvalidParameterError(f"tensor {name} has shape {list(state[name].shape)}, manifest says {shape}")
    model = VisionTransformer(ModelConfig(**manifest["config"]))
    model = model.to(state["pos_embed"].dtype if dtype is None else dtype)
    model.load_state_dict(state)
    model.eval()
    return model


def export_attention(path, attention):
    """Save a (L, A, T, T) attention tensor to ``.npz`` keyed ``layer{l}_head{a}``."""
    attention = attention.detach().cpu().numpy() if torch.is_tensor(attention) else np.asarray(attention)
    arrays = {
        f"layer{l}_head{a}": attention[l, a]
        for l in range(attention.shape[0])
        for a in range(attention.shape[1])
    }
    np.savez(path, **arrays)
    return Path(path)
