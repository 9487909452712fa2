"""Frozen vision-transformer backbone with per-task semantic adapters.

The backbone itself is never trained: its parameters are generated from a
seed (toy provider) or loaded from a named-array checkpoint and kept with
``requires_grad=False`` throughout. Per-task adapters are bottleneck modules
(down-projection, ReLU, up-projection) owned by the task bundle; their output
is merged residually into the image-token and semantic-prompt rows after each
adapted layer's feed-forward sub-block. Class-token and visual-prompt rows
bypass the adapters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import TaskBundle, TokenSequence, derive_seed
from .errors import ConfigurationError, NumericalError
from .serialization import arrays_to_bytes, load_arrays, save_arrays, sha256_bytes


@dataclass
class BackboneConfig:
    """Architecture of the (frozen) transformer and adapter placement."""

    num_layers: int = 2
    embed_dim: int = 32
    num_heads: int = 4
    image_size: int = 8
    patch_size: int = 4
    in_channels: int = 1
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    adapter_layers: tuple[int, ...] = (0, 1)
    seed: int = 11
    dtype: torch.dtype = torch.float64

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )
        bad = [l for l in self.adapter_layers if not 0 <= l < self.num_layers]
        if bad:
            raise ConfigurationError(f"adapter layers {bad} outside 0..{self.num_layers - 1}")
        self.adapter_layers = tuple(sorted(self.adapter_layers))

    @property
    def num_image_tokens(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class AdapterParams:
    """Bottleneck adapter weights for one backbone layer (row-vector maps)."""

    w_down: torch.Tensor  # [d, d_prime]
    w_up: torch.Tensor  # [d_prime, d]
    layer_index: int

    def __post_init__(self):
        if self.w_down.shape[1] != self.w_up.shape[0]:
            raise ConfigurationError("adapter bottleneck widths disagree")

    @property
    def bottleneck_dim(self) -> int:
        return self.w_down.shape[1]


@dataclass
class ForwardOutput:
    """Final-layer features with the position map preserved."""

    cls_feature: torch.Tensor  # [d]
    semantic_output_token: torch.Tensor  # [d]
    all_tokens: torch.Tensor  # [L, d]


def adapter_forward(x_in: torch.Tensor, params: AdapterParams) -> torch.Tensor:
    """Apply the bottleneck map row-wise: relu(x @ W_down) @ W_up."""
    if x_in.shape[-1] != params.w_down.shape[0]:
        raise ConfigurationError(
            f"adapter expects width {params.w_down.shape[0]}, got {x_in.shape[-1]}"
        )
    return torch.relu(x_in @ params.w_down) @ params.w_up


def init_adapter(
    layer_index: int, embed_dim: int, bottleneck_dim: int, generator: torch.Generator,
    dtype: torch.dtype = torch.float64,
) -> AdapterParams:
    """Fresh adapter: small random down-projection, zero up-projection.

    Zero W_up guarantees the first forward equals the frozen pretrained
    function exactly.
    """
    if bottleneck_dim >= embed_dim:
        raise ConfigurationError(
            f"bottleneck {bottleneck_dim} must be smaller than embed dim {embed_dim}"
        )
    w_down = torch.randn(embed_dim, bottleneck_dim, generator=generator, dtype=dtype)
    w_down *= embed_dim ** -0.5
    w_up = torch.zeros(bottleneck_dim, embed_dim, dtype=dtype)
    w_down.requires_grad_(True)
    w_up.requires_grad_(True)
    return AdapterParams(w_down=w_down, w_up=w_up, layer_index=layer_index)


class TransformerBlock(torch.nn.Module):
    """Pre-norm attention + feed-forward block with standard residuals."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d, dtype = cfg.embed_dim, cfg.dtype
        self.ln1 = torch.nn.LayerNorm(d, eps=cfg.ln_eps, dtype=dtype)
        self.q = torch.nn.Linear(d, d, dtype=dtype)
        self.k = torch.nn.Linear(d, d, dtype=dtype)
        self.v = torch.nn.Linear(d, d, dtype=dtype)
        self.out = torch.nn.Linear(d, d, dtype=dtype)
        self.ln2 = torch.nn.LayerNorm(d, eps=cfg.ln_eps, dtype=dtype)
        hidden = cfg.mlp_ratio * d
        self.fc1 = torch.nn.Linear(d, hidden, dtype=dtype)
        self.fc2 = torch.nn.Linear(hidden, d, dtype=dtype)
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        h, hd = self.num_heads, self.head_dim
        q = self.q(x).reshape(b, length, h, hd).transpose(1, 2)
        k = self.k(x).reshape(b, length, h, hd).transpose(1, 2)
        v = self.v(x).reshape(b, length, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        ctx = torch.softmax(scores, dim=-1) @ v
        ctx = ctx.transpose(1, 2).reshape(b, length, d)
        return self.out(ctx)

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class VisionBackbone(torch.nn.Module):
    """Patch embedding plus transformer blocks; weights always frozen."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d, dtype = cfg.embed_dim, cfg.dtype
        self.patch_proj = torch.nn.Linear(cfg.patch_dim, d, dtype=dtype)
        self.cls_token = torch.nn.Parameter(torch.zeros(d, dtype=dtype))
        self.pos_embed = torch.nn.Parameter(
            torch.zeros(1 + cfg.num_image_tokens, d, dtype=dtype)
        )
        self.blocks = torch.nn.ModuleList(
            TransformerBlock(cfg) for _ in range(cfg.num_layers)
        )
        self.final_ln = torch.nn.LayerNorm(d, eps=cfg.ln_eps, dtype=dtype)
        self.requires_grad_(False)

    # ------------------------------------------------------------------
    # providers
    # ------------------------------------------------------------------
    @classmethod
    def toy(cls, cfg: BackboneConfig) -> "VisionBackbone":
        """Deterministic random backbone generated from cfg.seed.

        Weights are random orthogonal matrices (QR with sign-fixed factors, so
        the result is unique and platform-stable) and biases are zero. A
        well-conditioned frozen map keeps query features informative, which a
        plain Gaussian init at this tiny scale does not.
        """
        model = cls(cfg)
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "backbone"))

        def orthogonal(rows: int, cols: int) -> torch.Tensor:
            a = torch.randn(max(rows, cols), min(rows, cols), generator=gen, dtype=cfg.dtype)
            q, r = torch.linalg.qr(a)
            q = q * torch.sign(torch.diagonal(r))
            return q if rows >= cols else q.T

        def fill(tensor: torch.Tensor, std: float) -> None:
            with torch.no_grad():
                tensor.copy_(
                    torch.randn(tensor.shape, generator=gen, dtype=cfg.dtype) * std
                )

        with torch.no_grad():
            fill(model.cls_token, 0.05)
            fill(model.pos_embed, 0.05)
            model.patch_proj.weight.copy_(orthogonal(*model.patch_proj.weight.shape))
            model.patch_proj.bias.zero_()
            for block in model.blocks:
                for ln in (block.ln1, block.ln2):
                    ln.weight.fill_(1.0)
                    ln.bias.zero_()
                scales = {"fc2": 0.7}
                for name in ("q", "k", "v", "out", "fc1", "fc2"):
                    lin = getattr(block, name)
                    lin.weight.copy_(orthogonal(*lin.weight.shape) * scales.get(name, 1.0))
                    lin.bias.zero_()
            model.final_ln.weight.fill_(1.0)
            model.final_ln.bias.zero_()
        model.requires_grad_(False)
        return model

    @classmethod
    def from_arrays(cls, cfg: BackboneConfig, arrays: dict[str, np.ndarray]) -> "VisionBackbone":
        model = cls(cfg)
        state = {k: torch.from_numpy(np.ascontiguousarray(v)).to(cfg.dtype) for k, v in arrays.items()}
        missing = set(model.canonical_state()) - set(state)
        if missing:
            raise ConfigurationError(f"checkpoint missing weights: {sorted(missing)[:4]} ...")
        with torch.no_grad():
            for name, tensor in model.canonical_state().items():
                tensor.copy_(state[name])
        model.requires_grad_(False)
        return model

    @classmethod
    def load(cls, cfg: BackboneConfig, path) -> "VisionBackbone":
        """Pretrained provider: read a named-array checkpoint from disk."""
        return cls.from_arrays(cfg, load_arrays(path))

    # ------------------------------------------------------------------
    # weight bookkeeping
    # ------------------------------------------------------------------
    def canonical_state(self) -> dict[str, torch.Tensor]:
        state: dict[str, torch.Tensor] = {
            "embed.weight": self.patch_proj.weight,
            "embed.bias": self.patch_proj.bias,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
            "final_ln.weight": self.final_ln.weight,
            "final_ln.bias": self.final_ln.bias,
        }
        for i, block in enumerate(self.blocks):
            prefix = f"layers.{i}."
            state[prefix + "ln1.weight"] = block.ln1.weight
            state[prefix + "ln1.bias"] = block.ln1.bias
            for name in ("q", "k", "v", "out", "fc1", "fc2"):
                lin = getattr(block, name)
                where = "attn." if name in ("q", "k", "v", "out") else "mlp."
                state[prefix + where + name + ".weight"] = lin.weight
                state[prefix + where + name + ".bias"] = lin.bias
            state[prefix + "ln2.weight"] = block.ln2.weight
            state[prefix + "ln2.bias"] = block.ln2.bias
        return state

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.canonical_state().items()}

    def save(self, path) -> None:
        save_arrays(path, self.to_arrays())

    def weights_checksum(self) -> str:
        return sha256_bytes(arrays_to_bytes(self.to_arrays()))

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------
    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """[B, C, H, W] -> [B, L_img, patch_dim] in row-major patch order."""
        cfg = self.cfg
        if images.ndim == 3:
            images = images.unsqueeze(1)
        b, c, hgt, wid = images.shape
        if (c, hgt, wid) != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ConfigurationError(
                f"image shaped {(c, hgt, wid)} does not match backbone "
                f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})"
            )
        p = cfg.patch_size
        x = images.reshape(b, c, hgt // p, p, wid // p, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, cfg.num_image_tokens, cfg.patch_dim)
        return x

    def image_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Embedding-layer output: projected patches, no position terms yet."""
        return self.patch_proj(self.patchify(images.to(self.cfg.dtype)))

    def _run_blocks(
        self,
        tokens: torch.Tensor,
        adapter_stack: dict[int, AdapterParams] | None,
        adapted_rows: slice | None,
    ) -> torch.Tensor:
        """Shared trunk: positional terms, blocks with optional adapters, final norm.

        ``tokens`` is [B, L, d] with the class token first and image tokens
        next; positional embeddings cover only those rows, prompt rows are
        position-free.
        """
        cfg = self.cfg
        length = tokens.shape[1]
        pos_rows = 1 + cfg.num_image_tokens
        pos = F.pad(self.pos_embed, (0, 0, 0, length - pos_rows))
        x = tokens + pos
        for i, block in enumerate(self.blocks):
            h = x + block.attention(block.ln1(x))
            x = h + block.feed_forward(block.ln2(h))
            if adapter_stack is not None and i in cfg.adapter_layers:
                params = adapter_stack.get(i)
                if params is None:
                    raise ConfigurationError(
                        f"layer {i} is configured for adaptation but the bundle "
                        f"carries no adapter for it"
                    )
                rows = adapted_rows if adapted_rows is not None else slice(0, 0)
                branch = adapter_forward(h[:, rows], params)
                x = x + F.pad(branch, (0, 0, rows.start, length - rows.stop))
        return self.final_ln(x)

    def forward_batch(
        self, images: torch.Tensor, bundle: TaskBundle
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Prompted forward over a batch; returns (cls [B,d], sem [B,d], tokens)."""
        cfg = self.cfg
        img_tok = self.image_tokens(images)
        b = img_tok.shape[0]
        cls = self.cls_token.expand(b, 1, cfg.embed_dim)
        sem = bundle.semantic_prompt.reshape(1, 1, cfg.embed_dim).expand(b, 1, cfg.embed_dim)
        vis = bundle.visual_prompt.unsqueeze(0).expand(b, -1, cfg.embed_dim)
        tokens = torch.cat([cls, img_tok, sem, vis], dim=1)
        adapted = slice(1, 1 + cfg.num_image_tokens + 1)  # image tokens + semantic prompt
        out = self._run_blocks(tokens, bundle.adapter_stack, adapted)
        sem_index = 1 + cfg.num_image_tokens
        return out[:, 0], out[:, sem_index], out

    def forward(self, seq: TokenSequence, bundle: TaskBundle) -> ForwardOutput:
        """Run one assembled token sequence through the adapted backbone."""
        cfg = self.cfg
        if seq.num_image_tokens != cfg.num_image_tokens:
            raise ConfigurationError(
                f"sequence has {seq.num_image_tokens} image tokens, backbone "
                f"expects {cfg.num_image_tokens}"
            )
        tokens = seq.to_matrix().unsqueeze(0)
        adapted = slice(1, 1 + cfg.num_image_tokens + 1)
        out = self._run_blocks(tokens, bundle.adapter_stack, adapted)[0]
        return ForwardOutput(
            cls_feature=out[seq.class_index],
            semantic_output_token=out[seq.semantic_index],
            all_tokens=out,
        )

    def query_features(self, images: torch.Tensor) -> torch.Tensor:
        """Frozen, prompt-free, adapter-free class-token features.

        This is the query path used for key matching and prototypes; it never
        sees task parameters, so its output is constant across sessions.
        """
        single = images.ndim == 2
        if single:
            images = images.unsqueeze(0)
        with torch.no_grad():
            img_tok = self.image_tokens(images)
            b = img_tok.shape[0]
            cls = self.cls_token.expand(b, 1, self.cfg.embed_dim)
            tokens = torch.cat([cls, img_tok], dim=1)
            out = self._run_blocks(tokens, adapter_stack=None, adapted_rows=None)
        feats = out[:, 0]
        return feats[0] if single else feats


def finite_difference_check(
    loss_fn,
    params: dict[str, torch.Tensor],
    epsilon: float = 1e-5,
) -> dict[str, float]:
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be a closure over ``params`` returning a scalar tensor.
    Every coordinate of every named tensor is perturbed. The reported error is
    |g_a - g_n| / max(1e-6, |g_a|, |g_n|), an absolute-relative hybrid that
    stays meaningful for near-zero gradients. Returns per-parameter maxima
    plus the overall ``"max"``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ConfigurationError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    for tensor in params.values():
        if tensor.grad is not None:
            tensor.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is non-finite ({float(loss.detach())})")
    loss.backward()
    grads = {
        name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
        for name, t in params.items()
    }
    errors: dict[str, float] = {}
    with torch.no_grad():
        for name, tensor in params.items():
            flat = tensor.reshape(-1)
            worst = 0.0
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + epsilon
                up = float(loss_fn())
                flat[idx] = orig - epsilon
                down = float(loss_fn())
                flat[idx] = orig
                numeric = (up - down) / (2.0 * epsilon)
                analytic = grads[name].reshape(-1)[idx].item()
                denom = max(1e-6, abs(analytic), abs(numeric))
                worst = max(worst, abs(analytic - numeric) / denom)
            errors[name] = worst
    errors["max"] = max(v for k, v in errors.items() if k != "max") if errors else 0.0
    return errors
