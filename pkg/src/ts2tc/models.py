"""Network assemblies: temporal encoder/decoder, zero decoder layers, masked
spectrogram autoencoder, bilinear temporal-spectrogram fusion and heads."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .nn import (
    AttentionBlock,
    BatchNorm,
    BiCausalConv1d,
    Conv1d,
    Dropout,
    PatchEmbed,
    init_module,
    zero_module,
)


@dataclass(frozen=True)
class TemporalEncoderSpec:
    input_channels: int = 5
    kernels: tuple[int, int, int] = (3, 5, 9)
    filters: int = 4
    n_blocks: int = 3
    embed_dim: int = 8
    guide_stages: tuple[int, ...] = (1, 2, 3)
    guide_kernel: int = 3

    def __post_init__(self):
        if self.embed_dim < 1 or self.filters < 1 or self.input_channels < 1:
            raise DataError("encoder dimensions must be positive")
        if self.guide_stages and self.n_blocks < 3:
            raise DataError("guided encoders need at least 3 blocks")
        if any(not 1 <= s <= self.n_blocks for s in self.guide_stages):
            raise DataError(f"guide stages {self.guide_stages} outside 1..{self.n_blocks}")
        if len(self.guide_stages) > 3:
            raise DataError("at most three guided stages (vpg, apg, jpg)")

    @property
    def block_channels(self) -> int:
        return len(self.kernels) * self.filters


@dataclass(frozen=True)
class MlpDecoderSpec:
    in_dim: int = 16
    hidden: tuple[int, int, int] = (64, 64, 64)
    out_channels: int = 5
    anchor_len: int = 140
    dropout: float = 0.1

    def __post_init__(self):
        if len(self.hidden) != 3:
            raise DataError("the anchor decoder has exactly three hidden layers")

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_channels * self.anchor_len]


@dataclass(frozen=True)
class SpecModelSpec:
    patch: tuple[int, int] = (8, 8)
    n_patches: int = 27
    embed_dim: int = 16
    enc_depth: int = 2
    dec_depth: int = 1
    heads: int = 2
    mlp_ratio: int = 2
    use_pos: bool = True

    def __post_init__(self):
        if min(self.embed_dim, self.enc_depth, self.dec_depth, self.heads, self.n_patches) < 1:
            raise DataError("spectrogram model dimensions must be positive")
        if self.embed_dim % self.heads:
            raise DataError("embed_dim must be divisible by heads")

    @property
    def patch_pixels(self) -> int:
        return self.patch[0] * self.patch[1]


# -- temporal domain ---------------------------------------------------------


class NetBlock(nn.Module):
    """Inception-style block: ReLU(BN(concat(convs_k(x)) + bottleneck(x)))."""

    def __init__(self, in_ch: int, filters: int, kernels):
        super().__init__()
        self.branches = nn.ModuleList(Conv1d(in_ch, filters, k) for k in kernels)
        self.bottleneck = Conv1d(in_ch, filters * len(kernels), 1)
        self.bn = BatchNorm(filters * len(kernels))

    def forward(self, x):
        multi = torch.cat([b(x) for b in self.branches], dim=1)
        return torch.relu(self.bn(multi + self.bottleneck(x)))


class GuideBlock(nn.Module):
    """BN(Conv1d(xpg)): projects one derivative channel onto a block's width."""

    def __init__(self, out_ch: int, kernel: int):
        super().__init__()
        self.conv = Conv1d(1, out_ch, kernel)
        self.bn = BatchNorm(out_ch)

    def forward(self, xpg):
        return self.bn(self.conv(xpg))


class TemporalEncoder(nn.Module):
    """Stack of NetBlocks; guided stages add BN(Conv(derivative)) to the block output.

    Guided stages consume vpg, apg, jpg in order. Closes with global average
    pooling over time and a linear projection to ``embed_dim``.
    """

    def __init__(self, spec: TemporalEncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        width = spec.block_channels
        chans = [spec.input_channels] + [width] * spec.n_blocks
        self.blocks = nn.ModuleList(
            NetBlock(chans[i], spec.filters, spec.kernels) for i in range(spec.n_blocks)
        )
        self.guides = nn.ModuleDict(
            {str(s): GuideBlock(width, spec.guide_kernel) for s in spec.guide_stages}
        )
        self.proj = nn.Linear(width, spec.embed_dim)
        init_module(self, seed)

    def forward(self, x, xpg=None):
        if x.dim() != 3 or x.shape[1] != self.spec.input_channels:
            raise DataError(
                f"encoder expects (batch, {self.spec.input_channels}, time), got {tuple(x.shape)}"
            )
        if xpg is not None and (xpg.shape[0] != x.shape[0] or xpg.shape[-1] != x.shape[-1]):
            raise DataError("derivative stack is not aligned with the encoder input")
        h = x
        order = {s: i for i, s in enumerate(self.spec.guide_stages)}
        for l, block in enumerate(self.blocks, start=1):
            out = block(h)
            if xpg is not None and l in order:
                out = out + self.guides[str(l)](xpg[:, order[l] : order[l] + 1])
            h = out
        return self.proj(h.mean(dim=-1))


class AnchorDecoder(nn.Module):
    """MLP g: stage j computes h <- dropout_j(W_j h + b_j).

    Dropout sits between adjacent hidden layers, i.e. on the outputs of the
    first two stages; the remaining stages are purely affine.
    """

    def __init__(self, spec: MlpDecoderSpec, seed: int = 0, zero_output: bool = False):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.layers = nn.ModuleList(nn.Linear(w[i], w[i + 1]) for i in range(len(w) - 1))
        self.dropouts = nn.ModuleList(
            Dropout(spec.dropout if i in (0, 1) else 0.0, seed + i) for i in range(len(self.layers))
        )
        init_module(self, seed)
        if zero_output:
            zero_module(self.layers[-1])

    @property
    def depth(self) -> int:
        return len(self.layers)

    def stage(self, j: int, h):
        return self.dropouts[j](self.layers[j](h))

    def trace(self, h) -> list[torch.Tensor]:
        if h.shape[-1] != self.spec.in_dim:
            raise DataError(f"decoder expects width {self.spec.in_dim}, got {h.shape[-1]}")
        out = []
        for j in range(self.depth):
            h = self.stage(j, h)
            out.append(h)
        return out

    def forward(self, h):
        y = self.trace(h)[-1]
        return y.reshape(h.shape[0], self.spec.out_channels, self.spec.anchor_len)


class _OpenRelu(torch.autograd.Function):
    """ReLU whose subgradient at exactly 0 is taken as 1.

    With W0 = b0 = 0 every pre-activation sits at 0; the usual choice of 0
    there would leave the zero layer stuck at the identity forever.
    """

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp_min(0)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * (x >= 0).to(g.dtype)


class ZeroDecoderLayer(nn.Module):
    """out = h2 + dropout(ReLU(BN(W0 h1 + b0))) with W0, b0 zero-initialised."""

    def __init__(self, in_dim: int, out_dim: int, dropout: float = 0.0, seed: int = 0):
        super().__init__()
        self.linear = zero_module(nn.Linear(in_dim, out_dim))
        self.bn = BatchNorm(out_dim)
        self.dropout = Dropout(dropout, seed)

    def forward(self, h1, h2):
        if h1.shape[-1] != self.linear.in_features or h2.shape[-1] != self.linear.out_features:
            raise DataError(
                f"ZDL expects h1 width {self.linear.in_features} and h2 width {self.linear.out_features}"
            )
        a = _OpenRelu.apply(self.bn(self.linear(h1)))
        return h2 + self.dropout(a)


def zdl_stack_for(decoder: AnchorDecoder, seed: int = 0) -> nn.ModuleList:
    w = decoder.spec.widths
    return nn.ModuleList(
        ZeroDecoderLayer(w[j], w[j + 1], decoder.dropouts[j].rate, seed + j)
        for j in range(decoder.depth)
    )


def zdl_forward(zdl: ZeroDecoderLayer, h1, h2):
    return zdl(h1, h2)


def temporal_encode(encoder: TemporalEncoder, x, derivs=None):
    """Embed one (channels, time) matrix or a (batch, channels, time) stack."""
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    single = x.dim() == 2
    if single:
        x = x[None]
    if derivs is not None:
        d = derivs.as_array() if hasattr(derivs, "as_array") else np.asarray(derivs)
        d = torch.as_tensor(d, dtype=torch.float64)
        derivs = d[None] if d.dim() == 2 else d
    h = encoder(x, derivs)
    return h[0] if single else h


def temporal_decode(decoder: AnchorDecoder, h, mode: str = "eval"):
    decoder.train(mode == "train")
    h = torch.as_tensor(h, dtype=torch.float64)
    single = h.dim() == 1
    out = decoder(h[None] if single else h)
    return out[0] if single else out


# -- spectrogram domain ------------------------------------------------------


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(torch.tensor(10000.0), i / dim)
    pe = torch.zeros(n, dim)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)[:, : dim // 2]
    return pe


def _gather_rows(table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return table[idx]  # (B, P, D) from (N, D) and (B, P)


class SpecEncoder(nn.Module):
    """Patch embedding + positions on visible patches, then attention blocks."""

    def __init__(self, spec: SpecModelSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.embed = PatchEmbed(spec.patch_pixels, spec.embed_dim)
        self.register_buffer("pos", sinusoidal_positions(spec.n_patches, spec.embed_dim))
        self.blocks = nn.ModuleList(
            AttentionBlock(spec.embed_dim, spec.heads, spec.mlp_ratio) for _ in range(spec.enc_depth)
        )
        self.norm = nn.LayerNorm(spec.embed_dim)
        init_module(self, seed)

    def forward(self, visible, vis_idx):
        if visible.shape[1] == 0:
            raise DataError("encoder needs at least one visible patch")
        if visible.shape[-1] != self.spec.patch_pixels:
            raise DataError(f"patches must have {self.spec.patch_pixels} pixels")
        z = self.embed(visible)
        if self.spec.use_pos:
            z = z + _gather_rows(self.pos, vis_idx)
        for blk in self.blocks:
            z = blk(z)
        return self.norm(z)


class DecoderEmbed(nn.Module):
    """Token-wise projection plus positions of the given (visible) indices."""

    def __init__(self, spec: SpecModelSpec, pos: torch.Tensor):
        super().__init__()
        self.spec = spec
        self.proj = nn.Linear(spec.embed_dim, spec.embed_dim)
        self.register_buffer("pos", pos.clone())

    def forward(self, z, idx):
        z = self.proj(z)
        return z + _gather_rows(self.pos, idx) if self.spec.use_pos else z


class BlockStage(nn.Module):
    """Adapter giving an attention block the (tokens, idx) stage signature."""

    def __init__(self, block: AttentionBlock):
        super().__init__()
        self.block = block

    def forward(self, z, idx):
        return self.block(z)


class SpecDecoder(nn.Module):
    """Mask tokens at masked positions, positions re-added, attention blocks,
    per-patch linear projection back to pixels."""

    def __init__(self, spec: SpecModelSpec, seed: int = 0, zero_output: bool = False):
        super().__init__()
        self.spec = spec
        pos = sinusoidal_positions(spec.n_patches, spec.embed_dim)
        self.embed = DecoderEmbed(spec, pos)
        self.mask_token = nn.Parameter(torch.zeros(spec.embed_dim))
        self.blocks = nn.ModuleList(
            BlockStage(AttentionBlock(spec.embed_dim, spec.heads, spec.mlp_ratio))
            for _ in range(spec.dec_depth)
        )
        self.norm = nn.LayerNorm(spec.embed_dim)
        self.pred = nn.Linear(spec.embed_dim, spec.patch_pixels)
        init_module(self, seed)
        if zero_output:
            zero_module(self.pred)

    def stages(self) -> list[nn.Module]:
        """Token-to-token stages used by the dual-process transfer."""
        return [self.embed, *self.blocks]

    def forward(self, z, vis_idx, masked_idx):
        B, P, D = z.shape
        N = self.spec.n_patches
        if P + masked_idx.shape[1] != N:
            raise DataError(f"visible ({P}) + masked ({masked_idx.shape[1]}) != {N} patches")
        tokens = self.embed.proj(z)
        full = torch.cat([tokens, self.mask_token.expand(B, masked_idx.shape[1], D)], dim=1)
        order = torch.cat([vis_idx, masked_idx], dim=1)
        restore = torch.argsort(order, dim=1)
        full = torch.gather(full, 1, restore[..., None].expand(B, N, D))
        if self.spec.use_pos:
            full = full + self.embed.pos[None]
        for stage in self.blocks:
            full = stage.block(full)
        return self.pred(self.norm(full))  # (B, N, patch_pixels)


def patches_to_grid(patches: torch.Tensor, patch, padded_shape) -> torch.Tensor:
    h, w = patch
    H, W = padded_shape
    B = patches.shape[0]
    return patches.reshape(B, H // h, W // w, h, w).permute(0, 1, 3, 2, 4).reshape(B, H, W)


def _patch_batch(patch_sets):
    if not isinstance(patch_sets, (list, tuple)):
        patch_sets = [patch_sets]
    if len({ps.visible_idx.size for ps in patch_sets}) != 1:
        raise DataError("all patch sets in a batch need the same visible count")
    patches = torch.as_tensor(np.stack([ps.patches for ps in patch_sets]))
    vis = torch.as_tensor(np.stack([ps.visible_idx for ps in patch_sets]), dtype=torch.long)
    masked = torch.as_tensor(np.stack([ps.masked_idx for ps in patch_sets]), dtype=torch.long)
    return patches, vis, masked


def spec_encode(encoder: SpecEncoder, patch_sets):
    patches, vis, _ = _patch_batch(patch_sets)
    visible = torch.gather(patches, 1, vis[..., None].expand(-1, -1, patches.shape[-1]))
    return encoder(visible, vis)


def spec_decode(decoder: SpecDecoder, z, patch_sets):
    _, vis, masked = _patch_batch(patch_sets)
    ps = patch_sets[0] if isinstance(patch_sets, (list, tuple)) else patch_sets
    if z.shape[1] != vis.shape[1]:
        raise DataError("latent token count does not match the visible patch count")
    return patches_to_grid(decoder(z, vis, masked), ps.patch_size, ps.padded_shape)


class UnlockedStage(nn.Module):
    """Trainable copy of a decoder stage followed by a zero-initialised projection."""

    def __init__(self, stage: nn.Module, dim: int):
        super().__init__()
        self.stage = copy.deepcopy(stage)
        self.out = zero_module(nn.Linear(dim, dim))

    def forward(self, z, idx):
        return self.out(self.stage(z, idx))


# -- fusion and heads --------------------------------------------------------


class Nbtsf(nn.Module):
    """Factorised bilinear temporal-spectrogram fusion.

    ``F[b, i, j] = (W1 h)_i U_j * (W2 z)_i V_j`` (shape k x l, k = min(dim h, dim z)).
    Each refinement round re-derives the two k-vectors from F: the S2T path
    mixes the l columns with a 1x1 conv then runs a bicausal conv along k; the
    T2S path runs the bicausal conv first. Output adds the broadcast l-vectors
    W1' h and W2' z to every row of F.
    """

    def __init__(self, h_dim: int, z_dim: int, l: int = 8, iterations: int = 2, kernel: int = 3, seed: int = 0):
        super().__init__()
        if l < 1 or iterations < 0:
            raise DataError("NBTSF needs l >= 1 and iterations >= 0")
        self.h_dim, self.z_dim, self.l, self.iterations = h_dim, z_dim, l, iterations
        self.k = min(h_dim, z_dim)
        self.W1 = nn.Linear(h_dim, self.k, bias=False)
        self.W2 = nn.Linear(z_dim, self.k, bias=False)
        self.U = nn.Parameter(torch.zeros(l))
        self.V = nn.Parameter(torch.zeros(l))
        self.W1p = nn.Linear(h_dim, l, bias=False)
        self.W2p = nn.Linear(z_dim, l, bias=False)
        self.s2t_mix = Conv1d(l, 1, 1)
        self.s2t_bic = BiCausalConv1d(1, 1, kernel)
        self.s2t_bn = BatchNorm(1)
        self.t2s_bic = BiCausalConv1d(l, l, kernel)
        self.t2s_mix = Conv1d(l, 1, 1)
        self.t2s_bn = BatchNorm(1)
        init_module(self, seed)
        g = torch.Generator().manual_seed(seed + 7919)
        with torch.no_grad():
            self.U.copy_(torch.rand(l, generator=g) * 2 - 1)
            self.V.copy_(torch.rand(l, generator=g) * 2 - 1)

    def bilinear(self, p, q):
        return (p[:, :, None] * self.U) * (q[:, :, None] * self.V)

    def forward(self, h, z):
        if h.shape[-1] != self.h_dim or z.shape[-1] != self.z_dim or h.shape[0] != z.shape[0]:
            raise DataError(
                f"NBTSF expects h (B, {self.h_dim}) and z (B, {self.z_dim}), "
                f"got {tuple(h.shape)} and {tuple(z.shape)}"
            )
        f = self.bilinear(self.W1(h), self.W2(z))
        for _ in range(self.iterations):
            seq = f.transpose(1, 2)  # (B, l, k): channels l along axis k
            p = self.s2t_bn(self.s2t_bic(self.s2t_mix(seq)))[:, 0]
            q = self.t2s_bn(self.t2s_mix(self.t2s_bic(seq)))[:, 0]
            f = self.bilinear(p, q)
        return f + self.W1p(h)[:, None, :] + self.W2p(z)[:, None, :]


def nbtsf_fuse(module: Nbtsf, h, z, mode: str = "eval"):
    module.train(mode == "train")
    h = torch.as_tensor(h, dtype=torch.float64)
    z = torch.as_tensor(z, dtype=torch.float64)
    single = h.dim() == 1
    out = module(h[None] if single else h, z[None] if single else z)
    return out[0] if single else out


class MlpClassifier(nn.Module):
    """Order classifier on flattened fusion features; returns logits.

    The output layer starts at zero so the untrained classifier is uniform.
    """

    def __init__(self, in_dim: int, hidden: int = 32, n_out: int = 2, seed: int = 0):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU())
        self.out = nn.Linear(hidden, n_out)
        init_module(self, seed)
        zero_module(self.out)

    def forward(self, f):
        return self.out(self.trunk(f.flatten(1)))


class RegressionHead(nn.Module):
    """Zero-initialised linear regression head y = W h + b."""

    def __init__(self, in_dim: int):
        super().__init__()
        self.linear = zero_module(nn.Linear(in_dim, 1))

    def forward(self, h):
        return self.linear(h.flatten(1))[:, 0]


@dataclass
class TemporalModels:
    encoder: TemporalEncoder
    decoder: AnchorDecoder


def build_temporal(enc_spec: TemporalEncoderSpec, anchor_len: int, hidden=(64, 64, 64), seed: int = 0,
                   zero_output: bool = False) -> TemporalModels:
    dec_spec = MlpDecoderSpec(
        in_dim=2 * enc_spec.embed_dim,
        hidden=tuple(hidden),
        out_channels=enc_spec.input_channels,
        anchor_len=anchor_len,
    )
    return TemporalModels(
        TemporalEncoder(enc_spec, seed), AnchorDecoder(dec_spec, seed + 1, zero_output)
    )
