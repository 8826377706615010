"""Layer catalogue, parameter store, Adagrad and finite-difference gradient checks.

Reverse-mode differentiation is delegated to torch; everything runs in float64.
Importing this module sets torch's default dtype to float64.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, NumericalError

torch.set_default_dtype(torch.float64)

ADAGRAD_EPS = 1e-10
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

LAYER_KINDS = (
    "conv1d",
    "bicausal_conv1d",
    "batchnorm",
    "linear",
    "relu",
    "dropout",
    "softmax",
    "attention_block",
    "patch_embed",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 1
    out_dim: int = 1
    kernel: int = 1
    stride: int = 1
    heads: int = 1
    rate: float = 0.0
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DataError(f"unknown layer kind {self.kind!r}")
        for name in ("in_dim", "out_dim", "kernel", "stride", "heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise DataError(f"{self.kind}: {name} must be positive")
        if not 0 <= self.rate < 1:
            raise DataError(f"dropout rate must lie in [0, 1), got {self.rate}")


class Conv1d(nn.Module):
    """Cross-correlation with bias and 'same' zero padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.weight = nn.Parameter(torch.zeros(out_ch, in_ch, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.weight.shape[1]:
            raise DataError(
                f"conv1d expects (batch, {self.weight.shape[1]}, time), got {tuple(x.shape)}"
            )
        k = self.kernel
        x = F.pad(x, ((k - 1) // 2, k // 2))
        return F.conv1d(x, self.weight, self.bias, stride=self.stride)


class BiCausalConv1d(nn.Module):
    """Sum of a causal (left-padded) and an anti-causal (right-padded) convolution."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__()
        self.kernel = kernel
        self.weight_fwd = nn.Parameter(torch.zeros(out_ch, in_ch, kernel))
        self.weight_bwd = nn.Parameter(torch.zeros(out_ch, in_ch, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.weight_fwd.shape[1]:
            raise DataError(
                f"bicausal conv expects (batch, {self.weight_fwd.shape[1]}, time), got {tuple(x.shape)}"
            )
        p = self.kernel - 1
        causal = F.conv1d(F.pad(x, (p, 0)), self.weight_fwd)
        anti = F.conv1d(F.pad(x, (0, p)), self.weight_bwd)
        return causal + anti + self.bias[None, :, None]


class BatchNorm(nn.Module):
    """Batch normalisation over (batch, C) or (batch, C, time) inputs.

    When ``stats_frozen`` is set the layer still normalises with batch
    statistics in train mode but never touches its running buffers.
    """

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.stats_frozen = False

    def forward(self, x):
        if x.dim() not in (2, 3) or x.shape[1] != self.weight.shape[0]:
            raise DataError(f"batchnorm expects (batch, {self.weight.shape[0]}[, time]), got {tuple(x.shape)}")
        if self.training:
            update = not self.stats_frozen
            return F.batch_norm(
                x,
                self.running_mean if update else None,
                self.running_var if update else None,
                self.weight,
                self.bias,
                True,
                self.momentum,
                self.eps,
            )
        return F.batch_norm(
            x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps
        )


class Dropout(nn.Module):
    """Inverted dropout drawing masks from a private, seedable generator."""

    def __init__(self, rate: float, seed: int = 0):
        super().__init__()
        self.rate = rate
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self.generator = torch.Generator().manual_seed(int(seed))

    def forward(self, x):
        if not self.training or self.rate == 0:
            return x
        keep = torch.rand(x.shape, generator=self.generator) >= self.rate
        return x * keep / (1 - self.rate)


class Softmax(nn.Module):
    def forward(self, x):
        return torch.softmax(x, dim=-1)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise DataError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class AttentionBlock(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        if x.dim() != 3 or x.shape[-1] != self.norm1.normalized_shape[0]:
            raise DataError(f"attention block expects (batch, tokens, {self.norm1.normalized_shape[0]})")
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class PatchEmbed(nn.Module):
    """Linear projection of flattened patches to tokens."""

    def __init__(self, patch_pixels: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(patch_pixels, dim)

    def forward(self, x):
        return self.proj(x)


def init_module(module: nn.Module, seed: int) -> nn.Module:
    """He-uniform fan-in init of every weight matrix / kernel; zero biases.

    Normalisation layers keep unit scale and zero shift.
    """
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (BatchNorm, nn.LayerNorm)):
                m.weight.fill_(1.0)
                m.bias.zero_()
                continue
            for name, p in m.named_parameters(recurse=False):
                if name == "bias":
                    p.zero_()
                elif p.dim() >= 2:
                    fan_in = p[0].numel()
                    bound = math.sqrt(6.0 / fan_in)
                    p.copy_(torch.rand(p.shape, generator=g) * 2 * bound - bound)
    return module


def zero_module(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def build_layer(spec: LayerSpec, seed: int = 0) -> nn.Module:
    kind = spec.kind
    if kind == "conv1d":
        layer = Conv1d(spec.in_dim, spec.out_dim, spec.kernel, spec.stride)
    elif kind == "bicausal_conv1d":
        layer = BiCausalConv1d(spec.in_dim, spec.out_dim, spec.kernel)
    elif kind == "batchnorm":
        layer = BatchNorm(spec.in_dim)
    elif kind == "linear":
        layer = nn.Linear(spec.in_dim, spec.out_dim)
    elif kind == "relu":
        layer = nn.ReLU()
    elif kind == "dropout":
        return Dropout(spec.rate, seed)
    elif kind == "softmax":
        layer = Softmax()
    elif kind == "attention_block":
        layer = AttentionBlock(spec.in_dim, spec.heads, spec.mlp_ratio)
    else:
        layer = PatchEmbed(spec.in_dim, spec.out_dim)
    return init_module(layer, seed)


def reseed_dropout(module: nn.Module, seed: int) -> None:
    for i, m in enumerate(m for m in module.modules() if isinstance(m, Dropout)):
        m.reseed(seed * 1000003 + i)


@torch.no_grad()
def recalibrate_batchnorm(model: nn.Module, forward: Callable[[], object]) -> None:
    """Reset the running statistics of every non-frozen BatchNorm in ``model``
    to the batch statistics of one ``forward()`` call (dropout off).

    Used after training with a single full-data pass so that each layer's
    running stats match what its inputs look like in eval mode.
    """
    bns = [m for m in model.modules() if isinstance(m, BatchNorm) and not m.stats_frozen]
    if not bns:
        return
    was_training = model.training
    model.eval()
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 1.0
        m.train()
    try:
        forward()
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        model.train(was_training)


def layer_forward(layer: nn.Module, x: torch.Tensor, mode: str = "train", seed: int | None = None):
    if mode not in ("train", "eval"):
        raise DataError(f"mode must be 'train' or 'eval', got {mode!r}")
    layer.train(mode == "train")
    if seed is not None:
        reseed_dropout(layer, seed)
    out = layer(x)
    if not torch.all(torch.isfinite(out)):
        raise NumericalError(f"{type(layer).__name__} produced non-finite output")
    return out


class ParamStore:
    """Named parameter groups with freeze flags and Adagrad accumulators."""

    def __init__(self, groups: dict[str, nn.Module] | None = None):
        self.groups: dict[str, nn.Module] = {}
        self.trainable: dict[str, bool] = {}
        self.accumulators: dict[str, torch.Tensor] = {}
        for name, module in (groups or {}).items():
            self.add(name, module)

    def add(self, name: str, module: nn.Module, trainable: bool = True) -> None:
        if "." in name or "/" in name:
            raise DataError(f"group names may not contain '.' or '/': {name!r}")
        self.groups[name] = module
        # applied explicitly: a module copied from a frozen one must not stay frozen
        self.set_trainable(name, trainable)

    def __getitem__(self, name: str) -> nn.Module:
        return self.groups[name]

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def named_parameters(self, group: str | None = None) -> Iterator[tuple[str, nn.Parameter]]:
        names = [group] if group is not None else list(self.groups)
        for g in names:
            for pname, p in self.groups[g].named_parameters():
                yield f"{g}.{pname}", p

    def set_trainable(self, group: str, trainable: bool) -> None:
        if group not in self.groups:
            raise DataError(f"unknown parameter group {group!r}")
        module = self.groups[group]
        self.trainable[group] = bool(trainable)
        for p in module.parameters():
            p.requires_grad_(trainable)
            if not trainable:
                p.grad = None
        for m in module.modules():
            if isinstance(m, BatchNorm):
                m.stats_frozen = not trainable

    def train(self, mode: bool = True) -> None:
        for module in self.groups.values():
            module.train(mode)

    def eval(self) -> None:
        self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for g, module in self.groups.items():
            for k, v in module.state_dict().items():
                out[f"{g}.{k}"] = v.detach().clone()
        return out

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        """Validate every group first so a bad state leaves the store untouched."""
        staged = {}
        for g, module in self.groups.items():
            prefix = f"{g}."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            own = module.state_dict()
            missing = set(own) - set(sub)
            if missing:
                raise DataError(f"group {g!r}: state missing {sorted(missing)[:3]}")
            extra = set(sub) - set(own)
            if extra:
                raise DataError(f"group {g!r}: unexpected entries {sorted(extra)[:3]}")
            for k, v in sub.items():
                if tuple(own[k].shape) != tuple(v.shape):
                    raise DataError(f"{g}.{k}: shape {tuple(v.shape)} != {tuple(own[k].shape)}")
            staged[g] = {k: torch.as_tensor(v).to(own[k].dtype) for k, v in sub.items()}
        for g, sub in staged.items():
            self.groups[g].load_state_dict(sub)

    def snapshot(self, group: str | None = None) -> dict[str, torch.Tensor]:
        names = [group] if group is not None else list(self.groups)
        return {k: v for k, v in self.state_dict().items() if k.split(".", 1)[0] in names}


def set_trainable(params: ParamStore, group: str, trainable: bool) -> None:
    params.set_trainable(group, trainable)


def backward(output: torch.Tensor, params: ParamStore | None = None) -> None:
    """Populate ``.grad`` on every trainable parameter reachable from ``output``."""
    if output.numel() != 1:
        raise DataError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    if not output.requires_grad:
        raise DataError("output is detached from any trainable parameter")
    if params is not None:
        params.zero_grad()
    output.reshape(()).backward()


def adagrad_step(params: ParamStore, lr: float) -> None:
    """``acc += g**2; p -= lr * g / sqrt(acc + 1e-10)`` on trainable groups."""
    with torch.no_grad():
        for group, module in params.groups.items():
            if not params.trainable[group]:
                continue
            named = [(n, p) for n, p in params.named_parameters(group)]
            if named and all(p.grad is None for _, p in named):
                raise DataError(f"trainable group {group!r} has no gradients; call backward first")
            for name, p in named:
                if p.grad is None:
                    continue
                acc = params.accumulators.get(name)
                if acc is None:
                    acc = params.accumulators[name] = torch.zeros_like(p)
                acc.add_(p.grad * p.grad)
                p.sub_(lr * p.grad / torch.sqrt(acc + ADAGRAD_EPS))


def _central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float) -> torch.Tensor:
    flat = tensor.data.view(-1)
    g = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"function non-finite at perturbed coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g.view_as(tensor)


def _rel_error(ad: torch.Tensor, fd: torch.Tensor) -> float:
    return float(((ad - fd).abs() / torch.clamp(fd.abs(), min=1.0)).max())


def gradcheck(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|) at ``point``."""
    x = point.detach().clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise DataError("gradcheck function must return a scalar")
    (ad,) = torch.autograd.grad(out, x, allow_unused=True)
    ad = torch.zeros_like(x) if ad is None else ad
    probe = x.detach().clone()
    with torch.no_grad():
        fd = _central_difference(lambda: fn(probe), probe, h)
    return _rel_error(ad, fd)


def gradcheck_params(loss_fn: Callable[[], torch.Tensor], params, h: float = 1e-5) -> float:
    """Like :func:`gradcheck` but with respect to parameter tensors, perturbed in place."""
    params = [p for p in params if p.requires_grad]
    out = loss_fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, ad in zip(params, grads):
            ad = torch.zeros_like(p) if ad is None else ad
            fd = _central_difference(loss_fn, p, h)
            worst = max(worst, _rel_error(ad, fd))
    return worst
