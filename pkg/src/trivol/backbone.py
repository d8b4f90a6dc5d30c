"""3D residual feature extractor and projection heads.

The extractor has six residual blocks of two 3x3x3 conv+BN+ReLU layers each;
blocks 2-6 additionally begin with a stride-2 conv that halves every spatial
dim (ceil rounding via padding) and doubles the channel count. The residual
shortcut of each block is a 1x1x1 (strided) projection spanning the whole
block. Global average pooling plus one affine layer produces the latent
vector of dimension Z.

Heads map Z to the pretraining projection dimension C ("ssl") or to class
logits ("cls"); both are two affine layers with one ReLU in between.
"""

from __future__ import annotations

import warnings

import torch
import torch.nn as nn

from .config import MIN_INPUT_DIM, ExperimentConfig
from .errors import ConfigurationError, NumericError, ShapeError
from .seeding import derive_seed

HEAD_KINDS = ("ssl", "cls")


def stride_schedule(input_shape: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Spatial extents after each block (ceil halving at blocks 2-6)."""
    shapes = [tuple(input_shape)]
    for _ in range(5):
        shapes.append(tuple((d + 1) // 2 for d in shapes[-1]))
    return shapes


def check_input_shape(input_shape: tuple[int, int, int]) -> None:
    if len(input_shape) != 3 or any(d < MIN_INPUT_DIM for d in input_shape):
        trace = " -> ".join(str(s) for s in stride_schedule(tuple(input_shape))) if len(input_shape) == 3 else "n/a"
        raise ConfigurationError(
            f"unsupported input_shape {tuple(input_shape)}: every dim must be >= {MIN_INPUT_DIM} "
            f"so the five stride-2 stages keep a non-empty map (schedule: {trace})"
        )


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        main = []
        width = in_channels
        if stride == 2:
            main += [
                nn.Conv3d(in_channels, out_channels, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm3d(out_channels),
                nn.ReLU(inplace=True),
            ]
            width = out_channels
        main += [
            nn.Conv3d(width, out_channels, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm3d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_channels, out_channels, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm3d(out_channels),
        ]
        self.main = nn.Sequential(*main)
        self.shortcut = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False),
            nn.BatchNorm3d(out_channels),
        )
        self.activation = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.activation(self.main(x) + self.shortcut(x))


class FeatureExtractor(nn.Module):
    """Maps a batch of volumes (B, H, W, D) to latent vectors (B, Z)."""

    def __init__(self, input_shape: tuple[int, int, int], base_channels: int, latent_dim: int):
        super().__init__()
        check_input_shape(input_shape)
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        channels = [base_channels * (2 ** i) for i in range(6)]
        blocks = []
        in_ch = 1
        for i, out_ch in enumerate(channels):
            blocks.append(ResidualBlock(in_ch, out_ch, stride=1 if i == 0 else 2))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.latent = nn.Linear(channels[-1], latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._as_batch(x)
        for block in self.blocks:
            x = block(x)
        return self.latent(x.mean(dim=(2, 3, 4)))

    def intermediate_shapes(self, x: torch.Tensor) -> list[tuple[int, ...]]:
        """Spatial shape after each block; used to verify the stride schedule."""
        was_training = self.training
        self.eval()
        try:
            x = self._as_batch(x)
            shapes = []
            with torch.inference_mode():
                for block in self.blocks:
                    x = block(x)
                    shapes.append(tuple(x.shape[2:]))
            return shapes
        finally:
            self.train(was_training)

    def _as_batch(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.is_tensor(x):
            x = torch.as_tensor(x, dtype=torch.float32)
        if x.dim() == 4:
            x = x.unsqueeze(1)  # add channel dim
        if x.dim() != 5 or tuple(x.shape[2:]) != self.input_shape:
            raise ShapeError((-1, *self.input_shape), tuple(x.shape), what="volume batch")
        # oneDNN conv3d is ~2.7x faster in channels-last layout on CPU
        return x.to(memory_format=torch.channels_last_3d)


class ProjectionHead(nn.Module):
    """Two affine layers with one ReLU. kind='ssl' maps Z->C, kind='cls' maps Z->num_classes."""

    def __init__(self, latent_dim: int, out_dim: int, kind: str):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
        self.kind = kind
        self.out_dim = out_dim
        hidden = out_dim if kind == "ssl" else latent_dim
        self.net = nn.Sequential(nn.Linear(latent_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


def _init_parameters(module: nn.Module) -> None:
    # fan-in scaled normal for convs and affines; BN keeps its default unit scale.
    # Zeroing the final BN scale of each branch is tempting for stability but at
    # reduced volume sizes it leaves only the strided 1x1 shortcuts (which sample
    # background corner voxels) carrying signal, collapsing the batch at init.
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)


def init_model(config: ExperimentConfig, head: str, seed: int | None = None
               ) -> tuple[FeatureExtractor, ProjectionHead]:
    """Freshly initialized extractor + head, deterministic for a given seed.

    Seeds the global torch RNG (models are confined to one training process).
    """
    check_input_shape(config.input_shape)
    if head not in HEAD_KINDS:
        raise ConfigurationError(f"unknown head kind {head!r}; expected one of {HEAD_KINDS}")
    torch.manual_seed(derive_seed(config.seed if seed is None else seed, "init", head))
    extractor = FeatureExtractor(config.input_shape, config.base_channels, config.latent_dim)
    out_dim = config.projection_dim if head == "ssl" else config.num_classes
    proj = ProjectionHead(config.latent_dim, out_dim, head)
    _init_parameters(extractor)
    _init_parameters(proj)
    return extractor, proj


def forward_features(extractor: FeatureExtractor, batch) -> torch.Tensor:
    """Latents for a batch; raises on shape mismatch or non-finite output."""
    out = extractor(batch)
    if not torch.isfinite(out).all():
        raise NumericError("feature extractor produced non-finite latents")
    return out


def forward_projected(extractor: FeatureExtractor, head: ProjectionHead, batch) -> torch.Tensor:
    return head(forward_features(extractor, batch))


def freeze(model: nn.Module) -> nn.Module:
    """Disable gradients and lock normalization layers to evaluation statistics.
    Forward passes remain permitted; returns the same module."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    model._trivol_frozen = True
    return model


def is_frozen(model: nn.Module) -> bool:
    return bool(getattr(model, "_trivol_frozen", False))


def trainable_parameters(*modules: nn.Module) -> list[nn.Parameter]:
    """Parameters that require grad; warns when the list is empty (e.g. a frozen model)."""
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    if not params:
        warnings.warn("no trainable parameters (model frozen?); optimizer would be a no-op", stacklevel=2)
    return params


def parameter_checksum(*modules: nn.Module) -> str:
    """Order-stable hash over all parameters and buffers; bitwise-sensitive."""
    import hashlib

    h = hashlib.sha256()
    for m in modules:
        for name, t in list(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
