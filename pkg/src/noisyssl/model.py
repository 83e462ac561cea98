"""Residual CNN encoder, task heads, checkpoints and first-layer filter grids."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_size: tuple[int, int, int] = (32, 32, 3)
    stages: tuple[tuple[int, int, int], ...] = ((32, 1, 1), (64, 1, 2), (128, 1, 2))
    feature_dim: int = 128
    stem_channels: int = 32
    stem_stride: int = 2
    init: str = "he_random"  # or "checkpoint:<path>"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        if not self.stages:
            raise ValueError("encoder needs at least one stage")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.stages[-1][0] != self.feature_dim:
            raise ValueError(
                f"feature_dim {self.feature_dim} must equal the last stage width {self.stages[-1][0]}")

    @classmethod
    def preset(cls, name: str, input_size=(32, 32, 3)) -> "EncoderConfig":
        if name == "tiny":
            return cls(input_size=input_size)
        if name == "resnet18":
            return cls(input_size=input_size, stem_channels=64, stem_stride=1,
                       stages=((64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2)),
                       feature_dim=512)
        raise ValueError(f"unknown encoder preset {name!r}")


@dataclass(frozen=True)
class Head:
    """Output layer spec. ``kind`` is classifier, rotation, permutation or projection."""

    kind: str
    size: int
    num_patches: int = 1

    def __post_init__(self):
        if self.kind not in ("classifier", "rotation", "permutation", "projection"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind == "rotation" and self.size != 4:
            raise ValueError("rotation head has exactly 4 outputs")
        if self.size < 1 or self.num_patches < 1:
            raise ValueError("head size and num_patches must be positive")

    @classmethod
    def classifier(cls, k: int) -> "Head":
        return cls("classifier", k)

    @classmethod
    def rotation(cls) -> "Head":
        return cls("rotation", 4)

    @classmethod
    def permutation(cls, p: int, num_patches: int = 9) -> "Head":
        return cls("permutation", p, num_patches)

    @classmethod
    def projection(cls, dim: int = 64) -> "Head":
        return cls("projection", dim)

    def input_width(self, feature_dim: int) -> int:
        return feature_dim * self.num_patches if self.kind == "permutation" else feature_dim


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        cin = cfg.input_size[2]
        self.stem = nn.Sequential(
            nn.Conv2d(cin, cfg.stem_channels, 3, cfg.stem_stride, 1, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(inplace=True),
        )
        layers, width = [], cfg.stem_channels
        for channels, blocks, stride in cfg.stages:
            for b in range(blocks):
                layers.append(BasicBlock(width, channels, stride if b == 0 else 1))
                width = channels
        self.layers = nn.Sequential(*layers)

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.stem[0]

    def forward(self, x):
        x = self.layers(self.stem(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def _make_head_module(head: Head, feature_dim: int) -> nn.Module:
    width = head.input_width(feature_dim)
    if head.kind == "projection":
        return nn.Sequential(nn.Linear(width, width), nn.ReLU(inplace=True),
                             nn.Linear(width, head.size))
    return nn.Linear(width, head.size)


class Network(nn.Module):
    """Encoder plus one head.

    Images are NCHW tensors.  Permutation heads take (B, g, C, h, w) patch
    stacks; all g patches go through the same encoder and their features are
    concatenated in patch order.
    """

    def __init__(self, cfg: EncoderConfig, head: Head):
        super().__init__()
        self.cfg = cfg
        self.head_spec = head
        self.encoder = Encoder(cfg)
        self.head = _make_head_module(head, cfg.feature_dim)

    def features(self, x):
        if self.head_spec.kind == "permutation":
            b, g = x.shape[:2]
            if g != self.head_spec.num_patches:
                raise ValueError(f"expected {self.head_spec.num_patches} patches, got {g}")
            return self.encoder(x.flatten(0, 1)).reshape(b, -1)
        return self.encoder(x)

    def forward(self, x):
        return self.head(self.features(x))

    def replace_head(self, head: Head, seed: int = 0) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.head = _make_head_module(head, self.cfg.feature_dim)
        self.head_spec = head


def _init_weights(module: nn.Module) -> None:
    # He (fan-in) scaling, as in torch's own defaults for conv/linear layers.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            if m.bias is not None:
                bound = 1 / math.sqrt(nn.init._calculate_fan_in_and_fan_out(m.weight)[0])
                nn.init.uniform_(m.bias, -bound, bound)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(cfg: EncoderConfig, head: Head, seed: int = 0) -> Network:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Network(cfg, head)
        _init_weights(net)
    if cfg.init.startswith("checkpoint:"):
        load_into(net, load_checkpoint(cfg.init.split(":", 1)[1]))
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    encoder_cfg: EncoderConfig
    head: Head | None
    encoder_state: dict[str, np.ndarray]
    head_state: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(net: Network, provenance: dict, path: str | Path) -> Path:
    """Write encoder (incl. batch-norm buffers) and head arrays to an ``.npz`` container.

    ``provenance`` should name the pretext ("none" for plain init), dataset,
    epochs and seed; it is stored verbatim as JSON.
    """
    path = Path(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "encoder_cfg": asdict(net.cfg),
        "head": asdict(net.head_spec),
        "provenance": provenance,
    }
    arrays = {f"encoder/{k}": v for k, v in _state_arrays(net.encoder).items()}
    arrays.update({f"head/{k}": v for k, v in _state_arrays(net.head).items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format {meta.get('format_version')} != {FORMAT_VERSION}")
        enc = {k[len("encoder/"):]: npz[k] for k in npz.files if k.startswith("encoder/")}
        head = {k[len("head/"):]: npz[k] for k in npz.files if k.startswith("head/")}
    return Checkpoint(
        encoder_cfg=EncoderConfig(**meta["encoder_cfg"]),
        head=Head(**meta["head"]) if meta.get("head") else None,
        encoder_state=enc,
        head_state=head,
        provenance=meta.get("provenance", {}),
        format_version=meta["format_version"],
    )


def _check_arrays(target: dict[str, torch.Tensor], source: dict[str, np.ndarray], prefix: str) -> None:
    problems = []
    for name in sorted(set(target) | set(source)):
        if name not in source:
            problems.append(f"{prefix}{name}: missing from checkpoint")
        elif name not in target:
            problems.append(f"{prefix}{name}: unexpected in checkpoint")
        elif tuple(target[name].shape) != source[name].shape:
            problems.append(f"{prefix}{name}: shape {source[name].shape} in checkpoint, "
                            f"model expects {tuple(target[name].shape)}")
    if problems:
        raise CheckpointError("checkpoint does not fit model:\n  " + "\n  ".join(problems))


def _copy_in(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    module.load_state_dict({k: torch.from_numpy(np.array(v)).to(state[k].dtype) for k, v in arrays.items()})


def load_into(net: Network, ckpt: Checkpoint) -> bool:
    """Restore the encoder from ``ckpt``; restore the head only if it has the same spec.

    Returns True when the head was restored too.
    """
    _check_arrays(net.encoder.state_dict(), ckpt.encoder_state, "encoder/")
    _copy_in(net.encoder, ckpt.encoder_state)
    if ckpt.head is not None and ckpt.head == net.head_spec and ckpt.head_state:
        _check_arrays(net.head.state_dict(), ckpt.head_state, "head/")
        _copy_in(net.head, ckpt.head_state)
        return True
    return False


def encoder_digest(net: Network) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(_state_arrays(net.encoder).items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- filter grid


def render_filter_grid(net: Network, count: int = 16, seed: int = 0, scale: int = 8,
                       pad: int = 1) -> np.ndarray:
    weights = net.encoder.first_conv.weight.detach().cpu().numpy()
    n_filters = weights.shape[0]
    if count > n_filters:
        raise ValueError(f"asked for {count} filters, first layer only has {n_filters}")
    chosen = np.sort(np.random.default_rng(seed).choice(n_filters, size=count, replace=False))
    cols = math.ceil(math.sqrt(count))
    rows = math.ceil(count / cols)
    kh, kw = weights.shape[2:]
    ch, cw = kh * scale, kw * scale
    grid = np.ones((rows * ch + (rows + 1) * pad, cols * cw + (cols + 1) * pad, 3))
    for slot, idx in enumerate(chosen):
        f = weights[idx].transpose(1, 2, 0)
        lo, hi = f.min(), f.max()
        f = np.full_like(f, 0.5) if hi - lo == 0 else (f - lo) / (hi - lo)
        if f.shape[2] != 3:
            f = np.repeat(f.mean(axis=2, keepdims=True), 3, axis=2)
        f = np.kron(f, np.ones((scale, scale, 1)))
        r, c = divmod(slot, cols)
        y, x = pad + r * (ch + pad), pad + c * (cw + pad)
        grid[y:y + ch, x:x + cw] = f
    return grid


def export_filter_grid(net: Network, path: str | Path, count: int = 16, seed: int = 0,
                       scale: int = 8) -> Path:
    grid = render_filter_grid(net, count=count, seed=seed, scale=scale)
    Image.fromarray(np.round(grid * 255).astype(np.uint8)).save(path, format="PNG")
    return Path(path)


# --------------------------------------------------------------------------- inference


def to_nchw(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2)))


@torch.no_grad()
def predict_logits(net: nn.Module, pixels: np.ndarray, batch_size: int = 500) -> torch.Tensor:
    """Eval-mode logits for an (N, H, W, C) image array; restores the previous train/eval mode."""
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    out = [net(to_nchw(pixels[i:i + batch_size]).to(dtype)) for i in range(0, len(pixels), batch_size)]
    net.train(was_training)
    return torch.cat(out) if out else torch.empty(0)
