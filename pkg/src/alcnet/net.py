"""Backbone, architecture factory and checkpoint container.

The backbone is a modified ResNet-20: one 3x3 stem conv, then three stages
of b pre-activation residual blocks at channel widths (c1,c2,c3); the image
is subsampled exactly twice, by the first block of stage 2 and of stage 3
(stride 2 with a 1x1 projection shortcut). The factory builds the eight
ablation rows:

    plainfcn  plain stages, no fusion (deepest stage through the head)
    fpn       plain stages, additive skips, 3x3 output post-processing
    dlc-fpn   single-dilation contrast + additive skips
    mlc-fpn   multi-scale contrast + additive skips
    max-fpn   multi-scale contrast + elementwise-max skips
    tla-fpn   multi-scale contrast + top-down local attention
    bga-fpn   multi-scale contrast + bottom-up global attention
    alcnet    multi-scale contrast + bottom-up local attention
"""

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, relu, upsample_nearest
from .fusion import ATTENTION_KINDS, CrossLayerFuser
from .nn import BatchNorm2d, Conv2d, Module

VALID_B = (1, 2, 3, 4)
PAPER_CHANNELS = (16, 32, 64)
DESK_CHANNELS = (8, 16, 32)

ARCH_ROWS = {
    # name -> (same_layer, cross_layer, post_conv)
    "plainfcn": ("plain", "none", False),
    "fpn": ("plain", "add", True),
    "dlc-fpn": ("dlc", "add", False),
    "mlc-fpn": ("mlc", "add", False),
    "max-fpn": ("mlc", "max", False),
    "tla-fpn": ("mlc", "tlam", False),
    "bga-fpn": ("mlc", "bgam", False),
    "alcnet": ("mlc", "blam", False),
}


@dataclass(frozen=True)
class BackboneConfig:
    b: int
    channels: tuple = PAPER_CHANNELS
    in_channels: int = 1

    def __post_init__(self):
        if self.b not in VALID_B:
            raise ValueError(f"blocks per stage must be in {VALID_B}, got {self.b}")
        if len(self.channels) != 3:
            raise ValueError(f"exactly 3 stage widths required, got {self.channels}")


@dataclass(frozen=True)
class ArchSpec:
    same_layer: str              # plain | dlc | mlc
    dilations: tuple             # () for plain, one rate for dlc
    cross_layer: str             # none | add | max | blam | bgam | tlam
    b: int
    reduction: str = "min"
    post_conv: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.same_layer not in ("plain", "dlc", "mlc"):
            raise ValueError(f"unknown same-layer scheme {self.same_layer!r}")
        if self.same_layer == "plain" and self.dilations:
            raise ValueError("plain same-layer scheme takes no dilation rates")
        if self.same_layer == "dlc" and len(self.dilations) != 1:
            raise ValueError("dlc takes exactly one dilation rate")
        if self.same_layer == "mlc" and not self.dilations:
            raise ValueError("mlc requires at least one dilation rate")
        if self.cross_layer not in ("none", "add", "max", "blam", "bgam", "tlam"):
            raise ValueError(f"unknown cross-layer scheme {self.cross_layer!r}")
        if self.cross_layer == "none" and self.same_layer != "plain":
            raise ValueError("cross-layer 'none' is only consistent with the plain scheme")
        if self.b not in VALID_B:
            raise ValueError(f"b must be in {VALID_B}, got {self.b}")
        if self.reduction not in ("min", "max"):
            raise ValueError(f"reduction must be min or max, got {self.reduction!r}")

    def to_string(self) -> str:
        same = self.same_layer
        if self.dilations:
            same += ":" + ",".join(str(d) for d in self.dilations)
        parts = [same, self.cross_layer, f"b={self.b}"]
        if self.reduction != "min":
            parts.append(f"red={self.reduction}")
        if self.post_conv:
            parts.append("post")
        return "|".join(parts)

    @classmethod
    def from_string(cls, text: str) -> "ArchSpec":
        parts = text.strip().split("|")
        if len(parts) < 3:
            raise ValueError(f"malformed architecture string {text!r}")
        same = parts[0]
        dilations = ()
        if ":" in same:
            same, rates = same.split(":", 1)
            dilations = tuple(int(r) for r in rates.split(","))
        cross = parts[1]
        if not parts[2].startswith("b="):
            raise ValueError(f"malformed architecture string {text!r}")
        b = int(parts[2][2:])
        reduction = "min"
        post = False
        for extra in parts[3:]:
            if extra.startswith("red="):
                reduction = extra[4:]
            elif extra == "post":
                post = True
            else:
                raise ValueError(f"unknown architecture field {extra!r}")
        return cls(same, dilations, cross, b, reduction, post)


def make_arch(name: str, b: int, dilations=None, reduction: str = "min") -> ArchSpec:
    """Build the spec for one named ablation row."""
    key = name.strip().lower()
    if key not in ARCH_ROWS:
        valid = ", ".join(sorted(ARCH_ROWS))
        raise ValueError(f"unknown architecture {name!r}; valid names: {valid}")
    same, cross, post = ARCH_ROWS[key]
    if same == "plain":
        rates = ()
    elif same == "dlc":
        rates = (13,) if dilations is None else tuple(dilations)
        if len(rates) != 1:
            raise ValueError(f"dlc-fpn takes exactly one dilation rate, got {rates}")
    else:
        rates = (13, 17) if dilations is None else tuple(dilations)
    return ArchSpec(same, rates, cross, b, reduction, post)


class ResidualBlock(Module):
    """Pre-activation residual block: BN-ReLU-conv3 twice, projected shortcut
    (1x1, strided) whenever shape changes."""

    def __init__(self, in_channels, out_channels, stride, rng):
        super().__init__()
        self.stride = stride
        self.bn1 = BatchNorm2d(in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, rng=rng)
        self.bn2 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        pre = relu(self.bn1(x))
        out = self.conv2(relu(self.bn2(self.conv1(pre))))
        skip = x if self.shortcut is None else self.shortcut(pre)
        return out + skip


class Backbone(Module):
    """Stem conv plus three residual stages; returns (F1, F2, F3)."""

    def __init__(self, cfg: BackboneConfig, rng):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.in_channels, c1, 3, rng=rng)
        widths = [(c1, c1, 1), (c1, c2, 2), (c2, c3, 2)]
        self.stage_names = []
        for s, (cin, cout, stride) in enumerate(widths, start=1):
            names = []
            for i in range(cfg.b):
                block = ResidualBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1, rng)
                name = f"stage{s}_{i + 1}"
                setattr(self, name, block)
                names.append(name)
            self.stage_names.append(names)

    def forward(self, x: Tensor):
        h, w = x.data.shape[1:]
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(f"input size {h}x{w} must be divisible by 4")
        t = self.conv1(x)
        outputs = []
        for names in self.stage_names:
            for name in names:
                t = getattr(self, name)(t)
            outputs.append(t)
        return tuple(outputs)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    return Backbone(cfg, np.random.default_rng(seed))


class Network(Module):
    """Backbone -> same-layer contrast -> cross-layer fusion -> 1x1 head.

    The head runs at stage-1 (= input) resolution for fused architectures;
    plainfcn predicts at stage-3 resolution and upsamples x4. Raw scores are
    returned; the loss/inference side applies the sigmoid.
    """

    def __init__(self, arch: ArchSpec, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        if arch.b != cfg.b:
            raise ValueError(f"arch depth b={arch.b} disagrees with backbone b={cfg.b}")
        rng = np.random.default_rng(seed)
        self.arch = arch
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        c1, _, c3 = cfg.channels
        if arch.cross_layer == "none":
            self.fuser = None
            head_channels = c3
            self.head_upsample = 4
        else:
            self.fuser = CrossLayerFuser(cfg.channels, arch.dilations, arch.cross_layer,
                                         arch.reduction, rng=rng)
            head_channels = c1
            self.head_upsample = 1
        if arch.post_conv:
            self.post = Conv2d(head_channels, head_channels, 3, rng=rng)
            self.post_bn = BatchNorm2d(head_channels)
        else:
            self.post = None
        self.head = Conv2d(head_channels, 1, 1, rng=rng)
        # learned constant score offset; contrast features vanish on flat
        # backgrounds, so without it the background probability is pinned at
        # 0.5. Starts at the rare-foreground prior sigmoid(-4) ~ 0.018.
        self.head_bias = Parameter(np.full((1, 1, 1), -4.0))

    def forward(self, x: Tensor) -> Tensor:
        stages = self.backbone(x)
        if self.fuser is None:
            z = stages[-1]
        else:
            z = self.fuser(list(stages))
        if self.post is not None:
            z = relu(self.post_bn(self.post(z)))
        scores = self.head(z) + self.head_bias
        if self.head_upsample > 1:
            scores = upsample_nearest(scores, self.head_upsample)
        return scores


def build_network(arch: ArchSpec, cfg: BackboneConfig | None = None, seed: int = 0,
                  channels=None, in_channels: int = 1) -> Network:
    if cfg is None:
        cfg = BackboneConfig(arch.b, tuple(channels) if channels else PAPER_CHANNELS, in_channels)
    return Network(arch, cfg, seed)


def parameter_census(model: Module):
    """Per-module table of directly-owned parameter counts."""
    rows = []
    for name, mod in model.named_modules():
        own = sum(p.data.size for p in mod._params.values())
        rows.append((name if name else "<root>", own))
    return rows


def total_parameters(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoint container: magic "ALCN", version u32, arch string, meta string,
# then length-prefixed name + shape + little-endian float64 payload per entry
# ---------------------------------------------------------------------------

MAGIC = b"ALCN"
VERSION = 1


def _write_str(fh, text: str):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _entries(model: Module):
    yield from model.named_parameters()
    yield from model.named_buffers()


def save_checkpoint(path, model: Network):
    arch_str = model.arch.to_string()
    channels = ",".join(str(c) for c in model.cfg.channels)
    meta = f"channels={channels};in={model.cfg.in_channels}"
    entries = list(_entries(model))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, arch_str)
        _write_str(fh, meta)
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            arr = tensor.data if isinstance(tensor, Tensor) else tensor
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arch = ArchSpec.from_string(_read_str(fh))
        meta = dict(kv.split("=", 1) for kv in _read_str(fh).split(";"))
        channels = tuple(int(c) for c in meta["channels"].split(","))
        in_channels = int(meta.get("in", "1"))
        model = Network(arch, BackboneConfig(arch.b, channels, in_channels), seed=0)
        stored = {}
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            stored[name] = arr
    expected = dict(_entries(model))
    if set(stored) != set(expected):
        missing = set(expected) - set(stored)
        extra = set(stored) - set(expected)
        raise ValueError(f"{path}: checkpoint/arch mismatch (missing {missing}, extra {extra})")
    for name, tensor in expected.items():
        arr = stored[name]
        target = tensor.data if isinstance(tensor, Tensor) else tensor
        if target.shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: {arr.shape} vs {target.shape}")
        target[...] = arr
    return model
