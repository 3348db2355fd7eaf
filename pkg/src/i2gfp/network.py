"""Stride-4 VGG-style encoder, intensive-connection decoder and the global
foreground perception (GFP) branch."""
from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VGG16_WIDTHS = (64, 128, 256, 512, 512)
VGG16_DEPTHS = (2, 2, 3, 3, 3)
ABLATIONS = {"base": (False, False), "base_ic": (True, False), "i2gfp": (True, True)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 512
    base_channels: tuple[int, ...] = VGG16_WIDTHS
    width_divisor: int = 1
    shrink_channels: int = 16
    use_ic: bool = True
    use_gfp: bool = True
    gfp_kernels: tuple[int, int] | None = None
    gfp_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("base_channels", tuple(int(c) for c in self.base_channels))
        if self.input_size <= 0 or self.input_size % 4:
            raise ConfigError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        if len(self.base_channels) != 5:
            raise ConfigError("base_channels needs one width per encoder block (5)")
        if self.width_divisor < 1 or any(c % self.width_divisor for c in self.base_channels):
            raise ConfigError(f"width_divisor {self.width_divisor} must divide every base channel width")
        if self.shrink_channels < 1 or self.gfp_channels < 1:
            raise ConfigError("shrink_channels and gfp_channels must be positive")
        if self.gfp_kernels is None:
            set_("gfp_kernels", default_gfp_kernels(self.input_size))
        set_("gfp_kernels", tuple(int(k) for k in self.gfp_kernels))
        if len(self.gfp_kernels) != 2 or any(k < 3 or k % 2 == 0 for k in self.gfp_kernels):
            raise ConfigError(f"gfp_kernels must be two odd sizes >= 3, got {self.gfp_kernels}")

    @classmethod
    def desk(cls, input_size: int = 64, **kw) -> "ModelConfig":
        """Small CPU-friendly variant: widths divided by 8."""
        kw.setdefault("width_divisor", 8)
        kw.setdefault("gfp_channels", 8)
        return cls(input_size=input_size, **kw)

    def with_ablation(self, name: str) -> "ModelConfig":
        try:
            use_ic, use_gfp = ABLATIONS[name]
        except KeyError:
            raise ConfigError(f"unknown ablation '{name}', expected one of {sorted(ABLATIONS)}") from None
        return replace(self, use_ic=use_ic, use_gfp=use_gfp)

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        return tuple(c // self.width_divisor for c in self.base_channels)

    @property
    def decoder_channels(self) -> dict[int, int]:
        """Output width of decoder stages 5..2: half the encoder width, at least the shrink width."""
        enc = self.encoder_channels
        return {i: max(enc[i - 1] // 2, self.shrink_channels) for i in (5, 4, 3, 2)}

    @property
    def head_channels(self) -> int:
        return self.decoder_channels[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        d["gfp_kernels"] = list(self.gfp_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["base_channels"] = tuple(d["base_channels"])
        if d.get("gfp_kernels") is not None:
            d["gfp_kernels"] = tuple(d["gfp_kernels"])
        return cls(**d)


def default_gfp_kernels(input_size: int) -> tuple[int, int]:
    # half and quarter of the input extent, made odd: (255, 127) at 512
    return input_size // 2 - 1, input_size // 4 - 1


def decoder_concat_widths(cfg: ModelConfig) -> dict[int, int]:
    """Input channel count of decoder stages 4, 3, 2."""
    enc, dec = cfg.encoder_channels, cfg.decoder_channels
    widths = {}
    for i in (4, 3, 2):
        upsampled = dec[i + 1]
        if cfg.use_ic:
            widths[i] = (6 - i) * cfg.shrink_channels + upsampled
        else:
            widths[i] = enc[i - 1] + upsampled
    return widths


def head_input_width(cfg: ModelConfig) -> int:
    return cfg.encoder_channels[0] + cfg.decoder_channels[2] + (cfg.gfp_channels if cfg.use_gfp else 0)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Encoder(nn.Module):
    """Five VGG-16 blocks; pooling only after blocks 1 and 2 (output stride 4)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cin = 4
        blocks = []
        for width, depth in zip(cfg.encoder_channels, VGG16_DEPTHS):
            layers = OrderedDict()
            for j in range(depth):
                layers[f"conv{j + 1}"] = conv3x3(cin, width)
                layers[f"relu{j + 1}"] = nn.ReLU(inplace=True)
                cin = width
            blocks.append(nn.Sequential(layers))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i in (1, 2):
                x = F.max_pool2d(x, 2, 2)
            x = block(x)
            feats.append(x)
        return feats


def _resize_to(x, ref_hw):
    if tuple(x.shape[-2:]) == tuple(ref_hw):
        return x
    return F.interpolate(x, size=tuple(ref_hw), mode="bilinear", align_corners=False)


class Decoder(nn.Module):
    """Intensive-connection decoder, or a plain skip decoder when ``use_ic`` is off.

    Stage ``i`` in IC mode concatenates 1x1-shrunk encoder features ``E5..Ei``
    (resized to the stage resolution) with the upsampled feature ``U_i``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.use_ic = cfg.use_ic
        enc, dec = cfg.encoder_channels, cfg.decoder_channels
        if cfg.use_ic:
            self.shrink = nn.ModuleDict({
                str(i): nn.Conv2d(enc[i - 1], cfg.shrink_channels, 1) for i in (5, 4, 3, 2)})
        self.concat_widths = decoder_concat_widths(cfg)
        self.stages = nn.ModuleDict({"5": conv3x3(enc[4], dec[5])})
        for i in (4, 3, 2):
            self.stages[str(i)] = conv3x3(self.concat_widths[i], dec[i])

    def forward(self, feats, trace=None):
        if len(feats) != 5:
            raise RuntimeError(f"decoder expects 5 encoder features, got {len(feats)}")
        d = F.relu(self.stages["5"](feats[4]))
        shrunk = {}
        for i in (4, 3, 2):
            enc_i = feats[i - 1]
            up = _resize_to(d, enc_i.shape[-2:])
            if self.use_ic:
                for s in range(5, i - 1, -1):
                    if s not in shrunk:
                        shrunk[s] = self.shrink[str(s)](feats[s - 1])
                parts = [_resize_to(shrunk[s], enc_i.shape[-2:]) for s in range(5, i - 1, -1)]
            else:
                parts = [enc_i]
            cat = torch.cat(parts + [up], dim=1)
            if cat.shape[1] != self.concat_widths[i]:
                raise RuntimeError(f"stage {i} concat width {cat.shape[1]} != {self.concat_widths[i]}")
            if trace is not None:
                trace[f"D{i}_input"] = cat
            d = F.relu(self.stages[str(i)](cat))
        return _resize_to(d, feats[0].shape[-2:])


class GlobalConv(nn.Module):
    """Large-kernel block: (1xk then kx1) + (kx1 then 1xk), size preserving."""

    def __init__(self, cin, cout, k):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"global conv kernel must be odd, got {k}")
        p = (k - 1) // 2
        self.k = k
        self.a1 = nn.Conv2d(cin, cout, (1, k), padding=(0, p))
        self.a2 = nn.Conv2d(cout, cout, (k, 1), padding=(p, 0))
        self.b1 = nn.Conv2d(cin, cout, (k, 1), padding=(p, 0))
        self.b2 = nn.Conv2d(cout, cout, (1, k), padding=(0, p))

    def forward(self, x):
        return self.a2(self.a1(x)) + self.b2(self.b1(x))


class GFPBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = cfg.gfp_channels
        k1, k2 = cfg.gfp_kernels
        self.down1 = conv3x3(3, g, stride=2)
        self.down2 = conv3x3(g, g, stride=2)
        self.gc1 = GlobalConv(g, g, k1)
        self.gc2 = GlobalConv(g, g, k2)

    def forward(self, rgb):
        x = F.relu(self.down1(rgb))
        x = F.relu(self.down2(x))
        return self.gc2(self.gc1(x))


class Head(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.head_channels
        self.conv1 = conv3x3(head_input_width(cfg), c)
        self.conv2 = conv3x3(c, c)
        self.out = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return torch.sigmoid(self.out(x))


INPUT_SHIFT = 0.5


class MattingNet(nn.Module):
    """Input: ``(N, 4, S, S)`` = RGB ++ trimap plane, all in ``[0, 1]``; output: ``(N, 1, S, S)`` alpha.

    The input is shifted by ``-INPUT_SHIFT`` on entry so the first layers see
    zero-centred values (the role mean subtraction plays for VGG).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.gfp = GFPBranch(cfg) if cfg.use_gfp else None
        self.head = Head(cfg)

    def _check_input(self, x):
        s = self.cfg.input_size
        if x.dim() != 4 or x.shape[1] != 4 or tuple(x.shape[-2:]) != (s, s):
            raise ValueError(f"expected input (N, 4, {s}, {s}), got {tuple(x.shape)}")

    def encode(self, x):
        self._check_input(x)
        return self.encoder(x - INPUT_SHIFT)

    def forward(self, x, trace=None):
        feats = self.encode(x)
        u1 = self.decoder(feats, trace)
        parts = [feats[0], u1]
        if self.gfp is not None:
            g = self.gfp(x[:, :3] - INPUT_SHIFT)
            parts.append(_resize_to(g, x.shape[-2:]))
            if trace is not None:
                trace["GFP"] = g
        if trace is not None:
            trace.update({f"E{i + 1}": f for i, f in enumerate(feats)})
            trace["U1"] = u1
        return self.head(torch.cat(parts, dim=1))


def expected_param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Parameter name -> shape, derived from the config alone."""
    shapes = OrderedDict()

    def conv(name, cin, cout, kh, kw):
        shapes[f"{name}.weight"] = (cout, cin, kh, kw)
        shapes[f"{name}.bias"] = (cout,)

    enc, dec = cfg.encoder_channels, cfg.decoder_channels
    cin = 4
    for b, (width, depth) in enumerate(zip(enc, VGG16_DEPTHS)):
        for j in range(depth):
            conv(f"encoder.blocks.{b}.conv{j + 1}", cin, width, 3, 3)
            cin = width
    if cfg.use_ic:
        for i in (5, 4, 3, 2):
            conv(f"decoder.shrink.{i}", enc[i - 1], cfg.shrink_channels, 1, 1)
    conv("decoder.stages.5", enc[4], dec[5], 3, 3)
    widths = decoder_concat_widths(cfg)
    for i in (4, 3, 2):
        conv(f"decoder.stages.{i}", widths[i], dec[i], 3, 3)
    if cfg.use_gfp:
        g = cfg.gfp_channels
        conv("gfp.down1", 3, g, 3, 3)
        conv("gfp.down2", g, g, 3, 3)
        for name, k in zip(("gfp.gc1", "gfp.gc2"), cfg.gfp_kernels):
            conv(f"{name}.a1", g, g, 1, k)
            conv(f"{name}.a2", g, g, k, 1)
            conv(f"{name}.b1", g, g, k, 1)
            conv(f"{name}.b2", g, g, 1, k)
    conv("head.conv1", head_input_width(cfg), cfg.head_channels, 3, 3)
    conv("head.conv2", cfg.head_channels, cfg.head_channels, 3, 3)
    conv("head.out", cfg.head_channels, 1, 1, 1)
    return shapes


OUTPUT_PROJECTION = "head.out.weight"


@torch.no_grad()
def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Zero biases; Gaussian weights with std 0.01 for the output projection and
    ``sqrt(2 / fan_in)`` for every other kernel."""
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFFFFFFFFFFFFFF)
    for name, p in model.named_parameters():
        if name.endswith(".bias"):
            p.zero_()
            continue
        fan_in = p.shape[1] * p.shape[2] * p.shape[3]
        std = 0.01 if name == OUTPUT_PROJECTION else (2.0 / fan_in) ** 0.5
        p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return model


def build_model(cfg: ModelConfig) -> MattingNet:
    return init_params(MattingNet(cfg), cfg.seed)


def make_input(image, trimap) -> torch.Tensor:
    """Stack an ``(H, W, 3)`` image (or batch) with its trimap plane into network layout."""
    from .matting_core import trimap_plane

    image = np.asarray(image, dtype=np.float32)
    plane = trimap_plane(trimap)[..., None]
    x = np.concatenate([image, plane], axis=-1)
    x = torch.from_numpy(np.ascontiguousarray(x))
    return x.permute(2, 0, 1) if x.dim() == 3 else x.permute(0, 3, 1, 2)


# -- parameter archive --------------------------------------------------------

PARAM_PREFIX = "param/"
CONFIG_KEY = "__config__"


def state_arrays(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.detach().cpu().numpy().astype("<f4"))
                       for k, v in model.state_dict().items())


_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def write_archive(path, arrays: dict, meta: dict) -> None:
    """``.npz`` of little-endian arrays plus a JSON metadata entry.  Members are
    written in sorted order with a fixed timestamp, so equal content gives equal bytes."""
    entries = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    entries[CONFIG_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, entries[key], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=_FIXED_DATE), buf.getvalue())


def read_archive(path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z[CONFIG_KEY].item())
        arrays = {k: z[k] for k in z.files if k != CONFIG_KEY}
    return arrays, meta


def save_params(path, model: MattingNet) -> None:
    arrays = {PARAM_PREFIX + k: v for k, v in state_arrays(model).items()}
    write_archive(path, arrays, {"model": model.cfg.to_dict()})


def validate_state(cfg: ModelConfig, state: dict) -> None:
    expected = expected_param_shapes(cfg)
    if set(state) != set(expected):
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        raise ConfigError(f"parameter set mismatch; missing={missing[:5]} extra={extra[:5]}")
    for k, shape in expected.items():
        if tuple(state[k].shape) != shape:
            raise ConfigError(f"{k}: archive shape {tuple(state[k].shape)} != expected {shape}")


def params_from_arrays(arrays: dict, prefix: str = PARAM_PREFIX) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_params(path) -> MattingNet:
    arrays, meta = read_archive(path)
    cfg = ModelConfig.from_dict(meta["model"])
    state = params_from_arrays(arrays)
    validate_state(cfg, state)
    model = MattingNet(cfg)
    model.load_state_dict({k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in state.items()})
    return model
