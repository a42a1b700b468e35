"""The three networks: timing predictor, angle predictor, activation decoder.

All share one encoder architecture: a spatial 1x8 convolution mixing the
electrode channels, a permute, then two temporal conv + max-pool stages
(kernels 6 and 5, pool 5/5), flattening to 16*47*8 = 6016 features. Heads are
three fully-connected layers 6016 -> 500 -> 50 -> out. The activation decoder
mirrors the encoder with nearest upsampling and transposed convolutions back
to a 1x1200x8 field, which is mean-pooled to the 100x8 mask grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    LeakyReLU,
    Linear,
    MaxPool2d,
    Module,
    Permute,
    Sequential,
    Tensor,
    UpsampleNearest,
    load_checkpoint,
    save_checkpoint,
)

MASK_BINS = 100


@dataclass(frozen=True)
class AblationFlags:
    """The three strategy switches: decoupled-angle learning, auxiliary
    activation prediction, and activation-mask input filtering."""

    decoupling: bool = True
    activation_aux: bool = True
    mask_filter: bool = True

    def marks(self) -> str:
        return "".join("Y" if f else "n" for f in
                       (self.decoupling, self.activation_aux, self.mask_filter))

    @classmethod
    def from_marks(cls, s: str) -> "AblationFlags":
        s = s.strip().lower()
        if len(s) != 3:
            raise ValueError("flags must be 3 marks, e.g. YnY or a,c")
        on = [ch in "y1st" for ch in s]
        return cls(*on)

    def to_dict(self):
        return {"decoupling": self.decoupling, "activation_aux": self.activation_aux,
                "mask_filter": self.mask_filter}


BASELINE_FLAGS = AblationFlags(False, False, False)


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: int = 8
    win: int = 1200
    spatial_filters: int = 8
    temporal_channels: int = 16
    k_temporal1: int = 6
    k_temporal2: int = 5
    pool_kernel: int = 5
    pool_stride: int = 5
    head_hidden: tuple[int, int] = (500, 50)
    leaky_slope: float = 0.2

    def encoder_shape(self) -> tuple[int, int, int]:
        h = self.win - self.k_temporal1 + 1
        h = (h - self.pool_kernel) // self.pool_stride + 1
        h = h - self.k_temporal2 + 1
        h = (h - self.pool_kernel) // self.pool_stride + 1
        return (self.temporal_channels, h, self.n_channels)

    @property
    def flat_width(self) -> int:
        c, h, w = self.encoder_shape()
        return c * h * w

    def decoder_invertible(self) -> bool:
        c, h, _ = self.encoder_shape()
        h = h * self.pool_stride + self.k_temporal2 - 1
        h = h * self.pool_stride + self.k_temporal1 - 1
        return h == self.win

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "n_channels", "win", "spatial_filters", "temporal_channels",
            "k_temporal1", "k_temporal2", "pool_kernel", "pool_stride",
            "head_hidden", "leaky_slope")}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["head_hidden"] = tuple(d["head_hidden"])
        return cls(**d)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.temporal_channels
        self.net = Sequential(
            Conv2d(1, cfg.spatial_filters, (1, cfg.n_channels), rng, dtype=dtype),
            Permute((0, 3, 2, 1)),
            Conv2d(1, c, (cfg.k_temporal1, 1), rng, dtype=dtype),
            MaxPool2d((cfg.pool_kernel, 1), (cfg.pool_stride, 1)),
            LeakyReLU(cfg.leaky_slope),
            BatchNorm2d(c, dtype=dtype),
            Conv2d(c, c, (cfg.k_temporal2, 1), rng, dtype=dtype),
            MaxPool2d((cfg.pool_kernel, 1), (cfg.pool_stride, 1)),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class Head(Module):
    """Three fully-connected layers on the flattened encoder features."""

    def __init__(self, cfg: EncoderConfig, out: int, rng: np.random.Generator, dtype=np.float32):
        h1, h2 = cfg.head_hidden
        self.net = Sequential(
            Flatten(),
            Linear(cfg.flat_width, h1, rng, dtype=dtype),
            LeakyReLU(cfg.leaky_slope),
            Linear(h1, h2, rng, dtype=dtype),
            LeakyReLU(cfg.leaky_slope),
            Linear(h2, out, rng, dtype=dtype),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class ActivationDecoder(Module):
    """Upsample/transposed-conv mirror of the encoder ending in a 1 x win x C
    field; the final permute + spatial transposed conv undo the channel mix."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        if not cfg.decoder_invertible():
            raise ValueError(
                "decoder cannot reach the window length with this encoder config")
        c = cfg.temporal_channels
        self.net = Sequential(
            LeakyReLU(cfg.leaky_slope),
            BatchNorm2d(c, dtype=dtype),
            UpsampleNearest(cfg.pool_stride),
            ConvTranspose2d(c, c, (cfg.k_temporal2, 1), rng, dtype=dtype),
            LeakyReLU(cfg.leaky_slope),
            UpsampleNearest(cfg.pool_stride),
            ConvTranspose2d(c, 1, (cfg.k_temporal1, 1), rng, dtype=dtype),
            LeakyReLU(cfg.leaky_slope),
            Permute((0, 3, 2, 1)),
            ConvTranspose2d(cfg.spatial_filters, 1, (1, cfg.n_channels), rng, dtype=dtype),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


@dataclass
class MainOutputs:
    pattern: Tensor | None = None     # [n] decoupled-pattern prediction
    amplitude: Tensor | None = None   # [n, 2] (mu, sigma)
    angle: Tensor | None = None       # [n] direct regression (baseline mode)
    activation: Tensor | None = None  # [n, 100, C] decoded mask interval


class MainModel(Module):
    """Shared encoder plus per-flag heads and optional activation decoder."""

    def __init__(self, cfg: EncoderConfig, flags: AblationFlags,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.flags = flags
        self.encoder = Encoder(cfg, rng, dtype=dtype)
        if flags.decoupling:
            self.pattern_head = Head(cfg, 1, rng, dtype=dtype)
            self.amp_head = Head(cfg, 2, rng, dtype=dtype)
        else:
            self.angle_head = Head(cfg, 1, rng, dtype=dtype)
        if flags.activation_aux:
            self.decoder = ActivationDecoder(cfg, rng, dtype=dtype)

    def forward(self, x: Tensor) -> MainOutputs:
        enc = self.encoder(x)
        out = MainOutputs()
        if self.flags.decoupling:
            out.pattern = self.pattern_head(enc)[:, 0]
            out.amplitude = self.amp_head(enc)
        else:
            out.angle = self.angle_head(enc)[:, 0]
        if self.flags.activation_aux and self.training:
            dec = self.decoder(enc)  # [n, 1, win, C]
            n, _, win, ch = dec.shape
            group = win // MASK_BINS
            out.activation = dec.reshape(n, MASK_BINS, group, ch).mean(axis=2)
        return out


class TimingModel(Module):
    """Encoder of the same composition plus a two-output timing head."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, dtype=dtype)
        self.head = Head(cfg, 2, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.encoder(x))


@dataclass
class ModelBundle:
    """Everything needed for prediction: both networks plus their switches."""

    main: MainModel
    timing: TimingModel | None
    flags: AblationFlags
    cfg: EncoderConfig

    def save(self, path, opt_state: dict | None = None) -> None:
        tensors = {f"main.{k}": v for k, v in self.main.state_dict().items()}
        if self.timing is not None:
            tensors.update({f"timing.{k}": v for k, v in self.timing.state_dict().items()})
        save_checkpoint(path, tensors, opt_state)
        meta = {"flags": self.flags.to_dict(), "config": self.cfg.to_dict(),
                "has_timing": self.timing is not None}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ModelBundle":
        meta = json.loads(Path(str(path) + ".json").read_text())
        cfg = EncoderConfig.from_dict(meta["config"])
        flags = AblationFlags(**meta["flags"])
        rng = np.random.default_rng(0)
        main = MainModel(cfg, flags, rng, dtype=dtype)
        timing = TimingModel(cfg, rng, dtype=dtype) if meta["has_timing"] else None
        tensors, _ = load_checkpoint(path)
        main.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("main.")})
        if timing is not None:
            timing.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("timing.")})
        return cls(main=main, timing=timing, flags=flags, cfg=cfg)
