"""Model configuration registry and builder.

A built model is a conv stem, four stages of blocks with downsample layers
between them, and a classifier head.  Stages 1-2 hold inverted residual
blocks only; stages 3-4 append dilated convolution blocks after the IRBs.
Variant configurations (ti/s/m/b) follow the published architecture table;
`micro` is a tiny non-standard variant for fast tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .blocks import (
    MIXER_MODES,
    DilatedConvBlock,
    DownsampleBlock,
    HeadBlock,
    InvertedResidualBlock,
    LkFfnBlock,
    MldcBlock,
    StemBlock,
)
from .errors import ConfigError, GeometryError, ShapeError
from .ops import Param
from .tensor import Rng, resolve_dtype


@dataclass(frozen=True)
class StageConfig:
    channels: int
    n_irb: int
    n_dcb: int


@dataclass(frozen=True)
class ModelConfig:
    stages: Tuple[StageConfig, StageConfig, StageConfig, StageConfig]
    num_classes: int = 1000
    mixer_mode: str = "mldc"
    dilations: Tuple[int, int] = (2, 3)
    mixer_kernel: int = 3
    use_cpe: bool = True
    lk_ffn: bool = True
    gelu_per_branch: bool = False
    head_hidden: Optional[int] = None
    seed: int = 0
    variant: str = "custom"

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}")
        for i, st in enumerate(self.stages):
            if st.channels < 1 or st.n_irb < 0 or st.n_dcb < 0:
                raise ConfigError(f"stage {i + 1} has invalid counts: {st}")
            if i < 2 and st.n_dcb != 0:
                raise ConfigError(f"stage {i + 1} must not contain dilated conv blocks")
        if self.stages[0].channels % 2 != 0:
            raise ConfigError("stage-1 channel count must be even (stem runs at half width)")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.mixer_mode not in MIXER_MODES:
            raise ConfigError(f"unknown mixer_mode {self.mixer_mode!r}; "
                              f"expected one of {MIXER_MODES}")
        if self.mixer_kernel < 1 or self.mixer_kernel % 2 == 0:
            raise ConfigError(f"mixer_kernel must be odd and >= 1, got {self.mixer_kernel}")
        da, db = self.dilations
        if da < 1 or db < 1:
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if self.mixer_mode == "mldc" and not (2 <= da < db):
            raise ConfigError("mldc mode requires strictly increasing dilations, each >= 2; "
                              f"got {self.dilations}")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ConfigError(f"head_hidden must be >= 1, got {self.head_hidden}")

    def to_dict(self) -> dict:
        return {
            "stages": [[st.channels, st.n_irb, st.n_dcb] for st in self.stages],
            "num_classes": self.num_classes,
            "mixer_mode": self.mixer_mode,
            "dilations": list(self.dilations),
            "mixer_kernel": self.mixer_kernel,
            "use_cpe": self.use_cpe,
            "lk_ffn": self.lk_ffn,
            "gelu_per_branch": self.gelu_per_branch,
            "head_hidden": self.head_hidden,
            "seed": self.seed,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        stages = tuple(StageConfig(*s) for s in d["stages"])
        return cls(
            stages=stages,
            num_classes=d["num_classes"],
            mixer_mode=d["mixer_mode"],
            dilations=tuple(d["dilations"]),
            mixer_kernel=d["mixer_kernel"],
            use_cpe=d["use_cpe"],
            lk_ffn=d["lk_ffn"],
            gelu_per_branch=d["gelu_per_branch"],
            head_hidden=d["head_hidden"],
            seed=d["seed"],
            variant=d.get("variant", "custom"),
        )


# Stage tables: (channels, n_irb, n_dcb) per stage.
_VARIANT_STAGES = {
    "ti": ((32, 2, 0), (64, 2, 0), (112, 6, 2), (224, 2, 2)),
    "s": ((32, 3, 0), (64, 3, 0), (112, 9, 3), (224, 3, 3)),
    "m": ((32, 3, 0), (64, 3, 0), (160, 9, 3), (320, 3, 3)),
    "b": ((64, 3, 0), (128, 3, 0), (224, 9, 3), (416, 3, 3)),
    # Non-standard tiny variant for CI; not part of the published family.
    "micro": ((8, 1, 0), (16, 1, 0), (24, 1, 1), (32, 1, 1)),
}

# Hidden width of the classifier MLP for the published variants.  The micro
# variant uses the plain linear head.
_HEAD_HIDDEN = 1280

VARIANTS = tuple(_VARIANT_STAGES)


def default_config(variant: str) -> ModelConfig:
    """Configuration for a named variant with default flags."""
    key = variant.lower()
    if key not in _VARIANT_STAGES:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    stages = tuple(StageConfig(*s) for s in _VARIANT_STAGES[key])
    if key == "micro":
        return ModelConfig(stages=stages, num_classes=8, head_hidden=None, variant=key)
    return ModelConfig(stages=stages, num_classes=1000, head_hidden=_HEAD_HIDDEN, variant=key)


class RapidNetModel:
    """A built network: stem, four stages with interleaved downsamples, head.

    `mode` is "train" or "eval"; eval-mode forward is pure, train-mode
    forward updates BN running statistics and records activations so that
    `backward` can run.  Parameter names follow
    stage{i}.{irb|dcb}{j}.<layer>.<tensor> (see `iter_params`).
    """

    def __init__(self, config: ModelConfig, stem: StemBlock,
                 stages: List[List[object]], downsamples: List[DownsampleBlock],
                 head: HeadBlock, dtype=np.float32, fused: bool = False):
        self.config = config
        self.stem = stem
        self.stages = stages
        self.downsamples = downsamples
        self.head = head
        self.dtype = np.dtype(dtype)
        self.fused = fused
        self.mode = "eval"

    # -- structure ---------------------------------------------------------

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        for bn in self.iter_batchnorms():
            bn.mode = mode

    def iter_batchnorms(self) -> Iterator[object]:
        """Every BatchNorm2d layer in the structure (none after fusion)."""
        from .ops import BatchNorm2d

        for _, blk in self.named_blocks():
            stack = [blk]
            while stack:
                b = stack.pop()
                if isinstance(b, DilatedConvBlock):
                    stack += [b.mldc, b.ffn]
                    continue
                for attr in vars(b).values():
                    for item in (attr if isinstance(attr, list) else [attr]):
                        if isinstance(item, BatchNorm2d):
                            yield item

    def named_blocks(self) -> Iterator[Tuple[str, object]]:
        """(name, block) pairs in forward order."""
        yield "stem", self.stem
        for i, stage in enumerate(self.stages):
            n_irb = self.config.stages[i].n_irb
            for j, blk in enumerate(stage):
                if j < n_irb:
                    yield f"stage{i + 1}.irb{j}", blk
                else:
                    yield f"stage{i + 1}.dcb{j - n_irb}", blk
            if i < 3:
                yield f"down{i + 1}", self.downsamples[i]
        yield "head", self.head

    def iter_params(self) -> List[Tuple[str, Param]]:
        params = []
        for bname, blk in self.named_blocks():
            for pname, p in blk.named_params():
                params.append((f"{bname}.{pname}", p))
        return params

    def iter_buffers(self) -> List[Tuple[str, np.ndarray]]:
        bufs = []
        for bname, blk in self.named_blocks():
            for name, buf in blk.named_buffers():
                bufs.append((f"{bname}.{name}", buf))
        return bufs

    def zero_grad(self) -> None:
        for _, p in self.iter_params():
            p.zero_grad()

    # -- execution ---------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"model input must be 4-D (N,3,H,W), got {x.shape}")
        if x.shape[1] != self.stem.conv1.in_channels:
            raise ShapeError(f"model expects {self.stem.conv1.in_channels}-channel input, "
                             f"got {x.shape[1]}")
        if x.shape[2] % 32 != 0 or x.shape[3] % 32 != 0:
            raise GeometryError(f"input resolution {x.shape[2]}x{x.shape[3]} "
                                "must be divisible by 32")
        train = self.mode == "train"
        h = self.stem.forward(x, train)
        for i, stage in enumerate(self.stages):
            for blk in stage:
                h = blk.forward(h, train)
            if i < 3:
                h = self.downsamples[i].forward(h, train)
        return self.head.forward(h, train)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Propagate loss gradients back through the whole network.

        Requires a preceding train-mode forward; accumulates into each
        parameter's grad slot and returns the gradient w.r.t. the input.
        """
        g = self.head.backward(grad_logits)
        for i in range(3, -1, -1):
            if i < 3:
                g = self.downsamples[i].backward(g)
            for blk in reversed(self.stages[i]):
                g = blk.backward(g)
        return self.stem.backward(g)


def build_model(cfg: ModelConfig, dtype="f32") -> RapidNetModel:
    """Construct and deterministically initialize a model from its config."""
    cfg.validate()
    dt = resolve_dtype(dtype)
    rng = Rng(cfg.seed)

    stem = StemBlock(3, cfg.stages[0].channels, rng=rng, dtype=dt)
    stages: List[List[object]] = []
    downsamples: List[DownsampleBlock] = []
    for i, st in enumerate(cfg.stages):
        blocks: List[object] = []
        for _ in range(st.n_irb):
            blocks.append(InvertedResidualBlock(st.channels, rng=rng, dtype=dt))
        for _ in range(st.n_dcb):
            mldc = MldcBlock(st.channels, dilations=cfg.dilations, kernel=cfg.mixer_kernel,
                             mixer_mode=cfg.mixer_mode, use_cpe=cfg.use_cpe,
                             gelu_per_branch=cfg.gelu_per_branch, rng=rng, dtype=dt)
            ffn = LkFfnBlock(st.channels, large_kernel=cfg.lk_ffn, rng=rng, dtype=dt)
            blocks.append(DilatedConvBlock(mldc, ffn))
        stages.append(blocks)
        if i < 3:
            downsamples.append(DownsampleBlock(st.channels, cfg.stages[i + 1].channels,
                                               rng=rng, dtype=dt))
    head = HeadBlock(cfg.stages[3].channels, cfg.num_classes, hidden=cfg.head_hidden,
                     rng=rng, dtype=dt)
    return RapidNetModel(cfg, stem, stages, downsamples, head, dtype=dt)


def model_forward(model: RapidNetModel, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def iter_params(model: RapidNetModel) -> List[Tuple[str, Param]]:
    """Ordered (name, param) list; every learnable tensor appears exactly once."""
    return model.iter_params()


def with_seed(cfg: ModelConfig, seed: int) -> ModelConfig:
    return replace(cfg, seed=seed)
