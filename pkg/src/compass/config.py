"""Dataclass configurations and size presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

PADDING_MODES = ("layerwise", "lump")
PREDICTORS = ("liff", "bicubic")
LATENT_MODES = ("rounded", "noisy")


@dataclass
class CodecConfig:
    # n: channels of y (encoder output), m: channels of z (hyper-encoder output)
    n: int = 128
    m: int = 192
    mid: int | None = None  # width of intermediate layers, defaults to n
    padding: str = "layerwise"
    lump_multiple: int = 64
    prior_filters: tuple[int, ...] = (3, 3, 3)
    # at init, the first analysis conv is scaled by init_gain and the last
    # synthesis layer by 1/init_gain; > 1 suits low-amplitude inputs (residuals)
    init_gain: float = 1.0

    def __post_init__(self):
        if self.init_gain <= 0:
            raise ValueError("init_gain must be positive")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")
        self.prior_filters = tuple(self.prior_filters)

    @property
    def width(self) -> int:
        return self.mid if self.mid is not None else self.n


@dataclass
class LiffConfig:
    n_feats: int = 64
    n_rdb: int = 4
    rdb_convs: int = 4
    growth: int = 32
    mlp_hidden: tuple[int, ...] = (256, 256, 256, 256, 256)
    query_chunk: int = 32768

    def __post_init__(self):
        self.mlp_hidden = tuple(self.mlp_hidden)

    @property
    def unfolded(self) -> int:
        return self.n_feats * 9


RESIDUAL_GAIN = 10.0


@dataclass
class ModelConfig:
    bl: CodecConfig = field(default_factory=CodecConfig)
    rc: CodecConfig = field(default_factory=lambda: CodecConfig(init_gain=RESIDUAL_GAIN))
    liff: LiffConfig = field(default_factory=LiffConfig)
    predictor: str = "liff"

    def __post_init__(self):
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            bl=CodecConfig(**d["bl"]),
            rc=CodecConfig(**d["rc"]),
            liff=LiffConfig(**d["liff"]),
            predictor=d.get("predictor", "liff"),
        )


def preset(name: str, **overrides) -> ModelConfig:
    """Named model sizes.

    ``paper`` is the full configuration; ``desk`` trains in minutes on one
    CPU core; ``tiny`` is for finite-difference gradient checks.
    """
    if name == "paper":
        cfg = ModelConfig()
    elif name == "desk":
        cfg = ModelConfig(
            bl=CodecConfig(n=48, m=32, mid=48, prior_filters=(3, 3)),
            rc=CodecConfig(n=48, m=32, mid=48, prior_filters=(3, 3), init_gain=RESIDUAL_GAIN),
            liff=LiffConfig(n_feats=8, n_rdb=2, rdb_convs=3, growth=16, mlp_hidden=(64, 64)),
        )
    elif name == "tiny":
        cfg = ModelConfig(
            bl=CodecConfig(n=8, m=8, prior_filters=(3,)),
            rc=CodecConfig(n=8, m=8, prior_filters=(3,), init_gain=RESIDUAL_GAIN),
            liff=LiffConfig(n_feats=4, n_rdb=1, rdb_convs=2, growth=4, mlp_hidden=(8,)),
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    valid = {f.name for f in fields(ModelConfig)}
    for key, value in overrides.items():
        if key in valid:
            setattr(cfg, key, value)
        elif key == "padding":
            cfg.bl.padding = cfg.rc.padding = value
        else:
            raise ValueError(f"unknown override {key!r}")
    cfg.__post_init__()
    for c in (cfg.bl, cfg.rc):
        c.__post_init__()
    return cfg
