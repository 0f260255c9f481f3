"""Deep-shallow residual SR network with multi-kernel attention.

Data flow: LR stack [N,7,H,W] -> stem conv -> deep and shallow residual
panels -> fusion -> multi-kernel attention -> log2(scale) up-blocks ->
six per-target heads at HR.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .characteristics import KINDS, REGRESSION_TARGETS, TARGETS

CHECKPOINT_MAGIC = b"CSRM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = len(KINDS)
    width: int = 64
    block_repeats: int = 2
    shallow_convs_per_block: int = 2
    deep_convs_per_block: int = 4
    attention_kernels: tuple[int, ...] = (1, 3, 5, 7)
    attention_reduction: int = 4
    head_width: int = 32
    scale: int = 2
    back_projection: bool = False
    use_residual: bool = True
    use_attention: bool = True
    residual_scale: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attention_kernels", tuple(int(k) for k in self.attention_kernels))
        positive = ("in_channels", "width", "block_repeats", "shallow_convs_per_block",
                    "attention_reduction", "head_width")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.deep_convs_per_block != self.shallow_convs_per_block + 2:
            raise ConfigError("deep_convs_per_block", "must equal shallow_convs_per_block + 2")
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ConfigError("scale", f"must be a power of two >= 2, got {self.scale}")
        if not self.attention_kernels or any(k < 1 or k % 2 == 0 for k in self.attention_kernels):
            raise ConfigError("attention_kernels", "kernels must be odd and positive")
        if not self.residual_scale > 0:
            raise ConfigError("residual_scale", "must be > 0")
        if self.width % self.attention_reduction:
            raise ConfigError("attention_reduction", f"must divide width {self.width}")

    def to_json(self) -> str:
        d = asdict(self)
        d["attention_kernels"] = list(self.attention_kernels)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)


class Model:
    """Named parameter table plus the config that shaped it."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, prefixes: tuple[str, ...] | None) -> None:
        """Enable gradients only for parameters under ``prefixes`` (all when None)."""
        for name, p in self.params.items():
            p.requires_grad = prefixes is None or name.startswith(prefixes)

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise CheckpointError(f"parameter {n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)
            p.data.flags.writeable = False

    def copy(self) -> "Model":
        out = build_model(self.config, init=False)
        out.load_state(self.state())
        return out


# ------------------------------------------------------------------- building

def _conv_specs(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, cin, cout, k) for every convolution, in forward order."""
    c = cfg.width
    specs = [("backbone/stem", cfg.in_channels, c, 3)]
    for b in range(cfg.block_repeats):
        specs += [(f"backbone/deep/block{b}/conv{i}", c, c, 3) for i in range(cfg.deep_convs_per_block)]
    specs += [(f"backbone/shallow/block0/conv{i}", c, c, 3) for i in range(cfg.shallow_convs_per_block)]
    specs.append(("backbone/fusion", 2 * c, c, 1))
    if cfg.use_attention:
        specs += [(f"attention/branch_k{k}", c, c, k) for k in cfg.attention_kernels]
    for s in range(int(math.log2(cfg.scale))):
        specs.append((f"upscale/stage{s}/up", c, c, 3))
        if cfg.back_projection:
            specs.append((f"upscale/stage{s}/down", c, c, 3))
            specs.append((f"upscale/stage{s}/back", c, c, 3))
    for t in TARGETS:
        out = 2 if t == "LOS" else 1
        specs.append((f"head/{t}/conv0", c, cfg.head_width, 3))
        specs.append((f"head/{t}/conv1", cfg.head_width, out, 3))
    return specs


def _fc_specs(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    if not cfg.use_attention:
        return []
    c, r = cfg.width, cfg.width // cfg.attention_reduction
    out = [("attention/reduce", c, r)]
    out += [(f"attention/expand_k{k}", r, c) for k in cfg.attention_kernels]
    return out


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-name streams: toggling one component never reshuffles the others
    return np.random.default_rng([seed & ((1 << 64) - 1), zlib.crc32(name.encode())])


def build_model(config: ModelConfig, init: bool = True) -> Model:
    """He-uniform (fan-in) weights, zero biases, deterministic from ``config.seed``.

    With the input skip on, the last conv of each regression head starts at
    zero so an untrained model predicts the nearest-upsampled input.
    """
    params: dict[str, Tensor] = {}
    zero_start = {f"head/{t}/conv1" for t in REGRESSION_TARGETS} if config.use_residual else set()
    for name, cin, cout, k in _conv_specs(config):
        shape = (cout, cin, k, k)
        fill = init and name not in zero_start
        w = ad.he_uniform(_param_rng(config.seed, name), shape, cin * k * k) if fill else np.zeros(shape)
        params[f"{name}/weight"] = Tensor(w, requires_grad=True)
        params[f"{name}/bias"] = Tensor(np.zeros(cout), requires_grad=True)
    for name, din, dout in _fc_specs(config):
        w = ad.he_uniform(_param_rng(config.seed, name), (dout, din), din) if init else np.zeros((dout, din))
        params[f"{name}/weight"] = Tensor(w, requires_grad=True)
        params[f"{name}/bias"] = Tensor(np.zeros(dout), requires_grad=True)
    return Model(config, params)


# -------------------------------------------------------------------- forward

def _conv(model: Model, name: str, x: Tensor) -> Tensor:
    return ad.conv2d(x, model.params[f"{name}/weight"], model.params[f"{name}/bias"])


def _fc(model: Model, name: str, x: Tensor) -> Tensor:
    return ad.fully_connected(x, model.params[f"{name}/weight"], model.params[f"{name}/bias"])


def _panel_block(model: Model, prefix: str, n_convs: int, x: Tensor) -> Tensor:
    h = x
    for i in range(n_convs):
        h = _conv(model, f"{prefix}/conv{i}", h)
        if i < n_convs - 1:
            h = ad.relu(h)
    return h + x if model.config.use_residual else h


def forward_stem(x: Tensor, model: Model) -> Tensor:
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ad.ShapeError(f"model expects [N,{cfg.in_channels},H,W] input, got {x.shape}")
    return _conv(model, "backbone/stem", x)


def forward_panels(stem: Tensor, model: Model) -> Tensor:
    """Deep and shallow residual panels on stem features, then fusion.

    Fusion is a 1x1 conv over the channel concatenation; with residuals on,
    the mean of the two panels is added back, so zeroed panel convs reduce
    the whole backbone to the identity on stem features.
    """
    cfg = model.config
    deep = stem
    for b in range(cfg.block_repeats):
        deep = _panel_block(model, f"backbone/deep/block{b}", cfg.deep_convs_per_block, deep)
    shallow = _panel_block(model, "backbone/shallow/block0", cfg.shallow_convs_per_block, stem)
    fused = _conv(model, "backbone/fusion", ad.concat([deep, shallow], axis=1))
    if cfg.use_residual:
        fused = fused + ad.mul_scalar(deep + shallow, 0.5)
    return fused


def forward_backbone(x: Tensor, model: Model) -> Tensor:
    return forward_panels(forward_stem(x, model), model)


def attention_weights(features: Tensor, model: Model) -> tuple[Tensor, list[Tensor]]:
    """Branch maps K_i and their softmax weights [N,B,C]."""
    cfg = model.config
    if features.shape[1] != cfg.width:
        raise ad.ShapeError(f"attention expects {cfg.width} channels, got {features.shape[1]}")
    branches = [_conv(model, f"attention/branch_k{k}", features) for k in cfg.attention_kernels]
    total = branches[0]
    for b in branches[1:]:
        total = total + b
    z = ad.global_avg_pool(total)
    u = ad.relu(_fc(model, "attention/reduce", z))
    logits = ad.stack([_fc(model, f"attention/expand_k{k}", u) for k in cfg.attention_kernels], axis=1)
    return ad.branch_softmax(logits), branches


def forward_attention(features: Tensor, model: Model) -> Tensor:
    if not model.config.use_attention:
        return features
    weights, branches = attention_weights(features, model)
    out = None
    for i, k_map in enumerate(branches):
        term = ad.scale_channels(k_map, ad.take(weights, i, axis=1))
        out = term if out is None else out + term
    return out


def upscale(features: Tensor, model: Model, scale: int | None = None) -> Tensor:
    cfg = model.config
    scale = scale or cfg.scale
    if scale != cfg.scale:
        raise ValueError(f"model was built for scale {cfg.scale}, asked for {scale}")
    h = features
    for s in range(int(math.log2(scale))):
        low = h
        h = ad.relu(_conv(model, f"upscale/stage{s}/up", ad.upsample_nearest(low, 2)))
        if cfg.back_projection:
            down = _conv(model, f"upscale/stage{s}/down", ad.block_mean(h, 2))
            err = down - low
            h = h + _conv(model, f"upscale/stage{s}/back", ad.upsample_nearest(err, 2))
    return h


def forward_heads(features: Tensor, model: Model) -> dict[str, Tensor]:
    out = {}
    for t in TARGETS:
        h = ad.relu(_conv(model, f"head/{t}/conv0", features))
        out[t] = _conv(model, f"head/{t}/conv1", h)
    return out


def input_skip(x: Tensor, out: dict[str, Tensor], model: Model) -> dict[str, Tensor]:
    """Regression output = nearest-upsampled LR channel + residual_scale * head output.

    The scale keeps Adam-sized steps on the last head conv small next to the
    sub-dB corrections the heads have to learn.
    """
    up = ad.upsample_nearest(x, model.config.scale)
    gain = model.config.residual_scale
    for t in REGRESSION_TARGETS:
        head = out[t] if gain == 1.0 else ad.mul_scalar(out[t], gain)
        out[t] = head + ad.reshape(ad.take(up, KINDS.index(t), axis=1), out[t].shape)
    return out


def forward(model: Model, lr_input, scale: int | None = None) -> dict[str, Tensor]:
    """Full SR pass. Regression targets come back as [N,1,Hs,Ws] normalized
    maps, LOS as [N,2,Hs,Ws] class logits (index 1 = LOS).

    With residuals on, regression heads predict a correction to the
    upsampled input map of their own target.
    """
    x = ad.as_tensor(lr_input)
    feats = forward_attention(forward_backbone(x, model), model)
    out = forward_heads(upscale(feats, model, scale), model)
    if model.config.use_residual:
        out = input_skip(x, out, model)
    return out


def predict(model: Model, lr_input: np.ndarray, batch: int = 4) -> dict[str, np.ndarray]:
    """Graph-free inference over [N,7,H,W]; regression maps [N,Hs,Ws], LOS labels [N,Hs,Ws]."""
    outs: dict[str, list[np.ndarray]] = {t: [] for t in TARGETS}
    with ad.no_grad():
        for i in range(0, len(lr_input), batch):
            pred = forward(model, ad.Tensor(lr_input[i:i + batch]))
            for t in REGRESSION_TARGETS:
                outs[t].append(pred[t].data[:, 0])
            logits = pred["LOS"].data
            outs["LOS"].append((logits[:, 1] > logits[:, 0]).astype(np.float64))
    return {t: np.concatenate(v) for t, v in outs.items()}


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path: str | Path) -> None:
    cfg = model.config.to_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Model:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, n_cfg = struct.unpack_from("<HI", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        off = 10
        config = ModelConfig.from_dict(json.loads(blob[off:off + n_cfg].decode("utf-8")))
        off += n_cfg
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        state = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n_name].decode("utf-8")
            off += n_name
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(blob):
                raise CheckpointError(f"{path}: truncated in parameter {name}")
            state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if expect is not None and expect != config:
        raise CheckpointError(f"{path}: checkpoint config {config} incompatible with {expect}")
    model = build_model(config, init=False)
    if set(state) != set(model.params):
        missing = sorted(set(model.params) ^ set(state))
        raise CheckpointError(f"{path}: parameter table mismatch, e.g. {missing[0]}")
    model.load_state(state)
    return model
