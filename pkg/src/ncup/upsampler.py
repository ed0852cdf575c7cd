"""The NCUP pipeline: weights estimation, forward mapping and normalized-convolution interpolation."""

from __future__ import annotations

import io
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .nconv import NConvKernel, conf_pool, conf_unpool, nconv_forward, nconv_fuse
from .sparsify import SparseGrid, forward_map
from .tensor import (
    BatchNormParams,
    DimensionError,
    Tensor,
    activation,
    batch_norm,
    concat,
    conv2d,
    read_tensor,
    relu,
    resize,
    write_tensor,
)

DEFAULT_CHANNELS = {"rgb": (16, 8), "features": (64, 32)}


@dataclass
class WeightsNetConfig:
    ch1: int = 16
    ch2: int = 8
    guidance_channels: int = 3
    target_channels: int = 2
    final_activation: str = "sigmoid"
    batch_norm: bool = True

    def __post_init__(self):
        if self.final_activation not in ("sigmoid", "softplus"):
            raise ValueError(f"final activation must be sigmoid or softplus, got {self.final_activation!r}")

    @classmethod
    def preset(cls, guidance: str = "rgb", **overrides) -> "WeightsNetConfig":
        ch1, ch2 = DEFAULT_CHANNELS[guidance]
        return cls(ch1=ch1, ch2=ch2, **overrides)

    @property
    def is_default(self) -> bool:
        return (self.ch1, self.ch2) in DEFAULT_CHANNELS.values()


@dataclass
class InterpNetConfig:
    downsamplings: int = 1
    pooling: str = "conf"
    encoder: tuple[int, ...] = (5, 5)
    bottleneck: tuple[int, ...] = (5, 5)
    fuse: int = 5
    decoder: tuple[int, ...] = ()
    head: int = 3
    preset: str = "default"

    def __post_init__(self):
        if self.pooling not in ("conf", "max"):
            raise ValueError(f"pooling must be conf or max, got {self.pooling!r}")
        if self.downsamplings < 1:
            raise ValueError("at least one downsampling is required")
        self.encoder = tuple(self.encoder)
        self.bottleneck = tuple(self.bottleneck)
        self.decoder = tuple(self.decoder)

    @classmethod
    def from_preset(cls, name: str = "default", **overrides) -> "InterpNetConfig":
        if name == "default":
            return cls(**overrides)
        if name == "paper-224":
            # best-effort reconstruction of the 224-parameter variant; lands at 225
            return cls(encoder=(5, 5, 5), decoder=(5,), head=5, preset=name, **overrides)
        raise ValueError(f"unknown interpolation preset {name!r}")

    def param_count(self) -> int:
        sq = lambda k: k * k  # noqa: E731
        levels = sum(map(sq, self.encoder)) + self.downsamplings * sum(map(sq, self.bottleneck))
        return levels + self.downsamplings * 2 * sq(self.fuse) + sum(map(sq, self.decoder)) + sq(self.head)


def _he(rng: np.random.Generator, shape) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class WeightsNet:
    """Two 3x3 conv/BN/ReLU blocks and a 1x1 head with a non-negative activation."""

    def __init__(self, cfg: WeightsNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        cin = cfg.target_channels + cfg.guidance_channels
        self.conv1_w = _he(rng, (cfg.ch1, cin, 3, 3))
        self.conv1_b = Tensor(np.zeros(cfg.ch1), requires_grad=True)
        self.conv2_w = _he(rng, (cfg.ch2, cfg.ch1, 3, 3))
        self.conv2_b = Tensor(np.zeros(cfg.ch2), requires_grad=True)
        self.conv3_w = _he(rng, (cfg.target_channels, cfg.ch2, 1, 1))
        self.conv3_b = Tensor(np.zeros(cfg.target_channels), requires_grad=True)
        self.bn1 = BatchNormParams(cfg.ch1)
        self.bn2 = BatchNormParams(cfg.ch2)
        self.training = True

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "conv1.weight": self.conv1_w,
            "conv1.bias": self.conv1_b,
            "conv2.weight": self.conv2_w,
            "conv2.bias": self.conv2_b,
            "conv3.weight": self.conv3_w,
            "conv3.bias": self.conv3_b,
        }
        if self.cfg.batch_norm:
            params.update(
                {
                    "bn1.weight": self.bn1.weight,
                    "bn1.bias": self.bn1.bias,
                    "bn2.weight": self.bn2.weight,
                    "bn2.bias": self.bn2.bias,
                }
            )
        return params

    def __call__(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        bn = self.cfg.batch_norm
        h = relu(batch_norm(conv2d(x, self.conv1_w, self.conv1_b, pad=1), self.bn1, mode, bn))
        h = relu(batch_norm(conv2d(h, self.conv2_w, self.conv2_b, pad=1), self.bn2, mode, bn))
        return activation(conv2d(h, self.conv3_w, self.conv3_b), self.cfg.final_activation)


def _inv_softplus(a: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(a))


def gaussian_kernel(size: int, in_channels: int = 1, sigma: float = 0.5, shift: float = 0.0,
                    stream_gain=None, floor: float = 1e-3) -> NConvKernel:
    """Kernel whose effective (post-softplus) taps follow a peaked Gaussian.

    ``shift`` moves the peak diagonally towards negative offsets; ``stream_gain``
    scales each input channel.
    """
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-((r[:, None] - shift) ** 2 + (r[None, :] - shift) ** 2) / (2 * sigma**2))
    taps = np.broadcast_to(np.maximum(g / g.max(), floor), (1, in_channels, size, size)).copy()
    if stream_gain is not None:
        taps *= np.asarray(stream_gain, dtype=float).reshape(1, -1, 1, 1)
    return NConvKernel(_inv_softplus(taps))


class InterpNet:
    """U-Net shaped cascade of normalized convolutions with confidence pooling.

    ``init="gaussian"`` starts from sharp kernels: the first layer is centred on
    the low-resolution cell each corner-mapped sample stands for, and the skip
    fusion trusts the full-resolution stream, keeping the coarse stream as a
    fallback where the former has no support.  ``init="uniform"`` gives equal taps.
    """

    def __init__(self, cfg: InterpNetConfig, scale: int = 4, init: str = "gaussian", sigma: float = 0.5,
                 coarse_gain: float = 0.01):
        self.cfg = cfg
        if init == "uniform":
            k = lambda size, cin=1, shift=0.0, gain=None: NConvKernel.uniform(size, in_channels=cin)  # noqa: E731
        elif init == "gaussian":
            k = lambda size, cin=1, shift=0.0, gain=None: gaussian_kernel(size, cin, sigma, shift, gain)  # noqa: E731
        else:
            raise ValueError(f"unknown kernel init {init!r}")
        self.kernels: dict[str, NConvKernel] = {}
        for i, size in enumerate(cfg.encoder):
            shift = -min((scale - 1) / 2, (size - 1) // 2) if i == 0 else 0.0
            self.kernels[f"enc0.{i}"] = k(size, shift=shift)
        for level in range(1, cfg.downsamplings + 1):
            for i, size in enumerate(cfg.bottleneck):
                self.kernels[f"enc{level}.{i}"] = k(size)
        for level in range(cfg.downsamplings - 1, -1, -1):
            self.kernels[f"fuse{level}"] = k(cfg.fuse, 2, gain=(1.0, coarse_gain))
        for i, size in enumerate(cfg.decoder):
            self.kernels[f"dec0.{i}"] = k(size)
        self.kernels["head"] = k(cfg.head)

    def parameters(self) -> dict[str, Tensor]:
        return {name: kernel.raw for name, kernel in self.kernels.items()}

    def __call__(self, data: Tensor, conf: Tensor):
        cfg = self.cfg
        skips = []
        for i in range(len(cfg.encoder)):
            data, conf = nconv_forward(data, conf, self.kernels[f"enc0.{i}"])
        for level in range(1, cfg.downsamplings + 1):
            skips.append((data, conf))
            data, conf = conf_pool(data, conf, 2, cfg.pooling)
            for i in range(len(cfg.bottleneck)):
                data, conf = nconv_forward(data, conf, self.kernels[f"enc{level}.{i}"])
        for level in range(cfg.downsamplings - 1, -1, -1):
            up_d, up_c = conf_unpool(data, conf, 2)
            skip_d, skip_c = skips[level]
            data, conf = nconv_fuse(skip_d, skip_c, up_d, up_c, self.kernels[f"fuse{level}"])
        for i in range(len(cfg.decoder)):
            data, conf = nconv_forward(data, conf, self.kernels[f"dec0.{i}"])
        return nconv_forward(data, conf, self.kernels["head"])


class NCUPModel:
    """Parameter bundle for the full upsampler at a fixed integer scale."""

    def __init__(
        self,
        scale: int = 4,
        weights_cfg: WeightsNetConfig | None = None,
        interp_cfg: InterpNetConfig | None = None,
        seed: int = 0,
    ):
        self.scale = int(scale)
        self.weights_cfg = weights_cfg or WeightsNetConfig()
        self.interp_cfg = interp_cfg or InterpNetConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights_net = WeightsNet(self.weights_cfg, rng)
        self.interp_net = InterpNet(self.interp_cfg, self.scale)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"weights.{k}": v for k, v in self.weights_net.parameters().items()}
        params.update({f"interp.{k}": v for k, v in self.interp_net.parameters().items()})
        return params

    def param_counts(self) -> dict[str, int]:
        w = sum(p.data.size for p in self.weights_net.parameters().values())
        i = sum(p.data.size for p in self.interp_net.parameters().values())
        return {"weights_net": w, "interp_net": i, "total": w + i}

    def train(self, mode: bool = True) -> "NCUPModel":
        self.weights_net.training = mode
        return self

    def eval(self) -> "NCUPModel":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self.weights_net.training

    def __call__(self, flow_lr, guidance_lr) -> Tensor:
        return ncup_upsample(flow_lr, guidance_lr, self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def estimate_weights(target_lr, guidance_lr, net: WeightsNet) -> Tensor:
    """Per-pixel confidences for the low-resolution target, from target and guidance jointly."""
    target_lr, guidance_lr = _lift(target_lr), _lift(guidance_lr)
    if target_lr.shape[0] != guidance_lr.shape[0] or target_lr.shape[2:] != guidance_lr.shape[2:]:
        raise DimensionError(
            f"target {target_lr.shape} and guidance {guidance_lr.shape} must share batch and spatial size"
        )
    return net(concat([target_lr, guidance_lr], axis=1))


def interpolate(grid: SparseGrid, net: InterpNet):
    """Densify a forward-mapped grid; returns ``(data, conf)``."""
    if not np.any(grid.conf.data > 0):
        warnings.warn("sparse grid has no populated pixel; output confidence is zero", RuntimeWarning)
    return net(grid.data, grid.conf)


def ncup_upsample(flow_lr, guidance_lr, model: NCUPModel, return_conf: bool = False):
    """Upsample a low-resolution flow by ``model.scale`` steered by low-resolution guidance.

    The weights network sees both flow channels together; each channel is then
    interpolated on its own and the results are stacked back.
    """
    flow_lr, guidance_lr = _lift(flow_lr), _lift(guidance_lr)
    s = model.scale
    n, c, h, w = flow_lr.shape
    gh, gw = guidance_lr.shape[2:]
    if (gh, gw) != (h, w):
        if (gh, gw) == (s * h, s * w):
            raise DimensionError(
                f"guidance is {gh}x{gw}, i.e. at the high resolution; downsample it by {s} "
                f"to match the {h}x{w} flow"
            )
        raise DimensionError(f"guidance {gh}x{gw} does not match flow {h}x{w}")

    weights = estimate_weights(flow_lr, guidance_lr, model.weights_net)
    grid = forward_map(flow_lr.reshape(n * c, 1, h, w), weights.reshape(n * c, 1, h, w), s)
    data, conf = interpolate(grid, model.interp_net)
    out = data.reshape(n, c, s * h, s * w)
    if return_conf:
        return out, conf.reshape(n, c, s * h, s * w), weights
    return out


def bilinear_baseline(flow_lr, s: int, rescale: bool = True) -> Tensor:
    """Bilinear upsampling; ``rescale`` multiplies displacements by ``s``."""
    out = resize(_lift(flow_lr), s, "bilinear")
    return out * float(s) if rescale and s != 1 else out


# ----------------------------------------------------------------- checkpoints
CHECKPOINT_HEADER = "NCUP-CHECKPOINT 1"


def _buffers(model: NCUPModel) -> dict[str, np.ndarray]:
    net = model.weights_net
    if not model.weights_cfg.batch_norm:
        return {}
    return {
        "weights.bn1.running_mean": net.bn1.running_mean,
        "weights.bn1.running_var": net.bn1.running_var,
        "weights.bn2.running_mean": net.bn2.running_mean,
        "weights.bn2.running_var": net.bn2.running_var,
    }


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    return str(value)


def save_model(model: NCUPModel, path) -> None:
    params = model.parameters()
    buffers = _buffers(model)
    lines = [CHECKPOINT_HEADER, f"scale={model.scale}", f"seed={model.seed}"]
    lines += [f"weights.{k}={_fmt(v)}" for k, v in asdict(model.weights_cfg).items()]
    lines += [f"interp.{k}={_fmt(v)}" for k, v in asdict(model.interp_cfg).items()]
    lines.append(f"bn_initialized={int(model.weights_net.bn1.initialized)}")
    lines.append("params=" + ",".join(params))
    lines.append("buffers=" + ",".join(buffers))
    lines.append("END")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for p in params.values():
        write_tensor(buf, p.data)
    for b in buffers.values():
        write_tensor(buf, b)
    Path(path).write_bytes(buf.getvalue())


def _parse_field(cls, name: str, text: str):
    kind = {f.name: f.type for f in fields(cls)}[name]
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind.startswith("tuple"):
        return tuple(int(t) for t in text.split(",") if t)
    if kind == "bool":
        return text == "True"
    if kind == "int":
        return int(text)
    return text


def read_manifest(fh) -> dict[str, str]:
    first = fh.readline().decode("ascii", "replace").strip()
    if first != CHECKPOINT_HEADER:
        raise ValueError(f"not an NCUP checkpoint (header {first!r})")
    manifest = {}
    while True:
        line = fh.readline()
        if not line:
            raise OSError("truncated checkpoint manifest")
        line = line.decode("ascii").rstrip("\n")
        if line == "END":
            return manifest
        key, _, value = line.partition("=")
        manifest[key] = value


def load_model(path, strict: bool = True) -> NCUPModel:
    """Rebuild a model from a checkpoint.  ``strict`` requires every shape to match."""
    with open(path, "rb") as fh:
        manifest = read_manifest(fh)
        wkw = {k[8:]: _parse_field(WeightsNetConfig, k[8:], v) for k, v in manifest.items() if k.startswith("weights.")}
        ikw = {k[7:]: _parse_field(InterpNetConfig, k[7:], v) for k, v in manifest.items() if k.startswith("interp.")}
        model = NCUPModel(
            scale=int(manifest["scale"]),
            weights_cfg=WeightsNetConfig(**wkw),
            interp_cfg=InterpNetConfig(**ikw),
            seed=int(manifest.get("seed", 0)),
        )
        params = model.parameters()
        names = [n for n in manifest.get("params", "").split(",") if n]
        buffer_names = [n for n in manifest.get("buffers", "").split(",") if n]
        if strict and names != list(params):
            raise ValueError("checkpoint parameter list does not match its configuration")
        for name in names:
            array = read_tensor(fh)
            if name not in params:
                continue
            target = params[name]
            if strict and array.size != target.data.size:
                raise ValueError(f"parameter {name}: {array.size} values, expected {target.data.size}")
            target.data = array.reshape(target.shape) if array.size == target.data.size else array
        bufs = _buffers(model)
        bn = model.weights_net
        for name in buffer_names:
            array = read_tensor(fh).ravel()
            if name in bufs:
                layer, stat = name.split(".")[1:3]
                setattr(getattr(bn, layer), stat, array.copy())
        initialized = manifest.get("bn_initialized", "0") == "1"
        bn.bn1.initialized = bn.bn2.initialized = initialized
        if strict and fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return model


def audit_param_counts(model: NCUPModel) -> dict[str, int]:
    """Recount parameters from the stored arrays and compare with the configuration."""
    counted = {
        "weights_net": sum(p.data.size for p in model.weights_net.parameters().values()),
        "interp_net": sum(p.data.size for p in model.interp_net.parameters().values()),
    }
    counted["total"] = counted["weights_net"] + counted["interp_net"]
    cfg = model.weights_cfg
    cin = cfg.target_channels + cfg.guidance_channels
    expected_w = cin * cfg.ch1 * 9 + cfg.ch1 + cfg.ch1 * cfg.ch2 * 9 + cfg.ch2 + cfg.ch2 * cfg.target_channels + cfg.target_channels
    if cfg.batch_norm:
        expected_w += 2 * (cfg.ch1 + cfg.ch2)
    counted["expected_weights_net"] = expected_w
    counted["expected_interp_net"] = model.interp_cfg.param_count()
    return counted
