"""CRDN assembly: backbone, squeeze convolutions and the shared RDC chain."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from . import ops
from .encoder import EncoderParams, encode, init_encoder, squeeze
from .errors import ConfigError, FormatError, ShapeError
from .formats import as_4d, encode_tensor, read_tensor_from
from .rdc import GATE_MODES, UPSAMPLE_MODES, VARIANTS, RdcParams, init_rdc_params, rdc_step, RdcState
from .tensor import Tensor

PRECISIONS = {"single": np.float32, "double": np.float64}
ARCH_FIELDS = ("classes", "modalities", "stages", "variant", "upsample", "gates", "kernel_size")


@dataclass
class CrdnConfig:
    classes: int = 4
    modalities: int = 3
    stages: int = 5
    variant: str = "convlstm"
    upsample: str = "bilinear"
    gates: str = "sigmoid"
    kernel_size: int = 3
    precision: str = "single"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.modalities < 1:
            raise ConfigError(f"modalities must be >= 1, got {self.modalities}")
        if not 2 <= self.stages <= 5:
            raise ConfigError(f"stages must be in [2, 5], got {self.stages}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample must be one of {UPSAMPLE_MODES}, got {self.upsample!r}")
        if self.gates not in GATE_MODES:
            raise ConfigError(f"gates must be one of {GATE_MODES}, got {self.gates!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd number, got {self.kernel_size}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CrdnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class CRDN:
    """Encoder, squeeze convolutions and one shared recurrent decoding cell."""

    def __init__(self, config: CrdnConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        self.encoder: EncoderParams = init_encoder(config.modalities, config.classes, rng, config.stages, dtype=dtype)
        self.rdc: RdcParams = init_rdc_params(
            config.variant, config.classes, rng, config.upsample, config.gates, config.kernel_size, dtype
        )
        for name, p in self.rdc.named_parameters():
            p.name = f"rdc.{name}"

    # -- parameters --------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named_backbone()
        yield from self.encoder.named_squeeze()
        for name, p in self.rdc.named_parameters():
            yield f"rdc.{name}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, state in self.encoder.batchnorm_states():
            yield f"{name}.running_mean", state.running_mean
            yield f"{name}.running_var", state.running_var

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        for bn_name, state in self.encoder.batchnorm_states():
            if name == f"{bn_name}.running_mean":
                state.running_mean = value
                return
            if name == f"{bn_name}.running_var":
                state.running_var = value
                return
        raise KeyError(name)

    # -- computation -------------------------------------------------------

    def features(self, image: Tensor, training: bool = False) -> list[Tensor]:
        """Squeezed maps ``[X_1, ..., X_L]``, lowest resolution first."""
        feats = encode(image, self.encoder, training)
        return [squeeze(f, w, b) for f, w, b in zip(feats, self.encoder.squeeze_weights, self.encoder.squeeze_biases)]

    def forward(self, image, training: bool = False) -> list[Tensor]:
        """Score maps ``[S_1, ..., S_L]``; the last one has the input's resolution."""
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.config.dtype))
        if image.ndim != 4 or image.shape[1] != self.config.modalities:
            raise ShapeError(f"expected image [n, {self.config.modalities}, h, w], got {image.shape}")
        xs = self.features(image, training)
        n, _, h1, w1 = xs[0].shape
        if h1 % 2 == 0 and w1 % 2 == 0:
            # zeros at half of X_1's size; T(0) == 0 makes this equal to zeros at X_1's size
            state = self._zero_state(n, h1 // 2, w1 // 2)
        else:
            state = self._zero_state(n, h1, w1)
            state.upsampled = True
        scores = []
        for x in xs:
            state = rdc_step(state, x, self.rdc)
            scores.append(state.score)
        return scores

    __call__ = forward

    def _zero_state(self, n: int, h: int, w: int) -> RdcState:
        shape = (n, self.config.classes, h, w)
        dtype = self.config.dtype
        cell = Tensor(np.zeros(shape, dtype=dtype)) if self.config.variant == "convlstm" else None
        return RdcState(Tensor(np.zeros(shape, dtype=dtype)), cell)

    def loss(self, scores: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
        return ops.softmax_cross_entropy(scores, labels, reduction)

    def predict(self, image) -> np.ndarray:
        return predict(self.forward(image, training=False)[-1])


def forward(image, model: CRDN, training: bool = False) -> list[Tensor]:
    return model.forward(image, training)


def loss(scores: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy of the final score map against the ground truth."""
    return ops.softmax_cross_entropy(scores, labels, reduction)


def predict(scores) -> np.ndarray:
    """Per-pixel argmax over classes; ties resolve to the lower class index."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return data.argmax(axis=1).astype(np.uint8)


def param_count(model: CRDN) -> dict:
    encoder = sum(p.size for _, p in model.encoder.named_backbone())
    squeeze_n = sum(p.size for _, p in model.encoder.named_squeeze())
    decoder = sum(p.size for _, p in model.rdc.named_parameters())
    return {"encoder": encoder, "squeeze": squeeze_n, "decoder": decoder, "total": encoder + squeeze_n + decoder}


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "crdn-checkpoint"
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    model: CRDN
    epoch: Optional[int] = None
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _entries(model: CRDN):
    for name, p in model.named_parameters():
        yield name, "param", p.data
    for name, arr in model.named_buffers():
        yield name, "buffer", arr


def save_checkpoint(model: CRDN, path, epoch: Optional[int] = None, metrics: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Length-prefixed JSON manifest followed by one CRDT v1 blob per tensor."""
    tensors, blobs = [], []
    for name, kind, arr in _entries(model):
        tensors.append({"name": name, "kind": kind, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(encode_tensor(arr))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": model.config.to_dict(),
        "epoch": epoch,
        "metrics": metrics or {},
        "extra": extra or {},
        "tensors": tensors,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_manifest(fh, source: str) -> dict:
    raw = fh.read(_LEN.size)
    if len(raw) != _LEN.size:
        raise FormatError(f"{source}: truncated checkpoint header")
    (length,) = _LEN.unpack(raw)
    if length > 1 << 28:
        raise FormatError(f"{source}: implausible manifest length {length}")
    header = fh.read(length)
    if len(header) != length:
        raise FormatError(f"{source}: truncated manifest")
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: manifest is not valid JSON ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{source}: not a CRDN checkpoint")
    return manifest


def load_checkpoint(path, config: Optional[CrdnConfig] = None) -> Checkpoint:
    """Rebuild a model from a checkpoint.

    When ``config`` is given its architecture fields must match the manifest.
    """
    source = str(path)
    with open(path, "rb") as fh:
        manifest = read_manifest(fh, source)
        try:
            saved_config = CrdnConfig.from_dict(manifest["config"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{source}: manifest has no usable config ({exc})") from None
        if config is not None:
            diffs = [k for k in ARCH_FIELDS if getattr(config, k) != getattr(saved_config, k)]
            if diffs:
                raise ConfigError(
                    f"{source}: checkpoint config differs in {diffs}: "
                    + ", ".join(f"{k}={getattr(saved_config, k)!r} (expected {getattr(config, k)!r})" for k in diffs)
                )
        model = CRDN(saved_config)
        params = dict(model.named_parameters())
        buffers = dict(model.named_buffers())
        expected = [n for n, _, _ in _entries(model)]
        listed = [t.get("name") for t in manifest.get("tensors", [])]
        if listed != expected:
            missing = sorted(set(expected) - set(listed))
            unexpected = sorted(set(listed) - set(expected))
            raise FormatError(f"{source}: tensor list mismatch (missing {missing}, unexpected {unexpected})")
        for entry in manifest["tensors"]:
            name = entry["name"]
            arr = read_tensor_from(fh, f"{source}[{name}]")
            shape = tuple(entry["shape"])
            if arr.shape != as_4d(np.empty(shape)).shape:
                raise FormatError(f"{source}: tensor {name} has stored shape {arr.shape}, manifest says {shape}")
            arr = arr.reshape(shape)
            if name in params:
                target = params[name]
                if target.shape != arr.shape:
                    raise FormatError(f"{source}: parameter {name} has shape {arr.shape}, model expects {target.shape}")
                target.data = arr
            else:
                if buffers[name].shape != arr.shape:
                    raise FormatError(f"{source}: buffer {name} has shape {arr.shape}, model expects {buffers[name].shape}")
                model._set_buffer(name, arr)
        if fh.read(1):
            raise FormatError(f"{source}: trailing bytes after last tensor")
    return Checkpoint(model, manifest.get("epoch"), manifest.get("metrics", {}), manifest.get("extra", {}))
