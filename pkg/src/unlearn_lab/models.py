"""Feature extractor, primary head and auxiliary bias heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Conv2d, LinearLayer

METHODS = ("LNTL", "TABE", "CLGR")
REVERSED_METHODS = ("LNTL", "CLGR")
N_PRIMARY_CLASSES = 2

_MAGIC = b"ULABPAR1"


@dataclass(frozen=True)
class ExtractorConfig:
    image_size: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    pool: int = 2
    feature_dim: int = 64
    # inputs in [0,1] are mapped to (x - input_shift) * input_scale
    input_shift: float = 0.5
    input_scale: float = 3.0

    def conv_output_shape(self) -> tuple[int, int, int]:
        size, c = self.image_size, self.in_channels
        for c_out in self.channels:
            size = (size - self.kernel + 1) // self.pool
            if size < 1:
                raise ShapeError(f"image size {self.image_size} too small for {len(self.channels)} conv blocks")
            c = c_out
        return c, size, size


class FeatureExtractor:
    """conv+relu+max_pool blocks, flatten, then a fully connected ReLU layer of width K."""

    def __init__(self, config: ExtractorConfig = ExtractorConfig(), seed: int = 0):
        self.config = config
        self.convs = []
        c_in = config.in_channels
        for i, c_out in enumerate(config.channels):
            self.convs.append(Conv2d(c_in, c_out, config.kernel, seed=(seed, 1, i)))
            c_in = c_out
        c, h, w = config.conv_output_shape()
        self.fc = LinearLayer(c * h * w, config.feature_dim, seed=(seed, 2))

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def layers(self):
        return [*self.convs, self.fc]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, conv in enumerate(self.convs):
            out += [(f"extractor.conv{i}.weight", conv.weight), (f"extractor.conv{i}.bias", conv.bias)]
        out += [("extractor.fc.weight", self.fc.weight), ("extractor.fc.bias", self.fc.bias)]
        return out

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"extractor expects [B,{cfg.in_channels},{cfg.image_size},"
                             f"{cfg.image_size}] input, got {x.shape}")
        h = ad.scale(ad.add(x, -cfg.input_shift), cfg.input_scale)
        for conv in self.convs:
            h = ad.max_pool2d(ad.relu(conv(h)), cfg.pool)
        return ad.relu(self.fc(ad.flatten(h)))


@dataclass
class AuxHead:
    layer: LinearLayer
    method: str
    axis: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown debiasing method {self.method!r}; expected one of {METHODS}")

    @property
    def n_classes(self) -> int:
        return self.layer.n_out

    @property
    def reversed(self) -> bool:
        return self.method in REVERSED_METHODS


@dataclass(frozen=True)
class HeadSpec:
    method: str
    axis: str
    n_classes: int


class ForwardOutput(NamedTuple):
    primary_logits: Tensor
    aux_logits: list[Tensor]
    features: Tensor


class ModelBundle:
    def __init__(self, extractor: FeatureExtractor, primary_head: LinearLayer,
                 aux_heads: list[AuxHead] | None = None):
        self.extractor = extractor
        self.primary_head = primary_head
        self.aux_heads = list(aux_heads or [])
        if primary_head.n_out != N_PRIMARY_CLASSES:
            raise ValueError("primary head must have two outputs (benign/malignant)")

    @classmethod
    def build(cls, config: ExtractorConfig = ExtractorConfig(), heads=(), seed: int = 0) -> "ModelBundle":
        """Build a bundle; each component draws its init from its own seed stream."""
        extractor = FeatureExtractor(config, seed)
        primary = LinearLayer(config.feature_dim, N_PRIMARY_CLASSES, seed=(seed, 3))
        aux = [
            AuxHead(LinearLayer(config.feature_dim, h.n_classes, seed=(seed, 4, i)), h.method, h.axis)
            for i, h in enumerate(heads)
        ]
        return cls(extractor, primary, aux)

    @property
    def head_specs(self) -> list[HeadSpec]:
        return [HeadSpec(h.method, h.axis, h.n_classes) for h in self.aux_heads]

    def representation_parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.primary_head.parameters()

    def parameters(self) -> list[Tensor]:
        return self.representation_parameters() + [p for h in self.aux_heads for p in h.layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.extractor.named_parameters()
        out += [("primary.weight", self.primary_head.weight), ("primary.bias", self.primary_head.bias)]
        for i, h in enumerate(self.aux_heads):
            out += [(f"aux{i}.weight", h.layer.weight), (f"aux{i}.bias", h.layer.bias)]
        return out

    def forward(self, batch, mu: float = 1.0) -> ForwardOutput:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        feats = self.extractor(x)
        primary = self.primary_head(feats)
        aux = []
        for h in self.aux_heads:
            inp = ad.grad_reverse(feats, mu) if h.reversed else feats
            aux.append(h.layer(inp))
        return ForwardOutput(primary, aux, feats)

    __call__ = forward

    def features(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate([
                self.extractor(Tensor(images[i:i + batch_size])).data
                for i in range(0, len(images), batch_size)
            ])

    def predict_proba(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Malignant-class softmax probability per image, no augmentation."""
        out = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                logits = self.forward(Tensor(images[i:i + batch_size])).primary_logits
                out.append(ad.softmax(logits).data[:, 1])
        return np.concatenate(out) if out else np.zeros(0)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        """Write parameters as little-endian f64 blobs after a JSON manifest.

        Layout: 8-byte magic, uint64 manifest length, manifest bytes, data.
        Manifest offsets are relative to the start of the data section.
        """
        entries, blobs, offset = [], [], 0
        for name, p in self.named_parameters():
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        cfg = asdict(self.extractor.config)
        cfg["channels"] = list(cfg["channels"])
        manifest = {
            "dtype": "<f8",
            "extractor": cfg,
            "heads": [asdict(h) for h in self.head_specs],
            "params": entries,
        }
        head = json.dumps(manifest, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<Q", len(head)) + head)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        manifest, data = _read_container(Path(path))
        ext = manifest["extractor"]
        ext["channels"] = tuple(ext["channels"])
        bundle = cls.build(ExtractorConfig(**ext), [HeadSpec(**h) for h in manifest["heads"]])
        bundle.load_state(_decode_params(manifest, data))
        return bundle

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
            p.grad = None


def _read_container(path: Path) -> tuple[dict, bytes]:
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    return manifest, raw[16 + n:]


def _decode_params(manifest: dict, data: bytes) -> dict[str, np.ndarray]:
    out = {}
    for e in manifest["params"]:
        chunk = data[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return out


def load_parameters(path) -> dict[str, np.ndarray]:
    manifest, data = _read_container(Path(path))
    return _decode_params(manifest, data)
