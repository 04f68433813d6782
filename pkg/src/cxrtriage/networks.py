"""Network graphs for both pipeline stages and the on-disk model bundle.

Both stages share one feature extractor topology: a 3x3 stride-2 stem
followed by MBConv stages.  The triage head (stage 1) flattens and feeds
two relu dense layers into a 2-way softmax; the pathology head (stage 2)
adds a padded 3x3 transfer convolution, global pooling and an 8-way
sigmoid output.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import PATHOLOGIES
from .preprocess import PreprocessConfig
from .tensor import (BatchNorm, Conv2D, Dense, Dropout, Flatten, GlobalAveragePool, MBConv, ReLU,
                     Sequential, Sigmoid, Softmax, Swish, ZeroPadding2D, cast, conv_output_size,
                     param_refs, state_dict)

TRIAGE_CLASSES = ("Normal", "Abnormal")
TRIAGE_HEAD = "triage_head"
MULTIPATH_HEAD = "multipath_head"

MAGIC = b"CXR2"
FORMAT_VERSION = 1


class BundleError(ValueError):
    pass


class BundleVersionError(BundleError):
    pass


class IncompatibleTopology(ValueError):
    pass


@dataclass
class StemConfig:
    out_channels: int = 16
    kernel: int = 3
    stride: int = 2


@dataclass
class MBConvConfig:
    in_channels: int
    out_channels: int
    expansion_ratio: int = 4
    kernel: int = 3
    stride: int = 1
    repeats: int = 1

    def __post_init__(self):
        if self.expansion_ratio < 1:
            raise ValueError("expansion_ratio must be >= 1")
        if self.kernel not in (1, 3, 5):
            raise ValueError(f"kernel must be 1, 3 or 5, got {self.kernel}")

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def default_blocks() -> list[MBConvConfig]:
    chans = [16, 24, 40, 80]
    strides = [2, 2, 2, 1]
    blocks, cin = [], 16
    for cout, s in zip(chans, strides):
        blocks.append(MBConvConfig(cin, cout, expansion_ratio=4, kernel=3, stride=s))
        cin = cout
    return blocks


def _scale(c: int, width_scale: float) -> int:
    return max(1, int(round(c * width_scale)))


@dataclass
class NetworkSpec:
    head: str
    class_names: list[str]
    stem: StemConfig = field(default_factory=StemConfig)
    blocks: list[MBConvConfig] = field(default_factory=default_blocks)
    input_shape: tuple[int, int, int] = (3, 224, 224)
    width_scale: float = 1.0
    dropout: float = 0.3
    dense_units: list[int] = field(default_factory=lambda: [256, 128])
    transfer_filters: int = 512

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        expected = {TRIAGE_HEAD: 2, MULTIPATH_HEAD: 8}.get(self.head)
        if expected is None:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.class_names) != expected:
            raise ValueError(f"{self.head} needs {expected} class names, got {len(self.class_names)}")

    @property
    def n_outputs(self) -> int:
        return len(self.class_names)

    @property
    def cam_layer(self) -> str:
        """Top-level layer whose output feeds Grad-CAM."""
        return "extractor" if self.head == TRIAGE_HEAD else "transfer_act"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["stem"] = StemConfig(**d["stem"])
        d["blocks"] = [MBConvConfig(**b) for b in d["blocks"]]
        return cls(**d)

    def extractor_layers(self) -> list[tuple[str, object]]:
        ws = self.width_scale
        stem_c = _scale(self.stem.out_channels, ws)
        k = self.stem.kernel
        layers = [("stem", Conv2D(self.input_shape[0], stem_c, k, self.stem.stride, (k - 1) // 2, use_bias=False)),
                  ("stem_bn", BatchNorm(stem_c)), ("stem_act", Swish())]
        cin, n = stem_c, 0
        for cfg in self.blocks:
            cout = _scale(cfg.out_channels, ws)
            for r in range(cfg.repeats):
                n += 1
                stride = cfg.stride if r == 0 else 1
                layers.append((f"block{n}", MBConv(cin, cout, cfg.expansion_ratio, cfg.kernel, stride)))
                cin = cout
        return layers

    def extractor_output_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        k, s = self.stem.kernel, self.stem.stride
        h, w = conv_output_size(h, k, s, (k - 1) // 2), conv_output_size(w, k, s, (k - 1) // 2)
        c = _scale(self.stem.out_channels, self.width_scale)
        for cfg in self.blocks:
            for r in range(cfg.repeats):
                s = cfg.stride if r == 0 else 1
                p = (cfg.kernel - 1) // 2
                h, w = conv_output_size(h, cfg.kernel, s, p), conv_output_size(w, cfg.kernel, s, p)
            c = _scale(cfg.out_channels, self.width_scale)
        return c, h, w

    def build(self) -> Sequential:
        extractor = Sequential(self.extractor_layers())
        c, h, w = self.extractor_output_shape()
        layers: list[tuple[str, object]] = [("extractor", extractor)]
        if self.head == TRIAGE_HEAD:
            d1, d2 = self.dense_units
            layers += [("flatten", Flatten()), ("dropout", Dropout(self.dropout)),
                       ("dense1", Dense(c * h * w, d1)), ("relu1", ReLU()),
                       ("dense2", Dense(d1, d2)), ("relu2", ReLU()),
                       ("classifier", Dense(d2, 2)), ("softmax", Softmax())]
        else:
            (d1,) = self.dense_units
            f = self.transfer_filters
            layers += [("transfer_pad", ZeroPadding2D(1)), ("transfer_conv", Conv2D(c, f, 3, 1, 0)),
                       ("transfer_act", ReLU()), ("gap", GlobalAveragePool()),
                       ("dropout", Dropout(self.dropout)), ("dense1", Dense(f, d1)), ("relu1", ReLU()),
                       ("classifier", Dense(d1, 8)), ("sigmoid", Sigmoid())]
        return Sequential(layers)


def triage_spec(width_scale: float = 1.0, input_size: int = 224) -> NetworkSpec:
    return NetworkSpec(TRIAGE_HEAD, list(TRIAGE_CLASSES), input_shape=(3, input_size, input_size),
                       width_scale=width_scale, dropout=0.3, dense_units=[256, 128])


def multipath_spec(width_scale: float = 1.0, input_size: int = 224) -> NetworkSpec:
    return NetworkSpec(MULTIPATH_HEAD, list(PATHOLOGIES), input_shape=(3, input_size, input_size),
                       width_scale=width_scale, dropout=0.2, dense_units=[1024])


@dataclass
class ModelBundle:
    spec: NetworkSpec
    graph: Sequential
    preprocessing: PreprocessConfig = field(default_factory=PreprocessConfig)
    threshold: float = 0.5
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")

    @property
    def params(self) -> dict[str, np.ndarray]:
        return state_dict(self.graph)

    @property
    def extractor(self) -> Sequential:
        return self.graph["extractor"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        dtype = self.graph["extractor.stem"].params["weights"].dtype
        return self.graph.forward(x.astype(dtype, copy=False))

    def frozen_layers(self) -> list[str]:
        return sorted({r.name.rsplit(".", 1)[0] for r in param_refs(self.graph) if not r.layer.trainable})


def init_bundle(spec: NetworkSpec, seed: int = 0, dtype=np.float32,
                preprocessing: PreprocessConfig | None = None) -> ModelBundle:
    graph = spec.build()
    graph.init_params(np.random.default_rng(seed))
    cast(graph, dtype)
    if preprocessing is None:
        preprocessing = PreprocessConfig(target_size=spec.input_shape[1:])
    return ModelBundle(spec, graph, preprocessing)


def build_triage_net(width_scale: float = 1.0, seed: int = 0, input_size: int = 224,
                     dtype=np.float32) -> ModelBundle:
    return init_bundle(triage_spec(width_scale, input_size), seed, dtype)


def build_multipath_net(width_scale: float = 1.0, seed: int = 0, input_size: int = 224,
                        dtype=np.float32) -> ModelBundle:
    return init_bundle(multipath_spec(width_scale, input_size), seed, dtype)


def transplant_extractor(source: ModelBundle, target: NetworkSpec, seed: int = 1) -> ModelBundle:
    """Fresh ``target`` network whose extractor is a frozen bitwise copy of ``source``'s."""
    src_cfg = source.extractor.config()["layers"]
    bundle = init_bundle(target, seed, dtype=source.graph["extractor.stem"].params["weights"].dtype,
                         preprocessing=PreprocessConfig.from_dict(source.preprocessing.to_dict()))
    dst_cfg = bundle.extractor.config()["layers"]
    for a, b in zip(src_cfg, dst_cfg):
        if a != b:
            raise IncompatibleTopology(f"extractor layer {a.get('name')!r} differs: {a} vs {b}")
    if len(src_cfg) != len(dst_cfg):
        first = (src_cfg if len(src_cfg) > len(dst_cfg) else dst_cfg)[min(len(src_cfg), len(dst_cfg))]
        raise IncompatibleTopology(f"extractor layer {first.get('name')!r} present on one side only")
    if source.spec.input_shape != target.input_shape:
        raise IncompatibleTopology(f"input shapes differ: {source.spec.input_shape} vs {target.input_shape}")
    for ref_src, ref_dst in zip(param_refs(source.extractor, True), param_refs(bundle.extractor, True)):
        ref_dst.value = ref_src.value.copy()
    bundle.extractor.set_trainable(False)
    return bundle


# ---------------------------------------------------------------------------
# container format: MAGIC | u32 version | u64 header length | header JSON | float32 blobs


def write_container(path: str | Path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    blobs = [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays]
    payload = b"".join(blobs)
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    header["payload_bytes"] = len(payload)
    header["payload_crc32"] = zlib.crc32(payload)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        fh.write(payload)
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise BundleError(f"{path}: not a model bundle (bad magic or truncated)")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"{path}: format_version {version}, this build reads {FORMAT_VERSION}")
    if 16 + hlen > len(data):
        raise BundleError(f"{path}: corrupt file, header truncated")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: corrupt header ({exc})") from None
    payload = data[16 + hlen:]
    if len(payload) != header.get("payload_bytes") or zlib.crc32(payload) != header.get("payload_crc32"):
        raise BundleError(f"{path}: corrupt file, payload size or checksum mismatch")
    arrays, off = {}, 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(t["shape"])
        off += 4 * n
    return header, arrays


def bundle_header(bundle: ModelBundle) -> dict:
    return {"spec": bundle.spec.to_dict(), "preprocessing": bundle.preprocessing.to_dict(),
            "threshold": bundle.threshold, "format_version": bundle.format_version,
            "frozen": bundle.frozen_layers()}


def save_bundle(bundle: ModelBundle, path: str | Path, extra_header: dict | None = None,
                extra_arrays: list[tuple[str, np.ndarray]] | None = None) -> None:
    """Write the bundle; parameters are stored as little-endian float32."""
    header = bundle_header(bundle)
    if extra_header:
        header.update(extra_header)
    arrays = [(f"param:{k}", v) for k, v in bundle.params.items()] + list(extra_arrays or [])
    write_container(path, header, arrays)


def bundle_from_parts(header: dict, arrays: dict[str, np.ndarray]) -> ModelBundle:
    spec = NetworkSpec.from_dict(header["spec"])
    graph = spec.build()
    cast(graph, np.float32)
    for ref in param_refs(graph, include_buffers=True):
        key = f"param:{ref.name}"
        if key not in arrays:
            raise BundleError(f"bundle is missing parameter {ref.name}")
        if arrays[key].shape != ref.value.shape:
            raise BundleError(f"{ref.name}: stored shape {arrays[key].shape} != expected {ref.value.shape}")
        ref.value = arrays[key].copy()
    if int(header["format_version"]) != FORMAT_VERSION:
        raise BundleVersionError(f"header format_version {header['format_version']} != {FORMAT_VERSION}")
    frozen = set(header.get("frozen", []))
    for ref in param_refs(graph):
        if ref.name.rsplit(".", 1)[0] in frozen:
            ref.layer.trainable = False
    return ModelBundle(spec, graph, PreprocessConfig.from_dict(header["preprocessing"]),
                       float(header["threshold"]), int(header["format_version"]))


def load_bundle(path: str | Path) -> ModelBundle:
    header, arrays = read_container(path)
    try:
        return bundle_from_parts(header, arrays)
    except (KeyError, TypeError) as exc:
        raise BundleError(f"{path}: malformed header ({exc})") from None
