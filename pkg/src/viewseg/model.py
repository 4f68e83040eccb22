"""Temporal encoder, frame classification heads, and the Siamese predictor head.

The encoder is a multi-stage dilated-residual TCN: stage 1 consumes a 1x1
projection of the input features; every later stage consumes the softmax of
the previous stage's frame logits projected back to the embedding width
(the classic multi-stage refinement pattern). ``z`` is the last stage's
feature map before its classification head and feeds both the similarity
losses and the final predictions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import FormatError

CHECKPOINT_MAGIC = b"VSEGCKPT"
CHECKPOINT_VERSION = 1
_CONFIG_BLOB = "__config__"


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    embed_dim: int
    num_classes: int
    num_stages: int = 2
    layers_per_stage: int = 6
    kernel_size: int = 3

    def __post_init__(self):
        if min(self.input_dim, self.embed_dim, self.num_classes) < 1:
            raise ValueError(f"dimensions must be positive: {self}")
        if self.num_stages < 1 or self.layers_per_stage < 1:
            raise ValueError(f"need at least one stage and one layer: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive: {self}")

    def dilation(self, layer: int) -> int:
        return 2 ** layer


@dataclass
class EncodeOutput:
    z: Tensor                      # [T, D] last-stage pre-classification features
    logits_per_stage: list[Tensor]  # each [T, C]


class ModelState:
    """Named parameter tensors plus the architecture configuration.

    Immutable during inference; training updates the parameter buffers in
    place between tapes, single-threadedly.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "ModelState":
        """Seeded init: weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero."""
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}

        def weight(name: str, shape: tuple[int, ...], fan_in: int) -> None:
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        def bias(name: str, dim: int) -> None:
            params[name] = Tensor(np.zeros(dim), requires_grad=True)

        H, D, C = config.input_dim, config.embed_dim, config.num_classes
        k = config.kernel_size
        for s in range(config.num_stages):
            in_dim = H if s == 0 else C
            weight(f"stage{s}.proj.w", (in_dim, D), in_dim)
            bias(f"stage{s}.proj.b", D)
            for l in range(config.layers_per_stage):
                weight(f"stage{s}.layer{l}.conv.w", (k, D, D), k * D)
                bias(f"stage{s}.layer{l}.conv.b", D)
                weight(f"stage{s}.layer{l}.pw.w", (D, D), D)
                bias(f"stage{s}.layer{l}.pw.b", D)
            weight(f"stage{s}.head.w", (D, C), D)
            bias(f"stage{s}.head.b", C)
        for i in (1, 2, 3):
            weight(f"predictor.fc{i}.w", (D, D), D)
            bias(f"predictor.fc{i}.b", D)
        return cls(config, params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def encode(features, state: ModelState) -> EncodeOutput:
    """Run the multi-stage encoder on one [T, H] feature sequence."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.data.ndim != 2:
        raise ShapeError(f"encode expects [T, H] features, got shape {x.shape}")
    if x.shape[1] != state.config.input_dim:
        raise ShapeError(
            f"feature dim {x.shape[1]} does not match config input_dim "
            f"{state.config.input_dim}"
        )
    p = state.params
    logits_per_stage: list[Tensor] = []
    feat: Tensor | None = None
    for s in range(state.config.num_stages):
        inp = x if s == 0 else ad.softmax(logits_per_stage[-1], axis=-1)
        feat = ad.add(ad.matmul(inp, p[f"stage{s}.proj.w"]), p[f"stage{s}.proj.b"])
        for l in range(state.config.layers_per_stage):
            y = ad.dilated_conv1d(
                feat,
                p[f"stage{s}.layer{l}.conv.w"],
                p[f"stage{s}.layer{l}.conv.b"],
                dilation=state.config.dilation(l),
            )
            y = ad.relu(y)
            y = ad.add(ad.matmul(y, p[f"stage{s}.layer{l}.pw.w"]), p[f"stage{s}.layer{l}.pw.b"])
            feat = ad.add(feat, y)
        logits = ad.add(ad.matmul(feat, p[f"stage{s}.head.w"]), p[f"stage{s}.head.b"])
        logits_per_stage.append(logits)
    return EncodeOutput(z=feat, logits_per_stage=logits_per_stage)


def predictor_forward(z: Tensor, state: ModelState) -> Tensor:
    """3-layer GELU MLP applied per frame: A3(GELU(A2(GELU(A1(z)))))."""
    if z.shape[-1] != state.config.embed_dim:
        raise ShapeError(
            f"predictor expects embedding dim {state.config.embed_dim}, got {z.shape}"
        )
    p = state.params
    h = ad.gelu(ad.add(ad.matmul(z, p["predictor.fc1.w"]), p["predictor.fc1.b"]))
    h = ad.gelu(ad.add(ad.matmul(h, p["predictor.fc2.w"]), p["predictor.fc2.b"]))
    return ad.add(ad.matmul(h, p["predictor.fc3.w"]), p["predictor.fc3.b"])


def predict_labels(logits) -> np.ndarray:
    """Per-frame argmax; ties break toward the smallest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 version, u32 blob count, then per blob
# u32 name length + UTF-8 name, u32 ndim, ndim u32 dims, f64 LE data.


def save_checkpoint(path, state: ModelState) -> None:
    cfg = state.config
    blobs: list[tuple[str, np.ndarray]] = [(
        _CONFIG_BLOB,
        np.array(
            [cfg.input_dim, cfg.embed_dim, cfg.num_classes,
             cfg.num_stages, cfg.layers_per_stage, cfg.kernel_size],
            dtype=np.float64,
        ),
    )]
    blobs.extend((name, t.data) for name, t in state.params.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blobs)))
        for name, arr in blobs:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", fh.tell())
    return buf


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", 0)
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 8)
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * n, f"data of {name}"), dtype="<f8")
            blobs[name] = data.reshape(shape).astype(np.float64)
    if _CONFIG_BLOB not in blobs:
        raise FormatError("checkpoint carries no config blob", 0)
    c = blobs.pop(_CONFIG_BLOB)
    config = EncoderConfig(*(int(v) for v in c))
    state = ModelState(config, {name: Tensor(arr, requires_grad=True) for name, arr in blobs.items()})
    expected = set(ModelState.init(config, seed=0).params)
    if set(state.params) != expected:
        raise FormatError("checkpoint parameter names do not match the architecture", 0)
    return state
