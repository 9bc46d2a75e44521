"""Normalizer-free convolutional encoder and MLP projector.

The encoder maps a (B, 96, F) batch of log-mel windows to (B, m)
embeddings. Stage 0 is a strided patch-embedding convolution; each later
stage is a strided 3x3 transition convolution followed by one residual
unit, conv -> relu -> conv whose output is added to the center-cropped
stage input scaled by a fixed gain. No normalization layers anywhere.
Embeddings are the global average pool of the final stage's activations.

The projector is a 3-hidden-layer ReLU MLP mapping embeddings to the loss
space; the optional supervised head is a linear layer on the projector
output whose logits feed a sigmoid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, InvalidInput, IoError, ShapeError

CHECKPOINT_MAGIC = b"MCK1"
N_MELS = 96


def _pair(s) -> tuple[int, int]:
    if isinstance(s, int):
        return (s, s)
    a, b = s
    return (int(a), int(b))


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple = (16, 32, 64)
    strides: tuple = ((3, 3), (2, 2), (2, 2))
    embedding_dim: int = 64
    activation: str = "relu"
    residual_gain: float = 0.2
    stem_kernel: tuple = (4, 4)
    conv_kernel: int = 3

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise InvalidInput("widths and strides must have equal length")
        if len(self.widths) < 2:
            raise InvalidInput("need a stem stage plus at least one residual stage")
        if self.embedding_dim != self.widths[-1]:
            raise InvalidInput(
                f"embedding_dim {self.embedding_dim} must equal last stage width {self.widths[-1]}")
        if self.activation != "relu":
            raise InvalidInput(f"unsupported activation {self.activation!r}")

    def normalized(self) -> "EncoderConfig":
        return EncoderConfig(
            widths=tuple(int(w) for w in self.widths),
            strides=tuple(_pair(s) for s in self.strides),
            embedding_dim=int(self.embedding_dim),
            activation=self.activation,
            residual_gain=float(self.residual_gain),
            stem_kernel=_pair(self.stem_kernel),
            conv_kernel=int(self.conv_kernel),
        )


@dataclass(frozen=True)
class ProjectorConfig:
    hidden_width: int = 256   # paper scale: 4096
    output_dim: int = 64      # paper scale: 1024
    depth: int = 3

    def __post_init__(self):
        if self.depth != 3:
            raise InvalidInput("projector depth is fixed at 3 hidden layers")
        if self.hidden_width < 1 or self.output_dim < 1:
            raise InvalidInput("projector widths must be positive")


@dataclass
class EncoderModel:
    encoder: EncoderConfig
    projector: ProjectorConfig
    params: dict = field(default_factory=dict)  # name -> Tensor(requires_grad=True)
    step: int = 0
    n_labels: int | None = None

    @property
    def embedding_dim(self) -> int:
        return self.encoder.embedding_dim

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def trainable(self) -> dict:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init_model(enc: EncoderConfig = EncoderConfig(), proj: ProjectorConfig = ProjectorConfig(),
               seed: int = 0, n_labels: int | None = None) -> EncoderModel:
    """He fan-in Gaussian weights, zero biases; deterministic per seed."""
    enc = enc.normalized()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE11C0DE)))
    params: dict[str, Tensor] = {}

    def conv_param(name, kh, kw, cin, cout):
        params[f"{name}.w"] = Tensor(_he_init(rng, (kh, kw, cin, cout), kh * kw * cin),
                                     requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def linear_param(name, cin, cout):
        params[f"{name}.w"] = Tensor(_he_init(rng, (cin, cout), cin), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    kh, kw = enc.stem_kernel
    conv_param("enc.stem", kh, kw, 1, enc.widths[0])
    k = enc.conv_kernel
    for s in range(1, len(enc.widths)):
        conv_param(f"enc.s{s}.down", k, k, enc.widths[s - 1], enc.widths[s])
        conv_param(f"enc.s{s}.c1", k, k, enc.widths[s], enc.widths[s])
        conv_param(f"enc.s{s}.c2", k, k, enc.widths[s], enc.widths[s])

    m = enc.embedding_dim
    h = proj.hidden_width
    linear_param("proj.l0", m, h)
    linear_param("proj.l1", h, h)
    linear_param("proj.l2", h, h)
    linear_param("proj.out", h, proj.output_dim)
    if n_labels is not None:
        linear_param("head", proj.output_dim, n_labels)

    return EncoderModel(encoder=enc, projector=proj, params=params, n_labels=n_labels)


def parameter_count_formula(enc: EncoderConfig, proj: ProjectorConfig,
                            n_labels: int | None = None) -> int:
    """Closed-form parameter count from the config shapes alone."""
    enc = enc.normalized()
    kh, kw = enc.stem_kernel
    total = kh * kw * 1 * enc.widths[0] + enc.widths[0]
    k = enc.conv_kernel
    for s in range(1, len(enc.widths)):
        cin, cout = enc.widths[s - 1], enc.widths[s]
        total += k * k * cin * cout + cout          # transition
        total += 2 * (k * k * cout * cout + cout)   # residual unit
    m, h, n = enc.embedding_dim, proj.hidden_width, proj.output_dim
    total += m * h + h + 2 * (h * h + h) + h * n + n
    if n_labels is not None:
        total += n * n_labels + n_labels
    return total


def _conv_block(x, w, b, stride):
    out = ad.conv2d(x, w, stride=stride)
    return ad.add(out, b)


def encode(model: EncoderModel, X) -> Tensor:
    """(B, 96, F) log-mel windows -> (B, m) pooled embeddings."""
    if isinstance(X, Tensor):
        data_shape = X.data.shape
    else:
        X = Tensor(np.asarray(X, dtype=np.float32))
        data_shape = X.data.shape
    if len(data_shape) != 3 or data_shape[1] != N_MELS:
        raise ShapeError(f"encode: expected (B, {N_MELS}, F), got {data_shape}")

    p = model.params
    enc = model.encoder
    h = ad.reshape(X, (*data_shape, 1))  # NHWC with one input channel
    try:
        h = ad.relu(_conv_block(h, p["enc.stem.w"], p["enc.stem.b"], enc.strides[0]))
        for s in range(1, len(enc.widths)):
            h = ad.relu(_conv_block(h, p[f"enc.s{s}.down.w"], p[f"enc.s{s}.down.b"],
                                    enc.strides[s]))
            branch = ad.relu(_conv_block(h, p[f"enc.s{s}.c1.w"], p[f"enc.s{s}.c1.b"], (1, 1)))
            branch = _conv_block(branch, p[f"enc.s{s}.c2.w"], p[f"enc.s{s}.c2.b"], (1, 1))
            shrink = 2 * (enc.conv_kernel - 1)
            skip = ad.crop2d(h, shrink, shrink)
            h = ad.add(skip, ad.scale(branch, enc.residual_gain))
    except ShapeError as exc:
        raise ShapeError(
            f"encode: input of {data_shape[2]} frames is narrower than the receptive field "
            f"({exc})") from exc
    return ad.global_avg_pool(h)


def project(model: EncoderModel, z: Tensor) -> Tensor:
    """Embedding -> loss space through 3 hidden ReLU layers and a linear map."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    if z.data.ndim != 2 or z.data.shape[1] != model.embedding_dim:
        raise ShapeError(f"project: expected (B, {model.embedding_dim}), got {z.data.shape}")
    p = model.params
    h = z
    for layer in ("proj.l0", "proj.l1", "proj.l2"):
        h = ad.relu(ad.add(ad.matmul(h, p[f"{layer}.w"]), p[f"{layer}.b"]))
    return ad.add(ad.matmul(h, p["proj.out.w"]), p["proj.out.b"])


def supervised_logits(model: EncoderModel, X) -> Tensor:
    if model.n_labels is None:
        raise InvalidInput("model has no supervised head; init with n_labels")
    v = project(model, encode(model, X))
    return ad.add(ad.matmul(v, model.params["head.w"]), model.params["head.b"])


def supervised_probabilities(model: EncoderModel, X) -> Tensor:
    return ad.sigmoid(supervised_logits(model, X))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_doc(model: EncoderModel) -> dict:
    enc = model.encoder
    return {
        "encoder": {
            "widths": list(enc.widths),
            "strides": [list(s) for s in enc.strides],
            "embedding_dim": enc.embedding_dim,
            "activation": enc.activation,
            "residual_gain": enc.residual_gain,
            "stem_kernel": list(enc.stem_kernel),
            "conv_kernel": enc.conv_kernel,
        },
        "projector": {
            "hidden_width": model.projector.hidden_width,
            "output_dim": model.projector.output_dim,
            "depth": model.projector.depth,
        },
        "n_labels": model.n_labels,
        "step": model.step,
    }


def save_checkpoint(model: EncoderModel, path) -> None:
    """MCK1 container: magic, u32 header length, JSON header with configs,
    step counter and the (name, shape) manifest, then f32 data per tensor."""
    path = Path(path)
    names = sorted(model.params)
    header = _config_doc(model)
    header["tensors"] = [{"name": n, "shape": list(model.params[n].data.shape)} for n in names]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> EncoderModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    enc = EncoderConfig(
        widths=tuple(header["encoder"]["widths"]),
        strides=tuple(tuple(s) for s in header["encoder"]["strides"]),
        embedding_dim=header["encoder"]["embedding_dim"],
        activation=header["encoder"]["activation"],
        residual_gain=header["encoder"]["residual_gain"],
        stem_kernel=tuple(header["encoder"]["stem_kernel"]),
        conv_kernel=header["encoder"]["conv_kernel"],
    )
    proj = ProjectorConfig(
        hidden_width=header["projector"]["hidden_width"],
        output_dim=header["projector"]["output_dim"],
        depth=header["projector"]["depth"],
    )
    params: dict[str, Tensor] = {}
    offset = 8 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"{path}: truncated tensor data for {entry['name']}")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        if not np.isfinite(data).all():
            raise FormatError(f"{path}: non-finite values in {entry['name']}")
        params[entry["name"]] = Tensor(data.copy(), requires_grad=True)
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return EncoderModel(encoder=enc.normalized(), projector=proj, params=params,
                        step=int(header["step"]), n_labels=header["n_labels"])
