"""
Model zoo: small classifiers used both as training targets and as substitutes.

Three desk-scale architectures:
    linear      logits = flatten(x) @ W + b (closed-form attack oracles)
    mlp         dense -> relu -> ... -> dense
    small-conv  conv3x3 -> relu -> conv3x3/2 -> relu -> dense

Checkpoint layout (little-endian):
    magic (8) | version u16 | header length u32 | header JSON | parameter bytes | sha256 (32)
The digest covers everything between the magic and itself.

Parameters are stored at the precision the model holds them in: "<f4" for
float32 models, "<f8" for the default float64 ones. 32-bit checkpoints come
from models built with init_model(..., dtype=np.float32).
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import ValidationError

from drlkit.core.tensor import (
    Tensor,
    add,
    as_tensor,
    conv2d,
    conv_output_size,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax,
)
from drlkit.models.schemas import ArchKind, ArchSpec
from drlkit.utils.errors import (
    ConfigError,
    CorruptCheckpointError,
    CheckpointVersionError,
    MissingArtifactError,
    ShapeError,
)
from drlkit.utils.seeding import substream

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DRLCKPT\x00"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<HI")  # version, header length
_DIGEST_BYTES = 32
_STORAGE = {"float32": "<f4", "float64": "<f8"}


@dataclass(eq=False)
class Model:
    """Architecture, named parameters and the seed they were drawn from."""
    arch: ArchSpec
    params: dict[str, Tensor] = field(default_factory=dict)
    seed: int = 0

    def forward_logits(self, batch) -> Tensor:
        return forward_logits(self, batch)

    def forward_softmax(self, batch) -> Tensor:
        return forward_softmax(self, batch)

    def predict(self, batch: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Argmax labels, evaluated in chunks without recording a tape."""
        batch = np.asarray(batch)
        preds = []
        with no_grad():
            for start in range(0, batch.shape[0], batch_size):
                logits = forward_logits(self, batch[start:start + batch_size])
                preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "Model":
        return Model(
            arch=self.arch,
            params={name: Tensor(p.data.copy(), requires_grad=True, dtype=p.dtype, name=name)
                    for name, p in self.params.items()},
            seed=self.seed,
        )


def _layer_shapes(arch: ArchSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in forward order."""
    if arch.kind == ArchKind.LINEAR:
        d = arch.input_dim
        return [("fc0.weight", (d, arch.num_classes), d), ("fc0.bias", (arch.num_classes,), d)]

    if arch.kind == ArchKind.MLP:
        shapes = []
        widths = (arch.input_dim, *arch.hidden, arch.num_classes)
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes.append((f"fc{i}.weight", (n_in, n_out), n_in))
            shapes.append((f"fc{i}.bias", (n_out,), n_in))
        return shapes

    c, h, w = arch.input_shape
    k = arch.kernel_size
    pad = k // 2
    c0, c1 = arch.channels
    h1, w1 = conv_output_size(h, k, 1, pad), conv_output_size(w, k, 1, pad)
    h2, w2 = conv_output_size(h1, k, 2, pad), conv_output_size(w1, k, 2, pad)
    flat = c1 * h2 * w2
    return [
        ("conv0.weight", (c0, c, k, k), c * k * k),
        ("conv0.bias", (c0, 1, 1), c * k * k),
        ("conv1.weight", (c1, c0, k, k), c0 * k * k),
        ("conv1.bias", (c1, 1, 1), c0 * k * k),
        ("head.weight", (flat, arch.num_classes), flat),
        ("head.bias", (arch.num_classes,), flat),
    ]


def init_model(arch: Union[ArchSpec, dict], seed: int, dtype=np.float64) -> Model:
    """Fan-in scaled uniform weights, zero biases; same (arch, seed) -> same bits."""
    if not isinstance(arch, ArchSpec):
        try:
            arch = ArchSpec.model_validate(arch)
        except ValidationError as exc:
            raise ConfigError(f"invalid architecture: {exc}") from exc
    rng = substream(seed, "init")
    params: dict[str, Tensor] = {}
    for name, shape, fan_in in _layer_shapes(arch):
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True, dtype=dtype, name=name)
    logger.debug("Initialised %s model (seed=%d, %d params)", arch.kind.value, seed,
                 sum(p.size for p in params.values()))
    return Model(arch=arch, params=params, seed=seed)


def _check_batch(model: Model, batch) -> Tensor:
    x = as_tensor(batch)
    expected = tuple(model.arch.input_shape)
    if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"batch shape {x.shape} does not match input shape (N, {expected})")
    return x


def forward_logits(model: Model, batch) -> Tensor:
    """N×C logits, differentiable w.r.t. both the batch and the parameters."""
    x = _check_batch(model, batch)
    p = model.params
    arch = model.arch
    n = x.shape[0]

    if arch.kind == ArchKind.LINEAR:
        flat = reshape(x, (n, arch.input_dim))
        return add(matmul(flat, p["fc0.weight"]), p["fc0.bias"])

    if arch.kind == ArchKind.MLP:
        h = reshape(x, (n, arch.input_dim))
        layers = len(arch.hidden) + 1
        for i in range(layers):
            h = add(matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"])
            if i < layers - 1:
                h = relu(h)
        return h

    pad = arch.kernel_size // 2
    h = relu(add(conv2d(x, p["conv0.weight"], stride=1, padding=pad), p["conv0.bias"]))
    h = relu(add(conv2d(h, p["conv1.weight"], stride=2, padding=pad), p["conv1.bias"]))
    flat = reshape(h, (n, p["head.weight"].shape[0]))
    return add(matmul(flat, p["head.weight"]), p["head.bias"])


def forward_softmax(model: Model, batch) -> Tensor:
    return softmax(forward_logits(model, batch), axis=1)


def alternate_arch(arch: ArchSpec) -> ArchSpec:
    """The architecture a realistic adversary substitutes for an unknown target.

    small-conv targets get an mlp substitute; everything else gets small-conv
    when the input is an image, an mlp otherwise.
    """
    if arch.kind == ArchKind.SMALL_CONV or len(arch.input_shape) != 3:
        return ArchSpec(kind=ArchKind.MLP, input_shape=arch.input_shape, num_classes=arch.num_classes)
    return ArchSpec(kind=ArchKind.SMALL_CONV, input_shape=arch.input_shape, num_classes=arch.num_classes)


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------

def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    """Write ``model`` to ``path``; parameters keep their storage precision."""
    path = Path(path)
    dtypes = {p.dtype for p in model.params.values()}
    dtype_name = "float32" if dtypes == {np.dtype(np.float32)} else "float64"
    header = {
        "arch": model.arch.model_dump(mode="json"),
        "seed": model.seed,
        "dtype": dtype_name,
        "params": [{"name": name, "shape": list(p.shape)} for name, p in model.params.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    storage = _STORAGE[dtype_name]
    payload = b"".join(p.data.astype(storage).tobytes() for p in model.params.values())
    body = _PREFIX.pack(CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + body + hashlib.sha256(body).digest())
    logger.info("Saved checkpoint %s (%s, %d params)", path, model.arch.kind.value, model.parameter_count())
    return path


def load_checkpoint(path: Union[str, Path]) -> Model:
    """Read a checkpoint, rejecting anything that fails a structural check."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    minimum = len(CHECKPOINT_MAGIC) + _PREFIX.size + _DIGEST_BYTES
    if len(raw) < minimum:
        raise CorruptCheckpointError(f"{path}: truncated ({len(raw)} bytes)")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")

    body, digest = raw[len(CHECKPOINT_MAGIC):-_DIGEST_BYTES], raw[-_DIGEST_BYTES:]
    version, header_len = _PREFIX.unpack_from(body)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: digest mismatch")
    if _PREFIX.size + header_len > len(body):
        raise CorruptCheckpointError(f"{path}: header length {header_len} exceeds file")

    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))
        arch = ArchSpec.model_validate(header["arch"])
        storage = _STORAGE[header["dtype"]]
        entries = [(e["name"], tuple(e["shape"])) for e in header["params"]]
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    payload = body[_PREFIX.size + header_len:]
    itemsize = np.dtype(storage).itemsize
    expected = sum(int(np.prod(shape)) for _, shape in entries) * itemsize
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, expected {expected}")

    dtype = np.float32 if storage == "<f4" else np.float64
    params: dict[str, Tensor] = {}
    offset = 0
    for name, shape in entries:
        count = int(np.prod(shape))
        values = np.frombuffer(payload, dtype=storage, count=count, offset=offset).reshape(shape)
        params[name] = Tensor(values, requires_grad=True, dtype=dtype, name=name)
        offset += count * itemsize

    expected_names = [name for name, _, _ in _layer_shapes(arch)]
    if list(params) != expected_names:
        raise CorruptCheckpointError(f"{path}: parameter names do not match {arch.kind.value} layout")
    return Model(arch=arch, params=params, seed=seed)
