"""Benchmark generators and data ingestion.

- Copy: N+20 tokens; ten digits from {1..8}, N zeros, ten cue tokens 9. The
  ten digits must be reproduced on the last ten steps.
- Adding: N values from U[0,1] on channel 0 and a two-hot marker on channel 1
  (one marker in each half). The target is the sum of the two marked values.
- Synthetic forgetting: the Adding task started from saturated forget gates.
- Pixel: IDX images flattened in scanline order, optionally bit-reversed.

Every generator consumes only the generator it is handed, so a dedicated
data stream gives every gate variant the same batches.
"""

import gzip
import json
import logging
import struct
import zlib
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import FormatError, ShapeError
from .gatelib import BiasInit
from .ndmath import Rng, rng_uniform

logger = logging.getLogger("urgate.tasks")

COPY_DIGITS = 10
COPY_VOCAB = 10
COPY_CUE = 9
PIXEL_CLASSES = 10

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {dt.newbyteorder("="): code for code, dt in IDX_DTYPES.items()}
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

BATCH_CACHE_FORMAT = "urgate-batch"
BATCH_CACHE_VERSION = 1


@dataclass
class TaskBatch:
    """Model-ready batch.

    ``inputs`` is (batch, time, features); ``targets`` is (batch, time) class
    ids for ``objective == "xent"`` and reals for ``"mse"``; ``mask`` (time,)
    selects the scored steps.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    objective: str


@dataclass
class CopyBatch:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def to_task_batch(self, dtype=np.float64) -> TaskBatch:
        inputs = np.eye(COPY_VOCAB, dtype=dtype)[self.tokens]
        targets = np.zeros_like(self.tokens)
        targets[:, self.mask] = self.targets
        return TaskBatch(inputs, targets, self.mask, "xent")


@dataclass
class AddingBatch:
    values: np.ndarray
    markers: np.ndarray
    target: np.ndarray
    i0: np.ndarray
    i1: np.ndarray

    def to_task_batch(self, dtype=np.float64) -> TaskBatch:
        inputs = np.stack([self.values, self.markers], axis=-1).astype(dtype)
        length = self.values.shape[1]
        mask = np.zeros(length, dtype=bool)
        mask[-1] = True
        targets = np.zeros((len(self.target), length), dtype=dtype)
        targets[:, -1] = self.target
        return TaskBatch(inputs, targets, mask, "mse")


@dataclass
class PixelSequence:
    """Pixels of one image in time order, shape (H*W, channels)."""

    values: np.ndarray
    permutation: np.ndarray | None = None


# --- Synthetic generators ---


def gen_copy(N: int, batch: int, rng: Rng) -> CopyBatch:
    if N < 1:
        raise ValueError(f"copy length N must be >= 1, got {N}")
    length = N + 2 * COPY_DIGITS
    digits = rng.integers(1, 9, size=(batch, COPY_DIGITS))
    tokens = np.zeros((batch, length), dtype=np.int64)
    tokens[:, :COPY_DIGITS] = digits
    tokens[:, N + COPY_DIGITS :] = COPY_CUE
    mask = np.zeros(length, dtype=bool)
    mask[-COPY_DIGITS:] = True
    return CopyBatch(tokens, digits, mask)


def gen_adding(N: int, batch: int, rng: Rng) -> AddingBatch:
    if N < 2 or N % 2:
        raise ValueError(f"adding length N must be even and >= 2, got {N}")
    values = rng_uniform(rng, 0.0, 1.0, batch * N).reshape(batch, N)
    i0 = rng.integers(0, N // 2, size=batch)
    i1 = rng.integers(N // 2, N, size=batch)
    rows = np.arange(batch)
    markers = np.zeros((batch, N))
    markers[rows, i0] = 1.0
    markers[rows, i1] = 1.0
    return AddingBatch(values, markers, values[rows, i0] + values[rows, i1], i0, i1)


def forgetting_scenario(
    hidden: int = 64, N: int = 100, bias_offset: float = 6.0
) -> tuple[TrainConfig, BiasInit]:
    """Adding-task settings whose forget gates start saturated at sigmoid(bias_offset).

    The refine (or input) bias stays at zero so the effective gate also starts
    at sigmoid(bias_offset). With ``bias_offset=0`` this is the plain Adding
    setup at the reduced learning rate.
    """
    if N < 2 or N % 2:
        raise ValueError(f"adding length N must be even and >= 2, got {N}")
    return TrainConfig(learning_rate=1e-4), BiasInit(
        np.full(hidden, float(bias_offset)), np.zeros(hidden)
    )


# --- Permutations and pixel sequences ---


def bit_reversal_perm(n: int) -> np.ndarray:
    """Index permutation reversing the binary digits of each index.

    For n not a power of two the permutation of the next power of two is
    generated and the entries below n are kept in order.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    bits = (n - 1).bit_length()
    idx = np.arange(1 << bits)
    rev = np.zeros_like(idx)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev[rev < n]


def scanline_sequence(image: np.ndarray, permutation: np.ndarray | None = None) -> PixelSequence:
    """Flatten left-to-right, top-to-bottom, then permute the time axis."""
    image = np.asarray(image)
    channels = image.shape[2] if image.ndim == 3 else 1
    values = image.reshape(image.shape[0] * image.shape[1], channels)
    if permutation is not None:
        permutation = np.asarray(permutation)
        if permutation.shape != (len(values),):
            raise ShapeError(
                f"permutation length {permutation.shape[0]} does not match "
                f"{len(values)} pixels"
            )
        values = values[permutation]
    return PixelSequence(values, permutation)


# --- IDX files ---


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file.

    Unsigned-byte image files (3 dims) come back as floats scaled to [0, 1],
    unsigned-byte label files (1 dim) as int64; other payloads keep their
    type. Nothing is returned for a malformed file.
    """
    path = Path(path)
    buf = bytearray()
    try:
        with _open(path) as f:
            while chunk := f.read(1 << 20):
                buf += chunk
    except FileNotFoundError:
        raise
    except (EOFError, OSError, zlib.error) as e:
        raise FormatError(f"{path}: corrupt or truncated compressed stream ({e})", offset=len(buf)) from e
    raw = bytes(buf)
    if len(raw) < 4:
        raise FormatError(f"{path}: missing IDX magic number", offset=len(raw))
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in IDX_DTYPES or ndim < 1:
        raise FormatError(f"{path}: bad IDX magic 0x{raw[:4].hex()}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_DTYPES[code]
    expected = header + int(np.prod(dims)) * dtype.itemsize
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated IDX payload, expected {expected} bytes, got {len(raw)}",
            offset=len(raw),
        )
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)
    logger.debug(f"Read IDX {path}: dims {dims}, type {dtype}")
    if code == 0x08 and ndim == 3:
        return data.astype(np.float64) / 255.0
    if code == 0x08 and ndim == 1:
        return data.astype(np.int64)
    return data.astype(dtype.newbyteorder("="))


def write_idx(path: str | Path, array: np.ndarray) -> Path:
    """Write ``array`` as a big-endian IDX file; the inverse of ``load_idx`` for raw data."""
    path = Path(path)
    array = np.asarray(array)
    code = IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.astype(IDX_DTYPES[code]).tobytes())
    return path


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray


def load_idx_dataset(images: str | Path, labels: str | Path, limit: int | None = None) -> ImageDataset:
    x = load_idx(images)
    y = load_idx(labels)
    if x.ndim != 3:
        raise FormatError(f"{images}: expected a 3-dim image file, got {x.ndim} dims")
    if len(x) != len(y):
        raise FormatError(f"{images} has {len(x)} images but {labels} has {len(y)} labels")
    if limit is not None:
        x, y = x[:limit], y[:limit]
    logger.info(f"Loaded {len(x)} images of size {x.shape[1]}x{x.shape[2]} from {images}")
    return ImageDataset(x, y)


# --- Task registry ---


@dataclass
class Task:
    """A batch sampler with the readout shape it needs."""

    name: str
    input_dim: int
    output_dim: int
    objective: str
    sample: Callable[[Rng, int], TaskBatch]
    bias_override: BiasInit | None = None
    base_train: TrainConfig | None = None


def make_task(name: str, params: dict, hidden: int, dtype=np.float64) -> Task:
    """Build the sampler for an experiment's task."""
    if name == "copy":
        length = params["length"]
        return Task(
            name,
            COPY_VOCAB,
            COPY_VOCAB,
            "xent",
            lambda rng, b: gen_copy(length, b, rng).to_task_batch(dtype),
        )
    if name in ("adding", "forgetting"):
        length = params["length"]
        task = Task(
            name, 2, 1, "mse", lambda rng, b: gen_adding(length, b, rng).to_task_batch(dtype)
        )
        if name == "forgetting":
            task.base_train, task.bias_override = forgetting_scenario(
                hidden, length, params["bias_offset"]
            )
        return task
    if name == "pixel":
        data = load_idx_dataset(params["images"], params["labels"], params["limit"])
        n_pixels = data.images.shape[1] * data.images.shape[2]
        perm = bit_reversal_perm(n_pixels) if params["permute"] else None
        # Time-major pixel sequences of every image, computed once.
        seqs = np.stack([scanline_sequence(img, perm).values for img in data.images]).astype(dtype)
        mask = np.zeros(n_pixels, dtype=bool)
        mask[-1] = True

        def sample(rng: Rng, b: int) -> TaskBatch:
            pick = rng.integers(0, len(seqs), size=b)
            targets = np.repeat(data.labels[pick][:, None], n_pixels, axis=1)
            return TaskBatch(seqs[pick], targets, mask, "xent")

        return Task(name, seqs.shape[-1], PIXEL_CLASSES, "xent", sample)
    raise ValueError(f"unknown task {name!r}")


# --- Batch cache ---


def save_batch(path: str | Path, batch: TaskBatch, meta: dict | None = None) -> Path:
    """Export a generated batch as ``.npz`` for cross-implementation comparison."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": BATCH_CACHE_FORMAT, "version": BATCH_CACHE_VERSION, "meta": meta or {}}
    np.savez(
        path,
        inputs=batch.inputs,
        targets=batch.targets,
        mask=batch.mask,
        objective=np.array(batch.objective),
        __meta__=np.array(json.dumps(header, sort_keys=True)),
    )
    return path


def load_batch(path: str | Path) -> TaskBatch:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__meta__"]))
        if header.get("format") != BATCH_CACHE_FORMAT:
            raise FormatError(f"{path} is not an urgate batch cache")
        return TaskBatch(data["inputs"], data["targets"], data["mask"], str(data["objective"]))
