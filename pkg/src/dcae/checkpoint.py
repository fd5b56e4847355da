"""Checkpoint persistence: a JSON manifest plus one little-endian tensor blob.

Layout of a checkpoint directory::

    manifest.json   format_version, kind, config, phase_history, seed,
                    latent shift/scale, tensor index (dtype, shape,
                    byte offset, byte length, sha256 per tensor)
    tensors.bin     concatenated little-endian IEEE-754 tensor bytes

Both files are written to temporary names and renamed into place.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    ChecksumError,
    ConfigError,
    CorruptIndexError,
    TruncatedBlobError,
    VersionError,
)
from .model import DCAE, AutoencoderConfig, build

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}
_TORCH_TO_NAME = {t: name for name, (t, _) in _DTYPES.items()}


@dataclass
class TensorEntry:
    dtype: str
    shape: list[int]
    offset: int
    nbytes: int
    sha256: str


@dataclass
class CheckpointManifest:
    config: dict
    kind: str = "autoencoder"
    phase_history: list[int] = field(default_factory=list)
    seed: int = 0
    latent_shift: list[float] = field(default_factory=list)
    latent_scale: list[float] = field(default_factory=list)
    tensors: dict[str, TensorEntry] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CheckpointManifest":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptIndexError(f"manifest is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise CorruptIndexError("manifest must be a JSON object")
        version = raw.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported checkpoint format_version {version!r}, expected {FORMAT_VERSION}")
        try:
            raw["tensors"] = {k: TensorEntry(**v) for k, v in raw["tensors"].items()}
            return cls(**raw)
        except (KeyError, TypeError, AttributeError) as exc:
            raise CorruptIndexError(f"malformed manifest: {exc}") from exc


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_tensors(state: dict[str, torch.Tensor], manifest: CheckpointManifest, path: str | Path) -> Path:
    """Serialize ``state`` into ``path`` and fill ``manifest.tensors``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks, index, offset = [], {}, 0
    for name, tensor in state.items():
        if tensor.dtype not in _TORCH_TO_NAME:
            raise ConfigError(f"tensor {name} has unsupported dtype {tensor.dtype}")
        dtype = _TORCH_TO_NAME[tensor.dtype]
        arr = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[dtype][1], copy=False)
        data = arr.tobytes()
        index[name] = TensorEntry(dtype, list(arr.shape), offset, len(data), hashlib.sha256(data).hexdigest())
        chunks.append(data)
        offset += len(data)
    manifest.tensors = index
    _atomic_write(path / BLOB_NAME, b"".join(chunks))
    _atomic_write(path / MANIFEST_NAME, manifest.to_json().encode())
    return path


def read_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], CheckpointManifest]:
    path = Path(path)
    try:
        manifest = CheckpointManifest.from_json((path / MANIFEST_NAME).read_text())
        blob = (path / BLOB_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptIndexError(f"checkpoint at {path} is incomplete: {exc}") from exc
    expected = max((e.offset + e.nbytes for e in manifest.tensors.values()), default=0)
    if len(blob) < expected:
        raise TruncatedBlobError(f"{BLOB_NAME} has {len(blob)} bytes, index requires {expected}")
    state = {}
    for name, e in manifest.tensors.items():
        if e.dtype not in _DTYPES:
            raise CorruptIndexError(f"tensor {name}: unknown dtype {e.dtype!r}")
        torch_dtype, np_dtype = _DTYPES[e.dtype]
        count = int(np.prod(e.shape, dtype=np.int64))
        if e.offset < 0 or e.nbytes != count * np.dtype(np_dtype).itemsize:
            raise CorruptIndexError(f"tensor {name}: byte range inconsistent with shape {e.shape}")
        data = blob[e.offset:e.offset + e.nbytes]
        if hashlib.sha256(data).hexdigest() != e.sha256:
            raise ChecksumError(f"tensor {name}: checksum mismatch")
        arr = np.frombuffer(data, dtype=np_dtype).reshape(e.shape)
        state[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(torch_dtype)
    return state, manifest


def save_checkpoint(model: DCAE, path: str | Path, seed: int = 0, extra: dict | None = None) -> CheckpointManifest:
    manifest = CheckpointManifest(
        config=model.config.to_dict(),
        kind="autoencoder",
        phase_history=list(model.phase_history),
        seed=seed,
        latent_shift=[float(v) for v in model.latent_shift],
        latent_scale=[float(v) for v in model.latent_scale],
        extra=dict(extra or {}),
    )
    write_tensors(dict(model.state_dict()), manifest, path)
    return manifest


def _load_state_strict(module: nn.Module, state: dict[str, torch.Tensor]) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise ConfigError(f"checkpoint tensors do not match the model: missing={missing[:5]} unexpected={unexpected[:5]}")
    for name, t in state.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise ConfigError(f"tensor {name}: checkpoint shape {tuple(t.shape)} != model shape {tuple(own[name].shape)}")
    dtype = next(iter(own.values())).dtype if own else torch.float32
    module.load_state_dict({k: v.to(dtype) for k, v in state.items()})


def load_checkpoint(path: str | Path, config: AutoencoderConfig | None = None) -> tuple[DCAE, CheckpointManifest]:
    """Rebuild the autoencoder stored at ``path``.

    If ``config`` is given it must equal the stored config; a mismatch is a
    :class:`ConfigError`, never a silent reshape.
    """
    state, manifest = read_tensors(path)
    if manifest.kind != "autoencoder":
        raise ConfigError(f"checkpoint at {path} holds a {manifest.kind!r} model, not an autoencoder")
    stored = AutoencoderConfig.from_dict(manifest.config)
    if config is not None and config.to_dict() != stored.to_dict():
        raise ConfigError(f"checkpoint config {stored.name} {stored.to_dict()} does not match requested {config.name} {config.to_dict()}")
    history = manifest.phase_history
    if history != [1, 2, 3][: len(history)]:
        raise CorruptIndexError(f"phase_history {history} is not a prefix of [1, 2, 3]")
    dtypes = {e.dtype for e in manifest.tensors.values()}
    dtype = torch.float64 if dtypes == {"float64"} else torch.float32
    model = build(stored, seed=manifest.seed, dtype=dtype)
    _load_state_strict(model, state)
    model.phase_history = list(history)
    c = stored.latent_channels
    if manifest.latent_shift:
        model.latent_shift = torch.tensor(manifest.latent_shift, dtype=torch.float64)
        model.latent_scale = torch.tensor(manifest.latent_scale, dtype=torch.float64)
    if model.latent_shift.numel() != c or model.latent_scale.numel() != c:
        raise CorruptIndexError(f"latent shift/scale must have {c} entries")
    return model, manifest


def save_diffusion_checkpoint(model, path: str | Path, ae_checkpoint: str | Path, seed: int = 0,
                              extra: dict | None = None) -> CheckpointManifest:
    """Store a diffusion transformer; the autoencoder is referenced by path, not copied."""
    manifest = CheckpointManifest(
        config=model.config.to_dict(),
        kind="diffusion",
        seed=seed,
        extra={
            "ae_checkpoint": str(Path(ae_checkpoint).resolve()),
            "latent_channels": model.latent_channels,
            "latent_size": model.latent_size,
            **(extra or {}),
        },
    )
    write_tensors(dict(model.state_dict()), manifest, path)
    return manifest


def load_diffusion_checkpoint(path: str | Path):
    from .diffusion import DiffusionConfig, build_dit

    state, manifest = read_tensors(path)
    if manifest.kind != "diffusion":
        raise ConfigError(f"checkpoint at {path} holds a {manifest.kind!r} model, not a diffusion model")
    try:
        config = DiffusionConfig(**manifest.config)
        channels, size = manifest.extra["latent_channels"], manifest.extra["latent_size"]
    except (TypeError, KeyError) as exc:
        raise CorruptIndexError(f"malformed diffusion manifest: {exc}") from exc
    dtypes = {e.dtype for e in manifest.tensors.values()}
    model = build_dit(config, channels, size, seed=manifest.seed,
                      dtype=torch.float64 if dtypes == {"float64"} else torch.float32)
    _load_state_strict(model, state)
    return model, manifest
