"""Shared plumbing: seeded RNG streams, configs, atomic files, checkpoints, logging."""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .core import Vocabulary

log = logging.getLogger("sgtlab")

CHECKPOINT_MAGIC = b"SGTCKPT1"
CHECKPOINT_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# randomness


def _label_key(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[k : k + 4], "little") for k in range(0, 16, 4))


def seeded_rng(root_seed: int, stream_label: str) -> np.random.Generator:
    """Independent, reproducible generator for the ``(seed, label)`` pair."""
    seq = np.random.SeedSequence(int(root_seed), spawn_key=_label_key(stream_label))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(root_seed: int, *labels: Any) -> int:
    """Deterministic 63-bit integer seed for a labelled sub-stream."""
    rng = seeded_rng(root_seed, "/".join(str(x) for x in labels))
    return int(rng.integers(0, 2**63 - 1))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)


def cache_dir() -> Path:
    """Dataset cache directory (``$SGTLAB_CACHE`` or ``~/.cache/sgtlab``)."""
    root = os.environ.get("SGTLAB_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "sgtlab")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# atomic output


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temp path next to ``path``; rename over it only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# configuration


def _check(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {msg}")


@dataclass
class TrainConfig:
    """Training configuration shared by both tasks; G2L-only keys are ignored by SGE."""

    task: str = "sge"
    strategy: str = "E"
    mask_rate: float = 0.3
    gamma: float = 4e-4
    total_steps: int = 2000
    batch_size: int = 16
    lambda_conv: float = 1.0
    lambda_sym: float = 1.0
    d_atten: int = 32
    d_ff: int = 128
    n_head: int = 4
    depth: int = 4
    dropout: float = 0.1
    dropout_sites: tuple[str, ...] = ("attention", "ff")
    edge_attention: bool = True
    sym_mode: str = "hard"
    mask_pair_policy: str = "exclude"
    logit_scale: float = 10.0
    no_relation_weight: float = 0.05
    seed: int = 0
    eval_every: int = 250
    # graph-to-layout
    raster_size: int = 64
    crop_fraction: float = 0.5
    e_i_widths: tuple[int, ...] = (32, 64, 64, 128, 128)
    use_image: bool = True
    ciou_weight: float = 1.0
    disparity_weight: float = 1.0
    height_disparity: str = "ratio"

    def __post_init__(self) -> None:
        self.dropout_sites = tuple(self.dropout_sites)
        self.e_i_widths = tuple(int(w) for w in self.e_i_widths)
        self.validate()

    def validate(self) -> None:
        _check(self.task in ("sge", "g2l"), "task", "must be 'sge' or 'g2l'")
        _check(self.strategy in ("E", "M"), "strategy", "must be 'E' or 'M'")
        _check(0.0 <= self.mask_rate <= 1.0, "mask_rate", f"must lie in [0, 1], got {self.mask_rate}")
        _check(self.gamma > 0, "gamma", "must be positive")
        _check(self.total_steps >= 10, "total_steps", "must be at least 10")
        _check(self.batch_size >= 1, "batch_size", "must be at least 1")
        _check(self.lambda_conv >= 0, "lambda_conv", "must be non-negative")
        _check(self.lambda_sym >= 0, "lambda_sym", "must be non-negative")
        _check(self.d_atten >= 1, "d_atten", "must be positive")
        _check(self.n_head >= 1 and self.d_atten % self.n_head == 0, "n_head", "must divide d_atten")
        _check(self.d_ff >= 1, "d_ff", "must be positive")
        _check(self.depth >= 0, "depth", "must be non-negative")
        _check(0.0 <= self.dropout < 1.0, "dropout", "must lie in [0, 1)")
        _check(set(self.dropout_sites) <= {"attention", "ff"}, "dropout_sites", "allowed: attention, ff")
        _check(self.sym_mode in ("hard", "soft"), "sym_mode", "must be 'hard' or 'soft'")
        _check(self.mask_pair_policy in ("exclude", "target"), "mask_pair_policy", "must be 'exclude' or 'target'")
        _check(self.logit_scale > 0, "logit_scale", "must be positive")
        _check(self.no_relation_weight >= 0, "no_relation_weight", "must be non-negative")
        _check(self.eval_every >= 1, "eval_every", "must be at least 1")
        _check(self.raster_size >= 16 and self.raster_size % 8 == 0, "raster_size", "must be a multiple of 8, >= 16")
        _check(0.0 < self.crop_fraction <= 1.0, "crop_fraction", "must lie in (0, 1]")
        _check(len(self.e_i_widths) == 5 and min(self.e_i_widths) >= 1, "e_i_widths", "need five positive widths")
        _check(self.ciou_weight >= 0, "ciou_weight", "must be non-negative")
        _check(self.disparity_weight >= 0, "disparity_weight", "must be non-negative")
        _check(self.height_disparity in ("ratio", "log_quotient"), "height_disparity", "must be 'ratio' or 'log_quotient'")

    @classmethod
    def from_dict(cls, doc: dict, **overrides) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: expected a mapping")
        known = {f.name for f in fields(cls)}
        merged = {**doc, **overrides}
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config key")
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["dropout_sites"] = list(self.dropout_sites)
        out["e_i_widths"] = list(self.e_i_widths)
        return out


def read_structured(path) -> Any:
    """Load a JSON or YAML document."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path, **overrides) -> TrainConfig:
    doc = read_structured(path) or {}
    return TrainConfig.from_dict(doc, **overrides)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a trained model."""

    task: str
    config: dict
    vocabulary: Vocabulary
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict | None = None
    rng: dict = field(default_factory=dict)
    torch_rng: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _flatten_optimizer(opt: dict | None, arrays: dict[str, np.ndarray]) -> dict | None:
    """Move tensors of a torch optimizer state dict into ``arrays``; return a JSON skeleton."""
    if opt is None:
        return None
    state = {}
    for pid, entries in opt["state"].items():
        state[str(pid)] = {}
        for key, value in entries.items():
            name = f"optimizer/{pid}/{key}"
            arrays[name] = np.asarray(value.detach().cpu().numpy() if hasattr(value, "detach") else value)
            state[str(pid)][key] = name
    return {"state": state, "param_groups": opt["param_groups"]}


def _restore_optimizer(skeleton: dict | None, arrays: dict[str, np.ndarray]) -> dict | None:
    if skeleton is None:
        return None
    import torch

    state = {
        int(pid): {key: torch.from_numpy(arrays[name].copy()) for key, name in entries.items()}
        for pid, entries in skeleton["state"].items()
    }
    return {"state": state, "param_groups": skeleton["param_groups"]}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    arrays: dict[str, np.ndarray] = {f"params/{k}": np.asarray(v) for k, v in ckpt.params.items()}
    optimizer = _flatten_optimizer(ckpt.optimizer, arrays)
    if ckpt.torch_rng is not None:
        arrays["rng/torch"] = np.asarray(ckpt.torch_rng, dtype=np.uint8)
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if not arr.flags.c_contiguous:  # ascontiguousarray would turn 0-d into 1-d
            arr = arr.copy(order="C")
        raw = arr.tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "task": ckpt.task,
        "config": ckpt.config,
        "vocabulary": ckpt.vocabulary.to_dict(),
        "step": int(ckpt.step),
        "optimizer": optimizer,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = struct.pack("<Q", len(head)) + head + b"".join(blobs)
    digest = hashlib.sha256(body).hexdigest().encode("ascii")
    return CHECKPOINT_MAGIC + digest + body


def decode_checkpoint(data: bytes, expect_task: str | None = None) -> Checkpoint:
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an sgtlab checkpoint (bad magic)")
    digest, body = data[8:72], data[72:]
    if hashlib.sha256(body).hexdigest().encode("ascii") != digest:
        raise CheckpointError("checkpoint corrupt: content digest mismatch")
    (head_len,) = struct.unpack("<Q", body[:8])
    header = json.loads(body[8 : 8 + head_len].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
    if expect_task is not None and header["task"] != expect_task:
        raise CheckpointError(f"checkpoint task is {header['task']!r}, expected {expect_task!r}")
    blob = body[8 + head_len :]
    arrays = {}
    for entry in header["arrays"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        expected = int(np.prod(entry["shape"], dtype=np.int64))
        if arr.size != expected:
            raise CheckpointError(f"shape manifest mismatch for {entry['name']}")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    params = {k[len("params/") :]: v for k, v in arrays.items() if k.startswith("params/")}
    return Checkpoint(
        task=header["task"],
        config=header["config"],
        vocabulary=Vocabulary.from_dict(header["vocabulary"]),
        params=params,
        step=header["step"],
        optimizer=_restore_optimizer(header["optimizer"], arrays),
        rng=header["rng"],
        torch_rng=arrays.get("rng/torch"),
        extra=header.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expect_task: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expect_task)


def check_param_shapes(expected: dict[str, tuple], ckpt: Checkpoint) -> None:
    """Raise when the checkpoint's parameter manifest disagrees with a model."""
    missing = sorted(set(expected) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"shape manifest mismatch: missing={missing[:3]} unexpected={extra[:3]}")
    for name, shape in expected.items():
        if tuple(ckpt.params[name].shape) != tuple(shape):
            raise CheckpointError(f"shape manifest mismatch for {name}: {ckpt.params[name].shape} vs {shape}")


# ---------------------------------------------------------------------------
# logging


class MetricsLog:
    """Line-delimited JSON metrics, one record per evaluation."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        log.info(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))

    def dump(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def flush(self) -> None:
        if self.path is not None:
            atomic_write_text(self.path, self.dump())
