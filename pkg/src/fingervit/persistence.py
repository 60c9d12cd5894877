"""Run configuration, checkpoint container, and score-file formats.

Small artifacts (configs, reports) are JSON; score sets and tables are
CSV; weights use a versioned little-endian binary container with a
named-tensor index and a SHA-256 payload digest. All writes go through
write-temp-then-rename so partial files never appear under final names.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .metrics import ScoreRecord
from .pipeline import TrainConfig
from .synth import DEFAULT_SPECIES, DatasetSplit, build_dataset
from .vit import ModelConfig


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ScoreFileError(ValueError):
    pass


# -- run configuration --


@dataclass
class DataConfig:
    """Synthetic dataset parameters; seed defaults to the run seed."""

    num_identities: int = 200
    impressions_per_id: int = 6
    attack_fraction: float = 0.5
    image_size: int = 32
    channels: int = 1
    species: tuple[str, ...] = DEFAULT_SPECIES
    seed: int | None = None

    def build(self) -> DatasetSplit:
        return build_dataset(self.num_identities, self.impressions_per_id,
                             self.attack_fraction, seed=self.seed,
                             image_size=self.image_size, channels=self.channels,
                             species=tuple(self.species))


@dataclass
class MetricsConfig:
    """Operating-point targets for threshold selection."""

    pad_target_bpcer: float = 2.0
    match_target_fmr: float = 1.0
    ablation_target_bpcer: float = 2.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train_frm: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))
    train_pad: TrainConfig = field(default_factory=TrainConfig)
    train_unified: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> None:
        if self.deterministic and self.seed is None:
            raise ConfigError("deterministic runs require a seed")
        if self.data.image_size != self.model.image_size:
            raise ConfigError(f"data.image_size {self.data.image_size} != "
                              f"model.image_size {self.model.image_size}")
        if self.data.channels != self.model.channels:
            raise ConfigError(f"data.channels {self.data.channels} != "
                              f"model.channels {self.model.channels}")


_SECTION_TYPES = {
    "model": ModelConfig,
    "data": DataConfig,
    "train_frm": TrainConfig,
    "train_pad": TrainConfig,
    "train_unified": TrainConfig,
    "metrics": MetricsConfig,
}


def _build_section(cls, obj: dict, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"'{path}' must be an object, got {type(obj).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown key '{path}.{sorted(unknown)[0]}'")
    kwargs = {}
    for name, value in obj.items():
        if name == "species" and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under '{path}': {exc}") from exc


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse, default, and validate a JSON run config; unknown keys are errors.

    The effective run seed (after any override) fills in every stage seed
    and the data seed that the file leaves unset.
    """
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw, seed_override=seed_override)


def config_from_dict(raw: dict, seed_override: int | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    top_known = set(_SECTION_TYPES) | {"output_dir", "seed", "deterministic"}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}'")

    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        obj = dict(raw.get(name, {}))
        if cls is TrainConfig and "seed" not in obj:
            obj["seed"] = seed
        if cls is DataConfig and obj.get("seed") is None:
            obj["seed"] = seed
        sections[name] = _build_section(cls, obj, name)
    cfg = RunConfig(
        output_dir=raw.get("output_dir", "runs/default"),
        seed=seed,
        deterministic=raw.get("deterministic", True),
        **sections,
    )
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["data"]["species"] = list(out["data"]["species"])
    return out


def save_config(cfg: RunConfig, path) -> None:
    _atomic_write_text(path, json.dumps(config_to_dict(cfg), indent=2) + "\n")


# -- atomic writes --


def _atomic_write_bytes(path, data: bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + f".tmp.{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, p)


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


# -- checkpoints --

CHECKPOINT_MAGIC = b"FPVITCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: dict[str, Tensor], model_config: ModelConfig, path) -> None:
    """Write named tensors as little-endian float32 with an indexed header.

    Layout: magic, u32 header length, UTF-8 JSON header (format version,
    model config echo, tensor index with byte offsets, payload digest),
    then the raw payload. Loading is bit-identical to what was saved.
    """
    names = sorted(params)
    index = []
    chunks = []
    offset = 0
    for name in names:
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model_config),
        "tensors": index,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    _atomic_write_bytes(path, CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    """Read a checkpoint, verifying magic, version, digest, and index bounds."""
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    data = p.read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {p}")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos: pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version "
                              f"{header.get('format_version')} (expected {CHECKPOINT_VERSION})")
    payload = data[pos:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload truncated: {len(payload)} bytes, "
                              f"expected {header['payload_bytes']}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError("payload digest mismatch; checkpoint is corrupt")
    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        stop = start + count * 4
        if stop > len(payload):
            raise CheckpointError(f"tensor '{entry['name']}' overruns the payload")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    mc = ModelConfig(**header["model_config"])
    return params, mc


# -- score files --

SCORE_HEADER = ["probe_id", "reference_id", "is_genuine", "probe_liveness",
                "pai_species", "match_score", "pad_score"]


def write_scores(records: list[ScoreRecord], path) -> None:
    """CSV with the fixed seven-column header; scores carry 9 significant digits.

    Scores are float32-valued, so the 9-digit decimal form round-trips
    them exactly and any threshold decision survives a write/read cycle.
    """
    lines = [",".join(SCORE_HEADER)]
    for r in records:
        lines.append(",".join([
            r.probe_id, r.reference_id,
            "true" if r.is_genuine_pair else "false",
            r.probe_liveness, r.pai_species,
            f"{r.match_score:.9g}", f"{r.pad_score:.9g}",
        ]))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_scores(path) -> list[ScoreRecord]:
    p = Path(path)
    if not p.exists():
        raise ScoreFileError(f"score file not found: {p}")
    records = []
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ScoreFileError(f"{p}: empty file, expected header") from None
        if header != SCORE_HEADER:
            raise ScoreFileError(f"{p}: bad header {header}, expected {SCORE_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SCORE_HEADER):
                raise ScoreFileError(f"{p}:{lineno}: expected {len(SCORE_HEADER)} fields, "
                                     f"got {len(row)}")
            genuine = row[2].strip().lower()
            if genuine not in ("true", "false", "1", "0"):
                raise ScoreFileError(f"{p}:{lineno}: bad is_genuine value '{row[2]}'")
            try:
                records.append(ScoreRecord(
                    probe_id=row[0], reference_id=row[1],
                    is_genuine_pair=genuine in ("true", "1"),
                    probe_liveness=row[3], pai_species=row[4],
                    match_score=float(row[5]), pad_score=float(row[6]),
                ))
            except ValueError as exc:
                raise ScoreFileError(f"{p}:{lineno}: {exc}") from exc
    return records


def write_json(obj: dict, path) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_ablation_csv(result, path) -> None:
    """Ablation table: one row per layer with APCER and the selected threshold."""
    lines = ["layer,apcer,threshold"]
    for row in result.rows:
        lines.append(f"{row.layer},{row.apcer_avg:.9g},{row.threshold:.9g}")
    _atomic_write_text(path, "\n".join(lines) + "\n")
