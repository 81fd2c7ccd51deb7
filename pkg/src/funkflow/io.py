"""File formats: study JSON, manifest+blob checkpoints, configs, reports.

All writers are deterministic (sorted keys, fixed float repr), so identical
inputs produce byte-identical files. Schemas are documented in
docs/formats.md.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model import ModelConfig
from .nn import ParamStore
from .sim import (
    ROUTES,
    DoseSpec,
    IndividualRecord,
    MetaStudyPrior,
    Study,
)
from .training import TrainConfig

CHECKPOINT_MAGIC = b"FUNKFLOW"
CHECKPOINT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(canonical_json(payload) + "\n")


def canonical_json(payload) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True)


def load_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None


# -- studies -----------------------------------------------------------------

def study_to_dict(study: Study) -> dict:
    return {
        "study_id": study.study_id,
        "seed": study.seed,
        "individuals": [
            {
                "id": rec.id,
                "dose_amount": float(rec.dose.amount),
                "route": rec.dose.route,
                "times": [float(v) for v in rec.times],
                "concentrations": [float(v) for v in rec.concentrations],
            }
            for rec in study.individuals
        ],
    }


def save_study(study: Study, path: str | Path) -> None:
    study.validate()
    write_json(path, study_to_dict(study))


def _require(mapping: dict, key: str, kind, where: str):
    if key not in mapping:
        raise ValidationError(f"{where}: missing field {key!r}")
    value = mapping[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ValidationError(f"{where}.{key}: expected {kind.__name__}, "
                              f"got {type(value).__name__}")
    return value


def study_from_dict(doc: dict, where: str = "study") -> Study:
    study_id = _require(doc, "study_id", str, where)
    seed = _require(doc, "seed", int, where)
    individuals = _require(doc, "individuals", list, where)
    records = []
    for i, entry in enumerate(individuals):
        here = f"{where}.individuals[{i}]"
        if not isinstance(entry, dict):
            raise ValidationError(f"{here}: expected an object")
        route = _require(entry, "route", str, here)
        if route not in ROUTES:
            raise ValidationError(f"{here}.route: must be one of {ROUTES}, got {route!r}")
        rec = IndividualRecord(
            id=_require(entry, "id", str, here),
            dose=DoseSpec(amount=_require(entry, "dose_amount", float, here),
                          route=route),
            times=np.asarray(_require(entry, "times", list, here), dtype=np.float64),
            concentrations=np.asarray(_require(entry, "concentrations", list, here),
                                      dtype=np.float64),
        )
        records.append(rec)
    study = Study(study_id=study_id, seed=seed, individuals=tuple(records))
    study.validate()
    return study


def load_study(path: str | Path) -> Study:
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: study file must hold a JSON object")
    return study_from_dict(doc, where=str(path))


def load_studies_dir(path: str | Path) -> list[Study]:
    root = Path(path)
    if root.is_file():
        return [load_study(root)]
    files = sorted(root.glob("*.json"))
    if not files:
        raise ValidationError(f"{path}: no study JSON files found")
    return [load_study(f) for f in files]


# -- prior configuration ------------------------------------------------------

# Informational fields from the study-configuration table that do not affect
# the generator.
_PRIOR_PASSTHROUGH = {"drug_id_options"}


def prior_from_dict(doc: dict, where: str = "prior") -> MetaStudyPrior:
    known = {f.name: f for f in dataclasses.fields(MetaStudyPrior)}
    values = {}
    for key, raw in doc.items():
        if key in _PRIOR_PASSTHROUGH:
            continue
        if key == "solver_method":
            if raw != "rk4":
                raise ValidationError(f"{where}.solver_method: only 'rk4' is supported")
            continue
        if key not in known:
            raise ValidationError(f"{where}: unknown field {key!r}")
        if key.endswith("_range"):
            if not (isinstance(raw, list) and len(raw) == 2):
                raise ValidationError(f"{where}.{key}: expected [low, high]")
            if key in ("num_individuals_range", "num_peripherals_range"):
                values[key] = (int(raw[0]), int(raw[1]))
            else:
                values[key] = (float(raw[0]), float(raw[1]))
        elif key == "time_num_steps":
            values[key] = int(raw)
        else:
            values[key] = float(raw)
    prior = dataclasses.replace(MetaStudyPrior(), **values)
    prior.validate()
    return prior


def load_prior(path: str | Path | None) -> MetaStudyPrior:
    if path is None:
        return MetaStudyPrior()
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: prior file must hold a JSON object")
    return prior_from_dict(doc, where=str(path))


def prior_to_dict(prior: MetaStudyPrior) -> dict:
    out = {}
    for f in dataclasses.fields(prior):
        value = getattr(prior, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


# -- model / training configuration -------------------------------------------

def model_config_to_dict(config: ModelConfig) -> dict:
    doc = dataclasses.asdict(config)
    doc["route_encoding"] = [[name, code] for name, code in config.route_encoding]
    return doc


def model_config_from_dict(doc: dict, where: str = "model") -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    values = {}
    for key, raw in doc.items():
        if key not in known:
            raise ValidationError(f"{where}: unknown field {key!r}")
        if key == "route_encoding":
            values[key] = tuple((str(n), float(c)) for n, c in raw)
        else:
            values[key] = raw
    config = dataclasses.replace(ModelConfig(), **values)
    config.validate()
    return config


def train_config_from_dict(doc: dict, where: str = "train") -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in doc:
        if key not in known:
            raise ValidationError(f"{where}: unknown field {key!r}")
    config = dataclasses.replace(TrainConfig(), **doc)
    config.validate()
    return config


def load_run_config(path: str | Path | None) -> tuple[ModelConfig, TrainConfig]:
    """A single JSON document with optional "model" and "train" sections."""
    if path is None:
        return ModelConfig(), TrainConfig()
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config file must hold a JSON object")
    model_doc = doc.get("model", {})
    train_doc = doc.get("train", {})
    extra = set(doc) - {"model", "train"}
    if extra:
        raise ValidationError(f"{path}: unknown sections {sorted(extra)}")
    return (model_config_from_dict(model_doc, where=f"{path}:model"),
            train_config_from_dict(train_doc, where=f"{path}:train"))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ParamStore, config: ModelConfig,
                    metadata: dict | None = None, master_seed: int = 0) -> None:
    """Manifest + little-endian float64 blob, concatenated in manifest order."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model_config_to_dict(config),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "dtype": "float64-le",
        "metadata": _jsonable(metadata or {}),
        "master_seed": int(master_seed),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                    for _, v in params.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or not raw.startswith(CHECKPOINT_MAGIC):
        raise ValidationError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (manifest_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if len(raw) < offset + manifest_len:
        raise ValidationError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[offset:offset + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValidationError(f"{path}: corrupt manifest") from None
    offset += manifest_len
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(
            f"{path}: format version {version} unsupported (expected {CHECKPOINT_VERSION})")
    if manifest.get("dtype") != "float64-le":
        raise ValidationError(f"{path}: unsupported dtype tag {manifest.get('dtype')!r}")
    entries = manifest.get("params")
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: manifest lacks a parameter list")
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    blob = raw[offset:]
    if len(blob) != 8 * total:
        raise ValidationError(
            f"{path}: blob holds {len(blob)} bytes, expected {8 * total}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    store = ParamStore()
    pos = 0
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        store.add(entry["name"], flat[pos:pos + size].reshape(shape).copy())
        pos += size
    config = model_config_from_dict(manifest["model_config"], where=f"{path}:model_config")
    return store, config, manifest


# -- tabular outputs -----------------------------------------------------------

def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_loss_history(path: str | Path, history: list[dict]) -> None:
    write_csv(path, history, ["epoch", "mean_loss", "lr"])
