"""On-disk formats: episode files, data manifests, checkpoints and CSV tables."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import zipfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .terrainsim import Episode, Status

EPISODE_VERSION = 1
MANIFEST_VERSION = 1
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def _dumps(obj) -> str:
    # json writes floats with repr, the shortest string that round-trips
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------- episodes

def episode_to_text(ep: Episode) -> str:
    ph, pw = ep.patches.shape[1:]
    header = {"version": EPISODE_VERSION, "dt": float(ep.dt), "patch_h": int(ph), "patch_w": int(pw),
              "n_records": int(ep.n_records), "map_seed": None if ep.map_seed is None else int(ep.map_seed),
              "status": Status(ep.status).value}
    lines = [_dumps(header)]
    for t in range(ep.n_records):
        lines.append(_dumps({"t": t, "pose": [float(v) for v in ep.poses[t]],
                             "action": [float(v) for v in ep.actions[t]],
                             "patch": [float(v) for v in ep.patches[t].ravel()]}))
    return "\n".join(lines) + "\n"


def episode_from_text(text: str) -> Episode:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty episode file")
    h = json.loads(lines[0])
    if h.get("version") != EPISODE_VERSION:
        raise FormatError(f"unsupported episode version {h.get('version')}")
    n, ph, pw = h["n_records"], h["patch_h"], h["patch_w"]
    if len(lines) - 1 != n:
        raise FormatError(f"header announces {n} records, found {len(lines) - 1}")
    poses, actions, patches = np.empty((n, 6)), np.empty((n, 2)), np.empty((n, ph, pw))
    for k, line in enumerate(lines[1:]):
        r = json.loads(line)
        if r["t"] != k:
            raise FormatError(f"record {k} has tick {r['t']}")
        poses[k], actions[k] = r["pose"], r["action"]
        patches[k] = np.asarray(r["patch"]).reshape(ph, pw)
    return Episode(h["dt"], poses, actions, patches, h["map_seed"], Status(h.get("status", "running")))


def write_episode(path, ep: Episode) -> None:
    Path(path).write_text(episode_to_text(ep), encoding="utf-8", newline="\n")


def read_episode(path) -> Episode:
    return episode_from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- manifests

def write_manifest(path, entries: list) -> dict:
    """``entries``: dicts with ``file``, ``steps``, ``seed``."""
    m = {"version": MANIFEST_VERSION,
         "episodes": [{"file": e["file"], "steps": int(e["steps"]), "seed": e["seed"]} for e in entries],
         "total_steps": int(sum(e["steps"] for e in entries))}
    Path(path).write_text(json.dumps(m, indent=1) + "\n", encoding="utf-8", newline="\n")
    return m


def read_manifest(path) -> dict:
    m = json.loads(Path(path).read_text(encoding="utf-8"))
    if m.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {m.get('version')}")
    return m


def load_corpus(data_dir) -> list:
    data_dir = Path(data_dir)
    man = read_manifest(data_dir / "manifest.json")
    return [read_episode(data_dir / e["file"]) for e in man["episodes"]]


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str
    model_config: dict
    stats: dict
    tensors: "OrderedDict[str, np.ndarray]"
    run_config: dict
    extra: dict


def _tensor_payload(tensors) -> tuple:
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    index, payload = _tensor_payload(ck.tensors)
    meta = {"version": CHECKPOINT_VERSION, "kind": ck.kind, "model_config": ck.model_config, "stats": ck.stats,
            "run_config": ck.run_config, "extra": ck.extra, "tensors": index,
            "sha256": hashlib.sha256(payload).hexdigest()}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as z:
        for name, data in (("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode()),
                           ("tensors.bin", payload)):
            info = zipfile.ZipInfo(name, _ZIP_DATE)
            info.external_attr = 0o644 << 16
            z.writestr(info, data)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as z:
            meta = json.loads(z.read("meta.json"))
            payload = z.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, ValueError) as err:
        raise FormatError(f"corrupt checkpoint container: {err}") from err
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise FormatError("checkpoint tensor payload fails its checksum")
    tensors = OrderedDict()
    for t in meta["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return Checkpoint(meta["kind"], meta["model_config"], meta["stats"], tensors, meta["run_config"], meta["extra"])


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model, stats, run_config: dict | None = None, extra: dict | None = None) -> Checkpoint:
    return Checkpoint(model.kind, model.cfg.to_dict(), stats.to_dict(), model.params.state(), run_config or {},
                      extra or {})


def model_from_checkpoint(ck: Checkpoint):
    """Rebuild (model, stats) from a checkpoint."""
    from .models import ModelConfig, build_model
    from .training.data import NormalizationStats

    model = build_model(ck.kind, ModelConfig(**ck.model_config), 0)
    dtypes = {a.dtype for a in ck.tensors.values()}
    if len(dtypes) == 1:
        model.astype(dtypes.pop())
    model.params.load(ck.tensors)
    return model, NormalizationStats.from_dict(ck.stats)


# ---------------------------------------------------------------- csv

def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (np.floating,)):
        return _cell(float(v))
    return "" if v is None else str(v)


def write_csv(path, rows: list, fields) -> None:
    """Comma-separated, header row, LF endings; unknown keys are ignored."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(r.get(k)) for k in fields])


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
