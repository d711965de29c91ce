"""JSON documents for network checkpoints, Koopman models, configs and run
manifests. Floats are written with ``repr`` precision, so round-trips are exact."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .edmd import Dictionary, KoopmanModel
from .networks import DictionaryNetwork

CHECKPOINT_FORMAT = "edmddl-checkpoint/1"
MODEL_FORMAT = "edmddl-model/1"
MANIFEST_FORMAT = "edmddl-manifest/1"


def dump_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_json(path) -> Any:
    return json.loads(Path(path).read_text())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def checkpoint_doc(net: DictionaryNetwork, seed=None) -> dict:
    return {"format": CHECKPOINT_FORMAT, "seed": seed, **net.to_dict()}


def save_checkpoint(net: DictionaryNetwork, path, seed=None) -> None:
    dump_json(checkpoint_doc(net, seed), path)


def network_from_doc(doc: dict) -> DictionaryNetwork:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    return DictionaryNetwork.from_dict(doc)


def load_checkpoint(path) -> DictionaryNetwork:
    return network_from_doc(load_json(path))


def _c(a) -> dict:
    a = np.asarray(a)
    return {"re": a.real.tolist(), "im": a.imag.tolist()}


def _uc(doc) -> np.ndarray:
    return np.asarray(doc["re"], dtype=float) + 1j * np.asarray(doc["im"], dtype=float)


def model_doc(model: KoopmanModel, checkpoint_path=None, system=None, seed=None) -> dict:
    dic = model.dictionary
    net = None if dic is None or dic.network is None else checkpoint_doc(dic.network, seed)
    return {
        "format": MODEL_FORMAT,
        "d": model.d,
        "M": model.M,
        "K": model.K.tolist(),
        "B": model.B.tolist(),
        "eigenvalues": _c(model.eigenvalues),
        "right_eigenvectors": _c(model.right),
        "left_eigenvectors": _c(model.left),
        "modes": _c(model.modes),
        "dictionary": {
            "projections": True if dic is None else dic.projections,
            "checkpoint_path": None if checkpoint_path is None else str(checkpoint_path),
            "checkpoint_sha256": None if checkpoint_path is None else sha256_file(checkpoint_path),
            "network": net,
        },
        "system": system or {},
    }


def save_model(model: KoopmanModel, path, checkpoint_path=None, system=None, seed=None) -> None:
    dump_json(model_doc(model, checkpoint_path, system, seed), path)


def model_from_doc(doc: dict) -> KoopmanModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r}")
    dd = doc["dictionary"]
    net = network_from_doc(dd["network"]) if dd.get("network") else None
    dictionary = Dictionary(doc["d"], net, dd.get("projections", True))
    return KoopmanModel(
        K=np.asarray(doc["K"], dtype=float),
        eigenvalues=_uc(doc["eigenvalues"]),
        right=_uc(doc["right_eigenvectors"]),
        left=_uc(doc["left_eigenvectors"]),
        B=np.asarray(doc["B"], dtype=float),
        modes=_uc(doc["modes"]),
        dictionary=dictionary,
    )


def load_model(path) -> tuple[KoopmanModel, dict]:
    doc = load_json(path)
    return model_from_doc(doc), doc.get("system", {})


def write_manifest(path, command: str, argv, config: dict, seeds: dict, artifacts: dict, started: float) -> None:
    """``artifacts`` maps a role name to a file path; hashes are computed here."""
    doc = {
        "format": MANIFEST_FORMAT,
        "tool": "edmddl",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "artifacts": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in artifacts.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    dump_json(doc, path)
