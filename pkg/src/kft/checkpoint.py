"""Deterministic checkpoint archives.

An archive is a zip file holding ``manifest.json`` plus one little-endian
float64 blob per tensor.  Entry timestamps are fixed so that identical
contents produce byte-identical files.
"""
from __future__ import annotations

import json
import zipfile
from typing import Mapping

import numpy as np
import torch

from .kernels import SideInfo
from .model import KftModel

FORMAT = "kft-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_tensors(path, meta: Mapping, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    names = sorted(tensors)
    shapes = {}
    with zipfile.ZipFile(path, "w") as zf:
        for i, name in enumerate(names):
            arr = np.array(torch.as_tensor(tensors[name]).detach().cpu().numpy(), dtype="<f8", order="C")
            shapes[name] = {"file": f"tensors/{i:04d}.f64", "shape": list(arr.shape)}
            zf.writestr(_entry(shapes[name]["file"]), arr.tobytes())
        manifest = {"format": FORMAT, "meta": meta, "tensors": shapes}
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))


def load_tensors(path) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT:
                raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
            out = {}
            for name, entry in manifest["tensors"].items():
                arr = np.frombuffer(zf.read(entry["file"]), dtype="<f8").reshape(entry["shape"])
                out[name] = torch.from_numpy(arr.astype(np.float64))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return manifest["meta"], out


def model_tensors(model: KftModel) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def build_model(wiring: Mapping, tensors: Mapping[str, torch.Tensor]) -> KftModel:
    """Reconstruct a model from its wiring and saved tensors."""
    side = {int(p): SideInfo(int(p), tensors[f"side_{p}"]) for p in wiring["side_modes"]}
    model = KftModel(
        wiring["extents"],
        variant=wiring["variant"],
        space=wiring["space"],
        rank=wiring["ranks"],
        groups=wiring["groups"],
        side=side,
        kernel={int(p): k for p, k in wiring["kernel"].items()},
        rff_features=wiring["rff_features"],
        scale_rank=wiring["scale_ranks"],
        bias_rank=wiring["bias_ranks"],
        reg=wiring["reg"],
        reg_aux=wiring["reg_aux"],
        seed=wiring["seed"],
    )
    state = model.state_dict()
    missing = set(state) ^ set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint tensors do not match model wiring: {sorted(missing)}")
    with torch.no_grad():
        for k, v in state.items():
            if v.shape != tensors[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {tuple(tensors[k].shape)} vs {tuple(v.shape)}")
            v.copy_(tensors[k])
    return model


def save_model(model: KftModel, path, extra: Mapping | None = None) -> None:
    meta = {"kind": "frequentist", "wiring": model.wiring(), "extra": dict(extra or {})}
    save_tensors(path, meta, model_tensors(model))


def load_model(path) -> tuple[KftModel, dict]:
    meta, tensors = load_tensors(path)
    if meta.get("kind") != "frequentist":
        raise CheckpointError(f"{path} is not a frequentist model checkpoint")
    return build_model(meta["wiring"], tensors), meta.get("extra", {})


def save_variational(state, path, extra: Mapping | None = None) -> None:
    """Save a variational posterior (mean model plus variance parameters)."""
    meta = {
        "kind": "variational",
        "wiring": state.model.wiring(),
        "family": state.family,
        "prior": state.prior.to_json(),
        "init_var": state.init_var,
        "cov_rank": state.cov_rank,
        "extra": dict(extra or {}),
    }
    save_tensors(path, meta, dict(state.state_dict()))


def load_variational(path):
    """Inverse of :func:`save_variational`; returns ``(state, extra)``."""
    from .variational import PriorHyper, VariationalKft

    meta, tensors = load_tensors(path)
    if meta.get("kind") != "variational":
        raise CheckpointError(f"{path} is not a variational checkpoint")
    model = build_model(meta["wiring"], {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    state = VariationalKft(
        model, meta["family"], prior=PriorHyper(**meta["prior"]), init_var=meta["init_var"], cov_rank=meta["cov_rank"]
    )
    own = state.state_dict()
    if set(own) != set(tensors):
        raise CheckpointError(f"checkpoint tensors do not match the variational state: {sorted(set(own) ^ set(tensors))}")
    with torch.no_grad():
        for k, v in own.items():
            if v.shape != tensors[k].shape:
                raise CheckpointError(f"shape mismatch for {k}")
            v.copy_(tensors[k])
    return state, meta.get("extra", {})


def checkpoint_kind(path) -> str:
    meta, _ = load_tensors(path)
    return meta.get("kind", "")
