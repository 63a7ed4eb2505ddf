"""Checkpoint directories: ``manifest.json`` plus one float32 little-endian blob per parameter group."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .autoencoder import AutoEncoder
from .lora import adapter_parameters, base_parameters
from .student import Student
from .velocity import VelocityNet

DTYPE = np.dtype("<f4")


def tensors_checksum(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().numpy().astype(DTYPE).tobytes())
    return h.hexdigest()


def module_checksum(module: nn.Module) -> str:
    return tensors_checksum(dict(module.state_dict()))


def _write_group(directory: Path, group: str, tensors: dict[str, torch.Tensor]) -> dict:
    names = sorted(tensors)
    flat = [tensors[n].detach().cpu().numpy().astype(DTYPE).ravel() for n in names]
    blob = np.concatenate(flat) if flat else np.zeros(0, DTYPE)
    (directory / f"{group}.bin").write_bytes(blob.tobytes())
    return {"file": f"{group}.bin", "tensors": [[n, list(tensors[n].shape)] for n in names],
            "sha256": tensors_checksum(tensors)}


def _read_group(directory: Path, entry: dict) -> dict[str, torch.Tensor]:
    blob = np.frombuffer((directory / entry["file"]).read_bytes(), dtype=DTYPE)
    out, offset = {}, 0
    for name, shape in entry["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        out[name] = torch.from_numpy(blob[offset:offset + n].copy().reshape(shape))
        offset += n
    if offset != blob.size:
        raise ValueError(f"blob {entry['file']} has {blob.size - offset} trailing values")
    return out


def save_checkpoint(directory: str | Path, kind: str, groups: dict[str, dict[str, torch.Tensor]],
                    config: dict, **extra) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": kind, "config": config, "groups": {}}
    manifest.update(extra)
    for group, tensors in groups.items():
        manifest["groups"][group] = _write_group(directory, group, tensors)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_groups(directory: str | Path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    return manifest, {g: _read_group(directory, e) for g, e in manifest["groups"].items()}


def _load_into(module: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    state = module.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}...")
    module.load_state_dict({k: v.to(state[k].dtype) for k, v in tensors.items()})


# -- per-model helpers ---------------------------------------------------------

def save_autoencoder(directory, ae: AutoEncoder, **extra) -> Path:
    groups = {"encoder": dict(ae.encoder.state_dict()), "decoder": dict(ae.decoder.state_dict()),
              "buffers": {"latent_scale": ae.latent_scale}}
    return save_checkpoint(directory, "autoencoder", groups, ae.config(),
                           decoder_sha256=module_checksum(ae.decoder), **extra)


def load_autoencoder(directory) -> tuple[AutoEncoder, dict]:
    manifest, groups = load_groups(directory)
    ae = AutoEncoder(**manifest["config"])
    _load_into(ae.encoder, groups["encoder"])
    _load_into(ae.decoder, groups["decoder"])
    ae.latent_scale.copy_(groups["buffers"]["latent_scale"])
    return ae, manifest


def save_velocity(directory, net: VelocityNet, **extra) -> Path:
    return save_checkpoint(directory, "teacher", {"velocity": dict(net.state_dict())}, net.config(),
                           velocity_sha256=module_checksum(net), **extra)


def load_velocity(directory) -> tuple[VelocityNet, dict]:
    manifest, groups = load_groups(directory)
    net = VelocityNet(**manifest["config"])
    _load_into(net, groups["velocity"])
    return net, manifest


def save_student(directory, student: Student, lora: nn.Module | None = None, **extra) -> Path:
    groups = {
        "encoder_adapters": {k: v for k, v in adapter_parameters(student.encoder).items()},
        "denoiser_adapters": {k: v for k, v in adapter_parameters(student.denoiser).items()},
        "head": {"gate": student.gate},
    }
    if lora is not None:
        groups["lora_adapters"] = dict(adapter_parameters(lora))
    config = {"rank": student.rank, "scale": student.scale, "seed": student.seed,
              "t_student": student.t_student, "upscale": student.upscale}
    if lora is not None:
        config["lora"] = {"rank": lora.lora_rank, "scale": lora.lora_scale, "seed": lora.lora_seed}
    return save_checkpoint(directory, "student", groups, config, **extra)


def _assign(params: dict[str, nn.Parameter], tensors: dict[str, torch.Tensor]) -> None:
    if set(params) != set(tensors):
        raise KeyError("adapter layout does not match checkpoint")
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(tensors[k].to(p.dtype))


def load_student(directory, ae: AutoEncoder, teacher: VelocityNet) -> tuple[Student, nn.Module | None, dict]:
    """Rebuild the student on top of ``ae``/``teacher`` and re-attach stored adapters."""
    from .lora import lora_wrap

    manifest, groups = load_groups(directory)
    cfg = manifest["config"]
    student = Student(ae, teacher, rank=cfg["rank"], scale=cfg["scale"], seed=cfg["seed"],
                      t_student=cfg["t_student"], upscale=cfg["upscale"])
    _assign(adapter_parameters(student.encoder), groups["encoder_adapters"])
    _assign(adapter_parameters(student.denoiser), groups["denoiser_adapters"])
    with torch.no_grad():
        student.gate.copy_(groups["head"]["gate"].reshape(()))
    lora = None
    if "lora_adapters" in groups:
        lc = cfg["lora"]
        lora = lora_wrap(teacher, lc["rank"], lc["scale"], lc["seed"])
        _assign(adapter_parameters(lora), groups["lora_adapters"])
    return student, lora, manifest


__all__ = [
    "base_parameters", "load_autoencoder", "load_student", "load_velocity", "module_checksum",
    "read_manifest", "save_autoencoder", "save_student", "save_velocity", "tensors_checksum",
]
