"""Checkpoint export and fixture emission.

A manifest pins everything the conversion needs: the source checkpoint,
the model config echo, the tensor name mapping with expected shapes,
and the fixture list. Export only maps names, validates shapes and
serializes; the numbers pass through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .formats import read_fixture_tensor, write_container, write_fixture_tensor
from .torch_model import build_name_mapping, build_torch_model

__all__ = [
    "BridgeError",
    "BridgeManifest",
    "default_manifest",
    "load_checkpoint",
    "export",
    "emit_fixtures",
]


class BridgeError(Exception):
    """Conversion input does not satisfy the manifest."""


@dataclass
class BridgeManifest:
    checkpoint: str
    config: dict
    mapping: dict[str, str]  # torch state-dict key -> container tensor name
    shapes: dict[str, list[int]]  # container tensor name -> expected shape
    fixtures: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "checkpoint": self.checkpoint,
                "config": self.config,
                "mapping": self.mapping,
                "shapes": self.shapes,
                "fixtures": self.fixtures,
            },
            indent=2,
        )

    @staticmethod
    def from_file(path) -> "BridgeManifest":
        try:
            raw = json.loads(Path(path).read_text())
            return BridgeManifest(
                checkpoint=raw["checkpoint"],
                config=raw["config"],
                mapping=dict(raw["mapping"]),
                shapes={k: list(v) for k, v in raw["shapes"].items()},
                fixtures=list(raw.get("fixtures", [])),
            )
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise BridgeError(f"cannot read manifest {path}: {exc}") from exc


def default_manifest(config: dict, checkpoint: str) -> BridgeManifest:
    """Manifest for a checkpoint of the mirror model with this config."""
    model = build_torch_model(config)
    mapping = build_name_mapping(model)
    state = model.state_dict()
    shapes = {
        container: list(state[torch_key].shape)
        for torch_key, container in mapping.items()
    }
    return BridgeManifest(
        checkpoint=checkpoint, config=config, mapping=mapping, shapes=shapes
    )


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, ValueError) as exc:
        raise BridgeError(f"cannot read checkpoint {path}: {exc}") from exc
    state = payload.get("state_dict") if isinstance(payload, dict) else None
    if state is None:
        raise BridgeError(f"{path}: checkpoint must hold a 'state_dict' entry")
    return state


def export(checkpoint_path, manifest: BridgeManifest, out_path) -> None:
    """Write the checkpoint as a container file per the manifest mapping."""
    state = load_checkpoint(checkpoint_path)
    tensors: dict[str, np.ndarray] = {}
    for torch_key, container_name in manifest.mapping.items():
        if torch_key not in state:
            raise BridgeError(f"missing tensor {torch_key!r} in checkpoint")
        value = state[torch_key]
        expected = tuple(manifest.shapes.get(container_name, ()))
        if tuple(value.shape) != expected:
            raise BridgeError(
                f"tensor {torch_key!r}: shape {tuple(value.shape)} does not match "
                f"manifest shape {expected}"
            )
        if container_name in tensors:
            raise BridgeError(f"duplicate container tensor {container_name!r}")
        tensors[container_name] = value.detach().cpu().numpy().astype(np.float32)
    write_container(out_path, tensors, manifest.config, mode="train_form")


def emit_fixtures(checkpoint_path, config: dict, inputs_dir, out_dir,
                  tolerance: float = 1e-4) -> list[dict]:
    """Run the source model on every input tensor and save golden logits.

    Inputs are .tfx tensor files shaped (1, 3, h, w); each produces
    <name>.logits.tfx next to a fixture record {input, expected,
    tolerance}.
    """
    model = build_torch_model(config)
    missing = model.load_state_dict(load_checkpoint(checkpoint_path), strict=True)
    del missing
    model.eval()

    inputs_dir = Path(inputs_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    paths = sorted(inputs_dir.glob("*.tfx"))
    if not paths:
        raise BridgeError(f"no .tfx input tensors in {inputs_dir}")
    for path in paths:
        x = read_fixture_tensor(path)
        if x.ndim != 4:
            raise BridgeError(f"{path}: input tensor must be rank 4")
        with torch.no_grad():
            logits = model(torch.from_numpy(x)).numpy()
        out_path = out_dir / f"{path.stem}.logits.tfx"
        write_fixture_tensor(out_path, logits)
        records.append(
            {"input": str(path), "expected": str(out_path), "tolerance": tolerance}
        )
    return records
