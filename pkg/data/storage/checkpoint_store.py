"""
Framework-neutral checkpoint directory:

    <ckpt>/checkpoint.json        arch, spec, train config, history, seed, config hash, tensor index
    <ckpt>/tensors/<name>.bin     raw little-endian float32, C order, shape from the index
"""

import json
import logging
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from data.models.errors import DataValidationError
from data.models.schemas import CnnSpec, EpochRecord, ModelCheckpoint, TrainConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "checkpoint.json"
TENSOR_DIR = "tensors"
TENSOR_DTYPE = "<f4"


def save_checkpoint(checkpoint: ModelCheckpoint, directory: Path) -> Path:
    directory = Path(directory)
    (directory / TENSOR_DIR).mkdir(parents=True, exist_ok=True)

    index = []
    for name, array in checkpoint.tensors.items():
        file_name = f"{name}.bin"
        np.ascontiguousarray(array, dtype=TENSOR_DTYPE).tofile(directory / TENSOR_DIR / file_name)
        index.append({"name": name, "file": f"{TENSOR_DIR}/{file_name}", "shape": list(np.shape(array)),
                      "dtype": "float32-le"})

    manifest = {
        "arch": checkpoint.arch,
        "spec": checkpoint.spec.model_dump(mode="json"),
        "train_config": checkpoint.train_config.model_dump(mode="json"),
        "history": [record.model_dump(mode="json") for record in checkpoint.history],
        "seed": checkpoint.seed,
        "config_hash": checkpoint.config_hash,
        "tensors": index
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"✅ Saved checkpoint ({len(index)} tensors) to {directory}")
    return directory


def load_checkpoint(directory: Path) -> ModelCheckpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataValidationError(f"No {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        tensors = {}
        for entry in manifest["tensors"]:
            array = np.fromfile(directory / entry["file"], dtype=TENSOR_DTYPE)
            expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
            if array.size != expected:
                raise DataValidationError(
                    f"Tensor {entry['name']} has {array.size} values, index says {entry['shape']}"
                )
            tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.float32)
        return ModelCheckpoint(
            arch=manifest["arch"],
            spec=CnnSpec(**manifest["spec"]),
            train_config=TrainConfig(**manifest["train_config"]),
            history=[EpochRecord(**record) for record in manifest["history"]],
            seed=manifest["seed"],
            config_hash=manifest["config_hash"],
            tensors=tensors
        )
    except (KeyError, ValueError, ValidationError) as e:
        raise DataValidationError(f"Corrupt checkpoint in {directory}: {e}") from e
