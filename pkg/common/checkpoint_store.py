import hashlib
import io
import json
import logging
import os
import re
from typing import Any, Dict, List, Optional, Tuple

import torch

from common.config import APP_CONFIG, PATHS
from common.errors import CheckpointError
from common.network import LandmarkMatcher, ModelConfig
from common.utils import atomic_write_bytes, print_info

logger = logging.getLogger(__name__)

CHECKPOINT_PATTERN = re.compile(r"^epoch_(\d+)\.pt$")


def config_hash(config: ModelConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


class CheckpointStore:
    def __init__(self, persist_directory: str = None):
        self.persist_directory = persist_directory or PATHS["checkpoints"]

        # Create directory if it doesn't exist
        os.makedirs(self.persist_directory, exist_ok=True)

    def checkpoint_path(self, epoch: int) -> str:
        return os.path.join(self.persist_directory, f"epoch_{epoch:04d}.pt")

    def save(self, model: LandmarkMatcher, epoch: int, metadata: Dict[str, Any] = None) -> str:
        """Write a versioned checkpoint: config JSON, config hash, flat named weights"""
        payload = {
            "format_version": APP_CONFIG["checkpoint_format_version"],
            "config": model.config.to_dict(),
            "config_hash": config_hash(model.config),
            "epoch": epoch,
            "weights": {name: tensor.detach().cpu().clone() for name, tensor in model.state_dict().items()},
            "metadata": metadata or {}
        }
        buffer = io.BytesIO()
        torch.save(payload, buffer)

        path = self.checkpoint_path(epoch)
        atomic_write_bytes(path, buffer.getvalue())
        logger.info("Saved checkpoint %s", path)
        return path

    def list_checkpoints(self) -> List[Tuple[int, str]]:
        """(epoch, path) pairs sorted by epoch"""
        found = []
        for name in os.listdir(self.persist_directory):
            match = CHECKPOINT_PATTERN.match(name)
            if match:
                found.append((int(match.group(1)), os.path.join(self.persist_directory, name)))
        return sorted(found)

    def latest(self) -> Optional[str]:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1][1] if checkpoints else None

    def get_store_info(self) -> Dict[str, Any]:
        checkpoints = self.list_checkpoints()
        return {
            "persist_directory": self.persist_directory,
            "count": len(checkpoints),
            "latest": checkpoints[-1][1] if checkpoints else None
        }


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None) -> Tuple[LandmarkMatcher, Dict[str, Any]]:
    """Rebuild the model; reject a config whose hash does not match the stored one"""
    if not path or not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint not found: {path}")

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e

    version = payload.get("format_version")
    if version != APP_CONFIG["checkpoint_format_version"]:
        raise CheckpointError(f"Unsupported checkpoint format version {version} in {path}")

    config = ModelConfig.from_dict(payload["config"])
    if config_hash(config) != payload.get("config_hash"):
        raise CheckpointError(f"Config hash mismatch in {path}: the stored config was altered")
    if expected_config is not None and config_hash(expected_config) != payload["config_hash"]:
        raise CheckpointError(
            f"Checkpoint {path} was trained with {config.to_dict()}, expected {expected_config.to_dict()}"
        )

    model = LandmarkMatcher(config)
    model.load_state_dict(payload["weights"])
    model.eval()
    print_info(f"Loaded checkpoint: {os.path.basename(path)} (epoch {payload.get('epoch')})")
    return model, payload.get("metadata", {})
