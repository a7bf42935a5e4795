import pytest
import torch

from common.checkpoint_store import CheckpointStore, config_hash, load_checkpoint
from common.errors import CheckpointError
from common.network import ModelConfig, init_params


def test_save_and_load(tmp_path, tiny_config):
    store = CheckpointStore(str(tmp_path))
    model = init_params(tiny_config, seed=1)
    path = store.save(model, 3, {"note": "x"})

    loaded, metadata = load_checkpoint(path, tiny_config)

    assert metadata == {"note": "x"}
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(a, b)
    assert store.latest() == path
    assert store.get_store_info()["count"] == 1


def test_latest_follows_epoch_number(tmp_path, tiny_config):
    store = CheckpointStore(str(tmp_path))
    model = init_params(tiny_config, seed=1)
    for epoch in (2, 10, 1):
        store.save(model, epoch)
    assert [epoch for epoch, _ in store.list_checkpoints()] == [1, 2, 10]
    assert store.latest().endswith("epoch_0010.pt")


def test_config_mismatch_is_rejected(tmp_path, tiny_config):
    path = CheckpointStore(str(tmp_path)).save(init_params(tiny_config, seed=1), 0)
    other = ModelConfig(tiny_config.encoder_filters, tiny_config.descriptor_blocks, head_input="concat")
    assert config_hash(other) != config_hash(tiny_config)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)


def test_tampered_config_is_rejected(tmp_path, tiny_config):
    path = CheckpointStore(str(tmp_path)).save(init_params(tiny_config, seed=1), 0)
    payload = torch.load(path, weights_only=False)
    payload["config"]["descriptor_blocks"] = [4]
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_and_unreadable(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.pt"))
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bad))
