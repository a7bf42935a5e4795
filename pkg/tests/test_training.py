import json

import numpy as np
import pytest
import torch

from common.checkpoint_store import load_checkpoint
from common.errors import DataError, TrainingDivergedError
from common.network import init_params
from common.run_config import MaskConfig, TrainConfig
from trainer import training_loop
from trainer.loss import DescriptorLossTerms, total_loss
from trainer.texture_generator import generate_dataset
from trainer.training_loop import (
    check_parameters, make_training_pair, pair_loss, prefetch, synthesize_pairs, train
)
from trainer.transforms import AffineTransform2D, TransformSpec


def _tiny_train_config(**overrides):
    values = dict(epochs=2, batch_size=2, K=16, prefetch_depth=2, seed=3,
                  families=["brightness", "rotation", "elastic"])
    values.update(overrides)
    return TrainConfig(**values)


def _specs(config):
    return {family: TransformSpec(family=family) for family in config.families}


def test_zero_epochs_keeps_initialization(tmp_path, tiny_config):
    config = _tiny_train_config(epochs=0)
    result = train(config, generate_dataset(2, (48, 48), seed=0), str(tmp_path / "ckpt"),
                   model_config=tiny_config, transform_specs=_specs(config))

    model, _ = load_checkpoint(result.checkpoint_path, tiny_config)
    for loaded, initial in zip(model.parameters(), init_params(tiny_config, config.seed).parameters()):
        assert torch.equal(loaded, initial)
    assert result.epoch_losses == []


def test_training_is_deterministic(tmp_path, tiny_config):
    dataset = generate_dataset(4, (48, 48), seed=1)
    config = _tiny_train_config()
    logs = []
    for run in ("a", "b"):
        result = train(config, dataset, str(tmp_path / run), model_config=tiny_config,
                       transform_specs=_specs(config), log_path=str(tmp_path / f"{run}.jsonl"))
        with open(result.log_path, encoding="utf-8") as f:
            logs.append([json.loads(line) for line in f])

    assert logs[0] == logs[1]
    assert [r["step"] for r in logs[0] if r["type"] == "step"] == [1, 2, 3, 4]
    for record in logs[0]:
        assert np.isfinite(record["total"])
        assert record["seed_state_digest"]


def test_one_checkpoint_per_epoch(tmp_path, tiny_config):
    config = _tiny_train_config()
    result = train(config, generate_dataset(2, (48, 48), seed=2), str(tmp_path / "ckpt"),
                   model_config=tiny_config, transform_specs=_specs(config))
    names = sorted(p.name for p in (tmp_path / "ckpt").iterdir() if p.suffix == ".pt")
    assert names == ["epoch_0000.pt", "epoch_0001.pt", "epoch_0002.pt"]
    assert result.checkpoint_path.endswith("epoch_0002.pt")
    assert len(result.epoch_losses) == 2


def test_divergence_keeps_last_checkpoint(tmp_path, tiny_config, monkeypatch):
    def broken(p_hat, p):
        return p_hat.sum() * float("nan")

    monkeypatch.setattr(training_loop, "landmark_probability_loss", broken)
    config = _tiny_train_config()
    with pytest.raises(TrainingDivergedError) as info:
        train(config, generate_dataset(2, (48, 48), seed=2), str(tmp_path / "ckpt"),
              model_config=tiny_config, transform_specs=_specs(config))

    assert info.value.component == "landmark_loss_I1"
    assert info.value.last_checkpoint.endswith("epoch_0000.pt")


def test_empty_dataset(tmp_path, tiny_config):
    config = _tiny_train_config()
    with pytest.raises(DataError):
        train(config, [], str(tmp_path / "ckpt"), model_config=tiny_config, transform_specs=_specs(config))


def test_empty_masks_are_a_data_error(tmp_path, tiny_config):
    config = _tiny_train_config(epochs=1)
    with pytest.raises(DataError):
        train(config, generate_dataset(2, (48, 48), seed=0), str(tmp_path / "ckpt"),
              model_config=tiny_config, transform_specs=_specs(config),
              mask_config=MaskConfig(min_component_px=10 ** 6))


def test_batch_without_landmarks_skips_the_update(tmp_path, tiny_config, monkeypatch):
    real_pair_loss = training_loop.pair_loss
    calls = []

    def first_batch_empty(model, pair, config):
        calls.append(pair)
        breakdown, gt = real_pair_loss(model, pair, config)
        if len(calls) <= config.batch_size:
            zero = breakdown.total.detach() * 0.0
            return total_loss(zero, zero, DescriptorLossTerms(zero, zero, zero)), gt
        return breakdown, gt

    monkeypatch.setattr(training_loop, "pair_loss", first_batch_empty)
    config = _tiny_train_config(epochs=1)
    result = train(config, generate_dataset(4, (48, 48), seed=1), str(tmp_path / "ckpt"),
                   model_config=tiny_config, transform_specs=_specs(config), log_path=str(tmp_path / "log.jsonl"))

    with open(result.log_path, encoding="utf-8") as f:
        steps = [json.loads(line) for line in f]
    assert [r["updated"] for r in steps] == [False, True]
    assert result.checkpoint_path.endswith("epoch_0001.pt")


def test_non_finite_update_keeps_last_checkpoint(tmp_path, tiny_config, monkeypatch):
    class PoisonedAdam(torch.optim.Adam):
        def step(self, closure=None):
            super().step(closure)
            with torch.no_grad():
                self.param_groups[0]["params"][0].fill_(float("inf"))

    monkeypatch.setattr(torch.optim, "Adam", PoisonedAdam)
    config = _tiny_train_config()
    with pytest.raises(TrainingDivergedError) as info:
        train(config, generate_dataset(2, (48, 48), seed=2), str(tmp_path / "ckpt"),
              model_config=tiny_config, transform_specs=_specs(config))

    first_name = next(iter(init_params(tiny_config, 0).named_parameters()))[0]
    assert info.value.component == first_name
    assert info.value.last_checkpoint.endswith("epoch_0000.pt")
    assert not (tmp_path / "ckpt" / "epoch_0001.pt").exists()


def test_check_parameters_passes_finite_model(tiny_config):
    check_parameters(init_params(tiny_config, 0), 1, "epoch_0000.pt")


def test_pair_stream_is_reproducible():
    images = generate_dataset(3, (32, 32), seed=0)
    specs = {family: TransformSpec(family=family) for family in ("contrast", "scaling")}

    def families(seed):
        stream = synthesize_pairs(images, specs, None, np.random.default_rng(seed), 6, MaskConfig())
        return [(p.family, p.seed_state_digest) for p in stream]

    assert families(4) == families(4)
    assert families(4) != families(5)


def test_prefetch_keeps_order_and_reraises():
    assert list(prefetch(iter(range(20)), 3)) == list(range(20))
    assert list(prefetch(iter(range(5)), 0)) == list(range(5))

    def failing():
        yield 1
        raise RuntimeError("producer failed")

    with pytest.raises(RuntimeError):
        list(prefetch(failing(), 2))


def test_identity_pair_labels_every_landmark(tiny_config, texture):
    pair = make_training_pair(texture, AffineTransform2D(((1.0, 0.0), (0.0, 1.0)), (0.0, 0.0)), "affine",
                              MaskConfig())
    breakdown, gt = pair_loss(init_params(tiny_config, 0), pair, _tiny_train_config())

    assert gt.k_pos >= gt.c.shape[0] > 0
    assert gt.p1.all() and gt.p2.all()
    assert torch.isfinite(breakdown.total)


@pytest.mark.slow
def test_desk_scale_loss_decreases(tmp_path):
    from common.network import ModelConfig

    config = TrainConfig(epochs=5, batch_size=4, K=64, seed=0)
    result = train(config, generate_dataset(16, (96, 96), seed=0), str(tmp_path / "ckpt"),
                   model_config=ModelConfig((8, 16, 32, 64, 128), (3, 4)), transform_specs=_specs(config))
    assert result.epoch_losses[-1] < result.epoch_losses[0]


@pytest.mark.slow
def test_desk_scale_matching_floors(tmp_path):
    from matcher.evaluation import compute_matching_errors
    from matcher.inference import infer_pair
    from trainer.transforms import sample_transform, spec_for_family

    config = TrainConfig(epochs=30, batch_size=4, K=100, cell_px=8, seed=0)
    result = train(config, generate_dataset(64, (96, 96), seed=0), str(tmp_path / "ckpt"),
                   transform_specs=_specs(config))
    model, _ = load_checkpoint(result.checkpoint_path)

    rng = np.random.default_rng(11)
    held_out = generate_dataset(10, (96, 96), seed=1)
    floors = {"intensity": (2.0, 0.90, 20), "elastic": (8.0, 0.80, 10)}
    for family, (bound_px, min_fraction, min_matches) in floors.items():
        spec = spec_for_family(family)
        errors, counts = [], []
        for image in held_out:
            pair = make_training_pair(image, sample_transform(spec, rng, image.shape), family, MaskConfig())
            matches = infer_pair(model, pair.reference, pair.target, cell_px=8,
                                 mask1=pair.reference_mask, mask2=pair.target_mask)
            errors.extend(compute_matching_errors(matches, pair.transform))
            counts.append(len(matches))

        assert np.median(counts) >= min_matches, family
        assert np.mean(np.asarray(errors) <= bound_px) >= min_fraction, family
