"""
Training loop: on-the-fly pair synthesis, Siamese forward pass, grid sampling,
ground truth, multi-task loss and Adam updates.
"""

import hashlib
import json
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from common.checkpoint_store import CheckpointStore
from common.config import ERROR_MESSAGES
from common.errors import DataError, NumericError, TrainingDivergedError
from common.image_io import BinaryMask, GrayImage, compute_valid_mask, rescale_intensity
from common.network import (
    LandmarkMatcher, ModelConfig, forward_branch, image_tensor, init_params, match_head, sample_descriptors
)
from common.run_config import MaskConfig, TrainConfig
from common.utils import print_info, print_section_header
from trainer.loss import (
    LossBreakdown, descriptor_matching_loss, landmark_probability_loss, total_loss
)
from trainer.sampling import GroundTruth, gather_probabilities, generate_ground_truth, grid_sample_landmarks
from trainer.transforms import Transform, TransformSpec, sample_transform, warp_image, warp_mask

logger = logging.getLogger(__name__)


@dataclass
class TrainingPair:
    reference: GrayImage
    target: GrayImage
    reference_mask: BinaryMask
    target_mask: BinaryMask
    transform: Transform
    family: str
    seed_state_digest: str = ""


@dataclass
class TrainingResult:
    checkpoint_path: str
    log_path: str
    epoch_losses: List[float] = field(default_factory=list)
    validation_losses: List[float] = field(default_factory=list)


def rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.md5(state.encode()).hexdigest()[:16]


def make_training_pair(reference: GrayImage, transform: Transform, family: str,
                       mask_config: MaskConfig, digest: str = "") -> TrainingPair:
    reference_mask = compute_valid_mask(
        reference, mask_config.threshold_fraction * reference.max_intensity, mask_config.min_component_px
    )
    return TrainingPair(
        reference=reference,
        target=warp_image(reference, transform),
        reference_mask=reference_mask,
        target_mask=warp_mask(reference_mask, transform),
        transform=transform,
        family=family,
        seed_state_digest=digest
    )


def synthesize_pairs(images: Sequence[GrayImage], specs: Dict[str, TransformSpec],
                     family_weights: Optional[Sequence[float]], rng: np.random.Generator,
                     count: int, mask_config: MaskConfig) -> Iterator[TrainingPair]:
    """Draw reference, family and transform in a fixed order so the stream is reproducible"""
    families = list(specs)
    for _ in range(count):
        digest = rng_digest(rng)
        reference = images[int(rng.integers(0, len(images)))]
        family = families[int(rng.choice(len(families), p=family_weights))]
        transform = sample_transform(specs[family], rng, reference.shape)
        yield make_training_pair(reference, transform, family, mask_config, digest)


class _Failure:
    def __init__(self, error: BaseException):
        self.error = error


def prefetch(items: Iterable, depth: int) -> Iterator:
    """Produce items in a background thread through a bounded queue, preserving order"""
    if depth <= 0:
        yield from items
        return

    buffer: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in items:
                while not stop.is_set():
                    try:
                        buffer.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as e:
            buffer.put(_Failure(e))
        buffer.put(done)

    producer = threading.Thread(target=produce, name="pair-producer", daemon=True)
    producer.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            if isinstance(item, _Failure):
                raise item.error
            yield item
    finally:
        stop.set()


def pair_forward(model: LandmarkMatcher, pair: TrainingPair, config: TrainConfig):
    """Forward both images through the shared branch and build the loss inputs"""
    dtype = next(model.parameters()).dtype
    images = torch.stack([
        image_tensor(rescale_intensity(pair.reference.pixels), dtype),
        image_tensor(rescale_intensity(pair.target.pixels), dtype)
    ])
    prob, pyramids = forward_branch(model, images)

    lm1 = grid_sample_landmarks(prob[0].detach().cpu().numpy(), pair.reference_mask, config.cell_px, config.K)
    lm2 = grid_sample_landmarks(prob[1].detach().cpu().numpy(), pair.target_mask, config.cell_px, config.K)
    gt = generate_ground_truth(lm1, lm2, pair.transform, config.thresh_pixels, pair.reference_mask)

    p1_hat = gather_probabilities(prob[0], lm1)
    p2_hat = gather_probabilities(prob[1], lm2)
    f1 = sample_descriptors(pyramids[0], lm1.points)
    f2 = sample_descriptors(pyramids[1], lm2.points)
    c_hat = match_head(model, f1, f2)
    return p1_hat, p2_hat, f1, f2, c_hat, gt


def pair_loss(model: LandmarkMatcher, pair: TrainingPair, config: TrainConfig) -> Tuple[LossBreakdown, GroundTruth]:
    p1_hat, p2_hat, f1, f2, c_hat, gt = pair_forward(model, pair, config)
    breakdown = total_loss(
        landmark_probability_loss(p1_hat, gt.p1),
        landmark_probability_loss(p2_hat, gt.p2),
        descriptor_matching_loss(f1, f2, c_hat, gt, config.m_pos, config.m_neg)
    )
    return breakdown, gt


def _mean_record(breakdowns: List[LossBreakdown]) -> Dict[str, float]:
    records = [b.to_log_dict() for b in breakdowns]
    return {key: float(np.mean([r[key] for r in records])) for key in records[0]}


def check_parameters(model: LandmarkMatcher, step: int, last_checkpoint: str):
    """TrainingDivergedError when an update left a non-finite parameter"""
    for name, param in model.named_parameters():
        if not bool(torch.isfinite(param).all()):
            raise TrainingDivergedError(
                ERROR_MESSAGES["training_diverged"].format(component=f"parameter {name}", step=step),
                component=name, last_checkpoint=last_checkpoint
            )


class TrainingLog:
    """JSON-lines log, one record per step plus per-epoch validation records"""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._file = open(path, "w", encoding="utf-8")

    def write(self, record: Dict):
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()

    def close(self):
        self._file.close()


class LandmarkTrainer:
    def __init__(self, config: TrainConfig, model_config: ModelConfig,
                 transform_specs: Dict[str, TransformSpec], mask_config: MaskConfig,
                 checkpoint_dir: str, log_path: str):
        config.validate()
        self.config = config
        self.model_config = model_config
        self.transform_specs = transform_specs
        self.mask_config = mask_config
        self.store = CheckpointStore(checkpoint_dir)
        self.log_path = log_path

        weights = config.family_weights
        if weights is not None:
            total = float(sum(weights))
            weights = [w / total for w in weights]
        self.family_weights = weights

    def split_dataset(self, dataset: Sequence[GrayImage]):
        """Hold out a fixed fraction for validation (none when the set is tiny)"""
        rng = np.random.default_rng(self.config.seed)
        order = rng.permutation(len(dataset))
        n_val = int(math.floor(len(dataset) * self.config.validation_fraction))
        if len(dataset) - n_val < 1:
            n_val = 0
        train_set = [dataset[i] for i in sorted(order[n_val:])]
        val_set = [dataset[i] for i in sorted(order[:n_val])]
        return train_set, val_set

    def validation_pairs(self, val_set: Sequence[GrayImage]) -> List[TrainingPair]:
        rng = np.random.default_rng(self.config.seed + 1)
        return list(synthesize_pairs(val_set, self.transform_specs, self.family_weights, rng,
                                     len(val_set), self.mask_config))

    def validate(self, model: LandmarkMatcher, pairs: List[TrainingPair]) -> Optional[Dict[str, float]]:
        if not pairs:
            return None
        with torch.no_grad():
            breakdowns = [pair_loss(model, pair, self.config)[0] for pair in pairs]
        return _mean_record(breakdowns)

    def train(self, dataset: Sequence[GrayImage]) -> TrainingResult:
        if not dataset:
            raise DataError("Training dataset is empty")

        config = self.config
        torch.manual_seed(config.seed)
        train_set, val_set = self.split_dataset(dataset)
        val_pairs = self.validation_pairs(val_set)

        model = init_params(self.model_config, config.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

        print_section_header("Training")
        print_info(f"{len(train_set)} training / {len(val_set)} validation images, "
                   f"{config.epochs} epochs, batch {config.batch_size}, K={config.K}")

        last_good = self.store.save(model, 0, {"train_config": config.to_dict()})
        result = TrainingResult(checkpoint_path=last_good, log_path=self.log_path)
        if config.epochs == 0:
            return result

        steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
        rng = np.random.default_rng(config.seed)
        stream = prefetch(
            synthesize_pairs(train_set, self.transform_specs, self.family_weights, rng,
                             config.epochs * steps_per_epoch * config.batch_size, self.mask_config),
            config.prefetch_depth
        )

        log = TrainingLog(self.log_path)
        step = 0
        try:
            for epoch in range(1, config.epochs + 1):
                model.train()
                epoch_totals = []
                epoch_updates = 0
                progress = tqdm(range(steps_per_epoch), desc=f"epoch {epoch}/{config.epochs}",
                                leave=False, disable=None)
                for _ in progress:
                    batch = [next(stream) for _ in range(config.batch_size)]
                    optimizer.zero_grad()
                    try:
                        breakdowns = [pair_loss(model, pair, config)[0] for pair in batch]
                    except NumericError as e:
                        raise TrainingDivergedError(
                            ERROR_MESSAGES["training_diverged"].format(component=e.component, step=step + 1),
                            component=e.component, last_checkpoint=last_good
                        ) from e
                    loss = torch.stack([b.total for b in breakdowns]).mean()
                    # no gradient when every pair in the batch has an empty landmark set
                    updated = loss.requires_grad
                    if updated:
                        loss.backward()
                        optimizer.step()
                        check_parameters(model, step + 1, last_good)
                        epoch_updates += 1
                    step += 1

                    record = _mean_record(breakdowns)
                    record.update({"type": "step", "step": step, "epoch": epoch, "updated": updated,
                                   "seed_state_digest": batch[0].seed_state_digest})
                    log.write(record)
                    epoch_totals.append(record["total"])
                    progress.set_postfix(loss=f"{record['total']:.4f}")

                if epoch_updates == 0:
                    raise DataError(ERROR_MESSAGES["no_landmarks"].format(epoch=epoch))
                epoch_mean = float(np.mean(epoch_totals))
                result.epoch_losses.append(epoch_mean)

                model.eval()
                validation = self.validate(model, val_pairs)
                if validation is not None:
                    log.write(dict(validation, type="validation", epoch=epoch, step=step))
                    result.validation_losses.append(validation["total"])

                last_good = self.store.save(model, epoch, {"train_config": config.to_dict(),
                                                           "mean_total_loss": epoch_mean})
                result.checkpoint_path = last_good
                logger.info("epoch %d: mean total loss %.5f", epoch, epoch_mean)
                print_info(f"Epoch {epoch}/{config.epochs}: mean loss {epoch_mean:.4f}"
                           + (f", validation {validation['total']:.4f}" if validation else ""))
        finally:
            log.close()
            stream.close()

        return result


def train(config: TrainConfig, dataset: Sequence[GrayImage], out: str,
          model_config: Optional[ModelConfig] = None,
          transform_specs: Optional[Dict[str, TransformSpec]] = None,
          mask_config: Optional[MaskConfig] = None,
          log_path: Optional[str] = None) -> TrainingResult:
    """Train from scratch; checkpoints go to the directory `out`"""
    transform_specs = transform_specs or {family: TransformSpec(family=family) for family in config.families}
    trainer = LandmarkTrainer(
        config,
        model_config or ModelConfig(),
        transform_specs,
        mask_config or MaskConfig(),
        checkpoint_dir=out,
        log_path=log_path or os.path.join(out, "training_log.jsonl")
    )
    return trainer.train(dataset)
