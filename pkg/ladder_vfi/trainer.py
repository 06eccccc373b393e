# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Two-stage training (flow only, then the whole network), the one-stage control run
and the HD-aware fine-tune.

Proper usage::

    model = LadderModel(small_config())
    data = generate_synthetic_triplets(8, 128, seed=7)
    stage1 = train_stage1(model, data, TrainConfig(), output_dir='runs/small')
    stage2 = train_stage2(model, data, TrainConfig(stage=TrainingStage.FULL), stage1)
    final = finetune_hd(model, data, TrainConfig(stage=TrainingStage.HD_FINETUNE))
"""
import dataclasses
import json
import logging
import math
import pathlib
import random
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
import torch.utils.data
import tqdm
from torch import nn

from ladder_vfi import (
    checkpoint,
    config,
    data_pipeline,
    feature_extractor,
    losses,
    metrics,
    synthesis,
)

_LOGGER: logging.Logger = logging.getLogger(__name__)

METRICS_LOG_NAME: str = 'metrics.jsonl'
CHECKPOINT_NAMES: Dict[config.TrainingStage, str] = {
    config.TrainingStage.FLOW_ONLY: 'stage1.ckpt',
    config.TrainingStage.FULL: 'stage2.ckpt',
    config.TrainingStage.HD_FINETUNE: 'hd_finetune.ckpt',
}
ONE_STAGE_CHECKPOINT_NAME: str = 'one_stage.ckpt'
_SAMPLER_RNG_KEY: str = 'sampler'
_TORCH_RNG_KEY: str = 'torch'

PathLike = Union[str, pathlib.Path]
FlowModeSampler = Callable[[], synthesis.FlowMode]


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """
    Cosine decay from ``lr_start`` at step 0 to exactly ``lr_end`` at the last step.
    """
    if step <= 0 or total_steps <= 1:
        return lr_start
    if step >= total_steps - 1:
        return lr_end
    progress = step / (total_steps - 1)
    return lr_end + (lr_start - lr_end) * 0.5 * (1 + math.cos(math.pi * progress))


def seed_everything(seed: int) -> None:
    """Seeds every generator and asks torch for deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def create_optimizer(parameters: Iterable[nn.Parameter], cfg: config.TrainConfig):
    """AdamW with decoupled weight decay."""
    return torch.optim.AdamW(
        list(parameters),
        lr=cfg.lr_start,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )


def find_dead_parameters(model: nn.Module, grads: Dict[str, torch.Tensor]) -> List[str]:
    """
    Names of the trained parameters whose accumulated gradient magnitude is zero.

    Args:
        model: the trained model.
        grads: accumulated ``|grad|`` per parameter name; only these names are checked.
    """
    dead: List[str] = []
    for name, _ in model.named_parameters():
        if name in grads and not bool(grads[name].ne(0).any()):
            dead.append(name)
    return dead


def auxiliary_loss(
    intermediates: Sequence, img0: torch.Tensor, img1: torch.Tensor, gt: torch.Tensor
) -> torch.Tensor:
    """
    Mean Charbonnier penalty of the compositions at every intermediate warp state,
    against area-downsampled frames.
    """
    total = gt.new_zeros(())
    for state in intermediates:
        size = state.spatial_size
        low0, low1, low_gt = (
            F.interpolate(frame, size=size, mode='area') for frame in (img0, img1, gt)
        )
        prediction = synthesis.compose(low0, low1, state, clamp=False)
        total = total + losses.charbonnier_loss(prediction, low_gt)
    return total / max(len(intermediates), 1)


@dataclasses.dataclass
class _StageRun:  # pylint: disable=too-many-instance-attributes
    stage: config.TrainingStage
    label: str
    parameters: Dict[str, nn.Parameter]
    use_residual: bool
    sampler: Optional[FlowModeSampler] = None
    sampler_rng: Optional[np.random.Generator] = None
    checkpoint_name: str = ''


def _padded_frames(
    batch: torch.Tensor, flow_mode: synthesis.FlowMode
) -> Tuple[Tuple[torch.Tensor, ...], feature_extractor.CropRecord]:
    """
    Replication-pads the three frames of ``batch`` to the input multiple of ``flow_mode``.

    Returns:
        ``(img0, gt, img1)`` padded and the record to crop the prediction back with.
    """
    multiple = synthesis.FlowMode(flow_mode).input_multiple
    padded, record = feature_extractor.pad_to_multiple(batch.flatten(0, 1), multiple)
    padded = padded.unflatten(0, batch.shape[:2])
    return (padded[:, 0], padded[:, 1], padded[:, 2]), record


def _batches_for_epoch(size: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    generator = torch.Generator().manual_seed(data_pipeline.sample_seed(seed, epoch))
    order = torch.randperm(size, generator=generator).tolist()
    return [order[start : start + batch_size] for start in range(0, size, batch_size)]


def _total_steps(cfg: config.TrainConfig, batches_per_epoch: int) -> int:
    if cfg.steps > 0:
        return cfg.steps
    return cfg.epochs * batches_per_epoch


def _rng_state(run: _StageRun) -> Dict[str, object]:
    state: Dict[str, object] = {_TORCH_RNG_KEY: torch.get_rng_state()}
    if run.sampler_rng is not None:
        state[_SAMPLER_RNG_KEY] = run.sampler_rng.bit_generator.state
    return state


def _restore_rng(run: _StageRun, rng_state: Dict[str, object]) -> None:
    if _TORCH_RNG_KEY in rng_state:
        torch.set_rng_state(rng_state[_TORCH_RNG_KEY])
    if run.sampler_rng is not None and _SAMPLER_RNG_KEY in rng_state:
        run.sampler_rng.bit_generator.state = rng_state[_SAMPLER_RNG_KEY]


def _write_record(log: Optional[TextIO], record: Dict[str, object]) -> None:
    if log is not None:
        log.write(json.dumps(record, sort_keys=True) + '\n')
        log.flush()


def _run_stage(  # pylint: disable=too-many-arguments,too-many-locals,too-many-statements
    model: nn.Module,
    data: Sequence[data_pipeline.Triplet],
    cfg: config.TrainConfig,
    run: _StageRun,
    *,
    loss_weights: config.LossWeights,
    output_dir: Optional[PathLike],
    policy: Optional[data_pipeline.AugmentationPolicy],
    resume: Optional[checkpoint.Checkpoint],
) -> checkpoint.Checkpoint:
    policy = policy if policy is not None else data_pipeline.AugmentationPolicy.training(
        cfg.crop_size
    )
    dataset = data_pipeline.TripletDataset(data, policy, seed=cfg.seed)
    batches_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = _total_steps(cfg, batches_per_epoch)
    trained = list(run.parameters.values())
    for param in model.parameters():
        param.requires_grad_(False)
    for param in trained:
        param.requires_grad_(True)
    optimizer = create_optimizer(trained, cfg)
    step = 0
    if resume is not None:
        checkpoint.apply_checkpoint(model, resume, optimizer)
        _restore_rng(run, resume.rng_state)
        step = resume.step
        _LOGGER.info('Resuming <%s> at step <%s>.', run.label, step)
    output_dir = pathlib.Path(output_dir) if output_dir is not None else None
    log: Optional[TextIO] = None
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        log = (output_dir / METRICS_LOG_NAME).open('a', encoding='utf-8')
    _LOGGER.info(
        'Training <%s>: <%s> parameters, <%s> steps, batch <%s>.',
        run.label,
        sum(param.numel() for param in trained),
        total_steps,
        cfg.batch_size,
    )
    names = {id(param): name for name, param in run.parameters.items()}
    grad_sums: Dict[str, torch.Tensor] = {}
    audited = False
    model.train()
    epoch = step // batches_per_epoch

    def snapshot() -> checkpoint.Checkpoint:
        return checkpoint.capture_checkpoint(
            model,
            stage=run.stage,
            epoch=epoch,
            step=step,
            optimizer=optimizer,
            train_config=cfg,
            rng_state=_rng_state(run),
        )

    progress = tqdm.tqdm(total=total_steps, initial=step, desc=run.label, disable=None)
    try:
        while step < total_steps:
            auditing = not audited and step % batches_per_epoch == 0
            epoch_start = step
            grad_sums.clear()
            dataset.set_epoch(epoch)
            batches = _batches_for_epoch(len(dataset), cfg.batch_size, cfg.seed, epoch)
            loader = torch.utils.data.DataLoader(
                dataset,
                batch_sampler=batches[step % batches_per_epoch :],
                num_workers=cfg.num_workers,
            )
            for batch in loader:
                if step >= total_steps:
                    break
                lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end)
                for group in optimizer.param_groups:
                    group['lr'] = lr
                flow_mode = run.sampler() if run.sampler else synthesis.FlowMode.ORIGINAL_FLOW
                frames, crop_record = _padded_frames(batch, flow_mode)
                img0, gt, img1 = frames
                output = model(img0, img1, flow_mode=flow_mode, use_residual=run.use_residual)
                prediction = feature_extractor.crop(output.prediction, crop_record)
                report = losses.total_loss(prediction, batch[:, 1], loss_weights)
                loss = report.total
                if cfg.aux_supervision:
                    loss = loss + cfg.aux_weight * auxiliary_loss(
                        output.intermediates, img0, img1, gt
                    )
                if not bool(torch.isfinite(loss)):
                    _LOGGER.critical(
                        'Non-finite loss at step <%s> of <%s>: %s',
                        step,
                        run.label,
                        report.as_dict(),
                    )
                    raise RuntimeError(
                        f'Loss became non-finite at step {step} of {run.label}. '
                        f'Terms: {report.as_dict()}'
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if auditing:
                    for param in trained:
                        if param.grad is not None:
                            name = names[id(param)]
                            magnitude = param.grad.detach().abs()
                            grad_sums[name] = grad_sums.get(name, 0) + magnitude
                torch.nn.utils.clip_grad_norm_(trained, cfg.grad_clip_norm)
                optimizer.step()
                record = {
                    'stage': run.label,
                    'step': step,
                    'epoch': epoch,
                    'lr': lr,
                    'flow_mode': synthesis.FlowMode(flow_mode).value,
                    **report.as_dict(),
                }
                record['total'] = float(loss.detach())
                _write_record(log, record)
                _LOGGER.debug('Step record: %s', record)
                step += 1
                progress.update(1)
            if auditing and step - epoch_start == batches_per_epoch:
                audited = True
                for name in run.parameters:
                    grad_sums.setdefault(name, torch.zeros(()))
                for name in find_dead_parameters(model, grad_sums):
                    _LOGGER.warning(
                        'Parameter <%s> got no gradient during epoch <%s>.', name, epoch
                    )
            epoch += 1
            if output_dir is not None:
                checkpoint.save_checkpoint(snapshot(), output_dir / run.checkpoint_name)
    finally:
        progress.close()
        if log is not None:
            log.close()
    if not audited:
        _LOGGER.debug('No full epoch in <%s>, dead-parameter check skipped.', run.label)
    for param in model.parameters():
        param.requires_grad_(True)
    result = snapshot()
    if output_dir is not None:
        checkpoint.save_checkpoint(result, output_dir / run.checkpoint_name)
    _LOGGER.info('Finished <%s> after <%s> steps.', run.label, step)
    return result


def _resolve_checkpoint(
    value: Optional[Union[checkpoint.Checkpoint, PathLike]], model: nn.Module
) -> Optional[checkpoint.Checkpoint]:
    if value is None or isinstance(value, checkpoint.Checkpoint):
        return value
    return checkpoint.load_checkpoint(value, expected_config=model.config)


def train_stage1(
    model: nn.Module,
    data: Sequence[data_pipeline.Triplet],
    cfg: config.TrainConfig,
    *,
    resume: Optional[Union[checkpoint.Checkpoint, PathLike]] = None,
    loss_weights: config.LossWeights = config.LossWeights(),
    output_dir: Optional[PathLike] = None,
    policy: Optional[data_pipeline.AugmentationPolicy] = None,
) -> checkpoint.Checkpoint:
    """
    Trains the feature extractor and flow estimator with the residual forced to zero.

    Args:
        model: :py:class:`ladder_vfi.model.LadderModel`, fresh or partially trained.
        data: training triplets.
        cfg: optimizer, schedule and data settings.
        resume: (optional) stage-1 checkpoint to continue from.
        loss_weights: loss term weights.
        output_dir: (optional) directory for the checkpoint and ``metrics.jsonl``.
        policy: (optional) augmentation, default flips, scale, rotation and crops.

    Returns:
        The stage-1 :py:class:`ladder_vfi.checkpoint.Checkpoint`.

    Raises:
        RuntimeError: if the loss becomes non-finite.
    """
    resume = _resolve_checkpoint(resume, model)
    if resume is not None and resume.stage != config.TrainingStage.FLOW_ONLY:
        raise ValueError(
            f'Stage 1 can only resume from a stage-1 checkpoint. Got: <{resume.stage.value}>.'
        )
    seed_everything(cfg.seed)
    run = _StageRun(
        stage=config.TrainingStage.FLOW_ONLY,
        label=config.TrainingStage.FLOW_ONLY.value,
        parameters=_named(model, model.flow_parameters()),
        use_residual=False,
        checkpoint_name=CHECKPOINT_NAMES[config.TrainingStage.FLOW_ONLY],
    )
    return _run_stage(
        model,
        data,
        cfg,
        run,
        loss_weights=loss_weights,
        output_dir=output_dir,
        policy=policy,
        resume=resume,
    )


def train_stage2(
    model: nn.Module,
    data: Sequence[data_pipeline.Triplet],
    cfg: config.TrainConfig,
    stage1_ckpt: Optional[Union[checkpoint.Checkpoint, PathLike]],
    *,
    loss_weights: config.LossWeights = config.LossWeights(),
    output_dir: Optional[PathLike] = None,
    policy: Optional[data_pipeline.AugmentationPolicy] = None,
) -> checkpoint.Checkpoint:
    """
    Continues from a stage-1 checkpoint with every parameter trainable and the
    refinement residual added. The optimizer restarts.

    Raises:
        ValueError: if ``stage1_ckpt`` is missing or from another stage.
        FileNotFoundError: if ``stage1_ckpt`` names a missing file.
    """
    if stage1_ckpt is None:
        raise ValueError('Stage 2 needs a stage-1 checkpoint.')
    stage1 = _resolve_checkpoint(stage1_ckpt, model)
    if stage1.stage != config.TrainingStage.FLOW_ONLY:
        raise ValueError(f'Expected a stage-1 checkpoint. Got stage: <{stage1.stage.value}>.')
    checkpoint.apply_checkpoint(model, stage1)
    seed_everything(cfg.seed)
    run = _StageRun(
        stage=config.TrainingStage.FULL,
        label=config.TrainingStage.FULL.value,
        parameters=dict(model.named_parameters()),
        use_residual=True,
        checkpoint_name=CHECKPOINT_NAMES[config.TrainingStage.FULL],
    )
    return _run_stage(
        model,
        data,
        cfg,
        run,
        loss_weights=loss_weights,
        output_dir=output_dir,
        policy=policy,
        resume=None,
    )


def train_one_stage(
    model: nn.Module,
    data: Sequence[data_pipeline.Triplet],
    cfg: config.TrainConfig,
    *,
    loss_weights: config.LossWeights = config.LossWeights(),
    output_dir: Optional[PathLike] = None,
    policy: Optional[data_pipeline.AugmentationPolicy] = None,
) -> checkpoint.Checkpoint:
    """Control run: every parameter and the residual from the first step."""
    seed_everything(cfg.seed)
    run = _StageRun(
        stage=config.TrainingStage.FULL,
        label='one_stage',
        parameters=dict(model.named_parameters()),
        use_residual=True,
        checkpoint_name=ONE_STAGE_CHECKPOINT_NAME,
    )
    return _run_stage(
        model,
        data,
        cfg,
        run,
        loss_weights=loss_weights,
        output_dir=output_dir,
        policy=policy,
        resume=None,
    )


def finetune_hd(
    model: nn.Module,
    data: Sequence[data_pipeline.Triplet],
    cfg: config.TrainConfig,
    stage2_ckpt: Optional[Union[checkpoint.Checkpoint, PathLike]] = None,
    *,
    loss_weights: config.LossWeights = config.LossWeights(),
    output_dir: Optional[PathLike] = None,
    policy: Optional[data_pipeline.AugmentationPolicy] = None,
) -> checkpoint.Checkpoint:
    """
    HD-aware fine-tune: each batch estimates the warp state at full or at half
    resolution, the latter with probability ``cfg.hd_aug_probability``.

    Args:
        stage2_ckpt: (optional) stage-2 or HD fine-tune checkpoint to start from;
            ``model`` is used as is when absent.

    Raises:
        ValueError: if ``stage2_ckpt`` is a stage-1 checkpoint.
    """
    start = _resolve_checkpoint(stage2_ckpt, model)
    if start is not None and start.stage == config.TrainingStage.FLOW_ONLY:
        raise ValueError(
            f'Expected a stage-2 or HD fine-tune checkpoint. Got stage: <{start.stage.value}>.'
        )
    if start is not None:
        checkpoint.apply_checkpoint(model, start)
    seed_everything(cfg.seed)
    sampler_rng = np.random.default_rng(cfg.seed)
    run = _StageRun(
        stage=config.TrainingStage.HD_FINETUNE,
        label=config.TrainingStage.HD_FINETUNE.value,
        parameters=dict(model.named_parameters()),
        use_residual=True,
        sampler=lambda: data_pipeline.hd_flow_path_sampler(cfg.hd_aug_probability, sampler_rng),
        sampler_rng=sampler_rng,
        checkpoint_name=CHECKPOINT_NAMES[config.TrainingStage.HD_FINETUNE],
    )
    return _run_stage(
        model,
        data,
        cfg,
        run,
        loss_weights=loss_weights,
        output_dir=output_dir,
        policy=policy,
        resume=None,
    )


def _named(model: nn.Module, parameters: Iterable[nn.Parameter]) -> Dict[str, nn.Parameter]:
    wanted = {id(param) for param in parameters}
    return {name: param for name, param in model.named_parameters() if id(param) in wanted}


# ----------------------------------------------------------------------------- evaluation


@dataclasses.dataclass(frozen=True)
class EvaluationRow:
    """One evaluated triplet; ``psnr``/``ssim`` are ``None`` when it failed."""

    source_id: str
    mode: str
    psnr: Optional[float]
    ssim: Optional[float]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        """Whether the triplet could not be evaluated."""
        return self.error is not None

    def to_record(self) -> Dict[str, object]:
        """Named fields for a results file."""
        return dataclasses.asdict(self)


def evaluate_triplets(
    model: nn.Module,
    triplets: Iterable[Union[data_pipeline.Triplet, PathLike]],
    mode: synthesis.FlowMode = synthesis.FlowMode.ORIGINAL_FLOW,
) -> List[EvaluationRow]:
    """
    PSNR and SSIM of the interpolated middle frame, one row per triplet plus a final
    ``mean`` row over the successful ones.

    Triplets may be given as folders (``im1.png``, ``im2.png``, ``im3.png``); a folder
    that cannot be read becomes a failed row.

    Raises:
        ValueError: if ``triplets`` is empty.
        RuntimeError: if every triplet failed.
    """
    mode = synthesis.FlowMode(mode)
    rows: List[EvaluationRow] = []
    for item in triplets:
        source_id = item.source_id if isinstance(item, data_pipeline.Triplet) else str(item)
        try:
            triplet = (
                item
                if isinstance(item, data_pipeline.Triplet)
                else data_pipeline.load_triplet(item)
            )
            result = synthesis.interpolate(
                triplet.first.unsqueeze(0), triplet.last.unsqueeze(0), model, mode
            )
            frame = result.frame[0]
            rows.append(
                EvaluationRow(
                    source_id=source_id,
                    mode=mode.value,
                    psnr=metrics.psnr(frame, triplet.middle),
                    ssim=metrics.ssim(frame, triplet.middle),
                )
            )
        except (ValueError, FileNotFoundError) as err:
            _LOGGER.warning('Could not evaluate <%s>. Error: %s', source_id, err)
            rows.append(
                EvaluationRow(
                    source_id=source_id, mode=mode.value, psnr=None, ssim=None, error=str(err)
                )
            )
    if not rows:
        raise ValueError('Nothing to evaluate: the triplet set is empty.')
    succeeded = [row for row in rows if not row.failed]
    if not succeeded:
        raise RuntimeError(f'All <{len(rows)}> triplets failed to evaluate.')
    mean = EvaluationRow(
        source_id='mean',
        mode=mode.value,
        psnr=float(np.mean([row.psnr for row in succeeded])),
        ssim=float(np.mean([row.ssim for row in succeeded])),
    )
    _LOGGER.info(
        'Evaluated <%s> triplets in mode <%s>: PSNR <%.3f> dB, SSIM <%.5f>.',
        len(succeeded),
        mode.value,
        mean.psnr,
        mean.ssim,
    )
    return rows + [mean]
