# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
``ladder-vfi`` command line: ``train``, ``interpolate``, ``evaluate``, ``cost`` and
``make-synthetic``.

Exit codes: 0 success, 1 user error (bad paths, configs or inputs), 2 internal error.
Set ``LADDER_LOG_LEVEL`` to ``debug``, ``info`` or ``warn``.
"""
import argparse
import dataclasses
import json
import logging
import os
import pathlib
import sys
import tempfile
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import stringcase
import torch

from ladder_vfi import (
    checkpoint,
    config,
    cost_model,
    data_pipeline,
    metrics,
    model,
    synthesis,
    trainer,
)


_LOGGER: logging.Logger = logging.getLogger(__name__)

LOG_LEVEL_ENV_VAR: str = 'LADDER_LOG_LEVEL'
LOG_FORMAT: str = '%(asctime)s %(levelname)s %(name)s %(message)s'
_LOG_LEVELS: Dict[str, int] = {
    'debug': logging.DEBUG,
    'info': logging.INFO,
    'warn': logging.WARNING,
    'warning': logging.WARNING,
}
EXIT_OK: int = 0
EXIT_USER_ERROR: int = 1
EXIT_INTERNAL_ERROR: int = 2
_COMMAND_PREFIX: str = 'cmd_'
_STAGES: Dict[str, config.TrainingStage] = {
    '1': config.TrainingStage.FLOW_ONLY,
    '2': config.TrainingStage.FULL,
    'hd': config.TrainingStage.HD_FINETUNE,
}
_ONE_STAGE: str = 'one'
_EVALUATION_MODES: Dict[str, Tuple[synthesis.FlowMode, ...]] = {
    'original': (synthesis.FlowMode.ORIGINAL_FLOW,),
    'downscaled': (synthesis.FlowMode.DOWNSCALED_FLOW,),
    'both': (synthesis.FlowMode.ORIGINAL_FLOW, synthesis.FlowMode.DOWNSCALED_FLOW),
}
_ABLATIONS: Dict[str, Callable[..., List[cost_model.CostReport]]] = {
    'decoder': cost_model.decoder_ablation,
    'refinement': cost_model.refinement_ablation,
}


class UsageError(ValueError):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f'{self.prog}: {message}')


def configure_logging(environ: Optional[Dict[str, str]] = None) -> int:
    """
    Sets up the root logger from ``LADDER_LOG_LEVEL``.

    Returns:
        The chosen level.
    """
    environ = os.environ if environ is None else environ
    raw = environ.get(LOG_LEVEL_ENV_VAR, 'info').strip().lower()
    level = _LOG_LEVELS.get(raw, logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    if raw not in _LOG_LEVELS:
        _LOGGER.warning(
            'Unknown %s <%s>, using <info>. Expected one of %s.',
            LOG_LEVEL_ENV_VAR,
            raw,
            sorted(_LOG_LEVELS),
        )
    return level


def write_lines_atomically(path: pathlib.Path, lines: Iterable[str]) -> pathlib.Path:
    """Writes UTF-8 ``lines`` to ``path`` through a temporary file and a rename."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        'w', encoding='utf-8', dir=path.parent, prefix=f'.{path.name}.', delete=False
    ) as tmp:
        for line in lines:
            tmp.write(line + '\n')
        tmp_path = pathlib.Path(tmp.name)
    try:
        os.replace(tmp_path, path)
    except OSError:
        tmp_path.unlink(missing_ok=True)
        raise
    return path


def parse_resolution(value: str) -> Tuple[int, int]:
    """``'448x256'`` to ``(height, width)``."""
    try:
        width, height = (int(part) for part in value.lower().split('x'))
    except ValueError as err:
        raise UsageError(f'Resolution must look like <WIDTHxHEIGHT>. Got: <{value}>.') from err
    return height, width


def _load_model(checkpoint_path: str) -> model.LadderModel:
    ckpt = checkpoint.load_checkpoint(checkpoint_path)
    result = model.LadderModel(ckpt.model_config)
    checkpoint.apply_checkpoint(result, ckpt)
    return result


# ----------------------------------------------------------------------------- commands


def cmd_train(args: argparse.Namespace) -> int:
    """Runs one training stage on a Vimeo-style dataset."""
    bundle = config.load_config_file(args.config)
    data = data_pipeline.VimeoTripletSequence(args.data)
    if not len(data):
        raise ValueError(f'No triplets listed under <{args.data}>.')
    output = pathlib.Path(args.output)
    train_cfg = dataclasses.replace(
        bundle.train,
        seed=args.seed if args.seed is not None else bundle.train.seed,
        stage=_STAGES.get(args.stage, config.TrainingStage.FULL),
    )
    if args.steps is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    torch.manual_seed(train_cfg.seed)
    network = model.LadderModel(bundle.model)
    common = dict(loss_weights=bundle.loss, output_dir=output)
    if args.stage == '1':
        result = trainer.train_stage1(network, data, train_cfg, resume=args.resume, **common)
    elif args.stage == '2':
        stage1 = args.from_checkpoint or output / trainer.CHECKPOINT_NAMES[_STAGES['1']]
        result = trainer.train_stage2(network, data, train_cfg, str(stage1), **common)
    elif args.stage == 'hd':
        stage2 = args.from_checkpoint or output / trainer.CHECKPOINT_NAMES[_STAGES['2']]
        if not pathlib.Path(stage2).is_file():
            raise FileNotFoundError(f'HD fine-tune needs a stage-2 checkpoint <{stage2}>.')
        result = trainer.finetune_hd(network, data, train_cfg, str(stage2), **common)
    else:
        result = trainer.train_one_stage(network, data, train_cfg, **common)
    print(f'Finished stage <{args.stage}> after {result.step} steps; outputs in {output}')
    return EXIT_OK


def cmd_interpolate(args: argparse.Namespace) -> int:
    """Interpolates the middle frame of two images."""
    first = data_pipeline.read_image(args.first)
    last = data_pipeline.read_image(args.last)
    if first.shape != last.shape:
        raise ValueError(
            f'Input sizes differ: <{tuple(first.shape[-2:])}> and <{tuple(last.shape[-2:])}>.'
        )
    middle = data_pipeline.read_image(args.gt) if args.gt else None
    if middle is not None and middle.shape != first.shape:
        raise ValueError(f'Ground truth size <{tuple(middle.shape[-2:])}> differs from inputs.')
    mode = synthesis.FlowMode.DOWNSCALED_FLOW if args.hd else synthesis.FlowMode.ORIGINAL_FLOW
    network = _load_model(args.checkpoint)
    result = synthesis.interpolate(first.unsqueeze(0), last.unsqueeze(0), network, mode)
    data_pipeline.write_image(result.frame[0], args.output)
    _LOGGER.info('Wrote <%s> in mode <%s>.', args.output, mode.value)
    if middle is not None:
        psnr = metrics.psnr(result.frame[0], middle)
        ssim = metrics.ssim(result.frame[0], middle)
        _LOGGER.info('PSNR <%.3f> dB, SSIM <%.5f> against <%s>.', psnr, ssim, args.gt)
        print(f'PSNR {psnr:.3f} dB  SSIM {ssim:.5f}')
    return EXIT_OK


def _format_rows(rows: Sequence[trainer.EvaluationRow]) -> str:
    lines = [f'{"triplet":<40} {"mode":<16} {"PSNR":>8} {"SSIM":>8}']
    for row in rows:
        if row.failed:
            lines.append(f'{row.source_id:<40} {row.mode:<16} {"failed":>8} {"-":>8}')
        else:
            lines.append(f'{row.source_id:<40} {row.mode:<16} {row.psnr:>8.3f} {row.ssim:>8.5f}')
    return '\n'.join(lines)


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Per-triplet and mean PSNR/SSIM over a folder of triplets."""
    folders = data_pipeline.discover_triplet_folders(args.data)
    if not folders:
        raise ValueError(f'No triplets (im1.png, im2.png, im3.png) found under <{args.data}>.')
    network = _load_model(args.checkpoint)
    records: List[str] = []
    for mode in _EVALUATION_MODES[args.mode]:
        rows = trainer.evaluate_triplets(network, folders, mode)
        print(_format_rows(rows))
        records.extend(json.dumps(row.to_record(), sort_keys=True) for row in rows)
    write_lines_atomically(pathlib.Path(args.output), records)
    _LOGGER.info('Wrote <%s> result rows to <%s>.', len(records), args.output)
    return EXIT_OK


def cmd_cost(args: argparse.Namespace) -> int:
    """Analytic parameter and FLOP counts."""
    bundle = config.load_config_file(args.config)
    height, width = parse_resolution(args.res)
    if args.ablation:
        reports = _ABLATIONS[args.ablation](bundle.model, height, width)
    else:
        reports = [
            cost_model.count_flops(
                bundle.model, height, width, label=pathlib.Path(args.config).stem
            )
        ]
    print(cost_model.format_cost_table(reports))
    if args.output:
        write_lines_atomically(pathlib.Path(args.output), (report.to_json() for report in reports))
        _LOGGER.info('Wrote cost records to <%s>.', args.output)
    return EXIT_OK


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    """Writes a synthetic triplet dataset in the Vimeo90K layout."""
    spec = data_pipeline.MotionSpec(
        kind=data_pipeline.MotionKind(args.motion), objects=args.objects
    )
    triplets = data_pipeline.generate_synthetic_triplets(args.count, args.size, spec, args.seed)
    list_file = data_pipeline.write_triplets(triplets, args.output)
    print(f'Wrote {len(triplets)} triplets, list file {list_file}')
    return EXIT_OK


# ----------------------------------------------------------------------------- parser


def _command_name(function: Callable) -> str:
    return stringcase.spinalcase(function.__name__[len(_COMMAND_PREFIX) :])


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-command per ``cmd_*`` function."""
    parser = _Parser(prog='ladder-vfi', description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    train = commands.add_parser(_command_name(cmd_train), help=cmd_train.__doc__)
    train.add_argument('--config', required=True, help='Config file.')
    train.add_argument('--data', required=True, help='Dataset root with tri_trainlist.txt.')
    train.add_argument('--stage', choices=[*_STAGES, _ONE_STAGE], default='1')
    train.add_argument('--output', default='runs', help='Checkpoint and metrics directory.')
    train.add_argument('--from-checkpoint', help='Stage-1 (for 2) or stage-2 (for hd) checkpoint.')
    train.add_argument('--resume', help='Stage-1 checkpoint to resume stage 1 from.')
    train.add_argument('--steps', type=int, help='Override the steps per stage.')
    train.add_argument('--seed', type=int, help='Override the training seed.')
    train.set_defaults(handler=cmd_train)

    interpolate = commands.add_parser(_command_name(cmd_interpolate), help=cmd_interpolate.__doc__)
    interpolate.add_argument('--checkpoint', required=True)
    interpolate.add_argument('--first', required=True, help='First frame image.')
    interpolate.add_argument('--last', required=True, help='Last frame image.')
    interpolate.add_argument('--output', required=True, help='Output PNG.')
    interpolate.add_argument('--hd', action='store_true', help='Estimate flows at half size.')
    interpolate.add_argument('--gt', help='Ground-truth middle frame for PSNR/SSIM.')
    interpolate.set_defaults(handler=cmd_interpolate)

    evaluate = commands.add_parser(_command_name(cmd_evaluate), help=cmd_evaluate.__doc__)
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--data', required=True, help='Folder of triplet folders.')
    evaluate.add_argument('--mode', choices=list(_EVALUATION_MODES), default='original')
    evaluate.add_argument('--output', default='results.jsonl', help='JSON lines results file.')
    evaluate.set_defaults(handler=cmd_evaluate)

    cost = commands.add_parser(_command_name(cmd_cost), help=cmd_cost.__doc__)
    cost.add_argument('--config', required=True)
    cost.add_argument('--res', default='448x256', help='WIDTHxHEIGHT, multiples of 32.')
    cost.add_argument('--ablation', choices=list(_ABLATIONS), help='Sweep instead of one row.')
    cost.add_argument('--output', help='JSON lines cost records.')
    cost.set_defaults(handler=cmd_cost)

    synthetic = commands.add_parser(
        _command_name(cmd_make_synthetic), help=cmd_make_synthetic.__doc__
    )
    synthetic.add_argument('--output', required=True, help='Dataset root to create.')
    synthetic.add_argument('--count', type=int, default=8)
    synthetic.add_argument('--size', type=int, default=128)
    synthetic.add_argument(
        '--motion', choices=[kind.value for kind in data_pipeline.MotionKind], default='mixed'
    )
    synthetic.add_argument('--objects', type=int, default=3)
    synthetic.add_argument('--seed', type=int, default=0)
    synthetic.set_defaults(handler=cmd_make_synthetic)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point.

    Returns:
        0 on success, 1 on user errors, 2 on internal errors.
    """
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except (ValueError, FileNotFoundError) as err:
        _LOGGER.error('%s', err)
        print(f'error: {err}', file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception as err:  # pylint: disable=broad-except
        _LOGGER.critical('Internal error: %s', err, exc_info=True)
        print(f'internal error: {err}', file=sys.stderr)
        return EXIT_INTERNAL_ERROR


if __name__ == '__main__':
    sys.exit(main())
