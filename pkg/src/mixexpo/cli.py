"""Command line interface: ``mixexpo <command> [options]``."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch
from tqdm import tqdm

from mixexpo.config import SanityConfig, TrainConfig, parse_overrides, write_config_file
from mixexpo.data import (
    image_files,
    load_image_dir,
    load_paired_dir,
    load_png,
    save_png,
    write_synthetic_dataset,
)
from mixexpo.exceptions import MixExpoError
from mixexpo.metrics import brightness_mapping_curve, evaluate_pairs
from mixexpo.model import ExposureCorrectionNet, format_parameter_summary
from mixexpo.perceptual import VGG16_SHA256_PREFIX, VGG16_URL, PerceptualExtractor, fetch_weights
from mixexpo.training import build_extractor, load_checkpoint, overfit_sanity, train
from mixexpo.version import VERSION
from mixexpo.visualize import (
    feature_error_map,
    plot_brightness_curves,
    save_feature_error_figure,
    visualize_masks,
)

__all__ = ['build_parser', 'main']

logger = logging.getLogger(__name__)


def _load_config(args: argparse.Namespace, model: type[TrainConfig] = TrainConfig) -> TrainConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides['seed'] = str(args.seed)
    return model.from_file(args.config, overrides)


def _require_dir(parser: argparse.ArgumentParser, path: Path, what: str) -> None:
    if not path.is_dir():
        parser.error(f'{what} {path} is not a directory')


def cmd_synth(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    """Writes a synthetic mixed-exposure dataset."""
    config = _load_config(args)
    if args.clean_dir is not None:
        _require_dir(parser, args.clean_dir, 'clean directory')
    dataset = write_synthetic_dataset(
        args.out_dir,
        count=args.count,
        size=args.size,
        seed=config.seed,
        mode=args.mode,
        layout=args.layout,
        noise_std=args.noise_std,
        clean_dir=args.clean_dir,
    )
    print(f'wrote {len(dataset)} pairs to {args.out_dir}')
    return 0


def cmd_train(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    """Trains a network and prints the best validation PSNR."""
    config = _load_config(args)
    if args.resume is not None and not args.resume.is_file():
        parser.error(f'checkpoint {args.resume} does not exist')
    for field in ('train_input_dir', 'train_gt_dir', 'val_input_dir', 'val_gt_dir'):
        value = getattr(config, field)
        if value is not None:
            _require_dir(parser, value, field)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    write_config_file(config, Path(config.output_dir) / 'config.txt')
    report = train(config, resume=args.resume, progress=not args.quiet)
    print(f'steps: {report.steps}')
    print(f'best_psnr: {report.best_psnr:.4f} (step {report.best_step})')
    return 0


@torch.no_grad()
def cmd_infer(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    """Corrects one image or every image of a directory."""
    config = _load_config(args)
    if not args.checkpoint.is_file():
        parser.error(f'checkpoint {args.checkpoint} does not exist')
    if not args.input.exists():
        parser.error(f'input {args.input} does not exist')
    if args.gt_dir is not None:
        _require_dir(parser, args.gt_dir, 'ground-truth directory')

    model = load_checkpoint(args.checkpoint).build_model().to(config.device).eval()
    if args.input.is_dir():
        images = load_image_dir(args.input)
        args.output.mkdir(parents=True, exist_ok=True)
        targets = [args.output / Path(name).with_suffix('.png').name for name, _ in images]
    else:
        images = [(args.input.name, load_png(args.input))]
        targets = [args.output]

    gts = image_files(args.gt_dir) if args.gt_dir is not None else {}
    extractor: Optional[PerceptualExtractor] = None
    if gts and config.perceptual_weights is not None:
        extractor = PerceptualExtractor.from_vgg16(
            config.perceptual_weights, config.perceptual_layer, config.perceptual_sha256
        )

    for (name, image), target in tqdm(
        list(zip(images, targets)), desc='infer', unit='img', disable=args.quiet
    ):
        corrected = model(image.unsqueeze(0).to(config.device)).image[0].cpu()
        save_png(corrected, target)
        gt_path = gts.get(name)
        if args.masks:
            gt = load_png(gt_path) if gt_path is not None else None
            visualize_masks(
                model, image, gt, target.with_name(f'{target.stem}_masks.png'), config.mask_polarity
            )
        if extractor is not None and gt_path is not None:
            gt = load_png(gt_path).unsqueeze(0)
            save_feature_error_figure(
                {
                    'input': feature_error_map(extractor, image.unsqueeze(0), gt)[0],
                    'output': feature_error_map(extractor, corrected.unsqueeze(0), gt)[0],
                },
                target.with_name(f'{target.stem}_feature_error.png'),
                title=name,
            )
    print(f'wrote {len(images)} images')
    return 0


def cmd_eval(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    """Scores predictions against ground truth and writes report and curve."""
    _load_config(args)
    _require_dir(parser, args.pred_dir, 'prediction directory')
    _require_dir(parser, args.gt_dir, 'ground-truth directory')
    if args.input_dir is not None:
        _require_dir(parser, args.input_dir, 'input directory')

    pairs = load_paired_dir(args.pred_dir, args.gt_dir)
    inputs = load_paired_dir(args.input_dir, args.gt_dir) if args.input_dir else None
    sources = {s.id: s.input for s in inputs} if inputs is not None else {}

    def loader(sample_id: str, prediction: torch.Tensor, gt: torch.Tensor):
        return lambda: (prediction, gt, sources.get(sample_id))

    report = evaluate_pairs(
        ((s.id, loader(s.id, s.input, s.gt)) for s in pairs), workers=args.workers
    )
    args.out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out_dir / 'report.csv')
    (args.out_dir / 'summary.txt').write_text(report.summary() + '\n', encoding='utf-8')

    curves = {'prediction': brightness_mapping_curve([(s.input, s.gt) for s in pairs])}
    curves['prediction'].write_csv(args.out_dir / 'curve.csv')
    if inputs is not None:
        curves['input'] = brightness_mapping_curve([(s.input, s.gt) for s in inputs])
        curves['input'].write_csv(args.out_dir / 'curve_input.csv')
    plot_brightness_curves(curves, args.out_dir / 'curve.png')
    print(report.summary())
    return 0


def cmd_sanity(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    """Runs the overfit harness; exit 0 only when it passes."""
    config = _load_config(args, SanityConfig)
    assert isinstance(config, SanityConfig)
    extractor = build_extractor(config) if config.perceptual_weights is not None else None
    report = overfit_sanity(config, extractor=extractor, progress=not args.quiet)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    report.write_trace(output_dir / 'trace.csv')
    (output_dir / 'summary.txt').write_text(report.summary() + '\n', encoding='utf-8')
    print(report.summary())
    return 0 if report.passed else 1


def cmd_summary(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    """Prints the parameter table of the configured (or checkpointed) model."""
    config = _load_config(args)
    if args.checkpoint is not None:
        if not args.checkpoint.is_file():
            parser.error(f'checkpoint {args.checkpoint} does not exist')
        model = load_checkpoint(args.checkpoint).build_model()
    else:
        model = ExposureCorrectionNet(config.model)
    print(format_parameter_summary(model))
    return 0


def cmd_fetch_weights(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    """Downloads the VGG16 weights used by the contrastive term."""
    _load_config(args)
    sha256 = None if args.no_verify else args.sha256
    digest = asyncio.run(fetch_weights(args.dest, url=args.url, sha256=sha256))
    print(f'{args.dest} sha256={digest}')
    return 0


def build_parser() -> argparse.ArgumentParser:
    """The argument parser with every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help='key = value config file')
    common.add_argument('--seed', type=int, default=None, help='overrides the config seed')
    common.add_argument(
        '--set',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='overrides one (dotted) config key; repeatable',
    )
    common.add_argument(
        '--log-level',
        default='INFO',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
    )
    common.add_argument('--quiet', action='store_true', help='hide progress bars')

    parser = argparse.ArgumentParser(prog='mixexpo', description='Mixed-exposure correction')
    parser.add_argument('--version', action='version', version=f'%(prog)s {VERSION}')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', parents=[common], help='generate a synthetic dataset')
    synth.add_argument('out_dir', type=Path)
    synth.add_argument('--count', type=int, default=16)
    synth.add_argument('--size', type=int, default=128)
    synth.add_argument('--mode', choices=['gain', 'gamma'], default='gain')
    synth.add_argument('--layout', choices=['blobs', 'vertical', 'horizontal'], default='blobs')
    synth.add_argument('--noise-std', type=float, default=0.0)
    synth.add_argument('--clean-dir', type=Path, default=None)
    synth.set_defaults(handler=cmd_synth)

    train_cmd = commands.add_parser('train', parents=[common], help='train a network')
    train_cmd.add_argument('--resume', type=Path, default=None, help='checkpoint to resume from')
    train_cmd.set_defaults(handler=cmd_train)

    infer = commands.add_parser('infer', parents=[common], help='correct images')
    infer.add_argument('checkpoint', type=Path)
    infer.add_argument('input', type=Path, help='image file or directory')
    infer.add_argument('output', type=Path, help='output file or directory')
    infer.add_argument('--masks', action='store_true', help='also write mask grids')
    infer.add_argument(
        '--gt-dir', type=Path, default=None, help='ground truth for mask targets and error maps'
    )
    infer.set_defaults(handler=cmd_infer)

    evaluate = commands.add_parser('eval', parents=[common], help='score predictions')
    evaluate.add_argument('pred_dir', type=Path)
    evaluate.add_argument('gt_dir', type=Path)
    evaluate.add_argument('out_dir', type=Path)
    evaluate.add_argument(
        '--input-dir', type=Path, default=None, help='inputs, for region metrics and curves'
    )
    evaluate.add_argument('--workers', type=int, default=1)
    evaluate.set_defaults(handler=cmd_eval)

    sanity = commands.add_parser('sanity', parents=[common], help='run the overfit harness')
    sanity.set_defaults(handler=cmd_sanity)

    summary = commands.add_parser('summary', parents=[common], help='print parameter counts')
    summary.add_argument('--checkpoint', type=Path, default=None)
    summary.set_defaults(handler=cmd_summary)

    fetch = commands.add_parser(
        'fetch-weights', parents=[common], help='download VGG16 perceptual weights'
    )
    fetch.add_argument('dest', type=Path)
    fetch.add_argument('--url', default=VGG16_URL)
    fetch.add_argument('--sha256', default=VGG16_SHA256_PREFIX)
    fetch.add_argument('--no-verify', action='store_true')
    fetch.set_defaults(handler=cmd_fetch_weights)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs the CLI and returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        force=True,
    )
    try:
        return args.handler(args, parser)
    except MixExpoError as e:
        print(f'error: {str(e).splitlines()[0]}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
