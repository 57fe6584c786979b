"""
Command-line interface: ``lfrt <subcommand> [--flag value]...``.

Exit codes: 0 on success, 1 on user errors (bad arguments, missing or
malformed files, bad configuration), 2 on numeric faults.

"""
##############################################################################
# imports
##############################################################################

import argparse
import json
import logging
import os
import sys

from . import complexity, noise
from ._version import get_versions
from .automation import atomic_directory, banner, list_scenes, map_scenes, write_text
from .config import build_config, load_json, to_dict
from .errors import CalibrationError, ConfigError, LFRTError, NumericFault
from .gradcheck import run_suites
from .lightfield import epi_image, extract_epi, read_lightfield, sai_mosaic, write_lightfield, write_pfm
from .network import PRESETS, ModelConfig, LRTNet, load_checkpoint, lrt_forward
from .training import TrainConfig, evaluate, load_pairs, load_scenes, run_training

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


class ArgumentParser(argparse.ArgumentParser):
    """Reports bad arguments as ConfigError instead of exiting with status 2."""

    def error(self, message):
        raise ConfigError('%s: %s' % (self.prog, message))


def configure_logging(args):
    level = logging.WARNING
    if args.verbose:
        level = logging.INFO
    if args.debug:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def _check_exists(path, what):
    if not os.path.exists(path):
        raise ConfigError("Cannot find %s '%s'" % (what, path))
    return path


def _parse_dims(text, names, what):
    """``'c=8,h=16,w=16'`` -> dict of ints, requiring exactly ``names``."""
    dims = {}
    for token in text.split(','):
        key, _, value = token.partition('=')
        key = key.strip()
        try:
            dims[key] = int(value)
        except ValueError:
            raise ConfigError("Bad %s dimension '%s' (expected key=integer)" % (what, token))
    missing = [name for name in names if name not in dims]
    extra = [key for key in dims if key not in names]
    if missing or extra:
        raise ConfigError("%s dimensions need exactly %s; missing %s, unknown %s"
                          % (what, ','.join(names), missing, extra))
    return dims

##############################################################################
# calibrate
##############################################################################

def cmd_calibrate(args):
    """Per-ISO noise parameters, log-linear models and a synthesis config."""
    manifest = load_json(_check_exists(args.manifest, 'calibration manifest'))
    if not isinstance(manifest, dict) or not manifest.get('isos'):
        raise ConfigError("'%s' needs a non-empty 'isos' list of {gray, dark} manifests" % args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    white_level = float(manifest.get('white_level', 65535.0))
    q = float(manifest.get('q', 1.0))

    params = []
    for entry in manifest['isos']:
        if not isinstance(entry, dict) or 'gray' not in entry or 'dark' not in entry:
            raise ConfigError("Calibration entry %r in '%s' needs 'gray' and 'dark'" % (entry, args.manifest))
        gray = noise.CalibrationSet.from_manifest(os.path.join(base, entry['gray']))
        dark = noise.CalibrationSet.from_manifest(os.path.join(base, entry['dark']))
        if gray.iso != dark.iso:
            raise CalibrationError('Gray-chart ISO %d does not match dark-frame ISO %d' % (gray.iso, dark.iso))
        params.append(noise.calibrate_iso(gray, dark, q))

    table = noise.params_table(params)
    models = None
    if len({p.k for p in params}) >= 2:
        models = {}
        for name, field in (('read_model', 'sigma_read'), ('row_model', 'sigma_row')):
            pairs = [(p.k, getattr(p, field)) for p in params]
            if all(sigma > 0 for _, sigma in pairs):
                models[name] = to_dict(noise.fit_iso_log_model(pairs))
    synthesis = noise.synthesis_config_from_params(
        params, white_level, build_config(noise.SynthesisConfig, args.config, args.overrides))

    with atomic_directory(args.output) as staging:
        write_text(os.path.join(staging, 'noise_params.json'),
                   json.dumps([p.to_dict() for p in params], indent=2, sort_keys=True))
        write_text(os.path.join(staging, 'noise_params.csv'), table.to_csv(index=False))
        if models is not None:
            write_text(os.path.join(staging, 'log_models.json'), json.dumps(models, indent=2, sort_keys=True))
        write_text(os.path.join(staging, 'synthesis.json'),
                   json.dumps(synthesis.to_dict(), indent=2, sort_keys=True))
    print(table.to_string(index=False))
    return 0

##############################################################################
# synthesize
##############################################################################

def _synthesize_scene(packet):
    path, index, cfg, output, fmt = packet
    gt = read_lightfield(path)
    l_in, _, params, beta = noise.synthesize_dark(gt, cfg, noise.scene_rng(cfg.seed, index))
    name = os.path.basename(os.path.normpath(path))
    scene_dir = os.path.join(output, name)
    write_lightfield(l_in, os.path.join(scene_dir, 'low'), fmt)
    write_lightfield(gt, os.path.join(scene_dir, 'gt'), fmt)
    write_text(os.path.join(scene_dir, 'noise.json'),
               json.dumps({'beta': beta, 'params': params.to_dict(), 'scene_index': index}, indent=2, sort_keys=True))
    logger.info("Scene %d '%s': beta %.4f, k %.4g", index, name, beta, params.k)
    return {'name': name, 'low': os.path.join(name, 'low'), 'gt': os.path.join(name, 'gt')}


def cmd_synthesize(args):
    """Dark/clean pairs for every scene under ``--gt``."""
    cfg = build_config(noise.SynthesisConfig, args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    scenes = list_scenes(_check_exists(args.gt, 'ground-truth path'))
    banner('Synthesizing %d scenes (seed %d)' % (len(scenes), cfg.seed))
    with atomic_directory(args.output) as staging:
        work = [(path, index, cfg, staging, args.format) for index, path in enumerate(scenes)]
        pairs = map_scenes(_synthesize_scene, work, args.nprocesses)
        write_text(os.path.join(staging, 'pairs.json'), json.dumps(pairs, indent=2))
    print('Wrote %d pairs to %s' % (len(pairs), args.output))
    return 0

##############################################################################
# train / restore / eval
##############################################################################

def cmd_train(args):
    cfg = build_config(TrainConfig, args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    scenes = load_scenes(_check_exists(args.data, 'training data'), cfg.views)
    model = load_checkpoint(_check_exists(args.init, 'checkpoint'))[0] if args.init else None
    result = run_training(cfg, scenes, args.output, model=model)
    if result.checkpoints:
        print(result.checkpoints[-1])
    return 0


def dump_intermediates(outputs, directory):
    """Illumination and high-frequency mosaics, alpha and central EPI strips of the output."""
    os.makedirs(directory, exist_ok=True)
    write_pfm(os.path.join(directory, 'illum.pfm'), sai_mosaic(outputs.illum_q))
    write_pfm(os.path.join(directory, 'hf.pfm'), sai_mosaic(outputs.h_map))
    write_text(os.path.join(directory, 'alpha.txt'), '%.8f\n' % outputs.alpha)
    u, v, _, h, w = outputs.l_out.shape
    write_pfm(os.path.join(directory, 'epi_h.pfm'), epi_image(extract_epi(outputs.l_out, 'horizontal', u // 2, h // 2)))
    write_pfm(os.path.join(directory, 'epi_v.pfm'), epi_image(extract_epi(outputs.l_out, 'vertical', v // 2, w // 2)))


def cmd_restore(args):
    model, _ = load_checkpoint(_check_exists(args.ckpt, 'checkpoint'))
    lf = read_lightfield(_check_exists(args.input, 'input light field'))
    outputs = lrt_forward(lf, model)
    write_lightfield(outputs.l_out.clamped(), args.output, args.format)
    if args.dump_intermediates:
        dump_intermediates(outputs, args.dump_intermediates)
    print('alpha %.4f -> %s' % (outputs.alpha, args.output))
    return 0


def cmd_eval(args):
    synthesis = build_config(noise.SynthesisConfig, args.config, args.overrides)
    seed = synthesis.seed if args.seed is None else args.seed
    pairs = load_pairs(_check_exists(args.pairs, 'pair list'), synthesis, seed)
    model, _ = load_checkpoint(_check_exists(args.ckpt, 'checkpoint'))
    report_filename = args.report or os.path.splitext(args.pairs)[0] + '_report.json'
    report = evaluate(model, pairs, report_filename, args.output_dir, args.nprocesses)
    for name, scene in report['scenes'].items():
        print('%-24s PSNR %8.3f dB  SSIM %.4f' % (name, scene['psnr'], scene['ssim']))
    print('%-24s PSNR %8.3f dB  SSIM %.4f' % ('mean', report['psnr'], report['ssim']))
    return 0

##############################################################################
# complexity / gradcheck
##############################################################################

def cmd_complexity(args):
    if not (args.angular or args.spatial or args.params):
        raise ConfigError('complexity needs at least one of --angular, --spatial, --params')
    if args.angular:
        dims = _parse_dims(args.angular, ('u', 'v', 'c', 'h', 'w', 'p', 'm'), 'angular')
        report = complexity.angular_complexity(**dims)
        print('angular MACs: %s' % report.value)
        print('macro-pixel attention MACs: %s' % report.baseline)
        print('ratio: %.6f' % report.ratio)
    if args.spatial:
        dims = _parse_dims(args.spatial, ('c', 'h', 'w'), 'spatial')
        report = complexity.spatial_complexity(**dims)
        print('spatial MACs: %s' % report.value)
        print('global attention MACs: %s' % report.baseline)
        print('ratio: %.6f' % report.ratio)
    if args.params:
        model = LRTNet(ModelConfig.preset(args.params))
        print('%s parameters: %d' % (args.params, model.count_parameters()))
    return 0


def cmd_gradcheck(args):
    results = run_suites(args.suite, eps=args.eps, tol=args.tol, n_coords=args.coords,
                         seed=0 if args.seed is None else args.seed)
    for name, report in results:
        print('%-20s %s' % (name, report))
    failed = [name for name, report in results if not report.passed]
    if failed:
        raise NumericFault('Gradient check failed for %s' % ', '.join(failed))
    return 0

##############################################################################
# parser
##############################################################################

def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument('--set', metavar='KEY=VALUE', dest='overrides', action='append', default=[],
        help='Override a configuration entry (dotted keys address nested objects; may be repeated)')
    common.add_argument('--seed', metavar='SEED', dest='seed', type=int, default=None,
        help='Random seed (overrides the configuration file)')
    common.add_argument('-n', '--nprocesses', metavar='NPROCESSES', dest='nprocesses', type=int, default=1,
        help='Number of processes for per-scene work (default: 1)')
    common.add_argument('-v', '--verbose', dest='verbose', action='store_true', default=False,
        help='Log progress (INFO)')
    common.add_argument('-d', '--debug', dest='debug', action='store_true', default=False,
        help='Turn on debug output')

    parser = ArgumentParser(prog='lfrt', description='Low-light light-field restoration toolkit')
    parser.add_argument('--version', action='version', version=get_versions()['version'])
    subparsers = parser.add_subparsers(dest='subcommand', metavar='SUBCOMMAND', parser_class=ArgumentParser)
    subparsers.required = True

    sub = subparsers.add_parser('calibrate', parents=[common], help='Estimate noise parameters from calibration frames')
    sub.add_argument('--manifest', required=True, help='JSON {white_level, q, isos: [{gray, dark}]}')
    sub.add_argument('-o', '--output', required=True, help='Output directory')
    sub.add_argument('--config', default=None, help='Base synthesis config JSON')
    sub.set_defaults(handler=cmd_calibrate)

    sub = subparsers.add_parser('synthesize', parents=[common], help='Synthesize dark/clean light-field pairs')
    sub.add_argument('--gt', required=True, help='Light-field directory or directory of light fields')
    sub.add_argument('-o', '--output', required=True, help='Output directory')
    sub.add_argument('--config', default=None, help='Synthesis config JSON')
    sub.add_argument('--format', choices=('pfm', 'png'), default='pfm', help='View file format (default: pfm)')
    sub.set_defaults(handler=cmd_synthesize)

    sub = subparsers.add_parser('train', parents=[common], help='Train a restoration network')
    sub.add_argument('--data', required=True, help='Directory of ground-truth light fields')
    sub.add_argument('-o', '--output', required=True, help='Checkpoint and log directory')
    sub.add_argument('--config', default=None, help='Training config JSON')
    sub.add_argument('--init', default=None, help='Checkpoint to start from')
    sub.set_defaults(handler=cmd_train)

    sub = subparsers.add_parser('restore', parents=[common], help='Restore a dark light field')
    sub.add_argument('-i', '--input', required=True, help='Dark light-field directory')
    sub.add_argument('--ckpt', required=True, help='Model checkpoint')
    sub.add_argument('-o', '--output', required=True, help='Restored light-field directory')
    sub.add_argument('--format', choices=('png', 'pfm'), default='png', help='View file format (default: png)')
    sub.add_argument('--dump-intermediates', metavar='DIR', dest='dump_intermediates', default=None,
        help='Write illum.pfm, hf.pfm, alpha.txt, epi_h.pfm and epi_v.pfm to DIR')
    sub.set_defaults(handler=cmd_restore)

    sub = subparsers.add_parser('eval', parents=[common], help='PSNR / SSIM of a checkpoint on test pairs')
    sub.add_argument('--pairs', required=True, help='JSON list of {name, low, gt}; entries without low are synthesized')
    sub.add_argument('--ckpt', required=True, help='Model checkpoint')
    sub.add_argument('--report', default=None, help='Report JSON (default: <pairs>_report.json)')
    sub.add_argument('--output-dir', dest='output_dir', default=None, help='Write restored light fields here')
    sub.add_argument('--config', default=None, help='Synthesis config JSON for entries without low')
    sub.set_defaults(handler=cmd_eval)

    sub = subparsers.add_parser('complexity', parents=[common], help='Analytic MAC counts and parameter counts')
    sub.add_argument('--angular', metavar='u=,v=,c=,h=,w=,p=,m=', default=None)
    sub.add_argument('--spatial', metavar='c=,h=,w=', default=None)
    sub.add_argument('--params', metavar='PRESET', choices=sorted(PRESETS), default=None,
        help='Print the parameter count of a model preset')
    sub.set_defaults(handler=cmd_complexity)

    sub = subparsers.add_parser('gradcheck', parents=[common], help='Run the gradient check suites')
    sub.add_argument('--suite', action='append', default=[], help='Suite name (default: all; may be repeated)')
    sub.add_argument('--eps', type=float, default=1e-6)
    sub.add_argument('--tol', type=float, default=1e-6)
    sub.add_argument('--coords', type=int, default=100, help='Coordinates checked per suite')
    sub.set_defaults(handler=cmd_gradcheck)
    return parser


def dispatch(argv=None):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args)
        if args.nprocesses <= 0:
            raise ConfigError('nprocesses must be positive, got %d' % args.nprocesses)
        return args.handler(args)
    except SystemExit as e:
        # --help and --version
        return e.code or 0
    except NumericFault as e:
        logger.error('Numeric fault: %s', e)
        print('ERROR: %s' % e, file=sys.stderr)
        return 2
    except (LFRTError, OSError, json.JSONDecodeError) as e:
        logger.debug('Failure details', exc_info=True)
        print('ERROR: %s' % e, file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))
