import stylemlm
import matplotlib.pyplot as plt
import argparse
import logging
import sys
import yaml
from stylemlm.config import load_config
from stylemlm.pipeline import Pipeline, run_lock, gen_toy, transfer_file
from stylemlm._utils import TrainingError, ChecksumError


logger = logging.getLogger('run_stylemlm')

STAGE_COMMANDS = {'train-attr': 'train-attr', 'mask': 'mask', 'train-smlm': 'train-smlm', 'finetune': 'finetune',
                  'eval': 'eval', 'pipeline': 'eval'}
EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class ArgumentParser(argparse.ArgumentParser):
    '''Exits with status 1 on usage errors.'''

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _grid(value):
    try:
        return [float(v) for v in value.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f'invalid grid "{value}", expected comma separated numbers') from None


def argument_parser():
    parser = ArgumentParser(prog='run_stylemlm', description='unsupervised text style transfer with a style masked language model')
    parser.add_argument("-l", "--log", dest="logLevel", default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL', None], help="Set the logging level.")
    parser.add_argument('--progress_bar', help='Show the progress of individual tasks.', action='store_true')
    parser.add_argument('--plot_type', metavar='<type>', type=str, default='png', choices=['png', 'pdf', 'svg'])
    parser.add_argument('--plot_dpi', metavar='<dpi>', type=int, default=100, help='Specify resolution of plots')
    sub = parser.add_subparsers(dest='command', metavar='<command>', parser_class=ArgumentParser)
    sub.required = True

    toy = sub.add_parser('gen-toy', help='generate a synthetic corpus with planted style tokens')
    toy.add_argument('--spec', metavar='<toy.yaml>', help='toy corpus spec (default: built in spec)')
    toy.add_argument('--out', metavar='<directory>', required=True, help='output directory')

    helps = {'train-attr': 'train the attribution classifier', 'mask': 'style mask the corpus',
             'train-smlm': 'bootstrap the style masked language model', 'finetune': 'fine-tune the style masked language model',
             'eval': 'transfer the test split and evaluate', 'pipeline': 'run all stages'}
    for cmd, text in helps.items():
        p = sub.add_parser(cmd, help=f'{text} (running or resuming all preceding stages)')
        p.add_argument('--config', metavar='<run.yaml>', required=True, help='run configuration')

    sweep = sub.add_parser('sweep', help='masking quality over a lambda_eps grid')
    sweep.add_argument('--config', metavar='<run.yaml>', required=True, help='run configuration')
    sweep.add_argument('--grid', metavar='<l1,l2,...>', type=_grid, help='lambda_eps values (default: eval.sweep_grid of the config)')

    compare = sub.add_parser('compare-attr', help='masking quality of all attribution methods')
    compare.add_argument('--config', metavar='<run.yaml>', required=True, help='run configuration')
    compare.add_argument('--lambda_eps', metavar='<value>', type=float,
                         help='use this lambda_eps for all methods (default: configured value for attention, 0 for gradient methods)')

    transfer = sub.add_parser('transfer', help='transfer the sentences of a file to a destination style')
    transfer.add_argument('--model_dir', metavar='<directory>', required=True, help='style masked language model checkpoint')
    transfer.add_argument('--attr_dir', metavar='<directory>', required=True, help='attribution model checkpoint')
    transfer.add_argument('--input', metavar='<file.tsv>', required=True, help='lines of "<label><TAB><tokens>"')
    transfer.add_argument('--dst', metavar='<label>', required=True, help='destination style name or id')
    transfer.add_argument('--out', metavar='<file>', required=True, help='output file, one sentence per input line')
    transfer.add_argument('--lambda_eps', metavar='<value>', type=float, help='masking surplus parameter')
    transfer.add_argument('--method', metavar='<tag>', choices=['VA', 'EA', 'VG', 'GxX', 'IG'], help='attribution method')
    return parser


def run_command(args):
    '''Executes the parsed command.'''
    if args.command == 'gen-toy':
        written = gen_toy(args.spec, args.out)
        logger.info('wrote %s files to %s', len(written), args.out)
        return
    if args.command == 'transfer':
        transfer_file(args.model_dir, args.attr_dir, args.input, args.dst, args.out, args.lambda_eps, args.method)
        return
    config = load_config(args.config)
    logger.debug('run config: %s', config.to_dict())
    with run_lock(config.output_dir):
        pipeline = Pipeline(config, progress_bar=args.progress_bar)
        if args.command in STAGE_COMMANDS:
            metrics = pipeline.run(STAGE_COMMANDS[args.command])
            if STAGE_COMMANDS[args.command] == 'eval':
                with open(pipeline.manifest.path('eval', 'report_txt'), encoding='utf8') as fh:
                    print(fh.read(), end='')
            logger.debug('metrics: %s', metrics)
        elif args.command == 'sweep':
            curve = pipeline.sweep(args.grid, plot_type=args.plot_type)
            print(curve.to_frame().to_string(index=False))
        elif args.command == 'compare-attr':
            print(pipeline.compare_attributions(args.lambda_eps).to_string())


def main(argv=None):
    parser = argument_parser()
    args = parser.parse_args(argv)

    plt.rcParams['savefig.dpi'] = args.plot_dpi

    if args.logLevel:
        logging.basicConfig(level=getattr(logging, args.logLevel), format='%(asctime)s %(levelname)s: %(message)s',
                            datefmt='%Y-%m-%d %H:%M:%S')
    logger.info('This is stylemlm version %s', stylemlm.__version__)
    logger.debug('arguments: %s', args)
    try:
        run_command(args)
    except (TrainingError, ChecksumError) as e:
        logger.error('%s: %s', type(e).__name__, e)
        return EXIT_FAILURE
    except (ValueError, FileNotFoundError, yaml.YAMLError) as e:
        logger.error('%s: %s', type(e).__name__, e)
        return EXIT_USAGE
    except Exception as e:
        logger.exception('%s: %s', type(e).__name__, e)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
