"""Export command: dataset images -> PFTN feature stacks + manifests."""

from __future__ import annotations

import argparse
import sys

from patchnf.errors import ConfigError, DataError

from .export import ExportSpec, export, load_export_spec


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="featexport", description=__doc__)
    parser.add_argument("--dataset-root", required=True, help="dataset root directory")
    parser.add_argument("--category", required=True, help="category subdirectory to export")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--spec", help="export spec JSON")
    parser.add_argument("--weights", help="override: pretrained | none | path")
    parser.add_argument("--seed", type=int, help="init seed for weights=none")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        spec = load_export_spec(args.spec) if args.spec else ExportSpec()
        if args.weights is not None:
            spec.weights = args.weights
        if args.seed is not None:
            spec.seed = args.seed
        spec.validate()
        train_manifest, test_manifest = export(spec, args.dataset_root, args.category, args.out)
        print(f"train manifest: {train_manifest}")
        print(f"test manifest:  {test_manifest}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
