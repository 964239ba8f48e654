"""``animate`` command line entry point."""
import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import StageError, run_pipeline

EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser():
    p = argparse.ArgumentParser(prog="animate", description="Animate a character image along a pose sequence.")
    p.add_argument("--image", help="source character image (PNG)")
    p.add_argument("--pose", help="pose sequence JSON")
    p.add_argument("--prompt", help="text prompt describing the image")
    p.add_argument("--source-mask", help="character mask of the source image (PNG/PGM, nonzero = character)")
    p.add_argument("--subject-tokens", help="comma-separated prompt words naming the character")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="parallel frames during embedding optimisation")
    p.add_argument("--seed", type=int, help="backend seed")
    p.add_argument("--keep-partial", action="store_true", default=None, help="keep outputs of a failed run")
    p.add_argument("--embedding-cache", help="read/write optimised embeddings here")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flags = {
        "image": args.image, "pose": args.pose, "prompt": args.prompt, "source_mask": args.source_mask,
        "subject_tokens": args.subject_tokens, "output_dir": args.out, "jobs": args.jobs,
        "backend.seed": args.seed, "keep_partial": args.keep_partial, "embedding_cache": args.embedding_cache,
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    try:
        cfg = load_config(args.config, overrides)
        manifest = run_pipeline(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    print(f"wrote {manifest.frames} frames to {cfg.output_dir}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
