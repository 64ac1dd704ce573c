"""Command-line interface.

Every option can also be set in a YAML file passed with ``--config`` or via an
environment variable ``PROTOSEG_<KEY>`` (e.g. ``PROTOSEG_N_SUPPORT=16``).
Precedence: flags > environment > config file > built-in defaults.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import config as cfg
from .bank import load_bank, save_bank, stuff_filter
from .evaluation import VOCDataset, load_image, run_benchmark, save_label_png
from .explain import explain_pixel, render_explanation
from .features import EnsembleSpace, make_extractor
from .gridio import write_bytes
from .inference import SegmentOptions, sliding_window_segment
from .pipeline import build_bank
from .support import sample_support_set
from .synthetic import ColorPresenceScorer, SyntheticGenerator, SyntheticProposer, default_scene, write_synthetic_dataset
from .vocabulary import Category, Tag, Vocabulary, builtin_table, category_seed, load_table, load_vocabulary, tag_vocabulary

logger = logging.getLogger("protoseg")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="YAML file with option defaults")
    g.add_argument("--seed", type=int, help="global seed (per-category seeds derive from it)")
    g.add_argument("--bank", help="prototype bank directory")
    g.add_argument("--cache-dir", help="support-set cache directory")
    g.add_argument("--out", help="output file or directory")
    g.add_argument("--vocabulary", help="vocabulary YAML (defaults to the dataset or synthetic classes)")
    g.add_argument("--table", help="user thing/stuff table overriding the builtin one")
    g.add_argument("--dataset", help="'synthetic' or a VOC-layout dataset root")
    g.add_argument("--split", help="dataset split file name")
    g.add_argument("--n-images", type=int, help="images in the synthetic dataset")
    g.add_argument("--generator", help="generator adapter (only 'synthetic' ships)")
    g.add_argument("--ensemble", help="comma-separated extractor names")
    g.add_argument("--no-prefilter", dest="prefilter", action="store_false", help="skip category pre-filtering")
    g.add_argument("--eta", type=int, help="max classes kept by the pre-filter")
    g.add_argument("--no-bg-prototypes", dest="use_bg_prototypes", action="store_false",
                   help="replace background prototypes with a constant score threshold")
    g.add_argument("--fg-threshold", type=float, help="background score when --no-bg-prototypes is set")
    g.add_argument("--bg-pool", choices=("kept", "all"), help="whose background prototypes form the background")
    g.add_argument("--windows", help="comma-separated sliding-window sizes")
    g.add_argument("--stride", type=int, help="sliding-window stride")
    g.add_argument("--shortest-side", help="resize shortest image side before inference ('' to disable)")
    g.add_argument("--n-support", type=int, help="support images per category")
    g.add_argument("--k-parts", type=int, help="part prototypes per category and polarity")
    g.add_argument("--stuff-threshold", type=float, help="cosine above which thing backgrounds are dropped")
    g.add_argument("--template", help="prompt template containing <c>")
    g.add_argument("-v", "--verbose", action="count", help="more logging")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = _Parser(prog="protoseg", description="Prototype-based open-vocabulary segmentation.",
                     parents=[common])
    parser.add_argument("--version", action="version", version=f"protoseg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("sample", parents=[common], help="generate support sets into the cache")
    sub.add_parser("build", parents=[common], help="build (or extend) a prototype bank")
    sub.add_parser("filter", parents=[common], help="apply stuff filtering for a vocabulary")
    seg = sub.add_parser("segment", parents=[common], help="segment an image or a directory of images")
    seg.add_argument("inputs", nargs="+", help="image files or directories")
    exp = sub.add_parser("explain", parents=[common], help="trace a pixel's label to support regions")
    exp.add_argument("image", help="query image")
    exp.add_argument("--pixel", required=True, help="x,y")
    sub.add_parser("eval", parents=[common], help="benchmark a dataset and write a report")
    return parser


def parse_pixel(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--pixel expects x,y, got {text!r}") from None
    return x, y


# --- wiring ---------------------------------------------------------------


class Context:
    def __init__(self, config: dict):
        self.config = config
        self.scene = default_scene()

    def generator(self):
        name = self.config["generator"]
        if name != "synthetic":
            raise RuntimeError(f"generator {name!r} is not available; only 'synthetic' ships with this package")
        return SyntheticGenerator(self.scene, self.config["template"])

    def proposer(self, generator):
        return SyntheticProposer(generator) if isinstance(generator, SyntheticGenerator) else None

    def scorer(self):
        return ColorPresenceScorer(self.scene) if self.config["generator"] == "synthetic" else None

    def extractors(self) -> list:
        return [make_extractor(name) for name in self.config["ensemble"]]

    def ensemble(self, extractors) -> EnsembleSpace:
        return EnsembleSpace(tuple(ex.space_id for ex in extractors))

    def dataset(self) -> Optional[VOCDataset]:
        ds = self.config["dataset"]
        if ds is None or ds == "synthetic":
            return None
        return VOCDataset(ds, self.config["split"])

    def vocabulary(self):
        c = self.config
        if c["vocabulary"]:
            vocab = load_vocabulary(c["vocabulary"], c["seed"])
        elif self.dataset() is not None:
            vocab = self.dataset().vocabulary(c["seed"])
        else:
            # synthetic shapes are countable objects; pin them rather than consult the table
            vocab = Vocabulary(tuple(Category(n, n, Tag.THING, category_seed(c["seed"], n), pinned=True)
                                     for n in self.scene.classes))
        override = load_table(c["table"]) if c["table"] else None
        return tag_vocabulary(vocab, builtin_table(), override)

    def options(self, extractors) -> SegmentOptions:
        c = self.config
        return SegmentOptions(
            extractors={ex.space_id: ex for ex in extractors},
            scorer=self.scorer(),
            prefilter=c["prefilter"],
            eta=c["eta"],
            use_bg_prototypes=c["use_bg_prototypes"],
            fg_threshold=c["fg_threshold"],
            bg_pool=c["bg_pool"],
            windows=tuple(c["windows"]),
            stride=c["stride"],
            shortest_side=c["shortest_side"],
        )

    def require(self, key: str) -> str:
        value = self.config[key]
        if not value:
            raise UsageError(f"--{key.replace('_', '-')} is required for this command")
        return value


def cmd_sample(ctx: Context, args) -> int:
    cache = ctx.require("cache_dir")
    gen = ctx.generator()
    for category in ctx.vocabulary().categories:
        pairs = sample_support_set(category, ctx.config["n_support"], gen, cache, ctx.config["template"])
        print(f"{category.id}: {len(pairs)} support images")
    return 0


def cmd_build(ctx: Context, args) -> int:
    c = ctx.config
    path = Path(ctx.require("bank"))
    existing = load_bank(path) if (path / "manifest.json").exists() else None
    gen = ctx.generator()
    extractors = ctx.extractors()
    bank = build_bank(ctx.vocabulary(), gen, ctx.proposer(gen), extractors, c["n_support"], c["k_parts"],
                      c["cache_dir"], existing, c["template"])
    save_bank(bank, path)
    print(f"bank {path}: {len(bank.categories)} categories, {bank.count()} prototypes, digest {bank.digest()}")
    return 0


def cmd_filter(ctx: Context, args) -> int:
    src = ctx.require("bank")
    bank = load_bank(src)
    filtered = stuff_filter(bank, ctx.vocabulary(), ctx.config["stuff_threshold"])
    dest = ctx.config["out"] or src
    save_bank(filtered, dest)
    print(f"filtered bank {dest}: {bank.count()} -> {filtered.count()} prototypes")
    return 0


def _collect_images(inputs: Sequence[str]) -> list[Path]:
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such image or directory: {item}")
    return files


def cmd_segment(ctx: Context, args) -> int:
    bank = load_bank(ctx.require("bank"))
    out = Path(ctx.config["out"] or "protoseg-out")
    extractors = ctx.extractors()
    vocab, ens, opts = ctx.vocabulary(), ctx.ensemble(extractors), ctx.options(extractors)
    mode = "prototypes" if opts.use_bg_prototypes else f"constant threshold {opts.fg_threshold}"
    print(f"background: {mode}")
    entries = None
    for path in _collect_images(args.inputs):
        result = sliding_window_segment(load_image(path), bank, vocab, ens, opts)
        save_label_png(result.labels, out / f"{path.stem}.png")
        entries = result.class_entries
        print(f"{path} -> {out / (path.stem + '.png')} (classes kept: {', '.join(result.kept_classes)})")
    if entries is not None:
        write_bytes(out / "classes.json", (json.dumps({"classes": entries}, indent=2) + "\n").encode())
    return 0


def cmd_explain(ctx: Context, args) -> int:
    x, y = parse_pixel(args.pixel)
    bank = load_bank(ctx.require("bank"))
    image = load_image(args.image)
    extractors = ctx.extractors()
    opts = ctx.options(extractors)
    # explanations need pixel-aligned winners, so skip the shortest-side resize
    opts.shortest_side = None
    h, w = image.shape[:2]
    if not (0 <= x < w and 0 <= y < h):
        raise UsageError(f"pixel ({x},{y}) outside image of size {w}x{h}")
    result = sliding_window_segment(image, bank, ctx.vocabulary(), ctx.ensemble(extractors), opts)
    expl = explain_pixel(result, (x, y), bank, ctx.config["cache_dir"], image)
    out = Path(ctx.config["out"] or f"{Path(args.image).stem}_explain_{x}_{y}.png")
    render_explanation(expl, out)
    ref = expl.ref.to_dict() if expl.ref else None
    print(f"pixel ({x},{y}) -> {expl.class_id}; prototype {ref}; {len(expl.evidence)} evidence regions"
          + (" (degraded)" if expl.degraded else ""))
    print(f"wrote {out}")
    return 0


def cmd_eval(ctx: Context, args) -> int:
    c = ctx.config
    out = Path(c["out"] or "protoseg-eval")
    bank = load_bank(ctx.require("bank"))
    if c["dataset"] in (None, "synthetic"):
        root = out / "dataset"
        if not (root / "ImageSets").exists():
            write_synthetic_dataset(ctx.scene, root, c["n_images"], c["seed"])
        dataset = VOCDataset(root, "val")
    else:
        dataset = ctx.dataset()
    extractors = ctx.extractors()
    report = run_benchmark(dataset, bank, ctx.vocabulary(), ctx.ensemble(extractors), ctx.options(extractors),
                           out, cfg.digest(c))
    write_bytes(out / "config.yaml", cfg.dump(c).encode())
    print(report.to_text(), end="")
    print(f"report written to {out / 'report.json'}")
    return 0


COMMANDS = {
    "sample": cmd_sample,
    "build": cmd_build,
    "filter": cmd_filter,
    "segment": cmd_segment,
    "explain": cmd_explain,
    "eval": cmd_eval,
}

FLAG_KEYS = tuple(cfg.DEFAULTS)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        flags = {k: getattr(args, k) for k in FLAG_KEYS if hasattr(args, k)}
        config = cfg.resolve(getattr(args, "config", None), flags)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except cfg.ConfigError as exc:
        print(f"protoseg: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](Context(config), args)
    except UsageError as exc:
        print(f"protoseg: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logger.debug("failure", exc_info=True)
        print(f"protoseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
