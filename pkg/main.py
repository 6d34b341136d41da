import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Literal, Optional, get_args, get_origin

from dotenv import load_dotenv
from pydantic import ValidationError

from config import TOOL_VERSION, configure_logging, load_train_config, parse_int_list, read_config_file, settings
from errors import EXIT_DATA, EXIT_OK, CeclError, UsageError
from models import BenchItem, DatasetRecord, HardNegativeRecord, NegType, TrainConfig, WorldSpec
from services.text_processing_service import Lexicon, default_lexicon

from helpers.manifest_helpers import RunRecorder, read_jsonl, write_json
from helpers.dataset_helpers import merge_hard_negatives, run_gen_hardneg, run_synth
from helpers.train_helpers import load_checkpoint, read_metrics, train
from helpers.eval_helpers import render_analysis_table, render_report_table, run_analyze, run_eval, write_series
from helpers.ablate_helpers import render_ablation_table, run_ablation

load_dotenv()

logger = logging.getLogger("cecl")


class CeclArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage errors here exit with 1."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {raw!r}")


def _parse_neg_types(raw: str) -> List[NegType]:
    try:
        return [NegType(part.strip().upper()) for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"hn_types must be a comma list of {[k.value for k in NegType]}") from e


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig key, so `--help` lists every accepted config key."""
    group = parser.add_argument_group("config keys (flag > --config file > default)")
    for name, field in TrainConfig.model_fields.items():
        annotation = field.annotation
        default = field.get_default(call_default_factory=True)
        if isinstance(default, list):
            default = ",".join(getattr(v, "value", str(v)) for v in default)
        kwargs: Dict[str, Any] = {"dest": name, "default": None, "help": f"default: {default}"}
        if annotation is bool:
            kwargs.update(type=_parse_bool, metavar="{true,false}")
        elif get_origin(annotation) is Literal:
            kwargs.update(choices=list(get_args(annotation)))
        elif get_origin(annotation) in (list, List):
            kwargs.update(type=_parse_neg_types, metavar="TYPES")
        else:
            kwargs.update(type=annotation)
        group.add_argument(f"--{name.replace('_', '-')}", **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = CeclArgumentParser(prog="cecl", description="Compositional contrastive learning toolkit.")
    parser.add_argument("--version", action="version", version=f"cecl {TOOL_VERSION}")
    parser.add_argument("--log-level", default=None, help=f"default: {settings.log_level}")
    sub = parser.add_subparsers(dest="command", parser_class=CeclArgumentParser)

    p = sub.add_parser("synth", help="generate the synthetic world dataset and benchmark items")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-fraction", type=float, default=None)
    p.add_argument("--out", default=settings.data_dir)

    p = sub.add_parser("gen-hardneg", help="write the four featured hard negatives per caption")
    p.add_argument("--data", required=True, help="dataset JSONL (id, caption, ...)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="augmentation JSONL path")
    p.add_argument("--lexicon", default=None)
    p.add_argument("--full-lexicon", action="store_true", help="fill from the whole lexicon, not only corpus words")

    p = sub.add_parser("train", help="fine-tune the dual encoder")
    p.add_argument("--config", default=None, help="flat TOML train config")
    p.add_argument("--data", required=True)
    p.add_argument("--hardneg", default=None, help="augmentation JSONL from gen-hardneg")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--eval-items", default=None, help="benchmark JSONL scored after every eval_every epochs")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="pairwise accuracy and retrieval of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--out", default=None, help="default: checkpoint directory")
    p.add_argument("--recall-ks", default=settings.recall_ks)
    p.add_argument("--no-per-item", action="store_true")

    p = sub.add_parser("analyze", help="intra-modal similarity, cross-modal gap, metric series")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--items", default=None)
    p.add_argument("--series", default=None, help="metrics JSONL to export as step,value CSVs")
    p.add_argument("--resamples", type=int, default=None)
    p.add_argument("--confidence", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train + eval over a config grid and seed set")
    p.add_argument("--grid", required=True, help="TOML grid: [axes], [[points]], baseline")
    p.add_argument("--config", default=None, help="base train config shared by every point")
    p.add_argument("--data", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--seeds", default=settings.ablate_seeds)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    return parser


def _config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in TrainConfig.model_fields if getattr(args, name, None) is not None}


def cmd_synth(args: argparse.Namespace, argv: List[str]) -> int:
    try:
        world = WorldSpec() if args.eval_fraction is None else WorldSpec(eval_fraction=args.eval_fraction)
    except ValidationError as e:
        raise UsageError(f"invalid world: {e}") from e
    recorder = RunRecorder("synth", argv, {"n": args.n, "sigma": args.sigma, "world": world.model_dump()}, args.out, seed=args.seed)
    paths = run_synth(world, args.n, args.sigma, args.seed, args.out)
    for name, path in paths.items():
        recorder.add_artifact(name, path)
    recorder.finish()
    return EXIT_OK


def cmd_gen_hardneg(args: argparse.Namespace, argv: List[str]) -> int:
    lexicon = Lexicon.load(args.lexicon) if args.lexicon else default_lexicon()
    records = read_jsonl(args.data, DatasetRecord)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    recorder = RunRecorder("gen-hardneg", argv, {"lexicon": lexicon.version, "restrict_to_corpus": not args.full_lexicon}, out_dir, seed=args.seed)
    recorder.add_input(args.data)
    rates = run_gen_hardneg(records, lexicon, args.seed, args.out, restrict_to_corpus=not args.full_lexicon)
    recorder.add_artifact("hardneg", args.out)
    recorder.finish()
    print(" ".join(f"{k}={v:.3f}" for k, v in rates.items()))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: List[str]) -> int:
    config = load_train_config(args.config, _config_overrides(args))
    recorder = RunRecorder("train", argv, config.model_dump(mode="json"), args.out, seed=config.seed)
    records = read_jsonl(args.data, DatasetRecord)
    recorder.add_input(args.data)
    if args.hardneg:
        records = merge_hard_negatives(records, read_jsonl(args.hardneg, HardNegativeRecord))
        recorder.add_input(args.hardneg)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        recorder.add_input(args.resume)

    eval_hook = None
    if args.eval_items:
        from helpers.eval_helpers import evaluate_items
        from services.evaluation_service import EncoderScoringModel

        items = read_jsonl(args.eval_items, BenchItem)
        recorder.add_input(args.eval_items)

        def eval_hook(params, vocabulary, epoch):
            report, _ = evaluate_items(EncoderScoringModel(params, vocabulary), items)
            logger.info(f"Trainer: epoch {epoch} eval accuracy {report.overall_accuracy:.4f} {report.per_type_accuracy}")

    result = train(config, records, args.out, eval_hook=eval_hook, resume=resume)
    recorder.add_artifact("checkpoint", result.checkpoint_path)
    recorder.add_artifact("metrics", result.metrics_path)
    recorder.finish()
    print(f"steps={result.steps_run} digest={result.digest}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: List[str]) -> int:
    ckpt = load_checkpoint(args.ckpt)
    items = read_jsonl(args.items, BenchItem)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    recall_ks = parse_int_list(args.recall_ks) if args.recall_ks else []
    recorder = RunRecorder("eval", argv, {"recall_ks": recall_ks}, out_dir)
    recorder.add_input(args.ckpt)
    recorder.add_input(args.items)
    report, paths = run_eval(ckpt, items, out_dir, recall_ks=recall_ks, per_item_csv=not args.no_per_item)
    for name, path in paths.items():
        recorder.add_artifact(name, path)
    recorder.finish()
    print(render_report_table(report))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, argv: List[str]) -> int:
    if not args.series and not (args.ckpt and args.items):
        raise UsageError("analyze needs --ckpt and --items, or --series")
    recorder = RunRecorder("analyze", argv, {"resamples": args.resamples, "confidence": args.confidence}, args.out, seed=args.seed)
    if args.ckpt and args.items:
        recorder.add_input(args.ckpt)
        recorder.add_input(args.items)
        block, path = run_analyze(
            load_checkpoint(args.ckpt), read_jsonl(args.items, BenchItem), args.out,
            n_resamples=args.resamples, confidence=args.confidence, seed=args.seed,
        )
        recorder.add_artifact("analysis", path)
        print(render_analysis_table(block))
    if args.series:
        recorder.add_input(args.series)
        for name, path in write_series(read_metrics(args.series), os.path.join(args.out, "series")).items():
            recorder.add_artifact(f"series/{name}", path)
    recorder.finish()
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, argv: List[str]) -> int:
    grid = read_config_file(args.grid)
    base = read_config_file(args.config)
    seeds = parse_int_list(args.seeds)
    if not seeds:
        raise UsageError("ablate needs at least one seed")
    recorder = RunRecorder("ablate", argv, {"grid": grid, "base": base, "seeds": seeds}, args.out)
    recorder.add_input(args.data)
    recorder.add_input(args.items)
    report = run_ablation(grid, base, seeds, args.data, args.items, args.out, max_workers=args.workers)
    path = os.path.join(args.out, "ablation.json")
    write_json(path, report)
    recorder.add_artifact("ablation", path)
    recorder.finish()
    print(render_ablation_table(report))
    return EXIT_OK


def _one_line(error: BaseException) -> str:
    return " ".join(str(error).split())


COMMANDS = {
    "synth": cmd_synth,
    "gen-hardneg": cmd_gen_hardneg,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Runs one subcommand. 0 ok, 1 usage, 2 data, 3 numerical."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        if not args.command:
            raise UsageError("missing subcommand; see `cecl --help`")
        return COMMANDS[args.command](args, argv)
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    except CeclError as e:
        print(f"cecl: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"cecl: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(dispatch())
