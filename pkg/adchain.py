"""
adchain - Generate regional ad filter lists from page execution graphs

Examples:
  python adchain.py synth --config synth.json --out crawl/
  python adchain.py validate --crawl-dir crawl/
  python adchain.py features --crawl-dir crawl/ --ground-truth crawl/ground_truth.json --out examples.jsonl
  python adchain.py train --data examples.jsonl --out model.json
  python adchain.py generate --crawl-dir crawl/ --lists easylist.txt,regional.txt \
    --model model.json --out rules.txt --report report.json

Exit codes: 0 success, 1 fatal input error, 2 completed with skipped pages.
"""

import argparse
import json
import logging
import sys
from datetime import date
from pathlib import Path

import config
from abp_rules import RuleSet, parse_list
from ad_oracle import (
    build_training_examples,
    evaluate_perceptual_only,
    load_examples,
    load_model,
    load_perceptual,
    save_examples,
    train_forest,
)
from domains import PublicSuffixTable
from forest import FeatureMismatchError, ForestConfig, TrainingError
from page_graph import load_graphml_file, validate_graphml_file
from pipeline import CrawlError, PipelineConfig, emit_report, ingest_crawl, run_pipeline
from synth_corpus import SynthConfig, load_ground_truth, synth_corpus

logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_SKIPS = 2


def load_lists(paths: str) -> RuleSet:
    """Parse comma-separated filter list files into one RuleSet"""
    rulesets = []
    for raw in paths.split(","):
        path = Path(raw.strip())
        if not raw.strip():
            continue
        rules = parse_list(path.read_text(encoding="utf-8", errors="replace"), source_name=path.name)
        logger.info(f"Loaded {path}: {rules.summary()}")
        rulesets.append(rules)
    return RuleSet.merge(rulesets)


def _iso_date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a YYYY-MM-DD date: {text!r}")


def cmd_generate(args) -> int:
    try:
        psl = PublicSuffixTable(args.psl) if args.psl else PublicSuffixTable.from_config()
        lists = load_lists(args.lists) if args.lists else RuleSet()
        model = load_model(Path(args.model)) if args.model else None
        manifest = ingest_crawl(Path(args.crawl_dir))
    except (OSError, ValueError, CrawlError) as e:
        logger.error(f"{e}")
        return EXIT_FATAL

    run_config = PipelineConfig(
        subtree_limit=args.subtree_limit,
        decision_threshold=args.threshold,
        jobs=args.jobs,
        title=args.title,
        generated_on=args.date,
    )
    if model is None:
        logger.warning("No model given; only filter-list ads will be chained")

    generated, report = run_pipeline(manifest, lists, model, run_config, psl)
    generated.write(Path(args.out))
    if args.report:
        Path(args.report).write_bytes(emit_report(report, "json"))
        logger.info(f"Report saved to {args.report}")
    if args.chains:
        Path(args.chains).write_text(report.chains_jsonl())
        logger.info(f"Chains saved to {args.chains}")

    print(emit_report(report, "table").decode("utf-8"))
    return EXIT_SKIPS if report.has_skips else EXIT_OK


def cmd_validate(args) -> int:
    try:
        manifest = ingest_crawl(Path(args.crawl_dir))
    except CrawlError as e:
        logger.error(f"{e}")
        return EXIT_FATAL

    print(f"\nValid pages ({len(manifest.pages)}):")
    print("-" * 60)
    for page in manifest.pages:
        summary = validate_graphml_file(page.graphml_path)
        print(f"  {page.key:30} {summary['nodes']:6} nodes {summary['edges']:6} edges {summary['requests']:5} requests")
    if manifest.skipped:
        print(f"\nSkipped pages ({len(manifest.skipped)}):")
        for skip in manifest.skipped:
            print(f"  {skip.key:30} {skip.reason}")
    print("-" * 60)
    return EXIT_SKIPS if manifest.skipped else EXIT_OK


def cmd_features(args) -> int:
    try:
        psl = PublicSuffixTable(args.psl) if args.psl else PublicSuffixTable.from_config()
        manifest = ingest_crawl(Path(args.crawl_dir))
        truth = load_ground_truth(Path(args.ground_truth))
    except (OSError, ValueError, CrawlError) as e:
        logger.error(f"{e}")
        return EXIT_FATAL

    examples = []
    for page in manifest.pages:
        labels = truth.get("pages", {}).get(page.key)
        if labels is None:
            logger.warning(f"No ground truth for {page.key}, skipping")
            continue
        g = load_graphml_file(page.graphml_path, page.final_url)
        examples.extend(build_training_examples(
            g, set(labels.get("ads", [])), load_perceptual(page.perceptual_path), psl, page.key,
        ))
    count = save_examples(examples, Path(args.out))
    logger.info(f"Wrote {count} labeled examples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        data = load_examples(Path(args.data))
        forest_config = ForestConfig(
            n_trees=args.trees,
            max_depth=args.max_depth,
            seed=args.seed,
            cv_folds=args.folds,
            recall_floor=args.recall_floor,
            decision_threshold=args.threshold,
            feature_names=tuple(args.features.split(",")) if args.features else None,
        )
        result = train_forest(data, forest_config)
    except (OSError, ValueError, TrainingError, FeatureMismatchError) as e:
        logger.error(f"{e}")
        return EXIT_FATAL

    result.model.save(Path(args.out))
    baseline = evaluate_perceptual_only(data)
    print(f"\n{'='*60}")
    print("TRAINING COMPLETE")
    print(f"{'='*60}")
    print(f"Examples: {len(data)}")
    print(f"CV precision: {result.cv.precision:.3f}")
    print(f"CV recall: {result.cv.recall:.3f}")
    print(f"CV accuracy: {result.cv.accuracy:.3f}")
    print(f"Decision threshold: {result.model.decision_threshold:.3f}")
    print(f"Perceptual-only precision/recall: {baseline.precision:.3f}/{baseline.recall:.3f}")
    for warning in result.warnings:
        print(f"Warning: {warning}")
    print(f"Model saved to: {args.out}")
    print(f"{'='*60}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        synth_config = SynthConfig.model_validate_json(Path(args.config).read_bytes()) if args.config else SynthConfig()
    except (OSError, ValueError) as e:
        logger.error(f"{e}")
        return EXIT_FATAL
    truth = synth_corpus(synth_config, Path(args.out))
    print(json.dumps({"pages": len(truth["pages"]),
                      "ads": sum(len(p["ads"]) for p in truth["pages"].values())}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Generate ad filter lists from page execution graphs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser('generate', help='Run the pipeline over a crawl directory')
    gen.add_argument('--crawl-dir', required=True, help='Crawl directory (<region>/<page-id>/...)')
    gen.add_argument('--lists', default='', help='Comma-separated ABP filter list files')
    gen.add_argument('--psl', default=None, help='public_suffix_list.dat (default: bundled snapshot)')
    gen.add_argument('--model', default=None, help='Forest model JSON from `train`')
    gen.add_argument('--out', required=True, help='Output ABP list file')
    gen.add_argument('--report', default=None, help='Output report.json')
    gen.add_argument('--chains', default=None, help='Output request chains as JSON lines')
    gen.add_argument('--threshold', type=float, default=config.DECISION_THRESHOLD,
                     help="Decision threshold (default: the model's)")
    gen.add_argument('--subtree-limit', type=int, default=config.SUBTREE_LIMIT,
                     help=f'Regions a blockable script may touch (default: {config.SUBTREE_LIMIT})')
    gen.add_argument('--jobs', type=int, default=config.JOBS, help=f'Worker threads (default: {config.JOBS})')
    gen.add_argument('--title', default='Regional ad rules', help='List title')
    gen.add_argument('--date', type=_iso_date, default=None, help='List header date, YYYY-MM-DD (default: today)')
    gen.set_defaults(func=cmd_generate)

    val = sub.add_parser('validate', help='Validate a crawl directory')
    val.add_argument('--crawl-dir', required=True)
    val.set_defaults(func=cmd_validate)

    feat = sub.add_parser('features', help='Extract labeled training examples from a crawl')
    feat.add_argument('--crawl-dir', required=True)
    feat.add_argument('--ground-truth', required=True, help='ground_truth.json with per-page ad URLs')
    feat.add_argument('--psl', default=None)
    feat.add_argument('--out', required=True, help='Output JSON lines')
    feat.set_defaults(func=cmd_features)

    train = sub.add_parser('train', help='Train the hybrid classifier')
    train.add_argument('--data', required=True, help='Labeled examples (JSON lines)')
    train.add_argument('--out', required=True, help='Output model file (JSON)')
    train.add_argument('--trees', type=int, default=config.N_TREES)
    train.add_argument('--max-depth', type=int, default=config.MAX_DEPTH)
    train.add_argument('--folds', type=int, default=config.CV_FOLDS)
    train.add_argument('--recall-floor', type=float, default=config.RECALL_FLOOR)
    train.add_argument('--threshold', type=float, default=config.DECISION_THRESHOLD,
                       help='Fixed decision threshold (default: chosen on CV folds)')
    train.add_argument('--features', default=None, help='Comma-separated feature subset (ablation)')
    train.add_argument('--seed', type=int, default=config.SEED)
    train.set_defaults(func=cmd_train)

    synth = sub.add_parser('synth', help='Write a synthetic crawl with planted ad chains')
    synth.add_argument('--config', default=None, help='SynthConfig JSON')
    synth.add_argument('--out', required=True, help='Output crawl directory')
    synth.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
