"""Command-line entry point: ``nsva curate|generate|train|eval|caption|ablate``.

Every command writes into the run directory given by ``--out`` and finishes by
writing ``manifest.json`` there: the resolved configuration, its hash, the seed,
sha256 hashes of the inputs and of every output file, and the outcome of the
command's checks.  The exit status is 0 only when every check passed, 1 when a
check failed, and 2 for usage or input errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from . import __version__
from . import harness as H
from .config import ConfigError, build, config_hash, read_sections
from .curation import CorpusError, assign_splits, build_vocabulary, corpus_stats, curate, load_patterns, write_records
from .features import iou
from .metrics import MetricError, caption_report, sequence_corpus
from .model import write_decodes
from .report import (format_table, plot_ablation, plot_loss_curve, plot_metric_bars, schema_errors, write_json,
                     write_table)
from .synth import SynthConfig, generate_corpus, hash_tree, read_corpus, render, write_corpus
from .text import tokenize

log = logging.getLogger("nsva")

SECTIONS = ("synth", "run", "ablate")
CAPTION_METRICS = ("bleu", "rouge", "cider", "meteor")


@dataclass(frozen=True)
class AblateConfig:
    rows: tuple[str, ...] = H.ABLATION_ROWS
    seeds: tuple[int, ...] = (0, 1, 2)
    width: int = 1
    decode: bool = True


class CommandError(Exception):
    """Bad input detected after argument parsing (exit status 2)."""


@dataclass
class Outcome:
    config: dict
    seed: int | None
    checks: dict = dataclasses.field(default_factory=dict)
    inputs: dict = dataclasses.field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.checks.values())


# -- helpers ---------------------------------------------------------------------------------------
def _sha_inputs(*paths) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            out[p.name] = config_hash(hash_tree(p))
        else:
            out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _sections(args) -> dict[str, dict[str, str]]:
    return read_sections(args.config, SECTIONS)


def _synth_config(sections, seed) -> SynthConfig:
    cfg = build(SynthConfig, sections["synth"], "synth")
    return replace(cfg, seed=seed) if seed is not None else cfg


def _run_config(sections, seed) -> H.RunConfig:
    run = build(H.RunConfig, sections["run"], "run")
    return replace(run, seed=seed) if seed is not None else run


def _load_corpus(args, sections):
    if args.corpus:
        path = Path(args.corpus)
        if not (path / "corpus.json").exists():
            raise CommandError(f"{path} is not a corpus directory (run `nsva generate` first)")
        return read_corpus(path)
    return generate_corpus(_synth_config(sections, args.seed))


def write_manifest(out: Path, command: str, outcome: Outcome) -> dict:
    manifest = {
        "command": command,
        "version": __version__,
        "config": outcome.config,
        "config_hash": config_hash(outcome.config),
        "seed": outcome.seed,
        "inputs": outcome.inputs,
        "outputs": hash_tree(out),
        "checks": {k: bool(v) for k, v in outcome.checks.items()},
        "passed": outcome.passed,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def _print_checks(checks: dict) -> None:
    for name, ok in checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")


# -- commands ----------------------------------------------------------------------------------------
def cmd_generate(args, out: Path) -> Outcome:
    cfg = _synth_config(_sections(args), args.seed)
    corpus = generate_corpus(cfg)
    write_corpus(corpus, out, frames=not args.no_frames)
    worst = 1.0
    for scene in corpus.scenes:
        clip = render(scene, corpus.roster, cfg)
        for det, truth in zip(clip.detections, clip.ball_truth):
            if det.ball is not None:
                worst = min(worst, iou(det.ball, truth))
    stats = [{"clips": len(corpus.scenes), "records": len(corpus.raw_records), "games": len(corpus.schedule),
              "planted_cumulative": corpus.planted, "min_ball_track_iou": round(worst, 6)}]
    write_table(out / "generate_stats.tsv", stats)
    print(format_table(stats))
    checks = {"event_count": len(corpus.scenes) == cfg.games * cfg.events_per_game,
              "ball_track_iou_above_0.5": worst > 0.5}
    return Outcome({"synth": cfg.to_json()}, cfg.seed, checks)


def cmd_curate(args, out: Path) -> Outcome:
    sections = _sections(args)
    corpus = _load_corpus(args, sections)
    seed = corpus.config.seed if args.seed is None else args.seed
    try:
        records = curate(corpus.raw_records, roster=corpus.roster.names())
    except CorpusError as exc:
        raise CommandError(str(exc)) from exc
    splits = assign_splits(corpus.schedule, seed=seed)
    write_records(out / "records.jsonl", records)
    write_json(out / "splits.json", splits.to_json())
    build_vocabulary(records).save(out / "vocab.json")
    stats = corpus_stats(records, splits)
    rows = [{"split": "all", **{k: stats[k] for k in ("videos", "sentences", "games", "hours", "avg_words")}}]
    rows += [{"split": s, **b} for s, b in stats["splits"].items()]
    write_table(out / "stats.tsv", rows)
    print(format_table(rows))
    patterns = load_patterns()
    checks = {
        "matchups_in_train": not splits.violations(corpus.schedule),
        "no_cumulative_stats": not any(p.search(r.caption) for r in records for p in patterns),
        "one_record_per_clip": len({r.clip_id for r in records}) == len(records),
    }
    return Outcome({"synth": corpus.config.to_json(), "split_seed": seed}, seed, checks,
                   _sha_inputs(args.corpus) if args.corpus else {})


def cmd_train(args, out: Path) -> Outcome:
    sections = _sections(args)
    run = _run_config(sections, args.seed)
    corpus = _load_corpus(args, sections)
    prep = H.prepare(corpus, run.model_dim, run.heads, run.ff_dim, run.backbone_seed)
    train_data = H.make_split(prep, run, "train", limit=run.train_limit)
    val_data = H.make_split(prep, run, run.eval_split)
    try:
        result = H.train(run, prep, train_data, val_data if len(val_data) else None, out_dir=out)
    except H.TrainingAborted as exc:
        log.error("%s", exc)
        return Outcome({"synth": corpus.config.to_json(), "run": run.to_json()}, run.seed,
                       {"finite_loss": False})
    H.save_checkpoint(out, result.model, run)
    write_table(out / "history.csv", result.history, ["epoch", "step", "lr", "loss", "val_loss"])
    plot_loss_curve(result.history, out / "loss.png", f"{run.task} / {run.streams}")
    last = result.history[-1]
    print(format_table([{"epochs": last["epoch"], "steps": result.steps, "loss": last["loss"],
                         "val_loss": last.get("val_loss")}]))
    checks = {"finite_loss": True}
    if run.stop_loss is not None:
        checks["stop_loss_reached"] = last["loss"] < run.stop_loss
    return Outcome({"synth": corpus.config.to_json(), "run": run.to_json()}, run.seed, checks,
                   _sha_inputs(args.corpus) if args.corpus else {})


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CommandError(f"{path}:{n}: {exc}") from exc
    return rows


def _as_tokens(row: dict, path) -> list[list[str]]:
    """All token sequences in a JSONL row: ``tokens``/``text`` for one, ``references`` for several."""
    if "references" in row:
        return [r if isinstance(r, list) else tokenize(r) for r in row["references"]]
    if "tokens" in row:
        return [list(map(str, row["tokens"]))]
    if "text" in row:
        return [tokenize(row["text"])]
    raise CommandError(f"{path}: row {row.get('id')!r} has none of tokens/text/references")


def metrics_report(cand_path, ref_path, which) -> dict:
    cands, refs = _read_jsonl(cand_path), _read_jsonl(ref_path)
    if not cands:
        raise CommandError(f"{cand_path}: no candidates")
    by_id = {}
    for r in refs:
        by_id.setdefault(str(r.get("id")), []).extend(_as_tokens(r, ref_path))
    missing = [str(c.get("id")) for c in cands if str(c.get("id")) not in by_id]
    if missing:
        raise CommandError(f"no references for ids {missing[:5]}")
    cand_tokens = [_as_tokens(c, cand_path)[0] for c in cands]
    ref_tokens = [by_id[str(c.get("id"))] for c in cands]
    metrics = {}
    try:
        cap = [m for m in which if m in CAPTION_METRICS]
        if cap:
            metrics.update(caption_report(cand_tokens, ref_tokens, cap))
        if "seq" in which:
            metrics.update(sequence_corpus(cand_tokens, [r[0] for r in ref_tokens]))
    except MetricError as exc:
        raise CommandError(str(exc)) from exc
    return {"task": "text", "clips": len(cands), "metrics": metrics}


def _metric_names(text: str) -> list[str]:
    names = [m.strip().lower() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in CAPTION_METRICS + ("seq",)]
    if bad or not names:
        raise CommandError(f"unknown metrics {bad}; choose from {', '.join(CAPTION_METRICS + ('seq',))}")
    return names


def _finish_report(report: dict, out: Path, title: str) -> dict:
    write_json(out / "report.json", report)
    rows = [{"metric": k, "value": v} for k, v in report["metrics"].items()]
    write_table(out / "metrics.tsv", rows)
    plot_metric_bars(report["metrics"], out / "metrics.png", title)
    print(format_table(rows))
    errors = schema_errors(report)
    for e in errors:
        log.error("report schema: %s", e)
    return {"schema_valid": not errors}


def cmd_eval(args, out: Path) -> Outcome:
    if args.candidates or args.references:
        if not (args.candidates and args.references):
            raise CommandError("--candidates and --references go together")
        which = _metric_names(args.metrics)
        report = metrics_report(args.candidates, args.references, which)
        checks = _finish_report(report, out, "metrics")
        return Outcome({"metrics": which}, args.seed, checks, _sha_inputs(args.candidates, args.references))
    if not args.checkpoint:
        raise CommandError("eval needs --checkpoint (or --candidates/--references)")
    model, run = H.load_checkpoint(args.checkpoint)
    task = args.task or run.task
    width = args.beam or run.beam
    split = args.split or run.eval_split
    sections = _sections(args)
    corpus = _load_corpus(args, sections)
    prep = H.prepare(corpus, run.model_dim, run.heads, run.ff_dim, run.backbone_seed)
    data = H.make_split(prep, replace(run, task=task) if task in model.heads else run, split)
    if len(data) == 0:
        raise CommandError(f"split {split!r} is empty")
    try:
        decodes = H.decode_split(model, data, task, width)
    except KeyError as exc:
        raise CommandError(str(exc.args[0])) from exc
    report = H.evaluate(model, data, task, width, split, decodes)
    write_decodes(out / "decodes.jsonl", decodes)
    checks = _finish_report(report, out, f"{task} / {split} / beam {width}")
    print(f"log-prob sums: {report['logprob_sums']}")
    cfg = {"synth": corpus.config.to_json(), "run": run.to_json(), "task": task, "beam": width, "split": split}
    return Outcome(cfg, run.seed, checks, _sha_inputs(args.checkpoint, args.corpus))


def cmd_caption(args, out: Path) -> Outcome:
    if not args.checkpoint:
        raise CommandError("caption needs --checkpoint")
    model, run = H.load_checkpoint(args.checkpoint)
    if "caption" not in model.heads:
        raise CommandError(f"checkpoint has no caption head (has {sorted(model.heads)})")
    width = args.beam or run.beam
    corpus = _load_corpus(args, _sections(args))
    prep = H.prepare(corpus, run.model_dim, run.heads, run.ff_dim, run.backbone_seed)
    if args.clips:
        wanted = [c.strip() for c in args.clips.split(",") if c.strip()]
        known = {r.clip_id: r for r in prep.records}
        unknown = [c for c in wanted if c not in known]
        if unknown:
            raise CommandError(f"unknown clip ids {unknown}")
        data = H.make_split(prep, run, records=[known[c] for c in wanted])
    else:
        data = H.make_split(prep, run, args.split or run.eval_split)
    decodes = H.decode_split(model, data, "caption", width)
    rows = [{"clip_id": d.clip_id, "caption": " ".join(d.tokens), "reference": " ".join(ref), "score": d.score}
            for d, ref in zip(decodes, data.references)]
    write_table(out / "captions.tsv", rows)
    print(format_table(rows, ["clip_id", "caption", "reference"]))
    checks = {"all_decodes_nonempty": all(d.tokens for d in decodes)}
    cfg = {"synth": corpus.config.to_json(), "run": run.to_json(), "beam": width,
           "clips": [d.clip_id for d in decodes]}
    return Outcome(cfg, run.seed, checks, _sha_inputs(args.checkpoint, args.corpus))


def cmd_ablate(args, out: Path) -> Outcome:
    sections = _sections(args)
    base = _run_config(sections, args.seed)
    abl = build(AblateConfig, sections["ablate"], "ablate")
    if not abl.rows or not abl.seeds:
        raise CommandError("[ablate] needs at least one row and one seed")
    labels = ["+".join(H.parse_streams(r)) for r in abl.rows]
    corpus = _load_corpus(args, sections)
    prep = H.prepare(corpus, base.model_dim, base.heads, base.ff_dim, base.backbone_seed)
    rows = H.ablate(labels, base, prep, abl.seeds, abl.width, abl.decode)
    summaries = [r.summary() for r in rows]
    write_table(out / "ablation.tsv", summaries)
    per_seed = [{"row": r.label, "seed": s, "val_loss": r.val_loss[i],
                 "distance_acc": r.distance_accuracy[i] if i < len(r.distance_accuracy) else None}
                for r in rows for i, s in enumerate(r.seeds)]
    write_table(out / "ablation_seeds.tsv", per_seed)
    plot_ablation(summaries, out / "ablation.png")
    cols = [c for c in ("row", "val_loss", "val_loss_std", "distance_acc", "B@4", "C") if c in summaries[0]]
    print(format_table(summaries, cols))
    found = H.ablation_checks(rows)
    write_json(out / "checks.json", found)
    checks = {k: v for k, v in found.items() if isinstance(v, bool)}
    cfg = {"synth": corpus.config.to_json(), "run": base.to_json(), "ablate": dataclasses.asdict(abl)}
    return Outcome(cfg, base.seed, checks, _sha_inputs(args.corpus) if args.corpus else {})


COMMANDS: dict[str, Callable] = {
    "generate": cmd_generate, "curate": cmd_curate, "train": cmd_train,
    "eval": cmd_eval, "caption": cmd_caption, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsva", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", help="INI config file with [synth], [run], [ablate] sections")
        p.add_argument("--seed", type=int, help="overrides the seed in [synth] and [run]")
        p.add_argument("--out", required=True, help="run directory")
        if corpus:
            p.add_argument("--corpus", help="corpus directory from `nsva generate` (default: generate from [synth])")
        return p

    g = common(sub.add_parser("generate", help="render a synthetic corpus"), corpus=False)
    g.add_argument("--no-frames", action="store_true", help="skip writing rendered frames")
    common(sub.add_parser("curate", help="clean, merge and split play-by-play records"))
    common(sub.add_parser("train", help="train one model"))
    e = common(sub.add_parser("eval", help="evaluate a checkpoint, or score JSONL candidates"))
    e.add_argument("--checkpoint", help="run directory written by `nsva train`")
    e.add_argument("--task", choices=("caption", "action", "identity"))
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--beam", type=int)
    e.add_argument("--candidates", help="JSONL rows {id, text|tokens}")
    e.add_argument("--references", help="JSONL rows {id, text|tokens|references}")
    e.add_argument("--metrics", default="bleu,rouge,cider,meteor", help="comma list of bleu,rouge,cider,meteor,seq")
    c = common(sub.add_parser("caption", help="caption clips with a trained checkpoint"))
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--clips", help="comma-separated clip ids (default: the evaluation split)")
    c.add_argument("--split", choices=("train", "val", "test"))
    c.add_argument("--beam", type=int)
    common(sub.add_parser("ablate", help="train and compare feature-stream configurations"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out)
    if (out / "manifest.json").exists() or (out.exists() and any(out.iterdir()) and args.command == "generate"):
        log.warning("overwriting files in %s", out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        outcome = COMMANDS[args.command](args, out)
    except (CommandError, ConfigError, OSError) as exc:
        print(f"nsva {args.command}: error: {exc}", file=sys.stderr)
        return 2
    write_manifest(out, args.command, outcome)
    _print_checks(outcome.checks)
    return 0 if outcome.passed else 1


if __name__ == "__main__":
    sys.exit(main())
