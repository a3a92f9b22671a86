"""Command-line entry points.

Subcommands: `config init`, `gen`, `train`, `eval`, `infer`, `diagnose`.
Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import corpusio, metrics as mx, model as mdl, train as tr
from .config import (
    ConfigError,
    RunConfig,
    _build,
    _to_jsonable,
    config_to_json,
    default_config,
    load_config,
)
from .corpusio import DataFormatError
from .inference import overlay_panoptic, overlay_patches, overlay_semantic, write_ppm
from .masks import GeometryError
from .scenes import CorpusConfig, LayoutError, generate_corpus, make_class_table
from .train import NumericError

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 means data error here, so remap."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_run_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = load_config(path) if path else default_config()
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def _read_corpus_with_config(path: str, cfg: RunConfig):
    """Corpus file facts (class table, held-out set, embedding width) override
    whatever the run config's corpus section says; the file records what was
    actually generated."""
    table, train_scenes, eval_scenes, header = corpusio.read_corpus(path)
    cfg.corpus = _build(CorpusConfig, dict(header["corpus_config"]), "corpus_config")
    cfg.validate()
    return table, train_scenes, eval_scenes


def _restore(path: str) -> tuple:
    state, dims, meta = corpusio.read_checkpoint(path)
    store = mdl.init_params(dims, seed=0)
    store.load_state_dict(state)
    return store, dims, meta


def _emit(report: dict, out: str | None) -> None:
    if out:
        corpusio.write_report(out, report)
    else:
        sys.stdout.write(corpusio.report_text(report))


def cmd_config(args) -> int:
    text = config_to_json(default_config())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen(args) -> int:
    cfg = _load_run_config(args.config, args.seed)
    table = make_class_table(cfg.corpus, cfg.seed)
    train_scenes = generate_corpus(cfg.corpus, table, cfg.seed, "train")
    eval_scenes = generate_corpus(cfg.corpus, table, cfg.seed, "eval")
    corpusio.write_corpus(
        args.out, table, train_scenes, eval_scenes,
        _to_jsonable(cfg.corpus), cfg.seed,
    )
    print(f"wrote {args.out}: {len(train_scenes)} train + {len(eval_scenes)} eval scenes")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.seed)
    table, train_scenes, _ = _read_corpus_with_config(args.corpus, cfg)
    log_path = args.log or args.out + ".log"
    with corpusio.LossLog(log_path) as log:
        store, vocab = tr.train(cfg, table, train_scenes, log=log.write)
    meta = {
        "seed": cfg.seed,
        "vocab": vocab,
        "config": _to_jsonable(cfg),
    }
    corpusio.write_checkpoint(args.out, store, cfg.model, meta)
    print(f"wrote {args.out} ({store.n_values()} parameters); loss log at {log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args.config, None)
    if args.kappa is not None:
        cfg.kappa = args.kappa
        cfg.validate()
    table, _, eval_scenes = _read_corpus_with_config(args.corpus, cfg)
    store, dims, _ = _restore(args.checkpoint)
    cfg.model = dims
    cfg.validate()
    report = tr.evaluate(
        store, eval_scenes, table, cfg, mode=args.mode, threads=args.threads
    )
    _emit(report, args.out)
    return 0


def cmd_infer(args) -> int:
    import os

    cfg = _load_run_config(args.config, None)
    table, train_scenes, eval_scenes = _read_corpus_with_config(args.corpus, cfg)
    scenes = train_scenes if args.split == "train" else eval_scenes
    if not 0 <= args.scene < len(scenes):
        raise DataFormatError(
            f"scene index {args.scene} outside the {args.split} split (size {len(scenes)})"
        )
    scene = scenes[args.scene]
    store, dims, _ = _restore(args.checkpoint)
    cfg.model = dims
    cfg.validate()
    result = tr.infer_scene(store, scene, table, cfg, mode=args.mode)

    os.makedirs(args.out, exist_ok=True)
    prefix = os.path.join(args.out, f"{args.split}{args.scene:04d}")
    colors = np.array([e.color for e in table.entries])
    write_ppm(prefix + "_patches.ppm", overlay_patches(scene.image, scene.patches))
    write_ppm(prefix + "_semantic.ppm", overlay_semantic(result.semantic_label, colors))
    write_ppm(prefix + "_panoptic.ppm", overlay_panoptic(result.panoptic, colors))

    pq, ap, miou = mx.PQAccumulator(), mx.APAccumulator(), mx.MIoUAccumulator()
    mx.add_scene_to_accumulators(result, scene, pq, ap, miou)
    report = {
        "split": args.split,
        "scene": args.scene,
        "mode": args.mode,
        "instances": [
            {"class": int(p.class_id), "score": round(float(p.score), 6),
             "area": p.mask.area}
            for p in result.instances
        ],
        "panoptic_segments": [
            {"id": s.segment_id, "class": int(s.class_id),
             "is_thing": bool(s.is_thing), "score": round(float(s.score), 6)}
            for s in result.panoptic.segments
        ],
        "scene_pq": pq.result()["pq"],
        "scene_miou": miou.result()["miou"],
    }
    corpusio.write_report(prefix + "_report.json", report)
    print(f"wrote {prefix}_{{patches,semantic,panoptic}}.ppm and {prefix}_report.json")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_run_config(args.config, None)
    table, train_scenes, eval_scenes = _read_corpus_with_config(args.corpus, cfg)
    report = {}
    for split, scenes in (("train", train_scenes), ("eval", eval_scenes)):
        if not scenes:
            continue
        report[split] = {
            "direct": mx.proposal_diagnostics(scenes, tau=cfg.tau).as_dict(),
            "merge_oracle": mx.proposal_diagnostics(
                scenes, tau=cfg.tau, merge_oracle=True
            ).as_dict(),
        }
    _emit(report, args.out)
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="affseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="emit a config file with full defaults")
    c.add_argument("action", choices=["init"])
    c.add_argument("--out", help="write here instead of stdout")
    c.set_defaults(fn=cmd_config)

    g = sub.add_parser("gen", help="generate a scene corpus file")
    g.add_argument("--config", help="run config (defaults used when omitted)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", required=True, help="corpus file to write")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train on a corpus, write a checkpoint")
    t.add_argument("--config", help="run config")
    t.add_argument("--corpus", required=True, help="corpus file")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", required=True, help="checkpoint file to write")
    t.add_argument("--log", help="loss log path (default: <out>.log)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    e.add_argument("--config", help="run config")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=["closed", "open"], default="closed")
    e.add_argument("--kappa", type=float, help="override the fusion exponent")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--out", help="report file (stdout when omitted)")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="run one scene, write overlays and a report")
    i.add_argument("--config", help="run config")
    i.add_argument("--corpus", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", type=int, default=0, help="scene index in the split")
    i.add_argument("--split", choices=["train", "eval"], default="eval")
    i.add_argument("--mode", choices=["closed", "open"], default="closed")
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(fn=cmd_infer)

    d = sub.add_parser("diagnose", help="proposal pool quality report")
    d.add_argument("--config", help="run config")
    d.add_argument("--corpus", required=True)
    d.add_argument("--out", help="report file (stdout when omitted)")
    d.set_defaults(fn=cmd_diagnose)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataFormatError, GeometryError, LayoutError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
