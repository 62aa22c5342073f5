"""``adaact`` command line: datagen, train, segment, align, eval.

A configuration error exits with status 2, any other failure with 1.
``ADAACT_LOG`` sets the log level (``error``, ``info`` or ``debug``); debug
also turns on the non-finite checks in the autodiff engine.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import RunConfigError, load_run_config
from .data import generate_corpus, load_corpus, read_action_map, save_corpus
from .decode import InfeasibleError
from .metrics import evaluate_files, format_segmentation_line, write_report
from .train import AdaAct, ConfigError, TrainState, load_checkpoint, save_checkpoint, train_epoch

log = logging.getLogger("adaact")

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("ADAACT_LOG", "info").lower()
    if name not in _LEVELS:
        raise RunConfigError(f"ADAACT_LOG must be one of {sorted(_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def _run_config(args):
    rc = load_run_config(args.config, args.set or (), args.seed)
    log.info("resolved config: %s", json.dumps(rc.resolved(), sort_keys=True))
    return rc


# --------------------------------------------------------------------------- commands


def cmd_datagen(args) -> int:
    rc = _run_config(args)
    corpus = generate_corpus(rc.synth)
    save_corpus(corpus, args.out)
    log.info("wrote %d videos to %s", len(corpus.videos), args.out)
    return 0


def _write_log(path: Path, state: TrainState) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "skipped"])
        for r in state.history:
            w.writerow([r.epoch, repr(r.mean_loss), r.skipped])


def cmd_train(args) -> int:
    rc = _run_config(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    if args.resume:
        explicit = {k: getattr(rc.train, k) for k in rc.explicit_train_keys()}
        state = load_checkpoint(args.resume, explicit)
        state.model.cfg.validate()
    else:
        videos = corpus.train
        if not videos:
            raise ConfigError("training corpus is empty")
        model = AdaAct(rc.train, videos[0].X.shape[1], corpus.embedding_dim, len(corpus.actions))
        model.init_decoding_state(videos)
        state = TrainState(model)
    cfg = state.model.cfg
    while state.epoch < cfg.epochs:
        train_epoch(corpus.train, state)
        _write_log(log_path, state)
    _write_log(log_path, state)
    save_checkpoint(out, state)
    log.info("checkpoint written to %s after %d epochs", out, state.epoch)
    return 0


# per-worker model for --jobs; set before the pool forks
_WORKER: dict = {}


def _decode_one(i: int):
    model, videos, mode = _WORKER["model"], _WORKER["videos"], _WORKER["mode"]
    v = videos[i]
    try:
        if mode == "align":
            seg, score = model.align(v)
        else:
            _, seg, score = model.segment(v)
    except InfeasibleError as exc:
        return v.video_id, None, str(exc)
    return v.video_id, seg.segments, score


def _decode(args, mode: str) -> int:
    state = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    videos = corpus.videos if args.split == "all" else corpus.subset(args.split)
    if not videos:
        raise ConfigError(f"no videos in split {args.split!r}")
    _WORKER.update(model=state.model, videos=videos, mode=mode)
    idx = range(len(videos))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_decode_one, idx))
    else:
        results = [_decode_one(i) for i in idx]
    lines, footer, failed = [], [], 0
    for vid, segs, score in results:
        if segs is None:
            log.error("%s: %s", vid, score)
            failed += 1
            continue
        lines.append(format_segmentation_line(vid, segs, corpus.actions))
        footer.append(f"# score\t{vid}\t{score!r}")
    Path(args.out).write_text("\n".join(lines + footer) + "\n", encoding="utf-8")
    log.info("%s: wrote %d videos to %s", mode, len(lines), args.out)
    return 1 if failed else 0


def cmd_segment(args) -> int:
    return _decode(args, "segment")


def cmd_align(args) -> int:
    return _decode(args, "align")


def cmd_eval(args) -> int:
    gt_dir = Path(args.gt)
    actions_path = Path(args.actions) if args.actions else gt_dir.parent / "actions.txt"
    names = read_action_map(actions_path)
    report = evaluate_files(args.pred, gt_dir, names, tuple(args.background))
    if args.out:
        write_report(args.out, report)
    else:
        print(json.dumps(report, indent=2))
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaact", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")

    sp = sub.add_parser("datagen", help="write the synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True, help="output corpus directory")
    sp.set_defaults(func=cmd_datagen)

    sp = sub.add_parser("train", help="train on the corpus's train split")
    common(sp)
    sp.add_argument("corpus")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.set_defaults(func=cmd_train)

    for name, fn in (("segment", cmd_segment), ("align", cmd_align)):
        sp = sub.add_parser(name, help=f"{name} every video of a split")
        sp.add_argument("checkpoint")
        sp.add_argument("corpus")
        sp.add_argument("--out", required=True, help="segmentation file")
        sp.add_argument("--split", default="test", choices=("train", "test", "all"))
        sp.add_argument("--jobs", type=int, default=1)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("eval", help="score a segmentation file against ground truth")
    sp.add_argument("pred")
    sp.add_argument("gt", help="directory of per-video frame label files")
    sp.add_argument("--actions", help="action map (default: <gt>/../actions.txt)")
    sp.add_argument("--background", nargs="*", default=["SIL"])
    sp.add_argument("--out", help="report JSON (default: stdout)")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (RunConfigError, ConfigError) as exc:
        print(f"adaact: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("traceback", exc_info=True)
        print(f"adaact: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
