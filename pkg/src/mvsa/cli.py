"""Command-line entry point: data synthesis, training, extraction, evaluation.

Subcommands: synth-data, featurize, train, extract, eval-id, eval-ver,
mask, report, param-count.  Exit codes: 0 success, 1 usage error,
2 data/format error, 3 numeric failure.  Every training run directory gets
a manifest (config snapshot, seed, corpus content hash, artifact paths)
written before the first step, sufficient to reproduce the run exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass

from . import __version__
from .config import format_config, load_config
from .errors import ConfigError, DataError, MvsaError, NumericError, ShapeError, UsageError
from .evaluation import (
    evaluate_identification,
    evaluate_verification,
    read_metrics_log,
    render_report,
    write_scores,
)
from .features import (
    FeatureMatrix,
    cmvn,
    mel_features,
    read_feature_records,
    read_trials,
    read_wav,
    synth_corpus,
    write_feature_records,
    write_trials,
)
from .masks import WindowSchedule, build_mask_set, receptive_field_bounds, render_mask_grid, render_mask_rows
from .training import train
from .variants import count_parameters, load_model


@dataclass
class RunManifest:
    """Everything needed to reproduce one training run bit for bit."""

    config_text: str
    seed: int
    corpus_fingerprint: str
    artifacts: dict[str, str]
    tool_version: str

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def corpus_fingerprint(paths: list[str]) -> str:
    """sha256 over the raw bytes of the data files, in sorted path order."""
    digest = hashlib.sha256()
    for path in sorted(str(p) for p in paths):
        digest.update(os.path.basename(path).encode("utf-8"))
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions, not sys.exit(2)."""

    def error(self, message):
        raise UsageError(message)


def _feature_paths(path: str) -> list[str]:
    if os.path.isdir(path):
        found = sorted(
            os.path.join(path, name) for name in os.listdir(path) if name.endswith(".feat")
        )
        if not found:
            raise DataError(f"no .feat files under {path}")
        return found
    if not os.path.exists(path):
        raise DataError(f"no such feature file: {path}")
    return [path]


def _load_features(path: str) -> list[FeatureMatrix]:
    mats: list[FeatureMatrix] = []
    for p in _feature_paths(path):
        mats.extend(read_feature_records(p))
    return mats


def _cmd_synth_data(args) -> int:
    corpus = synth_corpus(
        n_speakers=args.speakers,
        utts_per_speaker=args.utts,
        frames_per_utt=args.frames,
        seed=args.seed,
        jitter_scale=args.jitter,
        test_fraction=args.test_fraction,
    )
    os.makedirs(args.out, exist_ok=True)
    write_feature_records(os.path.join(args.out, "train.feat"), corpus.train)
    write_feature_records(os.path.join(args.out, "test.feat"), corpus.test)
    write_trials(os.path.join(args.out, "trials.txt"), corpus.trials)
    print(
        f"wrote {len(corpus.train)} train and {len(corpus.test)} test utterances "
        f"({len(corpus.speakers)} speakers), {len(corpus.trials)} trials -> {args.out}"
    )
    return 0


def _cmd_featurize(args) -> int:
    if os.path.isdir(args.wav):
        wavs = sorted(
            os.path.join(args.wav, name) for name in os.listdir(args.wav) if name.lower().endswith(".wav")
        )
        if not wavs:
            raise DataError(f"no .wav files under {args.wav}")
    else:
        wavs = [args.wav]
    mats = []
    for path in wavs:
        utt = os.path.splitext(os.path.basename(path))[0]
        mat = mel_features(read_wav(path), utterance_id=utt)
        if not args.no_cmvn:
            mat.frames = cmvn(mat.frames)
        mats.append(mat)
    write_feature_records(args.out, mats)
    print(f"featurized {len(mats)} utterances -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config)
    train_path = os.path.join(args.data, "train.feat") if os.path.isdir(args.data) else args.data
    if not os.path.exists(train_path):
        raise DataError(f"no training data at {train_path}")
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(
        config_text=format_config(config),
        seed=args.seed,
        corpus_fingerprint=corpus_fingerprint([train_path]),
        artifacts={
            "checkpoint": os.path.join(args.out, "checkpoint.mvsa"),
            "metrics_log": os.path.join(args.out, "metrics.log"),
        },
        tool_version=__version__,
    )
    manifest.write(os.path.join(args.out, "manifest.json"))
    result = train(config, read_feature_records(train_path), seed=args.seed, out_dir=args.out)
    print(result.metrics_lines[-1])
    print(f"checkpoint -> {result.checkpoint_path}")
    return 0


def _cmd_extract(args) -> int:
    model, _ = load_model(args.checkpoint)
    mats = _load_features(args.features)
    from .evaluation import extract_embeddings

    embeddings = extract_embeddings(model, mats)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for mat in mats:
            vec = embeddings[mat.utterance_id]
            fh.write(mat.utterance_id + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")
    print(f"extracted {len(embeddings)} embeddings -> {args.out}")
    return 0


def _cmd_eval_id(args) -> int:
    model, extras = load_model(args.checkpoint)
    if "speakers" not in extras:
        raise DataError("checkpoint does not carry a speaker table; cannot score identification")
    speakers = extras["speakers"].split(",")
    data_path = os.path.join(args.data, "test.feat") if os.path.isdir(args.data) else args.data
    mats = _load_features(data_path)
    acc = evaluate_identification(model, mats, speakers)
    print(f"acc={acc!r} utterances={len(mats)}")
    return 0


def _cmd_eval_ver(args) -> int:
    model, _ = load_model(args.checkpoint)
    trials = read_trials(args.trials)
    mats = _load_features(args.features)
    features = {mat.utterance_id: mat for mat in mats}
    value, threshold, scored = evaluate_verification(model, features, trials)
    if args.scores:
        write_scores(args.scores, scored)
    print(f"eer={value!r} threshold={threshold!r} trials={len(scored)}")
    return 0


def _cmd_mask(args) -> int:
    schedule = WindowSchedule.exponential(args.heads)
    mask_set = build_mask_set(
        schedule, args.steps, cls_index=args.cls_index, cls_policy=args.cls_policy
    )
    print(render_mask_grid(mask_set, schedule))
    lo, hi = receptive_field_bounds(args.layer, schedule)
    print(f"layer={args.layer} receptive_field_min={lo} receptive_field_max={hi}")
    if args.rows:
        print(render_mask_rows(mask_set, schedule))
    return 0


def _cmd_report(args) -> int:
    columns = read_metrics_log(args.metrics_log)
    if not columns["step"]:
        raise DataError(f"{args.metrics_log} holds no metrics lines")
    render_report(columns, args.out)
    print(f"report -> {args.out}")
    return 0


def _cmd_param_count(args) -> int:
    config = load_config(args.config)
    total, breakdown = count_parameters(config.model)
    for module in sorted(breakdown):
        print(f"{module:10s} {breakdown[module]:>12,}")
    print(f"{'total':10s} {total:>12,}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="mvsa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mvsa {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth-data", help="generate the synthetic speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=20)
    p.add_argument("--utts", type=int, default=50)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("featurize", help="mel-filterbank features from WAV files")
    p.add_argument("--wav", required=True, help="a .wav file or a directory of them")
    p.add_argument("--out", required=True, help="output .feat file")
    p.add_argument("--no-cmvn", action="store_true")
    p.set_defaults(func=_cmd_featurize)

    p = sub.add_parser("train", help="train a speaker classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="data directory (train.feat) or a .feat file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("extract", help="write embeddings as id TAB floats")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("eval-id", help="closed-set identification accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval_id)

    p = sub.add_parser("eval-ver", help="verification equal error rate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--scores", default=None, help="optional score-file output")
    p.set_defaults(func=_cmd_eval_ver)

    p = sub.add_parser("mask", help="inspect per-head attention masks")
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--cls-index", type=int, default=None)
    p.add_argument("--cls-policy", choices=("windowed", "global"), default="windowed")
    p.add_argument("--rows", action="store_true", help="also print machine-readable rows")
    p.set_defaults(func=_cmd_mask)

    p = sub.add_parser("report", help="render metrics-log curves to SVG")
    p.add_argument("--metrics-log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("param-count", help="model size for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_param_count)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except MvsaError as exc:  # safety net for any future subclass
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
