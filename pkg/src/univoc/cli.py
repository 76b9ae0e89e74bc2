"""Command-line entry points.

One executable, one subcommand per workflow stage: feature extraction,
training, synthesis, speaker-similarity selection, listening-test planning,
the rating service, and analysis.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dsp import (
    MelConfig,
    extract_mel,
    load_mel,
    load_wav,
    save_mel,
    save_wav,
    AudioBuffer,
)
from .errors import ConfigError, InputError, UnivocError
from .evalservice import Service, export_ratings
from .evalstats import analyze, load_plan, plan_sessions, save_plan
from .model import ModelConfig, load_checkpoint
from .simselect import fit_gmm, gmm_kld, load_gmm, save_gmm, select_anchor
from .synthesis import generate
from .training import TrainConfig, load_manifest, train

log = logging.getLogger(__name__)


def _load_json_config(path, cls, what):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {what} config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{what} config {path} must hold a JSON object")
    known = set(cls.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{what} config {path}: unknown keys {sorted(unknown)}")
    return cls(**payload)


def _mel_config(args) -> MelConfig:
    if getattr(args, "mel_config", None):
        return _load_json_config(args.mel_config, MelConfig, "mel")
    return MelConfig()


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_mel_extract(args) -> int:
    audio = load_wav(args.input)
    mel = extract_mel(audio, _mel_config(args))
    save_mel(args.out, mel)
    print(f"{args.out}: {mel.frames.shape[0]} frames x {mel.frames.shape[1]} bands")
    return 0


def _cmd_train(args) -> int:
    model_config = _load_json_config(args.model_config, ModelConfig, "model")
    train_config = (_load_json_config(args.train_config, TrainConfig, "train")
                    if args.train_config else TrainConfig())
    mel_config = _mel_config(args)
    manifest = load_manifest(args.manifest, per_speaker_cap=args.per_speaker_cap)
    result = train(manifest, model_config, mel_config, train_config, args.out)
    final = result.checkpoint_paths[-1]
    if result.losses:
        print(f"trained {len(result.losses)} steps; "
              f"final loss {result.losses[-1]:.4f} nats; checkpoint {final}")
    else:
        print(f"wrote initial checkpoint {final}")
    return 0


def _cmd_synthesize(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    in_path = Path(args.input)
    if in_path.suffix == ".mel":
        mel = load_mel(in_path)
    else:
        if meta.get("mel") is None:
            raise ConfigError(
                "checkpoint stores no mel settings; pass a .mel feature file"
            )
        mel = extract_mel(load_wav(in_path), MelConfig(**meta["mel"]))
    samples = generate(mel, params, seed=args.seed,
                       temperature=args.temperature, argmax=args.argmax)
    rate = meta["mel"]["sample_rate"] if meta.get("mel") else 24000
    save_wav(args.out, AudioBuffer(samples, rate))
    print(f"{args.out}: {samples.shape[0]} samples at {rate} Hz")
    return 0


def _cmd_gmm_fit(args) -> int:
    feature_files = sorted(Path(args.features_dir).glob("*.mel"))
    if not feature_files:
        raise InputError(f"no .mel files under {args.features_dir}")
    frames = np.vstack([load_mel(p).frames for p in feature_files])
    gmm = fit_gmm(frames, k=args.k, seed=args.seed)
    save_gmm(args.out, gmm)
    print(f"{args.out}: {gmm.n_components} components over "
          f"{frames.shape[0]} frames ({len(feature_files)} files)")
    return 0


def _cmd_kld(args) -> int:
    est = gmm_kld(load_gmm(args.p), load_gmm(args.q),
                  n_samples=args.samples, seed=args.seed)
    print(json.dumps({"nats": est.nats, "stderr": est.stderr,
                      "n_samples": est.n_samples}))
    return 0


def _cmd_anchor_select(args) -> int:
    target = load_gmm(args.target)
    candidate_files = sorted(Path(args.candidates).glob("*.json"))
    if not candidate_files:
        raise InputError(f"no candidate .json files under {args.candidates}")
    candidates = {p.stem: load_gmm(p) for p in candidate_files}
    sel = select_anchor(target, candidates, n_samples=args.samples,
                        seed=args.seed)
    table = {
        "selected": sel.selected,
        "divergences": {name: {"nats": e.nats, "stderr": e.stderr,
                               "n_samples": e.n_samples}
                        for name, e in sel.divergences.items()},
    }
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=1), encoding="utf-8")
    ordered = sorted(sel.divergences.items(), key=lambda kv: kv[1].nats)
    for name, est in ordered:
        marker = " <- selected" if name == sel.selected else ""
        print(f"{name}: {est.nats:.2f} nats (se {est.stderr:.3f}){marker}")
    return 0


def _cmd_mushra_plan(args) -> int:
    if (args.utts is None) == (args.utt_file is None):
        raise ConfigError("give exactly one of --utts or --utt-file")
    if args.utts is not None:
        utts = [f"utt{i:04d}" for i in range(args.utts)]
    else:
        utts = [l.strip() for l in
                Path(args.utt_file).read_text(encoding="utf-8").splitlines()
                if l.strip()]
    systems = [s.strip() for s in args.systems.split(",") if s.strip()]
    plan = plan_sessions(utts, systems, listeners=args.listeners,
                         ratings_per_utt=args.per_utt,
                         screens_per_listener=args.screens, seed=args.seed,
                         natural_id=args.natural_id)
    save_plan(args.out, plan)
    print(f"{args.out}: {len(plan.listeners)} listeners x "
          f"{args.screens} screens over {len(utts)} utterances")
    for lp in plan.listeners:
        print(f"  token {lp.token}")
    return 0


def _cmd_mushra_analyze(args) -> int:
    records, malformed = export_ratings(args.ratings)
    if malformed:
        print(f"warning: skipped {len(malformed)} malformed line(s): "
              f"{malformed[:10]}", file=sys.stderr)
    report = analyze(records, natural_id=args.natural_id, alpha=args.alpha)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json_dict(), indent=1),
                                  encoding="utf-8")
    print(report.render_table())
    return 0


def _cmd_serve(args) -> int:
    plan = load_plan(args.plan)
    service = Service(plan, args.audio_root, args.store, ui_dir=args.ui_dir)
    service.serve_forever(host=args.host, port=args.port)
    return 0


def _cmd_export_ratings(args) -> int:
    records, malformed = export_ratings(args.store)
    with open(args.out, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    print(f"{args.out}: {len(records)} records"
          + (f"; skipped {len(malformed)} malformed line(s)" if malformed else ""))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="univoc",
        description="Speaker-independent neural vocoder toolkit: feature "
                    "extraction, training, synthesis, and listening-test "
                    "tooling.",
    )
    parser.add_argument("--verbose", action="store_true",
                        help="log at DEBUG instead of INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mel-extract", help="extract log-mel features from a wav")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mel-config", help="JSON file of mel settings")
    p.set_defaults(func=_cmd_mel_extract)

    p = sub.add_parser("train", help="train a vocoder on a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-config", required=True,
                   help="JSON file of model settings")
    p.add_argument("--train-config", help="JSON file of training settings")
    p.add_argument("--mel-config", help="JSON file of mel settings")
    p.add_argument("--per-speaker-cap", type=int, default=None,
                   help="keep at most this many utterances per speaker")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("synthesize",
                       help="generate a waveform from a wav or .mel file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True,
                   help="input .wav (copy synthesis) or .mel features")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--temperature", type=float, default=1.0)
    group.add_argument("--argmax", action="store_true",
                       help="take the modal class instead of sampling")
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("gmm-fit",
                       help="fit a speaker mixture over .mel feature files")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gmm_fit)

    p = sub.add_parser("kld", help="Monte Carlo divergence between two mixtures")
    p.add_argument("--p", required=True)
    p.add_argument("--q", required=True)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_kld)

    p = sub.add_parser("anchor-select",
                       help="pick the candidate mixture nearest the target")
    p.add_argument("--target", required=True)
    p.add_argument("--candidates", required=True,
                   help="directory of candidate mixture .json files")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the divergence table as JSON")
    p.set_defaults(func=_cmd_anchor_select)

    p = sub.add_parser("mushra-plan", help="build a balanced listening test")
    p.add_argument("--utts", type=int, help="generate this many utterance ids")
    p.add_argument("--utt-file", help="file of utterance ids, one per line")
    p.add_argument("--systems", required=True,
                   help="comma-separated system ids (include the natural one)")
    p.add_argument("--natural-id", required=True)
    p.add_argument("--listeners", type=int, required=True)
    p.add_argument("--per-utt", type=int, required=True,
                   help="ratings per utterance")
    p.add_argument("--screens", type=int, required=True,
                   help="screens per listener")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mushra_plan)

    p = sub.add_parser("mushra-analyze", help="analyze collected ratings")
    p.add_argument("--ratings", required=True)
    p.add_argument("--natural-id", required=True)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--out", help="write the full report as JSON")
    p.set_defaults(func=_cmd_mushra_analyze)

    p = sub.add_parser("serve", help="run the listening-test rating service")
    p.add_argument("--plan", required=True)
    p.add_argument("--audio-root", required=True)
    p.add_argument("--store", required=True, help="ratings JSON-lines path")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ui-dir", help="serve this directory at / as the UI")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("export-ratings",
                       help="validate and re-emit a rating store")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_ratings)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UnivocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
