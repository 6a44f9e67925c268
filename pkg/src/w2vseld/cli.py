"""Command-line entry point: ``w2vseld {synth,pretrain,finetune,eval,infer}``.

Every command reads an optional JSON config with the sections ``model``,
``pretrain``, ``finetune``, ``data``, ``augment`` and ``eval`` plus the
top-level keys ``seed`` and ``output_dir``. Values can be overridden with
``--set section.key=value`` (the value is parsed as JSON when possible).
Each run writes ``run_manifest.json`` to its output directory holding the
resolved config, the seed and a git-style blob hash of every input file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 130 interrupted.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .ambisonics import random_scene_spec, read_wav, synthesize_scene, write_wav
from .annotation import LABEL_HOP_S
from .dataset import SAMPLE_RATE, emit_csv, load_corpus, parse_csv
from .errors import ConfigError, DataError, W2vSeldError
from .metrics import evaluate_pairs
from .model import ModelConfig

log = logging.getLogger("w2vseld")

PRESETS = {"base": ModelConfig.base, "large": ModelConfig.large, "toy": ModelConfig.toy}
AUGMENT_KEYS = ("spec_augment", "rotate", "traditional", "gain_db", "noise_snr_db",
                "time_masks", "time_mask_max", "channel_masks", "channel_mask_max")
DATA_DEFAULTS = {
    "manifest": None,
    "num_classes": 4,
    "train_split": "train",
    "eval_split": "test",
    # synth only
    "num_clips": 4,
    "duration_s": 8.0,
    "max_polyphony": 3,
    "events_per_second": 1.0,
    "noise_snr_db": 30.0,
    "test_fraction": 0.0,
    "sample_format": "float32",
}
EVAL_DEFAULTS = {"location_aware": False, "threshold_deg": 20.0, "sed_threshold": None}


def _pretrain_cls():
    from .pretrain import PretrainConfig
    return PretrainConfig


def _finetune_cls():
    from .finetune import FinetuneConfig
    return FinetuneConfig


def default_config() -> dict:
    """Every key the CLI understands, with its default."""
    ft = asdict(_finetune_cls().toy())
    return {
        "seed": 0,
        "output_dir": None,
        "model": {"preset": "toy"},
        "pretrain": {**asdict(_pretrain_cls().toy()), "steps": None},
        "finetune": {**{k: v for k, v in ft.items() if k not in AUGMENT_KEYS}, "steps": None, "pretrained": None},
        "augment": {k: ft[k] for k in AUGMENT_KEYS},
        "data": dict(DATA_DEFAULTS),
        "eval": dict(EVAL_DEFAULTS),
    }


def _model_keys():
    return {"preset"} | {f.name for f in fields(ModelConfig)}


def _unknown_keys(config: dict, defaults: dict) -> list[str]:
    problems = []
    for key, value in config.items():
        if key not in defaults:
            problems.append(f"unknown key {key!r}")
            continue
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                problems.append(f"section {key!r} must be an object")
                continue
            allowed = _model_keys() if key == "model" else set(defaults[key])
            problems += [f"unknown key {key}.{k}" for k in value if k not in allowed]
    return problems


def parse_override(text: str):
    """``section.key=value`` -> ``(path tuple, value)``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return tuple(key.strip().split(".")), value


def resolve_config(path=None, overrides=()) -> dict:
    """Merge defaults, the config file and overrides; reject unknown keys."""
    defaults = default_config()
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    problems = _unknown_keys(user, defaults)
    for text in overrides:
        keys, value = parse_override(text)
        if len(keys) > 2:
            problems.append(f"override {text!r} nests too deeply")
            continue
        node = user
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
        problems += _unknown_keys({keys[0]: user[keys[0]]}, defaults)
    if problems:
        raise ConfigError(sorted(set(problems)))
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        if isinstance(merged[key], dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def build_configs(config: dict):
    """Typed configs from a resolved config; collects every problem before raising."""
    problems = []
    model_cfg = pretrain_cfg = finetune_cfg = None
    m = dict(config["model"])
    preset = m.pop("preset", "toy")
    if preset not in PRESETS:
        problems.append(f"model.preset must be one of {sorted(PRESETS)}, got {preset!r}")
    else:
        try:
            model_cfg = PRESETS[preset](**m)
        except ConfigError as exc:
            problems += [f"model: {p}" for p in exc.problems]
    p = {k: v for k, v in config["pretrain"].items() if k != "steps"}
    try:
        pretrain_cfg = _pretrain_cls()(**p)
    except ConfigError as exc:
        problems += [f"pretrain: {q}" for q in exc.problems]
    f = {k: v for k, v in config["finetune"].items() if k not in ("steps", "pretrained")}
    f.update(config["augment"])
    try:
        finetune_cfg = _finetune_cls()(**f)
    except ConfigError as exc:
        problems += [f"finetune: {q}" for q in exc.problems]
    d = config["data"]
    if not isinstance(d["num_classes"], int) or d["num_classes"] < 1:
        problems.append("data.num_classes must be a positive integer")
    if not isinstance(config["seed"], int):
        problems.append("seed must be an integer")
    if problems:
        raise ConfigError(problems)
    return model_cfg, pretrain_cfg, finetune_cfg


# -- run bookkeeping ---------------------------------------------------------


def blob_hash(path) -> str:
    """Git blob id of a file's content."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hashes(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            out[str(q)] = blob_hash(q)
    return out


def prepare_output(path, force: bool) -> Path:
    if path is None:
        raise ConfigError("no output directory: pass --output-dir or set output_dir")
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(out_dir: Path, command: str, config: dict, inputs=()):
    doc = {
        "command": command,
        "version": __version__,
        "seed": config["seed"],
        # the output location is not part of what makes a run reproducible
        "config": {k: v for k, v in config.items() if k != "output_dir"},
        "inputs": input_hashes(inputs),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def corpus_inputs(manifest) -> list:
    """The manifest plus every file it references."""
    from .dataset import load_manifest

    root = Path(manifest).parent
    paths = [Path(manifest)]
    for entry in load_manifest(manifest):
        paths += [root / entry[k] for k in ("wav_path", "csv_path") if entry.get(k)]
    return paths


def checkpoint_inputs(path) -> list:
    path = Path(path).with_suffix(".json")
    return [path, path.with_suffix(".bin")]


def _corpus(config, split):
    manifest = config["data"]["manifest"]
    if manifest is None:
        raise ConfigError("data.manifest is required")
    return load_corpus(manifest, config["data"]["num_classes"], split)


def _steps(section, cfg):
    return cfg.total_updates if section.get("steps") is None else int(section["steps"])


# -- commands ----------------------------------------------------------------


def cmd_synth(config, out_dir: Path):
    d = config["data"]
    problems = []
    if not 1 <= d["max_polyphony"] <= 3:
        problems.append("data.max_polyphony must lie in 1..3")
    if d["duration_s"] <= 0 or d["num_clips"] < 1:
        problems.append("data.duration_s and data.num_clips must be positive")
    if d["sample_format"] not in ("float32", "pcm16"):
        problems.append("data.sample_format must be float32 or pcm16")
    if problems:
        raise ConfigError(problems)
    n_test = int(round(d["num_clips"] * d["test_fraction"]))
    entries = []
    for i in range(d["num_clips"]):
        rng = np.random.default_rng([config["seed"], i])
        spec = random_scene_spec(rng, d["num_classes"], d["duration_s"], d["max_polyphony"],
                                 d["events_per_second"], noise_snr_db=d["noise_snr_db"])
        clip, ann = synthesize_scene(spec, seed=int(rng.integers(2**31)), sample_rate_hz=SAMPLE_RATE)
        name = f"clip_{i:04d}"
        write_wav(out_dir / f"{name}.wav", clip, d["sample_format"])
        (out_dir / f"{name}.csv").write_text(emit_csv(ann))
        split = "test" if i >= d["num_clips"] - n_test else "train"
        entries.append({"wav_path": f"{name}.wav", "csv_path": f"{name}.csv", "split": split})
    (out_dir / "manifest.json").write_text(json.dumps(entries, indent=2) + "\n")
    write_run_manifest(out_dir, "synth", config)
    return {"clips": len(entries)}


def cmd_pretrain(config, out_dir: Path):
    from .pretrain import pretrain_loop

    model_cfg, cfg, _ = build_configs(config)
    items = _corpus(config, config["data"]["train_split"])
    if not items:
        raise DataError("no clips for pre-training")
    write_run_manifest(out_dir, "pretrain", config, corpus_inputs(config["data"]["manifest"]))
    result = pretrain_loop([i.clip for i in items], model_cfg, cfg, out_dir, steps=_steps(config["pretrain"], cfg))
    return {"checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
            "final_loss": result.log[-1]["L_total"] if result.log else None}


def cmd_finetune(config, out_dir: Path):
    from .finetune import evaluate, finetune_loop

    model_cfg, _, cfg = build_configs(config)
    d = config["data"]
    items = _corpus(config, d["train_split"])
    if not items:
        raise DataError("no clips for fine-tuning")
    pretrained = config["finetune"]["pretrained"]
    inputs = corpus_inputs(d["manifest"]) + (checkpoint_inputs(pretrained) if pretrained else [])
    write_run_manifest(out_dir, "finetune", config, inputs)
    result = finetune_loop(items, model_cfg, cfg, d["num_classes"], pretrained=pretrained, out_dir=out_dir,
                           steps=_steps(config["finetune"], cfg))
    summary = {"checkpoint": str(result.checkpoint)}
    held_out = load_corpus(d["manifest"], d["num_classes"], d["eval_split"]) if d["eval_split"] else []
    if held_out:
        e = config["eval"]
        report = evaluate(result.model, held_out, cfg.sed_threshold, e["location_aware"])
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        summary["seld_score"] = report.seld_score
    return summary


def _csv_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.glob("*.csv"))}


def _num_frames(wav):
    clip = read_wav(wav)
    return int(np.ceil(clip.num_samples / (clip.sample_rate_hz * LABEL_HOP_S) - 1e-9))


def cmd_eval(config, out_dir: Path, ref_dir, pred_dir=None, checkpoint=None):
    N = config["data"]["num_classes"]
    e = config["eval"]
    refs = _csv_files(ref_dir)
    if not refs:
        raise DataError(f"no reference CSV files in {ref_dir}")
    if (pred_dir is None) == (checkpoint is None):
        raise ConfigError("eval needs exactly one of --pred-dir and --checkpoint")
    pairs = []
    if checkpoint is not None:
        from .finetune import load_finetuned, predict_clip

        model, threshold = load_finetuned(checkpoint)
        if model.num_classes != N:
            raise ConfigError(f"checkpoint predicts {model.num_classes} classes, data.num_classes is {N}")
        threshold = e["sed_threshold"] if e["sed_threshold"] is not None else threshold
        pred_out = out_dir / "predictions"
        pred_out.mkdir(exist_ok=True)
        for stem, path in refs.items():
            wav = path.with_suffix(".wav")
            if not wav.exists():
                raise DataError(f"missing audio {wav} for reference {path}")
            pred = predict_clip(model, read_wav(wav), threshold)
            (pred_out / f"{stem}.csv").write_text(emit_csv(pred))
            pairs.append((_read_csv(path, N, pred.num_frames), pred))
        inputs = [ref_dir, *checkpoint_inputs(checkpoint)]
    else:
        preds = _csv_files(pred_dir)
        missing = sorted(set(refs) - set(preds))
        if missing:
            raise DataError(f"no prediction for {', '.join(missing)}")
        for stem, path in refs.items():
            wav = path.with_suffix(".wav")
            ref, pred = _read_csv(path, N), _read_csv(preds[stem], N)
            # the clip length fixes the segment count when audio is available
            frames = _num_frames(wav) if wav.exists() else max(ref.frame_count, pred.frame_count)
            if max(ref.frame_count, pred.frame_count) > frames:
                raise DataError(f"{stem}: annotation extends past the end of {wav}")
            pairs.append((_read_csv(path, N, frames), _read_csv(preds[stem], N, frames)))
        inputs = [ref_dir, pred_dir]
    report = evaluate_pairs(pairs, e["location_aware"], e["threshold_deg"])
    write_run_manifest(out_dir, "eval", config, inputs)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report.to_dict()


def _read_csv(path, num_classes, num_frames=None):
    try:
        return parse_csv(Path(path).read_text(), num_classes, num_frames)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_infer(config, out_dir: Path, checkpoint, wavs):
    from .finetune import load_finetuned, predict_clip

    model, threshold = load_finetuned(checkpoint)
    if config["eval"]["sed_threshold"] is not None:
        threshold = config["eval"]["sed_threshold"]
    written = []
    for wav in wavs:
        ann = predict_clip(model, read_wav(wav), threshold)
        target = out_dir / f"{Path(wav).stem}.csv"
        target.write_text(emit_csv(ann))
        written.append(str(target))
    write_run_manifest(out_dir, "infer", config, [*checkpoint_inputs(checkpoint), *wavs])
    return {"predictions": written}


# -- argument parsing --------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--output-dir", help="where artifacts go (overrides output_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="w2vseld",
        description="Sound event localization and detection from first-order Ambisonics.",
        epilog="exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure, 130 interrupted",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic FOA corpus (WAV + CSV + manifest.json)")
    sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training on data.manifest")
    sub.add_parser("finetune", parents=[common], help="fine-tune SED/DOA heads on data.manifest")
    ev = sub.add_parser("eval", parents=[common], help="score predictions against reference CSVs")
    ev.add_argument("--ref-dir", required=True, help="directory of reference CSVs (and WAVs)")
    ev.add_argument("--pred-dir", help="directory of prediction CSVs with matching names")
    ev.add_argument("--checkpoint", help="fine-tuned checkpoint to predict from the reference WAVs")
    inf = sub.add_parser("infer", parents=[common], help="write prediction CSVs for WAV files")
    inf.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint (.json)")
    inf.add_argument("wavs", nargs="+", help="4-channel WAV files")
    return parser


def run(args) -> dict | None:
    overrides = list(args.set)
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config = resolve_config(args.config, overrides)
    if args.print_config:
        print(json.dumps(config, indent=2, sort_keys=True))
        return None
    build_configs(config)
    out_dir = prepare_output(config["output_dir"], args.force)
    if args.command == "synth":
        return cmd_synth(config, out_dir)
    if args.command == "pretrain":
        return cmd_pretrain(config, out_dir)
    if args.command == "finetune":
        return cmd_finetune(config, out_dir)
    if args.command == "eval":
        return cmd_eval(config, out_dir, args.ref_dir, args.pred_dir, args.checkpoint)
    return cmd_infer(config, out_dir, args.checkpoint, args.wavs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return exc.exit_code
    except W2vSeldError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("interrupted; checkpoint written", file=sys.stderr)
        return 130
    if summary is not None:
        print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
