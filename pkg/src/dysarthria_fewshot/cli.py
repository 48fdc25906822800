"""Command-line pipeline: synth -> features -> split -> train -> eval -> report.

Every stage reads and writes files under the configured directories, so each
artifact can be inspected or reused. Settings come from an optional TOML file
(``--config``) whose sections mirror :class:`RunConfig`; command-line flags
override file values. One ``--seed`` drives every stochastic component.

Exit status is 0 on success, 1 when a stage fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_adapter, save_checkpoint
from .corpus import (
    Manifest,
    SplitSpec,
    TaskSet,
    Tier,
    assert_speaker_disjoint,
    build_binary_split,
    build_multiclass_split,
    class_names,
    load_manifest,
    split_counts,
)
from .dsp import FeatureConfig, wav_to_log_mel
from .errors import FeatureExtractionFailed, InvalidConfig, PipelineError, ShapeMismatch, SpeakerLeakage
from .evaluation import confusion, load_reports, metrics, predict, render_report, write_predictions
from .features import FeatureStore
from .fsutil import atomic_write_text
from .lora import LoraConfig, wrap_model
from .model import EncoderConfig, count_trainable, init_encoder
from .synth import MANIFEST_NAME, SynthSpec, synth_corpus
from .train import TrainConfig, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("dysarthria_fewshot")

FEATURE_CONFIG_NAME = "feature_config.json"


@dataclass(frozen=True)
class Paths:
    corpus: Path = Path("work/corpus")
    features: Path = Path("work/features")
    splits: Path = Path("work/splits")
    checkpoints: Path = Path("work/checkpoints")
    reports: Path = Path("work/reports")


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs. ``seed`` overrides the sub-config seeds."""

    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    synth: SynthSpec = field(default_factory=SynthSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: dict = field(default_factory=dict)
    lora: LoraConfig = field(default_factory=lambda: LoraConfig(rank=32))
    train: TrainConfig = field(default_factory=TrainConfig)
    use_lora: bool = True

    def encoder_config(self, n_classes: int) -> EncoderConfig:
        """Model settings with input shape taken from the feature config."""
        values = {"n_mels": self.features.n_mels, "max_frames": self.features.n_frames, **self.model}
        values.update(n_classes=n_classes, seed=self.seed)
        cfg = EncoderConfig(**values)
        if (cfg.n_mels, cfg.max_frames) != (self.features.n_mels, self.features.n_frames):
            raise InvalidConfig(
                f"model expects {cfg.n_mels}x{cfg.max_frames} inputs but features are "
                f"{self.features.n_mels}x{self.features.n_frames}"
            )
        return cfg


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise InvalidConfig(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cls(**values)


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a TOML run config (or defaults) and apply ``overrides``.

    ``overrides`` has the same nested layout as the TOML file; None values are ignored.
    """
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidConfig(f"{path}: config file not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            section = doc.setdefault(key, {})
            section.update({k: v for k, v in value.items() if v is not None})
        elif value is not None:
            doc[key] = value

    known = {"seed", "paths", "synth", "features", "model", "lora", "train", "use_lora"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise InvalidConfig(f"unknown config section(s): {', '.join(unknown)}")
    seed = int(doc.get("seed", 0))
    try:
        paths = _build(Paths, {k: Path(v) for k, v in doc.get("paths", {}).items()}, "paths")
        lora_values = {"rank": 32, **doc.get("lora", {}), "seed": seed}
        train_values = {**doc.get("train", {}), "seed": seed}
        model_values = dict(doc.get("model", {}))
        model_names = {f.name for f in dataclasses.fields(EncoderConfig)} - {"n_classes", "seed"}
        bad = sorted(set(model_values) - model_names)
        if bad:
            raise InvalidConfig(f"unknown or derived key(s) in [model]: {', '.join(bad)}")
        return RunConfig(
            seed=seed,
            paths=paths,
            synth=_build(SynthSpec, doc.get("synth", {}), "synth"),
            features=_build(FeatureConfig, doc.get("features", {}), "features"),
            model=model_values,
            lora=_build(LoraConfig, lora_values, "lora"),
            train=_build(TrainConfig, train_values, "train"),
            use_lora=bool(doc.get("use_lora", True)),
        )
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


# --- stages --------------------------------------------------------------------


def _manifest(cfg: RunConfig) -> Manifest:
    return load_manifest(cfg.paths.corpus / MANIFEST_NAME)


def _check_feature_config(store_root: Path, features: FeatureConfig, create: bool = False) -> None:
    """Refuse to mix features computed under different settings."""
    path = store_root / FEATURE_CONFIG_NAME
    wanted = dataclasses.asdict(features)
    if not path.exists():
        if not create:
            raise InvalidConfig(f"{store_root}: no {FEATURE_CONFIG_NAME}; run the features stage first")
        atomic_write_text(path, json.dumps(wanted, indent=1, sort_keys=True) + "\n")
        return
    if json.loads(path.read_text(encoding="utf-8")) != wanted:
        raise InvalidConfig(f"{store_root} holds features computed with different settings than this run")


def cmd_synth(cfg: RunConfig) -> int:
    manifest = synth_corpus(cfg.paths.corpus, cfg.synth, seed=cfg.seed)
    cohorts: dict[str, int] = {}
    for s in manifest.speakers:
        cohorts[s.cohort.value] = cohorts.get(s.cohort.value, 0) + 1
    print(
        f"wrote {len(manifest.utterances)} utterances for {len(manifest.speakers)} speakers "
        f"({', '.join(f'{n} {c}' for c, n in sorted(cohorts.items()))}) to {cfg.paths.corpus}"
    )
    return 0


def cmd_features(cfg: RunConfig, only_split: Path | None = None) -> int:
    manifest = _manifest(cfg)
    if only_split is not None:
        split = SplitSpec.load(only_split)
        wanted = list(split.train_ids) + list(split.test_ids)
    else:
        wanted = [u.utterance_id for u in manifest.utterances]
    root = cfg.paths.features
    root.mkdir(parents=True, exist_ok=True)
    _check_feature_config(root, cfg.features, create=True)
    store = FeatureStore(root)
    made = skipped = 0
    failures: dict[str, str] = {}
    for uid in wanted:
        if store.has(uid):
            store.register(uid)
            skipped += 1
            continue
        audio = cfg.paths.corpus / manifest.utterance(uid).audio_path
        try:
            store.put(uid, wav_to_log_mel(audio, cfg.features, uid))
            made += 1
        except (PipelineError, OSError) as exc:
            failures[uid] = f"{audio}: {exc}"
            log.warning("%s: %s", uid, exc)
    store.flush()
    print(f"features: {made} written, {skipped} already present, {len(failures)} failed ({root})")
    if failures:
        raise FeatureExtractionFailed(failures)
    return 0


def cmd_split(cfg: RunConfig, tier: str | None, task: str | None, out: Path | None) -> int:
    manifest = _manifest(cfg)
    if tier is not None:
        split = build_binary_split(manifest, _parse_tier(tier))
    else:
        split = build_multiclass_split(manifest, _parse_task(task))
    report = assert_speaker_disjoint(split, manifest)
    if not report:
        raise SpeakerLeakage(report.describe())
    out = out or cfg.paths.splits / f"{split.experiment_name}.json"
    split.save(out)
    counts = split_counts(split, manifest)
    print(f"{split.experiment_name}: {len(split.train_ids)} train / {len(split.test_ids)} test -> {out}")
    for side in ("train", "test"):
        print(f"  {side}: " + ", ".join(f"{k} {v}" for k, v in counts[side].items()))
    return 0


def cmd_verify(cfg: RunConfig, split_path: Path) -> int:
    manifest = _manifest(cfg)
    report = assert_speaker_disjoint(SplitSpec.load(split_path), manifest)
    if report:
        print(f"{split_path}: speaker-disjoint")
        return 0
    print(f"{split_path}: {report.describe()}", file=sys.stderr)
    return 1


def cmd_train(cfg: RunConfig, split_path: Path, out: Path | None) -> int:
    manifest = _manifest(cfg)
    split = SplitSpec.load(split_path)
    n_classes = len(class_names(split.label_scheme))
    model = init_encoder(cfg.encoder_config(n_classes))
    if cfg.use_lora:
        model = wrap_model(model, cfg.lora, inplace=True)
    log.info("%d trainable parameters", count_trainable(model))
    store = FeatureStore(cfg.paths.features)
    _check_feature_config(cfg.paths.features, cfg.features)
    history = train(model, split, manifest, store, cfg.train)

    out = out or cfg.paths.checkpoints / split.experiment_name
    metadata = {"features": dataclasses.asdict(cfg.features), "experiment": split.experiment_name}
    save_checkpoint(model, out, cfg.train, metadata)
    if cfg.use_lora:
        save_adapter(model, out.with_name(out.name + ".adapter"))
    history.save(out.with_name(out.name + ".history.jsonl"))
    last = history.records[-1]
    print(f"trained {split.experiment_name}: final loss {last.loss:.4f}, train accuracy {last.accuracy:.3f} -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: Path, split_path: Path, out_dir: Path | None, fmt: str) -> int:
    manifest = _manifest(cfg)
    split = SplitSpec.load(split_path)
    loaded = load_checkpoint(checkpoint)
    names = class_names(split.label_scheme)
    if loaded.encoder_config.n_classes != len(names):
        raise ShapeMismatch(
            f"{checkpoint}: model has {loaded.encoder_config.n_classes} classes, "
            f"split {split.experiment_name} needs {len(names)}"
        )
    _check_feature_config(cfg.paths.features, cfg.features)
    store = FeatureStore(cfg.paths.features)
    preds = predict(loaded.model, split.test_ids, store)
    truth = [manifest.label_index(i, split.label_scheme) for i in split.test_ids]
    report = metrics(confusion(preds.labels, truth, len(names), names), split.experiment_name)

    out_dir = out_dir or cfg.paths.reports
    stem = out_dir / split.experiment_name
    write_predictions(stem.with_name(stem.name + ".predictions.csv"), preds, truth)
    atomic_write_text(stem.with_name(stem.name + ".json"), render_report([report], "json"))
    atomic_write_text(stem.with_name(stem.name + ".md"), render_report([report], "markdown"))
    sys.stdout.write(render_report([report], fmt))
    return 0


def cmd_report(inputs: Sequence[Path], fmt: str, out: Path | None) -> int:
    reports = [r for path in inputs for r in load_reports(path)]
    text = render_report(reports, fmt)
    if out is not None:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)
    return 0


def _parse_tier(text: str) -> Tier:
    key = text.replace("-", "").replace("_", "").lower()
    for tier in Tier:
        if tier.value.lower() == key and tier is not Tier.CONTROL:
            return tier
    raise InvalidConfig(f"unknown tier {text!r}; choose high, medium, low or very-low")


def _parse_task(text: str) -> TaskSet:
    key = text.replace("-", "").replace("_", "").lower()
    for task in TaskSet:
        if task.value.lower() == key:
            return task
    raise InvalidConfig(f"unknown task set {text!r}; choose words or digits-letters")


# --- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting a flag given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="TOML run config")
    common.add_argument("--seed", type=int, help="seed for every stochastic component")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    common.add_argument("--duration", type=float, help="feature window in seconds")
    for name in ("corpus", "features", "splits", "checkpoints", "reports"):
        common.add_argument(f"--{name}-dir", type=Path, dest=f"{name}_dir", help=f"{name} directory")

    parser = argparse.ArgumentParser(prog="dysarthria-fewshot", description=__doc__.split("\n")[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--scale", type=float, help="fraction of the per-task item counts (1 = full census)")

    p = sub.add_parser("features", parents=[common], help="extract log-Mel features")
    p.add_argument("--only-split", type=Path, help="only utterances of this split")

    p = sub.add_parser("split", parents=[common], help="build or verify a speaker-disjoint split")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--binary", action="store_true", help="control vs pathology")
    mode.add_argument("--multiclass", action="store_true", help="control plus four tiers")
    mode.add_argument("--verify", type=Path, metavar="SPLIT", help="check an existing split file")
    p.add_argument("--tier", help="pathology tier for --binary")
    p.add_argument("--task", default="words", help="task set for --multiclass (words, digits-letters)")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train", parents=[common], help="fine-tune on a split")
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, help="checkpoint directory")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--rank", type=int, help="LoRA rank")
    p.add_argument("--full-finetune", action="store_true", help="train every weight instead of LoRA factors")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split's test side")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, help="report directory")
    p.add_argument("--format", choices=("markdown", "json"), default="markdown")

    p = sub.add_parser("report", parents=[common], help="merge report JSON files into one table")
    p.add_argument("inputs", type=Path, nargs="+")
    p.add_argument("--format", choices=("markdown", "json"), default="markdown")
    p.add_argument("--out", type=Path)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    paths = {name: get(f"{name}_dir") for name in ("corpus", "features", "splits", "checkpoints", "reports")}
    over = {
        "seed": get("seed"),
        "paths": {k: str(v) for k, v in paths.items() if v is not None},
        "synth": {"scale": get("scale")},
        "features": {"target_duration_s": get("duration")},
        "train": {
            "learning_rate": get("learning_rate"),
            "epochs": get("epochs"),
            "batch_size": get("batch_size"),
        },
        "lora": {"rank": get("rank")},
    }
    if get("full_finetune"):
        over["use_lora"] = False
    return over


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    cfg = load_run_config(getattr(args, "config", None), _overrides(args))
    if args.command == "synth":
        return cmd_synth(cfg)
    if args.command == "features":
        return cmd_features(cfg, args.only_split)
    if args.command == "split":
        if args.verify is not None:
            return cmd_verify(cfg, args.verify)
        if args.binary and not args.tier:
            parser.error("--binary needs --tier")
        return cmd_split(cfg, args.tier if args.binary else None, args.task if args.multiclass else None, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.split, args.out)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.split, args.out, args.format)
    return cmd_report(args.inputs, args.format, args.out)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except FeatureExtractionFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        for uid, why in sorted(exc.failures.items()):
            print(f"  {uid}: {why}", file=sys.stderr)
        return 1
    except (PipelineError, OSError) as exc:
        # OSError messages already carry the offending path
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
