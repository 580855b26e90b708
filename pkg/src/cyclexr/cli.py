"""Experiment runner: one subcommand per pipeline step, all artifacts under a work directory.

Layout of ``workdir``::

    data/           synth-data: images/*.png, reports/*.json
    ingest/         vocab.txt, split.json, report_classifier.json, image_classifier.pt
    report_gen/     report_gen.pt, trace.json
    image_gen/      stage1.pt, stage2.pt, trace_stage{1,2}.json, manifest_stage{1,2}.json
    cycle/          report_gen.pt, image_gen.pt, traces.json
    evaluate/       metrics.json, metrics.csv
    trust/          trust.json
    faithfulness/   faithfulness.json
    gradcam/        <study_id>_<label>_cam.png, gradcam.json

Every step directory also holds ``config.yaml`` (fully resolved) and ``manifest.json``
(one per stage for the image generator).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import checkpoint as ckpt_io
from . import classifiers as clf
from . import cycle
from . import data as D
from . import explain
from . import image_gen as ig
from . import report_gen as rg
from .errors import ConfigError, CycleXRError, DataError, PreconditionError
from .labels import LABELS, TOY_LABEL_SLOTS
from .toy import quadrant_mass

log = logging.getLogger("cyclexr")

PROFILES = ("toy", "full")

DEFAULTS = {
    "profile": "toy",
    "workdir": "runs/toy",
    "data_root": None,
    "seed": 0,
    "n_studies": 492,
    "split_ratio": 0.8,
    "min_freq": 1,
    "report_epochs": 60,
    "stage1_epochs": 80,
    "stage2_epochs": 20,
    "classifier_epochs": 120,
    "k": 2,
    "ks": [2, 5, 8],
    "gradcam_images": 50,
    "gradcam_top": 3,
    "report_gen": {},
    "image_gen": {},
    "cycle": {"epochs": 10, "lambda_image": 300.0, "lambda_text": 1.0,
              "report_every": 1, "batch_size": 16},
}

_SECTION_TYPES = {"report_gen": rg.ReportGenConfig, "image_gen": ig.ImageGenConfig,
                  "cycle": cycle.CycleConfig}


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    return yaml.safe_load(text)


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    node[parts[-1]] = value


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def workdir(self) -> Path:
        return Path(self.values["workdir"])

    @property
    def data_root(self) -> Path:
        root = self.values["data_root"]
        return Path(root) if root else self.workdir / "data"

    def report_config(self) -> rg.ReportGenConfig:
        base = rg.ReportGenConfig.toy if self["profile"] == "toy" else rg.ReportGenConfig
        return _build(base, self["report_gen"], "report_gen")

    def image_config(self) -> ig.ImageGenConfig:
        base = ig.ImageGenConfig.toy if self["profile"] == "toy" else ig.ImageGenConfig
        return _build(base, self["image_gen"], "image_gen")

    def cycle_config(self) -> cycle.CycleConfig:
        return _build(cycle.CycleConfig, {**self["cycle"], "seed": self["seed"]}, "cycle")

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()

    def dump(self, path: Path) -> None:
        path.write_text(yaml.safe_dump(json.loads(json.dumps(self.values)), sort_keys=True),
                        encoding="utf-8")


def _build(factory, overrides: dict, section: str):
    names = {f.name for f in fields(_SECTION_TYPES[section])}
    for key in overrides:
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown field")
    try:
        return factory(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def resolve_config(path=None, overrides=(), command: str | None = None) -> ExperimentConfig:
    """Defaults, then the YAML file, then ``key=value`` overrides (dotted keys for sections)."""
    values = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file {p} does not exist")
        loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be a mapping")
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise ConfigError(f"{key}: unknown config key")
            if isinstance(DEFAULTS[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"{key}: expected a mapping")
                values[key].update(value)
            else:
                values[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        if key.split(".")[0] not in DEFAULTS:
            raise ConfigError(f"{key}: unknown config key")
        _set_dotted(values, key, _parse_value(text))
    cfg = ExperimentConfig(values)
    validate(cfg, creates_data=command == "synth-data")
    return cfg


def validate(cfg: ExperimentConfig, creates_data: bool = False) -> None:
    v = cfg.values
    if v["profile"] not in PROFILES:
        raise ConfigError(f"profile: must be one of {PROFILES}, got {v['profile']!r}")
    if not isinstance(v["seed"], int) or isinstance(v["seed"], bool):
        raise ConfigError("seed: must be an explicit integer")
    if not 0.0 < float(v["split_ratio"]) < 1.0:
        raise ConfigError("split_ratio: must lie in (0, 1)")
    for key in ("n_studies", "min_freq", "k", "gradcam_images", "gradcam_top"):
        if not isinstance(v[key], int) or v[key] < 1:
            raise ConfigError(f"{key}: must be a positive integer")
    for key in ("report_epochs", "stage1_epochs", "stage2_epochs", "classifier_epochs"):
        if not isinstance(v[key], int) or v[key] < 0:
            raise ConfigError(f"{key}: must be a non-negative integer")
    if not v["ks"] or any(not isinstance(k, int) or not 1 <= k <= len(LABELS) for k in v["ks"]):
        raise ConfigError(f"ks: each k must be an integer in [1, {len(LABELS)}]")
    if not creates_data and v["data_root"] is not None and not Path(v["data_root"]).is_dir():
        raise ConfigError(f"data_root: directory {v['data_root']} does not exist")
    cfg.report_config()
    cfg.image_config()
    cfg.cycle_config()


# ---------------------------------------------------------------------------
# artifacts


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _step_dir(cfg: ExperimentConfig, name: str) -> Path:
    out = cfg.workdir / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg: ExperimentConfig, out: Path, command: str, inputs, outputs, extra=None,
            manifest_name: str = "manifest.json") -> None:
    cfg.dump(out / "config.yaml")
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg["seed"],
        "versions": {"python": platform.python_version(), "torch": torch.__version__,
                     "numpy": np.__version__},
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": {str(Path(p).name): _sha256(Path(p)) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    _write_json(out / manifest_name, manifest)


@dataclass
class Prepared:
    train: D.PairSet
    test: D.PairSet
    vocab: D.Vocabulary
    inputs: list


def _size(cfg: ExperimentConfig) -> int:
    return cfg.report_config().image_size


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Load the collection and derive the split and vocabulary (ingest's outputs, if present)."""
    root = cfg.data_root
    if not root.is_dir():
        raise DataError(f"no study collection at {root}; run synth-data or set data_root")
    studies = D.usable_studies(D.filter_frontal(D.load_collection(root)[0]))
    if not studies:
        raise DataError(f"{root} holds no usable frontal studies")
    ingest = cfg.workdir / "ingest"
    by_id = {s.study_id: s for s in studies}
    if (ingest / "split.json").is_file() and (ingest / "vocab.txt").is_file():
        split = json.loads((ingest / "split.json").read_text(encoding="utf-8"))
        missing = [sid for sid in split["train"] + split["test"] if sid not in by_id]
        if missing:
            raise DataError(f"split references {len(missing)} studies absent from {root}")
        train = [by_id[sid] for sid in split["train"]]
        test = [by_id[sid] for sid in split["test"]]
        vocab = D.Vocabulary.load(ingest / "vocab.txt")
        inputs = [ingest / "split.json", ingest / "vocab.txt"]
    else:
        train, test = D.split_train_test(studies, cfg["split_ratio"], cfg["seed"])
        vocab = D.build_vocabulary([D.extract_caption(s.report) for s in train], cfg["min_freq"])
        inputs = []
    if not train or not test:
        raise DataError(f"split of {len(studies)} studies leaves an empty train or test set")
    size = _size(cfg)
    return Prepared(D.make_pairs(train, vocab, size), D.make_pairs(test, vocab, size), vocab,
                    inputs)


def _label_sets(captions):
    return [clf.toy_label_set(c) for c in captions]


def _require_toy(cfg: ExperimentConfig, what: str) -> None:
    if cfg["profile"] != "toy":
        raise PreconditionError(f"{what} needs label oracles; only the toy profile provides them")


def fit_oracles(cfg: ExperimentConfig, prep: Prepared):
    _require_toy(cfg, "fitting the label classifiers")
    nb = clf.train_report_classifier(prep.train.captions, _label_sets(prep.train.captions))
    cnn = clf.train_toy_image_classifier(prep.train, cfg["classifier_epochs"], cfg["seed"])
    return nb, cnn


def load_oracles(cfg: ExperimentConfig, prep: Prepared):
    ingest = cfg.workdir / "ingest"
    nb_path, cnn_path = ingest / "report_classifier.json", ingest / "image_classifier.pt"
    if nb_path.is_file() and cnn_path.is_file():
        nb = clf.NaiveBayesReportClassifier.load(nb_path)
        saved = torch.load(cnn_path, map_location="cpu", weights_only=False)
        cnn = clf.ToyImageClassifier(saved["resolution"])
        cnn.load_state_dict(saved["state"])
        prep.inputs += [nb_path, cnn_path]
        return nb, cnn.eval()
    return fit_oracles(cfg, prep)


def _report_model(cfg, prep, path: Path):
    if path.is_file():
        ckpt = ckpt_io.load(path)
        model = rg.ReportGenModel(rg.ReportGenConfig(**ckpt["config"]), ckpt["vocab_size"])
        prep.inputs.append(path)
        return ckpt_io.restore(model, ckpt).eval()
    return None


def _image_model(cfg, prep, path: Path):
    if path.is_file():
        ckpt = ckpt_io.load(path)
        model = ig.ImageGenModel(ig.ImageGenConfig(**ckpt["config"]), ckpt["vocab_size"])
        prep.inputs.append(path)
        return ckpt_io.restore(model, ckpt).eval()
    return None


def latest_models(cfg: ExperimentConfig, prep: Prepared, allow_untrained: bool = True):
    """Cycle-trained models if present, else the individually trained ones, else fresh ones."""
    w = cfg.workdir
    report = (_report_model(cfg, prep, w / "cycle" / "report_gen.pt")
              or _report_model(cfg, prep, w / "report_gen" / "report_gen.pt"))
    image = (_image_model(cfg, prep, w / "cycle" / "image_gen.pt")
             or _image_model(cfg, prep, w / "image_gen" / "stage2.pt")
             or _image_model(cfg, prep, w / "image_gen" / "stage1.pt"))
    if (report is None or image is None) and not allow_untrained:
        raise PreconditionError("trained generators not found; run train-report and train-image")
    if report is None:
        log.warning("no report generator checkpoint; using an untrained model")
        report = rg.new_model(cfg.report_config(), prep.vocab, cfg["seed"]).eval()
    if image is None:
        log.warning("no image generator checkpoint; using an untrained model")
        image = ig.new_model(cfg.image_config(), prep.vocab, cfg["seed"]).eval()
    return report, image


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(cfg: ExperimentConfig, args) -> int:
    _require_toy(cfg, "synth-data")
    root = cfg.data_root
    studies = D.synthesize_toy_dataset(cfg["n_studies"], cfg["seed"])
    D.write_study_collection(studies, root)
    cfg.dump(root / "config.yaml")
    _write_json(root / "manifest.json", {
        "command": "synth-data", "config_hash": cfg.hash(), "seed": cfg["seed"],
        "studies": len(studies),
        "frontal": sum(s.view == D.FRONTAL for s in studies)})
    print(f"wrote {len(studies)} toy studies to {root}")
    return 0


def cmd_ingest(cfg: ExperimentConfig, args) -> int:
    out = _step_dir(cfg, "ingest")
    for stale in ("split.json", "vocab.txt"):
        (out / stale).unlink(missing_ok=True)
    prep = prepare(cfg)
    _write_json(out / "split.json", {"train": prep.train.study_ids, "test": prep.test.study_ids})
    prep.vocab.save(out / "vocab.txt")
    outputs = [out / "split.json", out / "vocab.txt"]
    if cfg["profile"] == "toy":
        nb, cnn = fit_oracles(cfg, prep)
        nb.save(out / "report_classifier.json")
        torch.save({"resolution": cnn.resolution, "state": cnn.state_dict()},
                   out / "image_classifier.pt")
        outputs += [out / "report_classifier.json", out / "image_classifier.pt"]
    _finish(cfg, out, "ingest", [], outputs,
            {"train": len(prep.train), "test": len(prep.test), "vocab_size": len(prep.vocab)})
    print(f"train {len(prep.train)}  test {len(prep.test)}  vocabulary {len(prep.vocab)}")
    return 0


def cmd_train_report(cfg: ExperimentConfig, args) -> int:
    prep = prepare(cfg)
    out = _step_dir(cfg, "report_gen")
    model = rg.new_model(cfg.report_config(), prep.vocab, cfg["seed"])
    model, trace = rg.train_report_generator(model, prep.train, cfg["report_epochs"], cfg["seed"])
    ckpt_io.save(ckpt_io.pack("report_gen", model, {"seed": cfg["seed"]}), out / "report_gen.pt")
    _write_json(out / "trace.json", {"loss": trace})
    _finish(cfg, out, "train-report", prep.inputs, [out / "report_gen.pt", out / "trace.json"])
    print(f"report generator: {len(trace)} epochs, final loss {trace[-1] if trace else 'n/a'}")
    return 0


def cmd_train_image(cfg: ExperimentConfig, args) -> int:
    prep = prepare(cfg)
    out = _step_dir(cfg, "image_gen")
    stage = args.stage
    if stage == 1:
        model = ig.new_model(cfg.image_config(), prep.vocab, cfg["seed"])
        epochs = cfg["stage1_epochs"]
    else:
        model = _image_model(cfg, prep, out / "stage1.pt")
        if model is None:
            raise PreconditionError("stage 2 needs a stage-1 checkpoint; run train-image --stage 1")
        epochs = cfg["stage2_epochs"]
    model, trace = ig.train_image_generator(model, prep.train, stage, epochs, cfg["seed"])
    path = out / f"stage{stage}.pt"
    ckpt_io.save(ckpt_io.pack("image_gen", model, {"seed": cfg["seed"], "stage": stage}), path)
    _write_json(out / f"trace_stage{stage}.json", trace)
    _finish(cfg, out, f"train-image --stage {stage}", prep.inputs,
            [path, out / f"trace_stage{stage}.json"], manifest_name=f"manifest_stage{stage}.json")
    print(f"image generator stage {stage}: {epochs} epochs")
    return 0


def cmd_train_cycle(cfg: ExperimentConfig, args) -> int:
    prep = prepare(cfg)
    w = cfg.workdir
    report = _report_model(cfg, prep, w / "report_gen" / "report_gen.pt")
    image = _image_model(cfg, prep, w / "image_gen" / "stage2.pt")
    if report is None or image is None:
        raise PreconditionError("cycle training needs pretrained generators; run train-report, "
                                "train-image --stage 1 and train-image --stage 2 first")
    config = cfg.cycle_config()
    report, image, traces = cycle.train_cycle(report, image, prep.train, config)
    out = _step_dir(cfg, "cycle")
    ckpt_io.save(ckpt_io.pack("report_gen", report, {"seed": cfg["seed"], "cycle": True}),
                 out / "report_gen.pt")
    ckpt_io.save(ckpt_io.pack("image_gen", image, {"seed": cfg["seed"], "cycle": True}),
                 out / "image_gen.pt")
    _write_json(out / "traces.json", traces)
    _finish(cfg, out, "train-cycle", prep.inputs,
            [out / "report_gen.pt", out / "image_gen.pt", out / "traces.json"],
            {"training": cycle.training_manifest(config, traces, {
                "report_gen": str(out / "report_gen.pt"), "image_gen": str(out / "image_gen.pt")})})
    first, last = traces["image_cycle"][0], traces["image_cycle"][-1]
    print(f"image cycle loss {first:.4f} -> {last:.4f}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    _require_toy(cfg, "evaluate")
    prep = prepare(cfg)
    nb, cnn = load_oracles(cfg, prep)
    report, image = latest_models(cfg, prep)
    bundle = explain.evaluate(report, image, cnn, nb, prep.test, prep.vocab,
                              ks=tuple(cfg["ks"]), seed=cfg["seed"])
    out = _step_dir(cfg, "evaluate")
    (out / "metrics.json").write_text(bundle.to_json(), encoding="utf-8")
    (out / "metrics.csv").write_text(bundle.csv_row(), encoding="utf-8")
    _finish(cfg, out, "evaluate", prep.inputs, [out / "metrics.json", out / "metrics.csv"])
    print(bundle.csv_row(), end="")
    return 0


def _table_row(acc) -> str:
    header = " | ".join(LABELS)
    row = " | ".join(f"{a:.2f}" for a in acc)
    return f"{header}\n{row}\n"


def cmd_trust(cfg: ExperimentConfig, args) -> int:
    _require_toy(cfg, "trust")
    prep = prepare(cfg)
    nb, _ = load_oracles(cfg, prep)
    report, image = latest_models(cfg, prep)
    result = explain.trust_evaluation(report, image, prep.test, nb, prep.vocab, cfg["seed"])
    shape_slots = sorted(TOY_LABEL_SLOTS.values())
    result.verdict["shape_label_mean_accuracy"] = float(
        np.mean([result.per_label_accuracy[i] for i in shape_slots]))
    out = _step_dir(cfg, "trust")
    (out / "trust.json").write_text(result.to_json(), encoding="utf-8")
    _finish(cfg, out, "trust", prep.inputs, [out / "trust.json"])
    print(_table_row(result.per_label_accuracy), end="")
    return 0


def cmd_faithfulness(cfg: ExperimentConfig, args) -> int:
    _require_toy(cfg, "faithfulness")
    prep = prepare(cfg)
    _, cnn = load_oracles(cfg, prep)
    report, image = latest_models(cfg, prep)
    result = explain.faithfulness_evaluation(report, image, cnn, prep.test, cfg["k"],
                                             cfg["seed"], prep.vocab)
    out = _step_dir(cfg, "faithfulness")
    (out / "faithfulness.json").write_text(result.to_json(), encoding="utf-8")
    _finish(cfg, out, "faithfulness", prep.inputs, [out / "faithfulness.json"])
    v = result.verdict
    print(f"top-{v['k']}: trained {v['trained_top_k']:.4f}  randomized "
          f"{v['randomized_top_k']:.4f}  faithful={v['faithful']}")
    return 0


def _slug(label: str) -> str:
    return label.lower().replace(" ", "_")


def cmd_gradcam(cfg: ExperimentConfig, args) -> int:
    _require_toy(cfg, "gradcam")
    prep = prepare(cfg)
    _, cnn = load_oracles(cfg, prep)
    out = _step_dir(cfg, "gradcam")
    for old in out.glob("*_cam.png"):
        old.unlink()
    test = prep.test
    images = D.resize_tensor(test.images, cnn.resolution)
    n = min(cfg["gradcam_images"], len(test))
    rows, outputs = [], []
    for i in range(n):
        scores = cnn.classify(images[i])
        entry = {"study_id": test.study_ids[i], "maps": []}
        for label in explain.top_labels(scores, cfg["gradcam_top"]):
            sal = explain.gradcam(cnn, images[i], label)
            path = out / f"{test.study_ids[i]}_{_slug(LABELS[label])}_cam.png"
            explain.save_overlay(images[i, 0].numpy(), sal, path)
            outputs.append(path)
            entry["maps"].append({"label": LABELS[label], "score": scores.scores[label]})
        placements = D.parse_toy_report(test.captions[i])
        if placements:
            shape = next(s for s in D.SHAPES if s in placements)
            sal = explain.gradcam(cnn, images[i], TOY_LABEL_SLOTS[shape])
            entry["target"] = {"shape": shape, "quadrant": placements[shape],
                               "mass": quadrant_mass(sal.values, placements[shape])}
        rows.append(entry)
    located = [r["target"]["mass"] >= 0.6 for r in rows if "target" in r]
    summary = {"images": n, "with_shape": len(located),
               "localized_fraction": float(np.mean(located)) if located else None,
               "alpha": explain.OVERLAY_ALPHA, "studies": rows}
    _write_json(out / "gradcam.json", summary)
    _finish(cfg, out, "gradcam", prep.inputs, [out / "gradcam.json", *outputs])
    print(f"{len(outputs)} saliency overlays; localized fraction {summary['localized_fraction']}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "ingest": cmd_ingest,
    "train-report": cmd_train_report,
    "train-image": cmd_train_image,
    "train-cycle": cmd_train_cycle,
    "evaluate": cmd_evaluate,
    "trust": cmd_trust,
    "faithfulness": cmd_faithfulness,
    "gradcam": cmd_gradcam,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclexr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--workdir", help="override workdir")
        p.add_argument("--seed", type=int, help="override seed")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override any config key (dotted for sections)")
        if name == "train-image":
            p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    return parser


def run(command: str, cfg: ExperimentConfig, args=None) -> int:
    if command not in COMMANDS:
        raise ConfigError(f"unknown subcommand {command!r}")
    torch.manual_seed(cfg["seed"])
    return COMMANDS[command](cfg, args)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.workdir is not None:
        overrides.append(f"workdir={args.workdir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = resolve_config(args.config, overrides, args.command)
        return run(args.command, cfg, args)
    except CycleXRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
