"""``sgdr`` command line: gen-data | train | eval | ablate | plot.

Training options resolve as flag > config file (YAML or JSON, TrainConfig
field names) > preset.  Every training run writes ``run_manifest.json`` before
the first step; ``sgdr train --config <run_manifest.json>`` replays it.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from . import __version__
from .losses import TrainingDivergenceError, weights_dict
from .metrics import EvalReport, evaluate
from .networks import load_checkpoint
from .phantom import MANIFEST_NAME, SOURCE, PhantomSpec, build_dataset, load_eval_set, load_manifest, read_sample
from .trainer import HISTORY_LOG, TRAIN_LOG, AblationFlags, TrainConfig, infer, train

log = logging.getLogger("sgdr")

RUN_MANIFEST = "run_manifest.json"
TIMINGS = "timings.json"
PRESETS = {"paper": TrainConfig, "desk": TrainConfig.desk}

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

# (row label, flags) in table order; the full model comes last
ABLATION_ROWS = (
    ("SGDR w/o content discriminator", AblationFlags(use_content_discriminator=False)),
    ("SGDR w/o feature discriminator", AblationFlags(use_feature_discriminator=False)),
    ("SGDR w/o L^v_seg", AblationFlags(use_Lv_seg=False)),
    ("SGDR", AblationFlags()),
)
BASELINE_ROW = ("No adaptation", AblationFlags(no_adaptation=True))


@dataclass
class RunManifest:
    command: str
    config: dict
    data: str
    seed: int
    revision: str
    outputs: Dict[str, str]
    started_utc: str
    argv: List[str] = field(default_factory=list)
    kind: str = "run_manifest"

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        rev = out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        rev = "unknown"
    return f"sgdr {__version__} ({rev})"


# ------------------------------------------------------------------- config

def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


_FLAG_FIELDS = {
    "seed": "seed",
    "epochs_constant": "epochs_constant",
    "epochs_decay": "epochs_decay",
    "batch_size": "batch_size",
    "lr_seg": "lr_seg",
    "lr_other": "lr_other",
    "width": "width_multiplier",
    "checkpoint_every": "checkpoint_every",
    "feature_adv_form": "feature_adv_form",
}
_LAMBDA_FLAGS = ("cc", "recon", "latent", "c_adv", "domain_adv", "seg", "f_adv", "KL")


def resolve_config(args) -> TrainConfig:
    """preset -> config file -> explicit flags."""
    d = PRESETS[args.preset]().to_dict()
    file_cfg = {}
    if args.config:
        file_cfg = load_config_file(args.config)
        if file_cfg.get("kind") == "run_manifest":
            file_cfg = file_cfg["config"]
    d = _merge(d, file_cfg)
    flags = {}
    for attr, name in _FLAG_FIELDS.items():
        if getattr(args, attr, None) is not None:
            flags[name] = getattr(args, attr)
    weights = {f"lambda_{n}": getattr(args, f"lambda_{n}") for n in _LAMBDA_FLAGS
               if getattr(args, f"lambda_{n}", None) is not None}
    if weights:
        flags["weights"] = weights
    ablation = {}
    if getattr(args, "ablate_content_disc", None):
        ablation["use_content_discriminator"] = False
    if getattr(args, "ablate_feature_disc", None):
        ablation["use_feature_discriminator"] = False
    if getattr(args, "ablate_lv_seg", None):
        ablation["use_Lv_seg"] = False
    if getattr(args, "no_adaptation", None):
        ablation["no_adaptation"] = True
    if ablation:
        flags["ablation"] = ablation
    if getattr(args, "no_augment", None):
        flags["augment"] = None
    return TrainConfig.from_dict(_merge(d, flags))


def _data_root(args) -> str:
    if args.data:
        return args.data
    if args.config:
        cfg = load_config_file(args.config)
        if cfg.get("kind") == "run_manifest":
            return cfg["data"]
    print("error: --data is required", file=sys.stderr)
    raise SystemExit(EXIT_USAGE)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    d = PhantomSpec().to_dict()
    if args.config:
        d = _merge(d, load_config_file(args.config))
    for attr, name in (("size", "image_size"), ("n_source", "num_source"), ("n_target", "num_target"),
                       ("n_eval", "num_eval_target"), ("seed", "anatomy_seed"), ("spacing", "spacing_mm")):
        if getattr(args, attr) is not None:
            d[name] = getattr(args, attr)
    manifest = build_dataset(PhantomSpec.from_dict(d), args.out)
    print(Path(manifest.root) / MANIFEST_NAME)
    return 0


def run_training(data_root, config: TrainConfig, out_dir, argv: Sequence[str] = (), resume_from=None,
                 stop_after_epoch: Optional[int] = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_root)
    if resume_from is None:
        RunManifest(
            command="train",
            config=config.to_dict(),
            data=str(Path(data_root).resolve()),
            seed=config.seed,
            revision=source_revision(),
            outputs={"train_log": TRAIN_LOG, "history": HISTORY_LOG, "checkpoints": "checkpoints"},
            started_utc=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            argv=list(argv),
        ).write(out_dir / RUN_MANIFEST)
    t0 = time.perf_counter()
    result = train(manifest, config, out_dir, resume_from=resume_from, stop_after_epoch=stop_after_epoch)
    (out_dir / TIMINGS).write_text(json.dumps({"train_seconds": round(time.perf_counter() - t0, 3)}) + "\n")
    return result


def cmd_train(args) -> int:
    config = resolve_config(args)
    log.info("loss weights %s", weights_dict(config.weights))
    try:
        result = run_training(_data_root(args), config, args.out, args.argv, args.resume, args.stop_after_epoch)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if result.history:
        print(json.dumps(result.history[-1]))
    print(result.checkpoint)
    return 0


def evaluate_checkpoint(checkpoint, data_root, self_consistency: bool = False) -> EvalReport:
    models, meta = load_checkpoint(checkpoint)
    encoder = meta.get("inference_encoder", "E_c_tgt")
    samples = load_eval_set(load_manifest(data_root))
    preds = [infer(models, s.image, encoder) for s in samples]
    refs = preds if self_consistency else [s.mask for s in samples]
    return evaluate(preds, refs, samples[0].image.spacing_mm)


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_MISSING
    report = evaluate_checkpoint(args.checkpoint, args.data, args.self_consistency)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = report.to_table()
    (out / "eval_table.txt").write_text(table + "\n")
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    print(table)
    return 0


def _finished_history(run_dir: Path, config: TrainConfig, data_root) -> Optional[List[dict]]:
    """History of an already completed identical run, else None."""
    try:
        rm = json.loads((run_dir / RUN_MANIFEST).read_text())
        hist = [json.loads(ln) for ln in (run_dir / HISTORY_LOG).read_text().splitlines() if ln]
    except (OSError, ValueError):
        return None
    same = rm.get("config") == json.loads(json.dumps(config.to_dict())) and \
        rm.get("data") == str(Path(data_root).resolve())
    if same and hist and hist[-1]["epoch"] == config.total_epochs:
        return hist
    return None


def run_sweep(data_root, base: TrainConfig, out_dir, include_baseline: bool = True,
              reuse: bool = True) -> Dict[str, dict]:
    """Train every ablation row (and the baseline); returns label -> final history row."""
    out_dir = Path(out_dir)
    rows = list(ABLATION_ROWS) + ([BASELINE_ROW] if include_baseline else [])
    results = {}
    for label, flags in rows:
        cfg = replace(base, ablation=flags)
        run_dir = out_dir / _slug(label)
        hist = _finished_history(run_dir, cfg, data_root) if reuse else None
        if hist is None:
            log.info("training %s", label)
            hist = run_training(data_root, cfg, run_dir, ["ablate", label]).history
        results[label] = hist[-1]
    return results


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_")


def ablation_table(results: Dict[str, dict]) -> str:
    head = f"{'Method':<32}{'MYO':>8}{'LV':>8}{'RV':>8}{'Average':>9}"
    lines = ["# mean Dice (%) on target eval slices", head]
    for label, _ in ABLATION_ROWS:
        r = results[label]
        d = r["dice"]
        lines.append(f"{label:<32}{d['MYO']:>8.2f}{d['LV']:>8.2f}{d['RV']:>8.2f}{r['mean_dice']:>9.2f}")
    if BASELINE_ROW[0] in results:
        r = results[BASELINE_ROW[0]]
        d = r["dice"]
        lines.append(f"# {BASELINE_ROW[0]}: MYO {d['MYO']:.2f} LV {d['LV']:.2f} RV {d['RV']:.2f} "
                     f"Average {r['mean_dice']:.2f}")
    return "\n".join(lines)


def parse_ablation_table(text: str) -> Dict[str, float]:
    """Row label -> average Dice."""
    out = {}
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#") or ln.startswith("Method"):
            continue
        parts = ln.rsplit(None, 4)
        out[parts[0].strip()] = float(parts[-1])
    return out


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    try:
        results = run_sweep(_data_root(args), base, args.out, reuse=not args.no_reuse)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(args.out)
    table = ablation_table(results)
    (out / "ablation_table.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(table)
    return 0


def cmd_plot(args) -> int:
    from . import plots

    run = Path(args.run)
    out = Path(args.out) if args.out else run / "plots"
    rows = plots.read_jsonl(run / TRAIN_LOG)
    if not rows:
        print(f"error: {run / TRAIN_LOG} is empty or missing", file=sys.stderr)
        return EXIT_MISSING
    written = plots.plot_loss_curves(rows, out)
    history = plots.read_jsonl(run / HISTORY_LOG)
    if history:
        written += plots.plot_metric_history(history, out)
    ckpts = sorted((run / "checkpoints").glob("epoch_*.ckpt"))
    data = args.data
    if data is None and (run / RUN_MANIFEST).exists():
        data = json.loads((run / RUN_MANIFEST).read_text())["data"]
    if ckpts and data and Path(data).exists():
        models, meta = load_checkpoint(args.checkpoint or ckpts[-1])
        manifest = load_manifest(data)
        samples = load_eval_set(manifest)[: args.samples]
        source = read_sample(manifest.paths(SOURCE)[0]).image.pixels
        panels = plots.qualitative_panels(models, samples, source, meta.get("inference_encoder", "E_c_tgt"))
        written.append(plots.plot_overlay_grid(panels, out / "qualitative.png"))
    for p in written:
        print(p)
    return 0


# ------------------------------------------------------------------ parser

def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="YAML/JSON file with TrainConfig fields, or a run_manifest.json")
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper",
                   help="base schedule: paper (150+150 epochs) or desk (30+30)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs-constant", type=int)
    p.add_argument("--epochs-decay", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-seg", type=float)
    p.add_argument("--lr-other", type=float)
    p.add_argument("--width", type=float, help="channel width multiplier")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--feature-adv-form", choices=("lsgan", "log"))
    p.add_argument("--no-augment", action="store_true", default=None)
    for n in _LAMBDA_FLAGS:
        p.add_argument(f"--lambda-{n.replace('_', '-')}", dest=f"lambda_{n}", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgdr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--size", type=int)
    g.add_argument("--n-source", type=int)
    g.add_argument("--n-target", type=int)
    g.add_argument("--n-eval", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--spacing", type=float, nargs=2)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    _add_train_options(t)
    t.add_argument("--ablate-content-disc", action="store_true", default=None)
    t.add_argument("--ablate-feature-disc", action="store_true", default=None)
    t.add_argument("--ablate-lv-seg", action="store_true", default=None)
    t.add_argument("--no-adaptation", action="store_true", default=None,
                   help="source-only segmenter: no translation, no critics")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after-epoch", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the target eval split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--self-consistency", action="store_true",
                   help="use the model's own predictions as reference (harness check)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the ablation rows plus the baseline and tabulate")
    _add_train_options(a)
    a.add_argument("--no-reuse", action="store_true", help="retrain rows even if finished runs exist")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="loss curves, metric curves and overlay panels")
    pl.add_argument("--run", required=True, help="training output directory")
    pl.add_argument("--out")
    pl.add_argument("--data")
    pl.add_argument("--checkpoint")
    pl.add_argument("--samples", type=int, default=4)
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
