"""Command-line entry point: ``adt <command>``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime or numeric failure.
The default output root is ``$ADT_OUTPUT_ROOT`` (``./runs`` when unset).
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
import typing
from pathlib import Path

import click
import numpy as np

from . import detector as det
from .attack import AttackConfig, attack_loss_value, pgd
from .evaluation import write_report
from .geometry import LabeledBoxes
from .presets import DESK_ATTACK, DESK_TRAIN, PRESETS, arm_configs, run_sweep, source_model_for
from .synthdata import CLASS_NAMES, DataConfig, GenerationError, make_dataset, read_dataset, write_dataset
from .trainer import (
    ConfigError,
    MetricsLog,
    TrainConfig,
    TrainData,
    TrainingError,
    configs_from_dict,
    configs_to_dict,
    evaluate_model,
    load_train_state,
    save_config,
    train,
)

OUTPUT_ROOT_ENV = "ADT_OUTPUT_ROOT"
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# attack fields whose flag would clash with or be unclear next to train fields
_ATTACK_FLAG = {"steps": "attack-steps", "terms": "attack-terms"}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


class Failure(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (TrainingError, det.DetectorError, GenerationError, FloatingPointError, OSError) as exc:
        raise Failure(str(exc), EXIT_RUNTIME) from exc
    except (ValueError, KeyError) as exc:
        # ConfigError, DatasetLoadError and malformed JSON all land here
        raise Failure(str(exc), EXIT_CONFIG) from exc


# ------------------------------------------------------------ config flags


def _field_flag(section: str, name: str) -> str:
    if section == "attack":
        return _ATTACK_FLAG.get(name, name.replace("_", "-"))
    return name.replace("_", "-")


def _config_options(fn):
    """Attach one flag per TrainConfig / AttackConfig field;
    unset flags fall back to ``--config`` and then to the defaults."""
    hints = {
        "train": typing.get_type_hints(TrainConfig),
        "attack": typing.get_type_hints(AttackConfig),
    }
    for section, cls in (("attack", AttackConfig), ("train", TrainConfig)):
        for f in reversed(dataclasses.fields(cls)):
            flag = _field_flag(section, f.name)
            default = getattr(cls(), f.name)
            hint = hints[section][f.name]
            help_text = f"[{section}] {f.name} (default {default})"
            dest = f"{section}__{f.name}"
            if f.name == "terms":
                opt = click.option(f"--{flag}", dest, default=None, help=help_text + "; comma separated")
            elif isinstance(default, tuple):
                opt = click.option(f"--{flag}", dest, nargs=2, type=float, default=None, help=help_text)
            elif hint is int or isinstance(default, int):
                opt = click.option(f"--{flag}", dest, type=int, default=None, help=help_text)
            else:
                opt = click.option(f"--{flag}", dest, type=float, default=None, help=help_text)
            fn = opt(fn)
    return fn


def _collect_configs(config_path, desk: bool, kwargs: dict) -> tuple[TrainConfig, AttackConfig]:
    data = {"train": {}, "attack": {}}
    if desk:
        data["train"].update(DESK_TRAIN)
        data["attack"].update(DESK_ATTACK)
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - {"train", "attack"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
        for section in ("train", "attack"):
            data[section].update(loaded.get(section, {}))
    for key in list(kwargs):
        if "__" not in key:
            continue
        value = kwargs.pop(key)
        if value is None or value == ():
            continue
        section, name = key.split("__", 1)
        if name == "terms":
            value = [t.strip() for t in value.split(",") if t.strip()]
        data[section][name] = value
    return configs_from_dict(data)


def _apply_switches(tc: TrainConfig, ac: AttackConfig, no_ad: bool, no_zz: bool, p_attack_given: bool):
    if no_ad and p_attack_given and ac.p_attack != 0:
        raise ConfigError("--no-ad conflicts with a non-zero --p-attack")
    if no_ad:
        ac = dataclasses.replace(ac, p_attack=0.0)
    if no_zz:
        tc = dataclasses.replace(tc, zoom_in=(1.0, 1.0), zoom_out=(1.0, 1.0), min_side=0.0)
    return tc, ac


# ---------------------------------------------------------------- commands


@click.group()
def main():
    """Adversarial-defense mean-teacher detector adaptation on synthetic data."""


@main.command("gen-data")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Dataset directory (default $ADT_OUTPUT_ROOT/data).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--corruption", type=click.Choice(["fog", "night"]), default="fog", show_default=True)
@click.option("--image-size", type=int, default=96, show_default=True)
@click.option("--num-classes", type=click.IntRange(1, len(CLASS_NAMES)), default=5, show_default=True)
@click.option("--n-source", type=int, default=200, show_default=True)
@click.option("--n-source-val", type=int, default=50, show_default=True)
@click.option("--n-target", type=int, default=200, show_default=True)
@click.option("--n-eval", type=int, default=100, show_default=True)
@click.option("--small-bias", type=click.FloatRange(0, 1), default=0.0, show_default=True, help="Extra probability of small objects.")
def gen_data(out_dir, seed, corruption, image_size, num_classes, n_source, n_source_val, n_target, n_eval, small_bias):
    """Generate the synthetic clear (source) / corrupted (target) dataset."""
    out = Path(out_dir) if out_dir else output_root() / "data"
    cfg = DataConfig(
        seed=seed,
        image_size=image_size,
        num_classes=num_classes,
        n_source=n_source,
        n_source_val=n_source_val,
        n_target=n_target,
        n_eval=n_eval,
        corruption=corruption,
        small_bias=small_bias,
    )
    ds = _run(make_dataset, cfg)
    _run(write_dataset, out, ds)
    for name, split in ds.splits.items():
        click.echo(f"{name}: {len(split)}")
    click.echo(f"wrote {out / 'manifest.json'}")


@main.command("train")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Run directory (default $ADT_OUTPUT_ROOT/train).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON file with 'train' and 'attack' sections.")
@click.option("--desk/--paper", default=True, show_default=True, help="Start from the one-CPU preset or from the plain defaults.")
@click.option("--no-ad", is_flag=True, help="Disable adversarial defense (P_attack = 0).")
@click.option("--no-zz", is_flag=True, help="Disable zoom-in zoom-out (ratios 1, no min-size filter).")
@click.option("--source-checkpoint", type=click.Path(dir_okay=False), default=None, help="Skip burn-in and start from this model.")
@click.option("--resume", is_flag=True, help="Continue from <out>/checkpoint.")
@_config_options
def train_cmd(data_dir, out_dir, config_path, desk, no_ad, no_zz, source_checkpoint, resume, **kwargs):
    """Burn-in on source, then mutual learning on target."""
    p_given = kwargs.get("attack__p_attack") is not None
    tc, ac = _run(_collect_configs, config_path, desk, kwargs)
    tc, ac = _run(_apply_switches, tc, ac, no_ad, no_zz, p_given)
    out = Path(out_dir) if out_dir else output_root() / "train"
    ds = _run(read_dataset, data_dir)
    data = TrainData.from_dataset(ds)
    _run(out.mkdir, parents=True, exist_ok=True)
    save_config(out / "config.json", tc, ac)
    state = None
    source = None
    if resume:
        ckpt = out / "checkpoint"
        if not (ckpt / "state.json").exists():
            raise Failure(f"no checkpoint to resume at {ckpt}", EXIT_CONFIG)
        state, _ = _run(load_train_state, ckpt)
        click.echo(f"resuming at iteration {state.iteration}")
    elif source_checkpoint:
        source, _ = _run(det.load_checkpoint, source_checkpoint)
    else:
        source = _run(source_model_for, data, tc)
        det.save_checkpoint(out / "source", source, {"config": configs_to_dict(tc, ac)["train"]})
    log = MetricsLog(out / "metrics.jsonl", {"config": configs_to_dict(tc, ac)}, append=resume)

    def echo(rec):
        log(rec)
        if rec.get("phase") == "eval":
            click.echo(f"iter {rec['iteration']}: teacher mAP50 {rec['teacher']['mAP50']:.2f}")

    state = _run(train, data, tc, ac, source_model=source, out_dir=out, log=echo, resume=state)
    if len(data.eval_images):
        report = evaluate_model(state.teacher, data.eval_images, data.eval_labels, ds.classes, tc)
        write_report(out / "report.json", report)
        click.echo(f"final teacher mAP50 {report['mAP50']:.2f}  mAP {report['mAP']:.2f}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True, help="Model path (without .json/.bin) or a run's checkpoint directory.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", default="target_eval", show_default=True)
@click.option("--model", type=click.Choice(["teacher", "student"]), default="teacher", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Write the report JSON here.")
def eval_cmd(checkpoint, data_dir, split, model, out_path):
    """Evaluate a checkpoint and print its report."""
    state = _load_model(checkpoint, model)
    ds = _run(read_dataset, data_dir)
    if split not in ds.splits:
        raise Failure(f"split {split!r} not in dataset (have {sorted(ds.splits)})", EXIT_CONFIG)
    s = ds[split]
    if any(lb is None for lb in s.labels):
        raise Failure(f"split {split!r} has unlabelled records", EXIT_CONFIG)
    report = _run(evaluate_model, state, s.images, s.labels, ds.classes)
    text = json.dumps(report, indent=2, sort_keys=True)
    if out_path:
        write_report(out_path, report)
    click.echo(text)


def _load_model(checkpoint, which="teacher") -> det.ModelState:
    path = Path(checkpoint)
    if path.is_dir():
        path = path / which
    if not path.with_suffix(".json").exists():
        raise Failure(f"checkpoint {path} not found", EXIT_CONFIG)
    state, _ = _run(det.load_checkpoint, path)
    return state


_VARIANTS = {"cls": ("cls",), "reg": ("reg",), "both": ("cls", "reg")}


@main.command("attack-demo")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", default="target_eval", show_default=True)
@click.option("--index", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Default $ADT_OUTPUT_ROOT/attack_demo.")
@click.option("--variants", default="cls,reg,both", show_default=True, help="Loss terms to attack with.")
@click.option("--alpha", type=float, default=1 / 255, show_default=True)
@click.option("--epsilon", type=float, default=4 / 255, show_default=True)
@click.option("--steps", type=int, default=3, show_default=True)
@click.option("--amplify", type=float, default=20.0, show_default=True, help="Perturbation magnification for the visualisation.")
@click.option("--score-threshold", type=float, default=0.8, show_default=True, help="Detections kept as attack targets.")
def attack_demo(checkpoint, data_dir, split, index, out_dir, variants, alpha, epsilon, steps, amplify, score_threshold):
    """Attack one image against its own confident detections and save the artefacts."""
    from PIL import Image

    state = _load_model(checkpoint)
    ds = _run(read_dataset, data_dir)
    if split not in ds.splits or not 0 <= index < len(ds[split]):
        raise Failure(f"no image {index} in split {split!r}", EXIT_CONFIG)
    img = ds[split].images[index]
    names = [v.strip() for v in variants.split(",") if v.strip()]
    bad = set(names) - set(_VARIANTS)
    if bad:
        raise Failure(f"unknown variants {sorted(bad)}; choose from {sorted(_VARIANTS)}", EXIT_CONFIG)
    try:
        cfgs = {v: AttackConfig(alpha=alpha, epsilon=epsilon, steps=steps, terms=_VARIANTS[v]) for v in names}
    except ValueError as exc:
        raise Failure(str(exc), EXIT_CONFIG) from exc
    out = Path(out_dir) if out_dir else output_root() / "attack_demo"
    out.mkdir(parents=True, exist_ok=True)

    def save(arr, name):
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(out / name)

    clean = det.detect(state, img)
    pseudo = clean.subset(clean.scores >= score_threshold).without_scores()
    save(img, "clean.png")
    summary = {"clean_detections": _dets_json(clean), "targets": len(pseudo), "variants": {}}
    for v, cfg in cfgs.items():
        adv, trace = _run(pgd, state, img, pseudo, cfg)
        final = float(attack_loss_value(state, adv, pseudo, cfg.terms)) if len(pseudo) else 0.0
        after = det.detect(state, adv)
        save(adv, f"adv_{v}.png")
        save(0.5 + amplify * (adv - img), f"perturbation_{v}.png")
        summary["variants"][v] = {
            "terms": list(cfg.terms),
            "trace": [float(t) for t in trace],
            "final_loss": final,
            "linf": float(np.abs(adv - img).max()),
            "detections": _dets_json(after),
        }
        click.echo(f"{v}: loss trace {[round(float(t), 4) for t in trace]} -> {final:.4f}; {len(after)} detections after")
    (out / "attack_demo.json").write_text(json.dumps(summary, indent=2))


def _dets_json(d: LabeledBoxes) -> list[dict]:
    return [
        {"class": int(c), "score": float(s), "box": [float(v) for v in b]}
        for b, c, s in zip(d.boxes, d.classes, d.scores)
    ]


@main.command("sweep")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="p-attack", show_default=True)
@click.option("--arms", default=None, help="Comma-separated arm names overriding the preset (e.g. mt,adt,p0.3).")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Default $ADT_OUTPUT_ROOT/sweep_<preset>.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--corruption", type=click.Choice(["fog", "night"]), default="fog", show_default=True)
@click.option("--small-bias", type=click.FloatRange(0, 1), default=0.0, show_default=True)
@click.option("--desk/--paper", default=True, show_default=True)
@click.option("--plot/--no-plot", default=True, show_default=True)
@click.option("--cache-dir", type=click.Path(file_okay=False), default=None, help="Source-model cache; default <out>/cache.")
@_config_options
def sweep(preset, arms, seeds, out_dir, config_path, corruption, small_bias, desk, plot, cache_dir, **kwargs):
    """Run a preset of ablation arms over several seeds (data generated per seed)."""
    tc, ac = _run(_collect_configs, config_path, desk, kwargs)
    arm_names = [a.strip() for a in arms.split(",")] if arms else list(PRESETS[preset])
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        for a in arm_names:
            arm_configs(a, tc, ac)
    except (ValueError, KeyError) as exc:
        raise Failure(str(exc), EXIT_CONFIG) from exc
    out = Path(out_dir) if out_dir else output_root() / f"sweep_{preset}"
    data_cfg = DataConfig(corruption=corruption, small_bias=small_bias)

    def progress(res):
        click.echo(f"seed {res.seed} {res.arm}: mAP50 {res.final.get('mAP50', float('nan')):.2f} ({res.seconds:.0f}s)")

    summary = _run(run_sweep, arm_names, seed_list, data_cfg, tc, ac, out, Path(cache_dir) if cache_dir else out / "cache", progress)
    for name in summary["order"]:
        click.echo(f"{name}: mean mAP50 {summary['arms'][name]['mean_mAP50']:.2f}")
    if plot:
        from .plots import plot_curves, plot_sweep

        plot_sweep(summary, out / "sweep.png")
        logs = sorted(out.glob("seed*/*/metrics.jsonl"))
        if logs:
            plot_curves(logs, out / "curves.png")


@main.command("plot")
@click.argument("inputs", nargs=-1, type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Image file to write.")
def plot_cmd(inputs, out_path):
    """Plot mAP-vs-iteration from metrics logs, or P_attack bars from a sweep.json."""
    from .plots import PlotError, plot_curves, plot_sweep

    try:
        if len(inputs) == 1 and Path(inputs[0]).name == "sweep.json":
            plot_sweep(json.loads(Path(inputs[0]).read_text()), out_path)
        else:
            plot_curves(inputs, out_path)
    except (PlotError, json.JSONDecodeError) as exc:
        raise Failure(str(exc), EXIT_CONFIG) from exc
    click.echo(f"wrote {out_path}")


@main.command("show-config")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--desk/--paper", default=True, show_default=True)
@_config_options
def show_config(config_path, desk, **kwargs):
    """Print the fully resolved configuration as JSON."""
    tc, ac = _run(_collect_configs, config_path, desk, kwargs)
    click.echo(json.dumps(configs_to_dict(tc, ac), indent=2, sort_keys=True))


def run(argv=None) -> int:
    """Invoke the CLI without exiting the interpreter; returns the exit code."""
    try:
        main.main(args=argv, prog_name="adt", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(run())
