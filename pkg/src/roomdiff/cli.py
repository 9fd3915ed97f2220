"""Single command-line entry point for the whole pipeline.

Subcommands: gen-data, shape-train, train, sample, complete, rearrange,
text2scene, render, eval. Every flag named after a config key overrides the
config file; all randomness derives from --seed, and --threads 1 makes
every command bitwise reproducible. Exit codes: 0 ok, 2 configuration
error, 3 data error, 4 numeric divergence, 5 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .config import SCHEMA, class_table, config_snapshot, load_config
from .datagen import generate_scenes, load_corpus, write_corpus
from .denoiser import init_model, load_model, save_model
from .diffusion import ancestral_sample
from .errors import (CheckpointError, ConfigError, DataError, DivergenceError,
                     RoomdiffError)
from .evaluation import class_palette, evaluate_corpora, render_topdown, write_ppm
from .scene import decode_scene, encode_scene, load_scene, pad_scene, save_scene
from .shapes import build_library, load_library, save_library
from .tasks import (ArrangementInput, PartialScene, complete_scene,
                    rearrange_scene, text_to_scene)
from .text import MAX_TOKENS, Vocabulary, generate_prompt
from .training import (TrainState, gradient_audit, load_train_state,
                       run_training, save_train_state)

EXIT_CODES = (
    (ConfigError, 2),
    (DataError, 3),
    (DivergenceError, 4),
    (CheckpointError, 5),
)


def _add_common(parser):
    parser.add_argument("--config", help="plain-text key = value config file")
    for key in SCHEMA:
        parser.add_argument(
            "--" + key.name.replace("_", "-"), type=key.type, default=None,
            dest=key.name, metavar=key.type.__name__.upper(),
            help=f"{key.help} (default: {key.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roomdiff",
        description="Set-diffusion generation of desk-scale indoor scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural scene corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    _add_common(p)

    p = sub.add_parser("shape-train",
                       help="train the footprint codec and build a library")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train the scene denoiser")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="directory of a previous run to resume")
    p.add_argument("--audit", action="store_true",
                   help="finite-difference gradient audit before training")
    _add_common(p)

    p = sub.add_parser("sample", help="unconditional scene sampling")
    p.add_argument("--model", required=True, help="denoiser checkpoint")
    p.add_argument("--n", type=int, default=1, help="number of scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--render", action="store_true",
                   help="also write P6 rasters")
    _add_common(p)

    p = sub.add_parser("complete", help="complete a partial scene")
    p.add_argument("--model", required=True)
    p.add_argument("--partial", required=True,
                   help="scene file; frozen objects are kept")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("rearrange",
                       help="re-place given objects (sizes/classes/codes fixed)")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="scene file with objects")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("text2scene", help="sample a scene matching a prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True, help="quoted prompt text")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("render", help="rasterize a scene file")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="metric suite for two corpora")
    p.add_argument("--gen", required=True, help="generated scene directory")
    p.add_argument("--ref", required=True, help="reference scene directory")
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


def _config_from_args(args):
    overrides = {k.name: getattr(args, k.name, None) for k in SCHEMA}
    return load_config(args.config, overrides)


def _write_log(out_dir, record):
    with open(os.path.join(out_dir, "log.jsonl"), "a",
              encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _get_library(cfg, out_dir=None):
    """Load the configured shape library or build one deterministically."""
    if cfg.shape_library:
        return load_library(cfg.shape_library)
    rng = np.random.default_rng((cfg.seed, 100))
    lib = build_library(class_table(cfg), cfg.prototypes_per_class, rng,
                        epochs=cfg.codec_epochs, latent_dim=cfg.code_dim)
    if out_dir:
        save_library(lib, os.path.join(out_dir, "shapes.json"))
    return lib


def _check_model_matches(model, cfg):
    mc = model.config
    if mc.num_classes != len(class_table(cfg)) or mc.code_dim != cfg.code_dim:
        raise ConfigError(
            f"checkpoint dims (L={mc.num_classes}, F={mc.code_dim}) do not "
            f"match config (L={len(class_table(cfg))}, F={cfg.code_dim})")


def _load_scene_dir(path, nspec):
    if os.path.isfile(os.path.join(path, "manifest.json")):
        scenes, _ = load_corpus(path, nspec)
        return scenes
    files = sorted(glob.glob(os.path.join(path, "scene_*.json")))
    if not files:
        raise DataError(f"no scene files under {path}")
    return [load_scene(f, nspec) for f in files]


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    library = _get_library(cfg, out)
    scenes = generate_scenes(cfgmod.generator_config(cfg), library)
    manifest = write_corpus(scenes, cfgmod.generator_config(cfg),
                            cfgmod.norm_spec(cfg), out)
    _write_log(out, {"command": "gen-data", "config": config_snapshot(cfg),
                     "stats": manifest.stats})
    print(f"gen-data: wrote {len(scenes)} scenes to {out} "
          f"(obj={manifest.stats['obj_mean']:.2f} "
          f"sym={manifest.stats['sym_mean']:.2f} "
          f"piou={manifest.stats['piou_mean']:.4f})")
    return 0


def cmd_shape_train(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    rng = np.random.default_rng((cfg.seed, 100))
    log_rows = []
    lib = build_library(
        class_table(cfg), cfg.prototypes_per_class, rng,
        epochs=cfg.codec_epochs, latent_dim=cfg.code_dim,
        log=lambda e, loss, cd, kl: log_rows.append(
            {"epoch": e, "loss": loss, "cd": cd, "kl": kl}))
    path = os.path.join(out, "shapes.json")
    save_library(lib, path)
    with open(os.path.join(out, "codec_log.jsonl"), "w",
              encoding="utf-8") as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _write_log(out, {"command": "shape-train",
                     "config": config_snapshot(cfg),
                     "prototypes": len(lib.prototypes)})
    print(f"shape-train: {len(lib.prototypes)} prototypes -> {path} "
          f"(final cd={log_rows[-1]['cd']:.4f})")
    return 0


def _prompt_tokens(scenes, cfg, nspec, vocab):
    """One fixed prompt per training scene, padded to the token cap."""
    rng = np.random.default_rng((cfg.seed, 2))
    tokens = np.zeros((len(scenes), MAX_TOKENS), dtype=np.int64)
    for i, scene in enumerate(scenes):
        prompt = generate_prompt(scene, rng, nspec.classes, vocab)
        ids = prompt.token_ids
        tokens[i, :len(ids)] = ids
    return tokens


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    nspec = cfgmod.norm_spec(cfg)
    sched = cfgmod.schedule(cfg)
    scenes, _ = load_corpus(args.data, nspec)
    data = np.stack([
        encode_scene(pad_scene(s.objects, cfg.num_slots, cfg.code_dim,
                               s.room_type), nspec)
        for s in scenes])

    tokens = None
    vocab_size = 0
    if cfg.text_dim > 0:
        vocab = Vocabulary.for_classes(nspec.classes)
        vocab_size = len(vocab)
        tokens = _prompt_tokens(scenes, cfg, nspec, vocab)

    if args.resume:
        model = load_model(os.path.join(args.resume, "model.ckpt"))
        state = load_train_state(os.path.join(args.resume, "train.state"))
        _check_model_matches(model, cfg)
    else:
        dcfg = cfgmod.denoiser_config(cfg, vocab_size)
        model = init_model(dcfg, np.random.default_rng((cfg.seed, 0)))
        state = TrainState.fresh(model.param_count, 0)
        state.rng = np.random.default_rng((cfg.seed, 1))

    if args.audit:
        report = gradient_audit(model, sched,
                                np.random.default_rng((cfg.seed, 3)))
        if not report.passed:
            raise DivergenceError(
                f"gradient audit failed: max rel err {report.max_rel_err:.3e}"
                f" > {report.threshold}; worst {report.worst[:3]}")
        print(f"audit: max rel err {report.max_rel_err:.3e} "
              f"over {report.checked} coordinates")

    tcfg = cfgmod.train_config(cfg)
    ckpt = (os.path.join(out, "model.ckpt"), os.path.join(out, "train.state"))
    run_training(model, state, data, sched, tcfg, nspec, tokens=tokens,
                 log_path=os.path.join(out, "train_log.jsonl"),
                 checkpoint_paths=ckpt)
    save_model(model, ckpt[0])
    save_train_state(state, ckpt[1])
    _write_log(out, {"command": "train", "config": config_snapshot(cfg),
                     "steps": state.step, "running": state.running})
    print(f"train: {state.step} steps, running losses "
          + " ".join(f"{k}={v:.5f}" for k, v in sorted(state.running.items()))
          + f" -> {ckpt[0]}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    model = load_model(args.model)
    _check_model_matches(model, cfg)
    nspec = cfgmod.norm_spec(cfg)
    sched = cfgmod.schedule(cfg)
    rng = np.random.default_rng(cfg.seed)
    shape = (args.n, model.config.num_slots, model.config.row_dim)
    x = ancestral_sample(model, sched, shape, rng)
    palette = class_palette(len(nspec.classes))
    for i in range(args.n):
        scene = decode_scene(x[i], nspec, cfg.room_type)
        save_scene(os.path.join(out, f"scene_{i:05d}.json"), scene, nspec)
        if args.render:
            write_ppm(os.path.join(out, f"scene_{i:05d}.ppm"),
                      render_topdown(scene, palette))
    _write_log(out, {"command": "sample", "config": config_snapshot(cfg),
                     "n": args.n})
    print(f"sample: wrote {args.n} scenes to {out}")
    return 0


def cmd_complete(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    model = load_model(args.model)
    _check_model_matches(model, cfg)
    nspec = cfgmod.norm_spec(cfg)
    sched = cfgmod.schedule(cfg)
    partial = PartialScene.from_scene(load_scene(args.partial, nspec))
    for i in range(args.n):
        rng = np.random.default_rng((cfg.seed, i))
        scene, _ = complete_scene(model, sched, partial, nspec, rng,
                                  cfg.room_type)
        save_scene(os.path.join(out, f"completed_{i:05d}.json"), scene, nspec)
    _write_log(out, {"command": "complete", "config": config_snapshot(cfg),
                     "observed": partial.m, "n": args.n})
    print(f"complete: kept {partial.m} objects, wrote {args.n} completions "
          f"to {out}")
    return 0


def cmd_rearrange(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    model = load_model(args.model)
    _check_model_matches(model, cfg)
    nspec = cfgmod.norm_spec(cfg)
    sched = cfgmod.schedule(cfg)
    arr = ArrangementInput.from_scene(load_scene(args.input, nspec))
    for i in range(args.n):
        rng = np.random.default_rng((cfg.seed, i))
        scene, _ = rearrange_scene(model, sched, arr, nspec, rng,
                                   cfg.room_type)
        save_scene(os.path.join(out, f"arranged_{i:05d}.json"), scene, nspec)
    _write_log(out, {"command": "rearrange", "config": config_snapshot(cfg),
                     "objects": len(arr.records), "n": args.n})
    print(f"rearrange: placed {len(arr.records)} objects, wrote {args.n} "
          f"scenes to {out}")
    return 0


def cmd_text2scene(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    model = load_model(args.model)
    _check_model_matches(model, cfg)
    if not model.config.has_text:
        raise ConfigError("checkpoint was trained without text support")
    nspec = cfgmod.norm_spec(cfg)
    sched = cfgmod.schedule(cfg)
    vocab = Vocabulary.for_classes(nspec.classes)
    tokens = vocab.encode_text(args.prompt)
    for i in range(args.n):
        rng = np.random.default_rng((cfg.seed, i))
        scene, _ = text_to_scene(model, sched, tokens, nspec, rng,
                                 cfg.room_type)
        save_scene(os.path.join(out, f"scene_{i:05d}.json"), scene, nspec)
    _write_log(out, {"command": "text2scene", "config": config_snapshot(cfg),
                     "prompt": args.prompt, "n": args.n})
    print(f"text2scene: '{args.prompt}' -> {args.n} scenes in {out}")
    return 0


def cmd_render(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    nspec = cfgmod.norm_spec(cfg)
    scene = load_scene(args.scene, nspec)
    palette = class_palette(len(nspec.classes))
    stem = os.path.splitext(os.path.basename(args.scene))[0]
    path = os.path.join(out, stem + ".ppm")
    write_ppm(path, render_topdown(scene, palette))
    _write_log(out, {"command": "render", "scene": args.scene, "out": path})
    print(f"render: {args.scene} -> {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    out = _ensure_out(args.out)
    nspec = cfgmod.norm_spec(cfg)
    gen_scenes = _load_scene_dir(args.gen, nspec)
    ref_scenes = _load_scene_dir(args.ref, nspec)
    report = evaluate_corpora(
        gen_scenes, ref_scenes, len(nspec.classes),
        np.random.default_rng(cfg.seed),
        extractor=cfgmod.feature_extractor(cfg),
        sym_spec=cfgmod.sym_spec(cfg),
        sca_epochs=cfg.sca_epochs, sca_reshuffles=cfg.sca_reshuffles)
    report.write(os.path.join(out, "metrics.txt"),
                 os.path.join(out, "metrics.json"))
    _write_log(out, {"command": "eval", "config": config_snapshot(cfg),
                     "gen": args.gen, "ref": args.ref})
    print(f"eval: ckl={report.ckl:.4f} obj={report.obj_mean:.2f} "
          f"sym={report.sym_mean:.2f} piou={report.piou_mean:.4f} "
          f"sca={report.sca:.3f} rfid={report.rfid:.4f} "
          f"rkid={report.rkid:.5f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "shape-train": cmd_shape_train,
    "train": cmd_train,
    "sample": cmd_sample,
    "complete": cmd_complete,
    "rearrange": cmd_rearrange,
    "text2scene": cmd_text2scene,
    "render": cmd_render,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except RoomdiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for klass, code in EXIT_CODES:
            if isinstance(exc, klass):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
