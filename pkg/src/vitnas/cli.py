"""Command-line entry points: synth, train, search, eval, cost, space.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
Every run writes a manifest (config snapshot + seeds + version) next to its
outputs, and report-producing commands render a PNG beside the .jsonl.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, plots
from . import evolution as evo
from . import supernet as sn
from . import trainer as tr
from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .dataio import load_dataset, save_dataset, split_for_search, synth_dataset
from .errors import DataError, InfeasibleConstraint, SpecError, TrainingAborted
from .metrics import Geometry, count_flops, count_params
from .runconfig import load_runconfig
from .space import (ArchConfig, cardinality, maximal_arch, minimal_arch,
                    parse_arch_key, preset, validate)


def _write_manifest(outdir: Path, command: str, cfg_raw, seeds: dict, extra=None):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": cfg_raw,
        "seeds": seeds,
    }
    if extra:
        manifest.update(extra)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _write_jsonl(path: Path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _load_data(cfg):
    if not cfg.data.train or not cfg.data.val:
        raise SpecError("config data section needs 'train' and 'val' dataset paths")
    train_ds = load_dataset(cfg.data.train)
    val_ds = load_dataset(cfg.data.val)
    if train_ds.images.shape[1:] != val_ds.images.shape[1:]:
        raise DataError("train and val datasets disagree on image shape")
    if train_ds.classes != val_ds.classes:
        raise DataError("train and val datasets disagree on class count")
    return train_ds, val_ds


def _geometry(cfg, ds):
    _, h, w, c = ds.images.shape
    return Geometry(height=h, width=w, channels=c, patch=cfg.data.patch,
                    classes=ds.classes)


def _check_geometry(store, geom):
    if store.geom != geom:
        raise DataError(
            f"checkpoint geometry {store.geom} does not match dataset/config {geom}")


def _outdir(cfg, args) -> Path:
    out = Path(args.out_dir) if getattr(args, "out_dir", None) else cfg.resolve_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _store_digest(store) -> str:
    h = hashlib.sha1()
    for name in sorted(store.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(store.tensors[name]).tobytes())
    return h.hexdigest()[:16]


def _check_space_match(cfg, ck):
    cfg_digest = cfg.space.digest()
    ck_digest = ck.header.get("space_digest")
    if ck_digest != cfg_digest:
        raise SpecError(
            f"checkpoint space {ck_digest} does not match config space {cfg_digest}")


def _load_arch(value: str) -> ArchConfig:
    path = Path(value)
    if path.exists():
        doc = json.loads(path.read_text())
        return ArchConfig.from_dict(doc["arch"] if "arch" in doc else doc)
    return parse_arch_key(value)


# -- synth ---------------------------------------------------------------


def cmd_synth(args):
    ds = synth_dataset(classes=args.classes, samples=args.samples, size=args.size,
                       seed=args.seed, channels=args.channels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    print(f"wrote {out} ({args.samples} samples, {args.size}x{args.size}x"
          f"{args.channels}, {args.classes} classes, seed {args.seed})")
    return 0


# -- train ---------------------------------------------------------------


def cmd_train(args):
    cfg = load_runconfig(args.config)
    data = _load_data(cfg)
    geom = _geometry(cfg, data[0])
    outdir = _outdir(cfg, args)
    tcfg = cfg.train

    if args.resume:
        ck = load_checkpoint(args.resume)
        _check_space_match(cfg, ck)
        if ck.store.kind != args.sharing:
            raise SpecError(f"checkpoint is {ck.store.kind}, --sharing says {args.sharing}")
        _check_geometry(ck.store, geom)
        store = ck.store
        state = tr.TrainerState(tcfg)
        restore_optimizer(state.opt, ck.opt_state)
        if ck.rng_states:
            state.restore_rng(ck.rng_states)
        state.epoch = ck.epoch
    else:
        builder = sn.build_disjoint if args.sharing == "disjoint" else sn.build
        store = builder(cfg.space, geom, init_seed=tr.init_seed_for(tcfg),
                        gelu_form=cfg.gelu_form)
        state = None

    ckpt_path = outdir / "checkpoint.vnck"

    def save_state(epoch, st):
        save_checkpoint(ckpt_path, store, epoch=epoch, opt=st.opt,
                        rng_states=st.rng_states(),
                        train_config=tcfg.__dict__.copy())

    def epoch_cb(epoch, st):
        if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            save_state(epoch, st)

    log, state = tr.train_supernet(store, cfg.space, data, tcfg, state=state,
                                   epoch_cb=epoch_cb, stop_epoch=args.stop_after_epoch)
    save_state(state.epoch, state)

    mode = "a" if args.resume else "w"
    with open(outdir / "train_log.jsonl", mode) as f:
        for r in log.iterations:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    with open(outdir / "train_epochs.jsonl", mode) as f:
        for r in log.epochs:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    _write_manifest(outdir, "train", cfg.raw,
                    {"train_seed": tcfg.seed},
                    {"sharing": args.sharing, "space_digest": cfg.space.digest(),
                     "store_digest": _store_digest(store),
                     "epochs_run": state.epoch})
    if log.epochs:
        try:
            plots.train_curves(log, outdir / "train_loss.png")
        except Exception as e:  # plotting must not kill a finished run
            print(f"warning: could not render train_loss.png: {e}", file=sys.stderr)
        print(f"epoch {state.epoch}: mean loss {log.epochs[-1]['mean_loss']:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


# -- search ---------------------------------------------------------------


def cmd_search(args):
    cfg = load_runconfig(args.config)
    ck = load_checkpoint(args.checkpoint)
    _check_space_match(cfg, ck)
    store = ck.store
    _, val_ds = _load_data(cfg)
    _check_geometry(store, _geometry(cfg, val_ds))
    geom = store.geom
    outdir = _outdir(cfg, args)
    scfg = cfg.search

    images, labels = split_for_search(val_ds, scfg.eval_samples)
    fitness = evo.inherited_fitness(store, images, labels,
                                    batch_size=cfg.train.eval_batch)
    budget = evo.evolve_budget(scfg)
    if args.baseline == "random":
        history = evo.random_search(cfg.space, geom, scfg, fitness, budget)
        algo = "random"
    else:
        history = evo.evolve(cfg.space, geom, scfg, fitness)
        algo = "evolve"

    meta = {"kind": "meta", "algo": algo, "seed": scfg.seed, "budget": budget,
            "space_digest": cfg.space.digest(), "eval_samples": len(images)}
    records = [meta] + [{"kind": "candidate", **c.to_record()} for c in history]
    suffix = "_random" if algo == "random" else ""
    _write_jsonl(outdir / f"ledger{suffix}.jsonl", records)

    by_gen = {}
    for c in history:
        by_gen.setdefault(c.generation, []).append(c.fitness)
    gen_records, best_so_far = [], float("-inf")
    for g in sorted(by_gen):
        best_so_far = max(best_so_far, max(by_gen[g]))
        gen_records.append({"generation": g, "best": max(by_gen[g]),
                            "median": float(np.median(by_gen[g])),
                            "best_so_far": best_so_far})
    _write_jsonl(outdir / f"generations{suffix}.jsonl", gen_records)

    best = evo.best_candidate(history)
    validate(best.arch, cfg.space)
    best_doc = {"arch": best.arch.to_dict(), "key": best.arch.key(),
                "params": best.params, "fitness": best.fitness,
                "seed": scfg.seed, "algo": algo}
    best_name = "best_arch_random.json" if algo == "random" else "best_arch.json"
    (outdir / best_name).write_text(json.dumps(best_doc, indent=2, sort_keys=True))
    _write_manifest(outdir, "search", cfg.raw, {"search_seed": scfg.seed},
                    {"algo": algo, "budget": budget,
                     "checkpoint": str(args.checkpoint)})
    try:
        plots.search_progress([c.to_record() for c in history],
                              outdir / f"search_progress_{algo}.png")
    except Exception as e:
        print(f"warning: could not render search figure: {e}", file=sys.stderr)
    print(f"{algo}: best fitness {best.fitness:.4f} at {best.params} params "
          f"({best.arch.key()})")
    print(f"ledger: {outdir / f'ledger{suffix}.jsonl'} ({len(history)} candidates)")
    return 0


# -- eval ---------------------------------------------------------------


def cmd_eval(args):
    cfg = load_runconfig(args.config)
    ck = load_checkpoint(args.checkpoint)
    _check_space_match(cfg, ck)
    store = ck.store
    data = _load_data(cfg)
    _check_geometry(store, _geometry(cfg, data[0]))
    _, val_ds = data
    outdir = _outdir(cfg, args)
    arch = _load_arch(args.arch)
    if store.spec is not None:
        validate(arch, store.spec)

    modes = ["inherited", "finetune", "scratch"] if args.mode == "all" else [args.mode]
    report = {"arch": arch.key(), "params": count_params(arch, store.geom)}
    predictions = []

    def dump_preds(mode, st):
        view = sn.subnet_view(st, arch)
        for i in range(0, len(val_ds.images), cfg.train.eval_batch):
            logits = sn.forward(view, val_ds.images[i:i + cfg.train.eval_batch]).data
            for j, p in enumerate(logits.argmax(axis=1)):
                predictions.append({"mode": mode, "index": i + j,
                                    "label": int(val_ds.labels[i + j]), "pred": int(p)})

    for mode in modes:
        if mode == "inherited":
            before = _store_digest(store)
            acc = evo.evaluate(store, arch, val_ds.images, val_ds.labels,
                               cfg.train.eval_batch)
            after = _store_digest(store)
            report["inherited"] = {"accuracy": acc,
                                   "weights_untouched": before == after}
            dump_preds("inherited", store)
        elif mode == "finetune":
            # finetune a copy so other modes still see the checkpoint weights
            ft_store = store.clone()
            result = tr.finetune(ft_store, arch, data, cfg.train, args.finetune_epochs)
            report["finetune"] = {"accuracy": result["after"],
                                  "before": result["before"],
                                  "gain": result["after"] - result["before"],
                                  "epochs": args.finetune_epochs}
            dump_preds("finetune", ft_store)
        elif mode == "scratch":
            scratch_store, acc, _ = tr.train_standalone(arch, store.geom, data, cfg.train)
            report["scratch"] = {"accuracy": acc, "uses_checkpoint": False,
                                 "epochs": cfg.train.epochs}
            dump_preds("scratch", scratch_store)
        else:
            raise SpecError(f"unknown eval mode {mode!r}")

    (outdir / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _write_jsonl(outdir / "eval_predictions.jsonl", predictions)
    _write_manifest(outdir, "eval", cfg.raw, {"train_seed": cfg.train.seed},
                    {"arch": arch.key(), "modes": modes})
    try:
        plots.eval_modes(report, outdir / "eval_modes.png")
    except Exception as e:
        print(f"warning: could not render eval figure: {e}", file=sys.stderr)

    print(f"arch {arch.key()} ({report['params']} params)")
    for mode in ("inherited", "finetune", "scratch"):
        if mode in report:
            line = f"  {mode:>9}: top-1 {report[mode]['accuracy']:.4f}"
            if mode == "finetune":
                line += f" (gain {report[mode]['gain']:+.4f} over {report[mode]['before']:.4f})"
            if mode == "scratch":
                line += " (checkpoint weights ignored)"
            print(line)
    return 0


# -- cost / space ---------------------------------------------------------------


def _spec_from_args(args):
    if args.config:
        return load_runconfig(args.config).space
    lock = None if args.no_lock else 64
    return preset(args.preset, head_dim_lock=lock)


def cmd_cost(args):
    geom = Geometry(height=args.img, width=args.img, channels=args.channels,
                    patch=args.patch, classes=args.classes)
    print(f"cost model: FLOPs = multiply-accumulates (matrix products only; "
          f"softmax/LN/GELU excluded); image {args.img}x{args.img}x{args.channels}, "
          f"patch {args.patch}, {args.classes} classes")
    if args.arch:
        arch = _load_arch(args.arch)
        print(f"{arch.key()}: params {count_params(arch, geom):,}  "
              f"flops {count_flops(arch, geom):,}")
        return 0
    spec = _spec_from_args(args)
    lo, hi = minimal_arch(spec), maximal_arch(spec)
    print(f"smallest arch: params {count_params(lo, geom):,}  "
          f"flops {count_flops(lo, geom):,}")
    print(f"largest  arch: params {count_params(hi, geom):,}  "
          f"flops {count_flops(hi, geom):,}")
    return 0


def cmd_space(args):
    spec = _spec_from_args(args)

    def show(x):
        if isinstance(x, int):
            return str(x)
        return str(float(x)).rstrip("0").rstrip(".")

    fmt = lambda xs: "{" + ", ".join(show(x) for x in xs) + "}"
    print(f"embed dim : {fmt(spec.embed_choices())}")
    if spec.head_dim_lock is None:
        print(f"qkv dim   : {fmt(spec.qkv_choices())} (independent gene)")
    else:
        locked = sorted({g.qkv_dim for g in spec.layer_choices()})
        print(f"qkv dim   : {fmt(locked)} (locked to {spec.head_dim_lock} x heads)")
    print(f"mlp ratio : {fmt(spec.ratio_choices())}")
    print(f"heads     : {fmt(spec.heads_choices())}")
    print(f"depth     : {fmt(spec.depth_choices())}")
    print(f"per-layer gene combinations: {len(spec.layer_choices())}")
    print(f"cardinality: {cardinality(spec)}")
    return 0


# -- parser ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="vitnas",
                                description="One-shot NAS for vision transformers: "
                                            "weight-entangled supernet + evolution search")
    p.add_argument("--version", action="version", version=f"vitnas {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset file")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="phase 1: train the supernet")
    s.add_argument("--config", required=True)
    s.add_argument("--sharing", choices=("entangled", "disjoint"), default="entangled")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-after-epoch", type=int, default=None,
                   help="interrupt after this epoch (schedule unchanged)")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="phase 2: evolution search on a trained supernet")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--baseline", choices=("random",), default=None,
                   help="run the matched-budget random baseline instead")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval", help="evaluate a subnet: inherited / finetune / scratch")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--arch", required=True, help="arch descriptor file or key string")
    s.add_argument("--mode", choices=("inherited", "finetune", "scratch", "all"),
                   default="all")
    s.add_argument("--finetune-epochs", type=int, default=2)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cost", help="parameter / FLOP estimates")
    s.add_argument("--config")
    s.add_argument("--preset", choices=("tiny", "small", "base"), default="tiny")
    s.add_argument("--no-lock", action="store_true",
                   help="treat qkv dim as an independent gene")
    s.add_argument("--arch", help="arch descriptor file or key string")
    s.add_argument("--img", type=int, default=224)
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--classes", type=int, default=1000)
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("space", help="expanded choice sets and exact cardinality")
    s.add_argument("--config")
    s.add_argument("--preset", choices=("tiny", "small", "base"), default="tiny")
    s.add_argument("--no-lock", action="store_true")
    s.set_defaults(func=cmd_space)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (SpecError, InfeasibleConstraint) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except TrainingAborted as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
