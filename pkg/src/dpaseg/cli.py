"""Command-line entry point: ``dpaseg <command> ...``.

Every command reads a flat ``key = value`` config (``--config``, ``--set``),
writes its outputs plus a ``manifest.json`` into ``--out``, logs to stderr and
prints machine-readable summaries to stdout. ``dpaseg rerun MANIFEST --out DIR``
repeats a recorded run from its manifest alone.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys

import numpy as np

from . import config as config_mod
from .data import (
    RasterScene,
    SynthSpec,
    generate_domain,
    load_domain,
    load_scene,
    load_truth,
    save_domain,
    save_label_png,
    save_rgb_png,
    save_scene,
    stitch_inference,
)
from .dpa import DpaSchedule, pseudo_label_batch, save_debug_pngs
from .errors import ConfigurationError, DataError, DpasegError
from .losses import CLASS_NAMES, compute_class_weights, count_classes, read_class_stats, write_class_stats
from .metrics import (
    dense_regions,
    evaluate_predictions,
    format_table,
    full_regions,
    load_regions,
    metrics,
    sparse_regions,
    write_report_csv,
)
from .runs import CONFIG_NAME, METRICS_NAME, RunManifest, tree_digest, utc_now, write_metrics_csv
from .tensor import no_grad, softmax_channels
from .trainer import TrainConfig, adapt, pretrain_source
from .unet import MicroUNet, UNetConfig

log = logging.getLogger("dpaseg")


# -- helpers -----------------------------------------------------------------


def class_names(k):
    return list(CLASS_NAMES[:k]) if k <= len(CLASS_NAMES) else [f"class_{i}" for i in range(1, k + 1)]


def synth_spec(cfg):
    kwargs = dict(
        num_classes=cfg["num_classes"],
        tile_size=cfg["tile_size"],
        region_count=cfg["region_count"],
        shape_mix=cfg["shape_mix"],
        pixel_std=cfg["pixel_std"],
        segment_jitter=cfg["segment_jitter"],
        unlabeled_fraction=cfg["unlabeled_fraction"],
        gain=cfg["gain"],
        offset=cfg["offset"],
        noise=cfg["noise"],
        freq_skew=cfg["freq_skew"],
        seed=cfg["seed"],
    )
    if cfg["frequencies"]:
        kwargs["frequencies"] = np.asarray(cfg["frequencies"])
    return SynthSpec(**kwargs)


def train_config(cfg):
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        poly_power=cfg["poly_power"],
        clip_norm=cfg["clip_norm"],
        lam=cfg["lam"],
        seed=cfg["seed"],
        hflip=cfg["hflip"],
        vflip=cfg["vflip"],
        rot90=cfg["rot90"],
        val_fraction=cfg["val_fraction"],
    )


def loss_weights(cfg, source, num_classes):
    if cfg["class_stats"]:
        _, _, counts = read_class_stats(cfg["class_stats"])
        if len(counts) != num_classes:
            raise ConfigurationError(f"{cfg['class_stats']} has {len(counts)} classes, model has {num_classes}")
    else:
        counts = count_classes((t.labels for t in source.tiles), num_classes)
    return compute_class_weights(counts)


def write_weights(path, weights, names):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# id name mu weight\n")
        for k, (name, mu, w) in enumerate(zip(names, weights.mu, weights.w), 1):
            fh.write(f"{k} {name.replace(' ', '_')} {mu!r} {w!r}\n")


def domain_paths(domain_dir):
    return {
        "source": os.path.join(domain_dir, "source"),
        "target": os.path.join(domain_dir, "target"),
        "truth": os.path.join(domain_dir, "truth"),
    }


def scene_files(path):
    if os.path.isfile(path):
        return [path]
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".msr"))
        if names:
            return [os.path.join(path, f) for f in names]
    raise DataError(f"no .msr rasters at {path}")


def load_model(path):
    if not os.path.isfile(path):
        raise ConfigurationError(f"checkpoint not found: {path}; run train-source first")
    return MicroUNet.load(path)


def _history_writer(out, cfg, prefix="epoch"):
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    every = max(1, cfg["checkpoint_every"])

    def on_epoch(epoch, model, history):
        write_metrics_csv(os.path.join(out, METRICS_NAME), history.epochs)
        if epoch % every == 0 or epoch == cfg["epochs"]:
            model.save(os.path.join(ckpt_dir, f"{prefix}_{epoch:04d}.ckpt"))

    return on_epoch


# -- commands ------------------------------------------------------------------
# Each takes (cfg, inputs, options, out) and returns the list of files written.


def cmd_synth(cfg, inputs, options, out):
    spec = synth_spec(cfg)
    root = os.path.join(out, "domains", cfg["name"])
    paths = domain_paths(root)
    for p in paths.values():
        if os.path.isdir(p):
            shutil.rmtree(p)
    source, _ = generate_domain(spec, cfg["n_source"], "source")
    target, truth = generate_domain(spec, cfg["n_target"], "target")
    save_domain(source, paths["source"])
    save_domain(target, paths["target"])
    save_domain(
        type(source)(
            [RasterScene(t.bands, lab, t.geo_id) for t, lab in zip(target.tiles, truth.open())], "source"
        ),
        paths["truth"],
    )
    k = spec.num_classes
    names = class_names(k)
    src_counts = count_classes((t.labels for t in source.tiles), k)
    tgt_counts = count_classes(truth.open(), k)
    stats = os.path.join(root, "class_stats.txt")
    write_class_stats(stats, src_counts, names)
    print(f"{'id':>3} {'class':<22}{'source':>10}{'target':>10}")
    for i in range(k):
        ps = src_counts[i] / max(src_counts.sum(), 1)
        pt = tgt_counts[i] / max(tgt_counts.sum(), 1)
        print(f"{i + 1:>3} {names[i]:<22}{ps:>10.4f}{pt:>10.4f}")
    return [root]


def cmd_train_source(cfg, inputs, options, out):
    source = load_domain(domain_paths(inputs["domain"])["source"], "source")
    k = cfg["num_classes"]
    model = MicroUNet(UNetConfig(source.tiles[0].bands.shape[0], k, cfg["depth"], cfg["base_width"], cfg["seed"]))
    weights = loss_weights(cfg, source, k)
    write_weights(os.path.join(out, "class_weights.txt"), weights, class_names(k))
    model, history = pretrain_source(
        model, source, train_config(cfg), weights=weights, on_epoch=_history_writer(out, cfg)
    )
    final = os.path.join(out, "model.ckpt")
    model.save(final)
    last = history.epochs[-1]
    print(f"loss_S={last['loss_S']!r} val_mIOU={last['val_mIOU']!r}")
    return [final, os.path.join(out, METRICS_NAME)]


def cmd_adapt(cfg, inputs, options, out):
    model = load_model(inputs["checkpoint"])
    paths = domain_paths(inputs["domain"])
    source = load_domain(paths["source"], "source")
    target = load_domain(paths["target"], "target")
    if model.config.num_classes != cfg["num_classes"]:
        raise ConfigurationError(
            f"checkpoint has {model.config.num_classes} classes, config says {cfg['num_classes']}"
        )
    weights = loss_weights(cfg, source, model.config.num_classes)
    tc = train_config(cfg)
    write_epoch = _history_writer(out, cfg)
    debug_dir = os.path.join(out, "debug")
    if options.get("debug_png"):
        os.makedirs(debug_dir, exist_ok=True)
    probe = target.bands([0])

    def on_epoch(epoch, m, history):
        write_epoch(epoch, m, history)
        if options.get("debug_png"):
            with no_grad():
                probs = softmax_channels(m.forward(probe))
            maps, _, ent = pseudo_label_batch(probs, DpaSchedule(tc.lam, tc.epochs, epoch))
            save_debug_pngs(ent[0], maps[0], os.path.join(debug_dir, f"epoch_{epoch:04d}"))

    model, history = adapt(model, source, target, tc, weights=weights, on_epoch=on_epoch)
    final = os.path.join(out, "model.ckpt")
    model.save(final)
    last = history.epochs[-1]
    print(f"loss_S={last['loss_S']!r} loss_T={last['loss_T']!r} n_pseudo={last['n_pseudo']}")
    return [final, os.path.join(out, METRICS_NAME)]


def cmd_infer(cfg, inputs, options, out):
    model = load_model(inputs["checkpoint"])
    written = []
    for path in scene_files(inputs["input"]):
        scene = load_scene(path)
        labels = stitch_inference(model, scene, cfg["tile"], cfg["overlap"])
        stem = os.path.splitext(os.path.basename(path))[0]
        msr = os.path.join(out, stem + ".msr")
        save_scene(RasterScene(np.zeros((0,) + labels.shape), labels, scene.geo_id, scene.resolution_tag), msr)
        png = os.path.join(out, stem + ".png")
        save_label_png(labels, png)
        written += [msr, png]
    print(f"tiles={len(written) // 2}")
    return written


def region_sets(cfg, truth, shape):
    if cfg["regions"]:
        return [load_regions(cfg["regions"])]
    mode = cfg["region_mode"]
    ids = truth.ids
    if mode == "full":
        return [full_regions(ids, shape)]
    sets = []
    if mode in ("dense", "both"):
        sets.append(dense_regions(ids, shape, seed=cfg["seed"]))
    if mode in ("sparse", "both"):
        sets.append(sparse_regions(ids, shape, seed=cfg["seed"]))
    if not sets:
        raise ConfigurationError(f"region_mode must be dense, sparse, both or full, got {mode!r}")
    return sets


def cmd_eval(cfg, inputs, options, out):
    truth = load_truth(inputs["truth"])
    preds = [load_scene(p).labels for p in scene_files(inputs["pred"])]
    if any(p is None for p in preds):
        raise DataError(f"{inputs['pred']}: prediction rasters carry no label plane")
    k = cfg["num_classes"]
    per_mode = {}
    for regions in region_sets(cfg, truth, preds[0].shape):
        per_mode[regions.mode] = metrics(evaluate_predictions(preds, truth, regions, k))
    csv_path = os.path.join(out, "report.csv")
    write_report_csv(csv_path, per_mode, class_names(k))
    table_path = os.path.join(out, "report.txt")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(format_table([(f"{cfg['name']} ({mode})", m) for mode, m in per_mode.items()]))
    for mode, m in per_mode.items():
        print(f"mode={mode} OA={m.oa:.2f} mF1={m.mf1:.2f} mIOU={m.miou:.2f}")
    return [csv_path, table_path]


def cmd_export_png(cfg, inputs, options, out):
    written = []
    for path in scene_files(inputs["input"]):
        scene = load_scene(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        if options.get("rgb"):
            if scene.bands.shape[0] < 3:
                raise DataError(f"{path}: no colour bands to export")
            target = os.path.join(out, stem + "_rgb.png")
            save_rgb_png(scene, target)
        else:
            if scene.labels is None:
                raise DataError(f"{path}: raster has no label plane; use --rgb for band composites")
            target = os.path.join(out, stem + ".png")
            save_label_png(scene.labels, target)
        written.append(target)
    print(f"files={len(written)}")
    return written


def cmd_experiment(cfg, inputs, options, out):
    from .experiment import run_shift_experiment, write_results_csv

    seeds = [int(s) for s in options.get("seeds", "0,1,2,3,4").split(",") if s.strip()]
    results = [run_shift_experiment(s) for s in seeds]
    path = os.path.join(out, "experiment.csv")
    write_results_csv(path, results)
    for r in results:
        print(
            f"seed={r.seed} baseline_mIOU={r.baseline_miou:.2f} adapted_mIOU={r.adapted_miou:.2f} "
            f"gain={r.gain:.2f} pseudo_acc={r.pseudo_acc_final:.4f}"
        )
    return [path]


COMMANDS = {
    "synth": cmd_synth,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "export-png": cmd_export_png,
    "experiment": cmd_experiment,
}

# Which config groups each command's --help lists.
GROUPS = {
    "synth": ("general", "synth"),
    "train-source": ("general", "model", "train"),
    "adapt": ("general", "model", "train"),
    "infer": ("general", "eval"),
    "eval": ("general", "eval"),
    "export-png": ("general",),
    "experiment": ("general",),
}


# -- driver --------------------------------------------------------------------


@contextlib.contextmanager
def thread_limit(n):
    if n and n > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            yield
    else:
        yield


def execute(command, cfg, config_path, inputs, options, out):
    """Run one command into ``out`` and write its manifest. Returns the manifest."""
    text = config_mod.dump(cfg)
    digests = {k: tree_digest(v) for k, v in sorted(inputs.items()) if os.path.exists(v)}
    manifest = RunManifest(
        command=command,
        config_path=config_path or "",
        config_text=text,
        seed=cfg["seed"],
        inputs=dict(inputs),
        options=dict(options),
        input_digests=digests,
        started=utc_now(),
    )
    manifest.run_id = manifest.compute_run_id()
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, CONFIG_NAME), "w", encoding="utf-8") as fh:
        fh.write(text)
    log.info("%s run %s -> %s", command, manifest.run_id, out)
    with thread_limit(cfg["threads"]):
        written = COMMANDS[command](cfg, inputs, options, out)
    manifest.outputs = [os.path.relpath(p, out) for p in written]
    manifest.finished = utc_now()
    manifest.save(out)
    return manifest


def rerun(manifest_path, out):
    m = RunManifest.load(manifest_path)
    if m.command not in COMMANDS:
        raise ConfigurationError(f"manifest names unknown command {m.command!r}")
    cfg = config_mod.resolve(config_mod.parse_text(m.config_text, manifest_path))
    for key, digest in m.input_digests.items():
        path = m.inputs.get(key)
        if path is None or not os.path.exists(path) or tree_digest(path) != digest:
            raise DataError(f"input {key!r} ({path}) differs from the recorded run")
    return execute(m.command, cfg, m.config_path, m.inputs, m.options, out)


INPUT_ARGS = {
    "synth": (),
    "train-source": (("domain", "domain directory holding source/ (and target/, truth/)"),),
    "adapt": (
        ("checkpoint", "pre-trained model from train-source"),
        ("domain", "domain directory holding source/ and target/"),
    ),
    "infer": (("checkpoint", "model checkpoint"), ("input", ".msr raster or directory of them")),
    "eval": (("pred", "directory of predicted .msr label rasters"), ("truth", "directory of truth .msr rasters")),
    "export-png": (("input", ".msr raster or directory of them"),),
    "experiment": (),
}

DESCRIPTIONS = {
    "synth": "Generate source, target and sealed target-truth tiles under OUT/domains/<name>/.",
    "train-source": "Supervised class-balanced pre-training on the source tiles.",
    "adapt": "Siamese joint training with dynamic pseudo-labels on the target tiles.",
    "infer": "Overlap-tile inference; writes label rasters and palette PNGs.",
    "eval": "Score predicted rasters against truth; writes report.csv and report.txt.",
    "export-png": "Export label rasters (or band composites with --rgb) as PNG.",
    "experiment": "Baseline-vs-adapted runs on the shipped synthetic shift task.",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dpaseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(
            name,
            help=DESCRIPTIONS[name],
            description=DESCRIPTIONS[name],
            epilog="config keys:\n" + config_mod.help_text(GROUPS[name]),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="key = value config file (include = other.cfg supported)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--threads", type=int, help="cap numeric worker threads (default: all logical cores)")
        p.add_argument("--out", required=True, help="output directory")
        for arg, text in INPUT_ARGS[name]:
            p.add_argument(f"--{arg}", required=True, help=text)
        if name == "adapt":
            p.add_argument("--debug-png", action="store_true", help="dump entropy and pseudo-label PNGs per epoch")
        if name == "export-png":
            p.add_argument("--rgb", action="store_true", help="export true-colour band composites")
        if name == "experiment":
            p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p = sub.add_parser("rerun", help="repeat a run from its manifest.json", description="Repeat a run from its manifest.json.")
    p.add_argument("manifest", help="manifest.json or the run directory holding it")
    p.add_argument("--out", required=True, help="output directory for the repeated run")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "rerun":
            rerun(args.manifest, args.out)
            return 0
        raw = config_mod.load_file(args.config) if args.config else {}
        raw.update(config_mod.parse_overrides(args.set))
        if args.threads is not None:
            raw["threads"] = str(args.threads)
        cfg = config_mod.resolve(raw)
        inputs = {arg: os.path.abspath(getattr(args, arg)) for arg, _ in INPUT_ARGS[args.command]}
        options = {}
        for opt in ("debug_png", "rgb", "seeds"):
            if getattr(args, opt, None):
                options[opt] = getattr(args, opt)
        execute(args.command, cfg, args.config, inputs, options, args.out)
    except DpasegError as exc:
        kind = type(exc).__name__
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
