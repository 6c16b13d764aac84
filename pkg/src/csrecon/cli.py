"""Command-line entry point: ``csrecon {synth,mask,train,reconstruct,evaluate,bench}``.

Runs are driven by an INI config (one section per stage). Any key can be
overridden through the environment as ``CSRECON_<SECTION>__<KEY>``, and
``--seed`` replaces the base seed from which all randomness is drawn.
Exit codes: 0 success, 2 configuration error, 3 data or shape error,
4 numerical divergence.
"""
import argparse
import configparser
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .cascade import MODEL_SPECS, build_model, load_model, parse_spec, reconstruct, save_model
from .data import load_dataset, save_dataset, synthesize_phantom
from .errors import (
    ConfigError,
    DegenerateInputError,
    DegenerateMaskError,
    DivergenceError,
    FormatError,
    ParameterError,
    ShapeError,
)
from .evaluate import benchmark_time, evaluate, plot_report
from .sampling import poisson_disc_mask, save_mask
from .train import TrainConfig, TrainState, deterministic_mode, load_train_state, save_train_state, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
ENV_PREFIX = "CSRECON_"
SPLITS = ("train", "val", "test")

DEFAULTS = {
    "run": {"seed": "0"},
    "data": {
        "volumes": "10",
        "slices": "8",
        "coils": "4",
        "ny": "64",
        "nz": "64",
        "split": "43,18,50",
        "dir": "data",
    },
    "sampling": {"r": "4", "center_radius": "16"},
    "model": {"spec": "IK", "config": "MC", "widths": "48,64,128,256", "width": "64"},
    "train": {
        "lr": "1e-3",
        "decay": "1e-6",
        "max_epochs": "50",
        "patience": "5",
        "batch_size": "4",
    },
    "eval": {"r_list": "2,4,8", "foreground_level": "0.05", "foreground_fraction": "0.02", "plots": "no"},
    "bench": {"slices": "256", "r": "4"},
}


# --- configuration -------------------------------------------------------------

def load_config(path=None, environ=None):
    """Defaults, then the INI file, then ``CSRECON_SECTION__KEY`` environment overrides."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_dict(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    environ = os.environ if environ is None else environ
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, _, key = name[len(ENV_PREFIX) :].partition("__")
        section, key = section.lower(), key.lower()
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value)
    return cp


def _get(cp, section, key, kind=str):
    try:
        raw = cp.get(section, key)
    except (configparser.NoSectionError, configparser.NoOptionError) as exc:
        raise ConfigError(f"missing [{section}] {key}") from exc
    try:
        if kind is bool:
            return cp.getboolean(section, key)
        if kind is list:
            return [float(v) for v in raw.split(",") if v.strip()]
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from exc


def split_counts(n, percents):
    """Largest-remainder apportionment of ``n`` items by ``percents``."""
    percents = np.asarray(percents, dtype=np.float64)
    if n < 0 or percents.size == 0 or np.any(percents < 0) or percents.sum() <= 0:
        raise ConfigError(f"cannot split {n} items by {percents.tolist()}")
    quotas = n * percents / percents.sum()
    counts = np.floor(quotas).astype(int)
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return [int(c) for c in counts]


# --- helpers -------------------------------------------------------------------

class Run:
    """Collects manifest fields for one subcommand invocation."""

    def __init__(self, args, cp):
        self.args = args
        self.cp = cp
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.seed = args.seed if args.seed is not None else _get(cp, "run", "seed", int)
        self.inputs = []
        self.outputs = []
        self.seeds = {"base": self.seed}
        self.start = datetime.datetime.now(datetime.timezone.utc).isoformat()

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def wrote(self, path):
        self.outputs.append(path)
        return path

    def write_manifest(self, status="ok"):
        manifest = {
            "subcommand": self.args.command,
            "config": os.path.abspath(self.args.config) if self.args.config else None,
            "config_resolved": {s: dict(self.cp[s]) for s in self.cp.sections()},
            "seeds": self.seeds,
            "deterministic": bool(self.args.deterministic),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": __version__,
            "status": status,
            "start": self.start,
            "end": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        with open(self.path(f"{self.args.command}.manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _data_dir(run):
    if run.args.data:
        return run.args.data
    d = _get(run.cp, "data", "dir")
    return d if os.path.isabs(d) else run.path(d)


def _split_files(run, split):
    root = _data_dir(run)
    listing = os.path.join(root, f"{split}.txt")
    if not os.path.exists(listing):
        raise FileNotFoundError(f"split list {listing} not found; run `csrecon synth` first")
    with open(listing) as fh:
        names = [line.strip() for line in fh if line.strip()]
    run.inputs.append(listing)
    return [os.path.join(root, n) for n in names]


def _load_split(run, split):
    files = _split_files(run, split)
    run.inputs.extend(files)
    return [load_dataset(p) for p in files]


def _model_from_config(run, nc):
    cp = run.cp
    spec = parse_spec(_get(cp, "model", "spec"), _get(cp, "model", "config"), nc)
    if spec.name not in MODEL_SPECS:
        raise ConfigError(f"unknown model spec {spec.name!r}; expected one of {', '.join(MODEL_SPECS)}")
    widths = _get(cp, "model", "widths", tuple)
    width = _get(cp, "model", "width", int)
    return build_model(spec, seed=run.seed, widths=widths, width=width)


def _train_config(run):
    cp = run.cp
    return TrainConfig(
        lr=_get(cp, "train", "lr", float),
        decay=_get(cp, "train", "decay", float),
        max_epochs=_get(cp, "train", "max_epochs", int),
        patience=_get(cp, "train", "patience", int),
        batch_size=_get(cp, "train", "batch_size", int),
        seed=run.seed,
        r=_get(cp, "sampling", "r", float),
        center_radius=_get(cp, "sampling", "center_radius", int),
    )


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# --- subcommands ---------------------------------------------------------------

def cmd_synth(run):
    cp = run.cp
    n = _get(cp, "data", "volumes", int)
    ns, nc = _get(cp, "data", "slices", int), _get(cp, "data", "coils", int)
    ny, nz = _get(cp, "data", "ny", int), _get(cp, "data", "nz", int)
    percents = _get(cp, "data", "split", list)
    if len(percents) != 3:
        raise ConfigError("[data] split needs three percentages (train, val, test)")
    root = _data_dir(run)
    os.makedirs(root, exist_ok=True)
    names = []
    vol_seeds = np.random.SeedSequence([run.seed, 0x5EED]).generate_state(n, np.uint32)
    run.seeds["volumes"] = [int(s) for s in vol_seeds]
    for i, s in enumerate(vol_seeds):
        volume, _ = synthesize_phantom(int(s), ns, nc, ny, nz)
        name = f"vol_{i:03d}.csr"
        save_dataset(run.wrote(os.path.join(root, name)), volume)
        names.append(name)
    start = 0
    for split, count in zip(SPLITS, split_counts(n, percents)):
        with open(run.wrote(os.path.join(root, f"{split}.txt")), "w") as fh:
            fh.writelines(f"{name}\n" for name in names[start : start + count])
        start += count
    _log(f"wrote {n} volumes to {root}")


def cmd_mask(run):
    cp = run.cp
    r = run.args.r if run.args.r is not None else _get(cp, "sampling", "r", float)
    ny, nz = _get(cp, "data", "ny", int), _get(cp, "data", "nz", int)
    mask = poisson_disc_mask(ny, nz, r, _get(cp, "sampling", "center_radius", int), run.seed)
    path = run.wrote(run.path(f"mask_R{r:g}.msk"))
    save_mask(path, mask)
    _log(f"mask R={r:g}: achieved fraction {mask.achieved_fraction:.4f} -> {path}")


def cmd_train(run):
    train_set = _load_split(run, "train")
    val_set = _load_split(run, "val")
    nc = train_set[0].meta.nc
    model = _model_from_config(run, nc)
    config = _train_config(run)
    state_path = run.path("train_state.csw")
    state = None
    if run.args.resume:
        state = load_train_state(run.args.resume, model)
        run.inputs.append(run.args.resume)
        _log(f"resuming after epoch {state.epoch}")
    history_path = run.path("history.csv")

    def checkpoint(m, st):
        save_train_state(state_path, m, st)
        st.history.to_csv(history_path)

    best, history = train(model, train_set, val_set, config, state=state or TrainState(),
                          on_epoch_end=checkpoint, log=_log)
    save_model(best, run.wrote(run.path("model.csw")), run.wrote(run.path("model.ini")))
    history.to_csv(run.wrote(history_path))
    run.wrote(state_path)
    _log(f"best epoch {history.best_epoch}, stopped at {history.stop_epoch}")


def _models_from_args(run):
    paths = run.args.model or [run.path("model.csw")]
    models = {}
    for p in paths:
        m = load_model(p)
        run.inputs.append(p)
        name = m.spec.name
        while name in models:
            name += "'"
        models[name] = m
    return models


def cmd_reconstruct(run):
    models = _models_from_args(run)
    r = run.args.r if run.args.r is not None else _get(run.cp, "sampling", "r", float)
    radius = _get(run.cp, "sampling", "center_radius", int)
    files = run.args.inputs or _split_files(run, "test")
    for path in files:
        volume = load_dataset(path)
        run.inputs.append(path)
        _, _, ny, nz = volume.data.shape
        mask = poisson_disc_mask(ny, nz, r, radius, run.seed)
        x_u = np.where(mask.grid, volume.data, np.zeros((), volume.data.dtype))
        stem = os.path.splitext(os.path.basename(path))[0]
        for name, model in models.items():
            image = reconstruct(model, x_u, mask)
            np.save(run.wrote(run.path(f"{stem}_{name}_R{r:g}.npy")), image.data)


def cmd_evaluate(run):
    cp = run.cp
    models = _models_from_args(run)
    test_set = _load_split(run, "test")
    r_list = run.args.r_list or _get(cp, "eval", "r_list", list)
    report = evaluate(
        models,
        test_set,
        r_list,
        seed=run.seed,
        center_radius=_get(cp, "sampling", "center_radius", int),
        level=_get(cp, "eval", "foreground_level", float),
        fraction=_get(cp, "eval", "foreground_fraction", float),
    )
    report.write_csv(run.wrote(run.path("metrics_per_slice.csv")))
    report.write_aggregate_csv(run.wrote(run.path("metrics_aggregate.csv")))
    with open(run.wrote(run.path("stats.txt")), "w") as fh:
        fh.write(f"policy: {report.policy}\nexcluded: {report.excluded}\n\n")
        fh.write(report.stats_text())
    if _get(cp, "eval", "plots", bool):
        for metric in ("nrmse", "psnr", "vif"):
            plot_report(report, run.wrote(run.path(f"{metric}_vs_R.png")), metric)
    for (model, r), row in report.aggregates().items():
        _log(f"{model:>12s} R={r:<4g} NRMSE {row['nrmse'][0]:.4f}  VIF {row['vif'][0]:.4f}")


def cmd_bench(run):
    cp = run.cp
    models = _models_from_args(run)
    data = np.concatenate([v.data for v in _load_split(run, "test")])
    n = _get(cp, "bench", "slices", int)
    r = _get(cp, "bench", "r", float)
    radius = _get(cp, "sampling", "center_radius", int)
    with open(run.wrote(run.path("bench.csv")), "w") as fh:
        fh.write("model,slices,ms_per_slice\n")
        for name, model in models.items():
            ms = benchmark_time(model, data, r=r, n_slices=n, seed=run.seed, center_radius=radius)
            fh.write(f"{name},{n},{ms:.3f}\n")
            _log(f"{name}: {ms:.2f} ms per slice over {n} slices")


COMMANDS = {
    "synth": cmd_synth,
    "mask": cmd_mask,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="csrecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"csrecon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="base seed (overrides [run] seed)")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible numerics")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--data", help="dataset directory holding the split lists")
        if name == "train":
            p.add_argument("--resume", help="training state file to continue from")
        if name in ("reconstruct", "evaluate", "bench"):
            p.add_argument("--model", action="append", help="model checkpoint (repeatable)")
        if name in ("mask", "reconstruct"):
            p.add_argument("--r", type=float, help="acceleration factor")
        if name == "reconstruct":
            p.add_argument("inputs", nargs="*", help="dataset files (default: the test split)")
        if name == "evaluate":
            p.add_argument("--r-list", type=lambda s: [float(v) for v in s.split(",")], help="e.g. 2,4,8")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    run = None
    try:
        cp = load_config(args.config)
        run = Run(args, cp)
        with deterministic_mode(args.deterministic):
            COMMANDS[args.command](run)
        run.write_manifest()
        return EXIT_OK
    except (ConfigError, ParameterError) as exc:
        code, status, message = EXIT_CONFIG, "config error", str(exc)
    except (FormatError, ShapeError, DegenerateMaskError, DegenerateInputError, OSError) as exc:
        code, status, message = EXIT_DATA, "data error", str(exc)
    except DivergenceError as exc:
        code, status, message = EXIT_DIVERGENCE, "diverged", str(exc)
    print(f"csrecon {args.command}: {status}: {message}", file=sys.stderr)
    if run is not None:
        run.write_manifest(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
