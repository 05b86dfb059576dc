"""Command-line entry point: synth, train, track, eval, xval, bench.

Configuration comes from an optional flat ``key=value`` file (``--config``)
and repeated ``--set key=value`` overrides, validated against the schema
printed by ``--help``. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import typing
from multiprocessing import get_context
from pathlib import Path

from . import cascade as C
from . import dataio as D
from . import evalbench as E
from . import trainer as T
from .losses import LossWeights, MarginConfig, MaskLossConfig
from .temporal_select import SelectionConfig

log = logging.getLogger("cascadetrack")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- schema ----------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Key:
    name: str
    kind: str            # bool, int, float, str, ints, floats, opt_int, opt_float
    default: object
    doc: str = ""


_SKIP_TRAIN = {"weights", "margin", "mask", "seed"}
_EXTRA = [
    Key("synth.n_sequences", "int", 12, "sequences written by synth"),
    Key("train.w_cls", "float", LossWeights().cls, "classification loss weight"),
    Key("train.w_mask", "float", LossWeights().mask, "mask loss weight"),
    Key("train.w_box", "float", LossWeights().box, "box loss weight"),
    Key("train.margin_gamma", "float", MarginConfig().margin_gamma, "classification margin"),
    Key("train.mask_m", "int", MaskLossConfig().m, "angular margin multiplier"),
    Key("train.mask_lambda", "float", MaskLossConfig().lam, "mask weight decay"),
    Key("eval.exclude_reference", "bool", True, "skip the given first frame when scoring"),
    Key("bench.warmup", "int", 5, "untimed frames before measuring"),
]


def _kind(tp, default) -> str:
    tp = str(tp)
    if "bool" in tp:
        return "bool"
    if "tuple" in tp:
        return "floats" if default and isinstance(default[0], float) else "ints"
    if "None" in tp:
        return "opt_float" if "float" in tp else "opt_int"
    for k in ("int", "float", "str"):
        if k in tp:
            return k
    raise TypeError(tp)


def _from_dataclass(prefix, cls, skip=()):
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        out.append(Key(f"{prefix}.{f.name}", _kind(hints[f.name], default), default))
    return out


def schema() -> dict:
    keys = (_from_dataclass("synth", D.SynthConfig, {"seed"})
            + _from_dataclass("arch", C.ArchConfig)
            + _from_dataclass("train", T.TrainConfig, _SKIP_TRAIN)
            + _from_dataclass("select", SelectionConfig)
            + _EXTRA)
    return {k.name: k for k in keys}


def parse_value(key: Key, text: str):
    t = text.strip()
    try:
        if key.kind == "bool":
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if key.kind in ("opt_int", "opt_float"):
            if t.lower() in ("none", ""):
                return None
            return int(t) if key.kind == "opt_int" else float(t)
        if key.kind == "ints":
            return tuple(int(v) for v in t.replace("(", "").replace(")", "").split(",") if v.strip())
        if key.kind == "floats":
            return tuple(float(v) for v in t.replace("(", "").replace(")", "").split(",") if v.strip())
        if key.kind == "int":
            return int(t)
        if key.kind == "float":
            return float(t)
        return t
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {text!r} as {key.kind}") from None


def read_config_file(path) -> list:
    out = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip(), f"{path}:{n}"))
    return out


@dataclasses.dataclass
class RunConfig:
    values: dict
    seed: int = 0

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def synth(self) -> D.SynthConfig:
        kw = self.section("synth")
        kw.pop("n_sequences")
        return D.SynthConfig(**kw)

    def arch(self) -> C.ArchConfig:
        return C.ArchConfig(**self.section("arch"))

    def train(self) -> T.TrainConfig:
        kw = self.section("train")
        weights = LossWeights(kw.pop("w_cls"), kw.pop("w_mask"), kw.pop("w_box"))
        margin = MarginConfig(margin_gamma=kw.pop("margin_gamma"))
        mask = MaskLossConfig(kw.pop("mask_m"), kw.pop("mask_lambda"))
        return T.TrainConfig(seed=self.seed, weights=weights, margin=margin, mask=mask, **kw)

    def select(self) -> SelectionConfig:
        return SelectionConfig(**self.section("select"))


def build_config(config_path=None, overrides=(), seed: int = 0) -> RunConfig:
    sch = schema()
    values = {k: v.default for k, v in sch.items()}
    items = read_config_file(config_path) if config_path else []
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"--set expects key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        items.append((k.strip(), v.strip(), "--set"))
    for k, v, where in items:
        if k == "train.preset":
            name = v.strip()
            if name not in T.PRESETS:
                raise ConfigError(f"{where}: unknown preset {name!r}; choose from {sorted(T.PRESETS)}")
            for pk, pv in T.PRESETS[name].items():
                values[f"train.{pk}"] = pv
    for k, v, where in items:
        if k not in sch:
            raise ConfigError(f"{where}: unknown key {k!r}")
        values[k] = parse_value(sch[k], v)
    cfg = RunConfig(values, seed)
    try:
        cfg.synth(), cfg.arch(), cfg.train(), cfg.select()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def schema_help() -> str:
    lines = ["configuration keys (key=value; defaults shown):"]
    for k in schema().values():
        d = ",".join(map(str, k.default)) if isinstance(k.default, tuple) else k.default
        extra = f"  {k.doc}" if k.doc else ""
        lines.append(f"  {k.name} = {d}  [{k.kind}]{extra}")
    return "\n".join(lines)


# -- commands -------------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> list:
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.synth()
    n = cfg.values["synth.n_sequences"]
    paths = []
    for b in D.synth_dataset(n, sc, seed0=cfg.seed * 1000):
        paths.append(D.save_sequence(b, out / b.name))
    print(f"wrote {len(paths)} sequences to {out}")
    return paths


def _train(cfg: RunConfig, seqs):
    arch = cfg.arch()
    counts = {}
    pairs = T.training_pairs(seqs, cfg.train(), arch, counts)
    if not pairs:
        raise D.DataError("no training pairs could be extracted")
    if counts.get("dropped"):
        log.warning("%d annotated frames fall outside their search patch and were dropped", counts["dropped"])
    return T.train_full(pairs, cfg.train(), arch)


def cmd_train(cfg: RunConfig, data: Path, out: Path, plots: bool = True):
    seqs = D.load_root(data)
    res = _train(cfg, seqs)
    C.save_model(res.model, out, extra={"seed": cfg.seed, "sequences": [s.name for s in seqs]})
    hist = res.history
    T.write_loss_csv(hist, str(out) + ".loss.csv")
    if plots:
        from .plotting import plot_loss_curves
        plot_loss_curves(hist, str(out) + ".loss.png")
    print(f"trained on {len(seqs)} sequences, {len(hist) - 1} epochs; wrote {out}")
    return res


def track_bundle(model, bundle, cfg: RunConfig) -> dict:
    return C.track_sequence(model, bundle, cfg.select())


def cmd_track(cfg: RunConfig, model_path: Path, seq: Path, out: Path) -> dict:
    model = _load_model(model_path)
    bundle = D.load_sequence(seq)
    track = track_bundle(model, bundle, cfg)
    E.write_track_csv(track, out)
    print(f"tracked {len(track)} landmark(s) over {bundle.n_frames} frames; wrote {out}")
    return track


def _write_report(report, stem, plots=True):
    csv_path, txt_path = report.write(stem)
    if plots:
        from .plotting import render_report
        render_report(report, stem)
    sys.stdout.write(report.to_text())
    return csv_path, txt_path


def cmd_eval(cfg: RunConfig, tracks, seqs, out: str, plots: bool = True):
    if len(tracks) != len(seqs):
        raise ConfigError("give one --seq per --track")
    lms = []
    for tp, sp in zip(tracks, seqs):
        bundle = D.load_sequence(sp)
        try:
            track = E.read_track_csv(tp)
        except OSError as exc:
            raise D.DataError(f"cannot read {tp}: {exc.strerror}") from None
        except ValueError as exc:
            raise D.DataError(str(exc)) from None
        try:
            lms.extend(E.landmark_errors(track, bundle, cfg.values["eval.exclude_reference"]))
        except KeyError as exc:
            raise D.DataError(f"{tp}: {exc.args[0]}") from None
    report = E.aggregate_report(lms)
    _write_report(report, out, plots)
    return report


def _fold(args):
    cfg, k, train_dirs, test_dirs, out = args
    seqs = [D.load_sequence(d) for d in train_dirs]
    res = _train(cfg, seqs)
    C.save_model(res.model, out / f"fold{k}.ck")
    T.write_loss_csv(res.history, out / f"fold{k}.loss.csv")
    lms = []
    for d in test_dirs:
        b = D.load_sequence(d)
        track = track_bundle(res.model, b, cfg)
        E.write_track_csv(track, out / f"fold{k}_{b.name}.track.csv")
        lms.extend(E.landmark_errors(track, b, cfg.values["eval.exclude_reference"]))
    return lms


def cmd_xval(cfg: RunConfig, root: Path, out: Path, jobs: int = 1, plots: bool = True):
    dirs = D.sequence_dirs(root)
    if len(dirs) < 5:
        raise D.DataError(f"{root}: five-fold cross-validation needs >= 5 sequences, found {len(dirs)}")
    out.mkdir(parents=True, exist_ok=True)
    by_name = {d.name: d for d in dirs}
    folds = T.five_fold_split(sorted(by_name), seed=cfg.seed)
    tasks = [(dataclasses.replace(cfg, seed=cfg.seed + k), k, [by_name[n] for n in tr], [by_name[n] for n in te], out)
             for k, (tr, te) in enumerate(folds)]
    if jobs > 1:
        with get_context("fork").Pool(jobs) as pool:
            results = pool.map(_fold, tasks)
    else:
        results = [_fold(t) for t in tasks]
    pooled = []
    for k, lms in enumerate(results):
        E.aggregate_report(lms).write(out / f"fold{k}")
        pooled.extend(lms)
    report = E.aggregate_report(pooled)
    _write_report(report, out / "pooled", plots)
    return report


def cmd_bench(cfg: RunConfig, model_path: Path, seq: Path, out: Path | None = None):
    model = _load_model(model_path)
    bundle = D.load_sequence(seq)
    positions = {lid: bundle.first_position(lid) for lid in bundle.landmarks}
    tracker = C.Tracker(model, bundle.frames[0], positions, cfg.select())
    rep = E.fps_benchmark(tracker, bundle, cfg.values["bench.warmup"])
    text = rep.to_text()
    print(text)
    if out is not None:
        Path(out).write_text(text + "\n")
    return rep


def _load_model(path):
    try:
        return C.load_model(path)
    except OSError as exc:
        raise D.DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise D.DataError(f"{path}: {exc}") from None


# -- argument parsing -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = schema_help()
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="cascadetrack", description=__doc__.splitlines()[0],
                                epilog=epilog, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        sp.add_argument("--config", type=Path, help="key=value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--seed", type=int, default=0, help="seed for every random choice")
        return sp

    sp = add("synth", "write synthetic sequences")
    sp.add_argument("--out", type=Path, required=True)
    sp = add("train", "train a model on every sequence under a directory")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")
    sp.add_argument("--no-plots", action="store_true")
    sp = add("track", "track the first-frame landmarks through a sequence")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--seq", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="track CSV")
    sp = add("eval", "score track CSVs against annotations")
    sp.add_argument("--track", type=Path, action="append", required=True)
    sp.add_argument("--seq", type=Path, action="append", required=True)
    sp.add_argument("--out", required=True, help="report path stem (.csv, .txt, figures)")
    sp.add_argument("--no-plots", action="store_true")
    sp = add("xval", "five-fold cross-validation over a directory of sequences")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--no-plots", action="store_true")
    sp = add("bench", "measure tracking frame rate")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--seq", type=Path, required=True)
    sp.add_argument("--out", type=Path)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, args.set, args.seed)
        if args.cmd == "synth":
            cmd_synth(cfg, args.out)
        elif args.cmd == "train":
            cmd_train(cfg, args.data, args.out, not args.no_plots)
        elif args.cmd == "track":
            cmd_track(cfg, args.model, args.seq, args.out)
        elif args.cmd == "eval":
            cmd_eval(cfg, args.track, args.seq, args.out, not args.no_plots)
        elif args.cmd == "xval":
            cmd_xval(cfg, args.data, args.out, args.jobs, not args.no_plots)
        elif args.cmd == "bench":
            cmd_bench(cfg, args.model, args.seq, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except D.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except T.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
