"""Command-line entry point: ``adaptft <subcommand> [--config FILE] [--section.key VALUE ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import analysis, selftest
from .errors import AdaptftError
from .frontends import AdaptiveFrontEnd, ModelConfig
from .synth import Dataset, DatasetConfig, gen_dataset, load_dataset, save_dataset
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("adaptft")

ALLOCATION_HZ = 1600.0
SECTIONS = {"data": DatasetConfig, "val_data": DatasetConfig, "model": ModelConfig, "train": TrainConfig}
EXTRA_KEYS = {"data": {"path"}, "val_data": {"path"}}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_overrides(tokens: list[str]) -> dict[str, dict]:
    """``--section.key VALUE`` / ``--section.key=VALUE`` pairs to nested dicts; values are JSON when they parse."""
    out: dict[str, dict] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise UsageError(f"flag {tok!r} needs a value")
            val = tokens[i + 1]
            i += 1
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise UsageError(f"unknown config section {section!r} in {tok!r}")
        known = {f.name for f in fields(SECTIONS[section])} | EXTRA_KEYS.get(section, set())
        if name not in known:
            raise UsageError(f"unknown key {name!r} in section {section!r}")
        out.setdefault(section, {})[name] = _parse_value(val)
        i += 1
    return out


def resolve_config(path: str | None, overrides: dict[str, dict]) -> dict[str, dict]:
    cfg: dict[str, dict] = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise AdaptftError(f"config file {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise AdaptftError(f"config file {path} must hold a JSON object")
    for section, vals in overrides.items():
        cfg.setdefault(section, {}).update(vals)
    return cfg


def _dataset_config(section: dict) -> DatasetConfig:
    return DatasetConfig(**{k: v for k, v in section.items() if k != "path"})


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name) or {})


def _load_or_generate(section: dict) -> tuple[Dataset, dict]:
    """A dataset from ``path`` when given, otherwise generated; returns it with the resolved section."""
    if "path" in section:
        return load_dataset(section["path"]), {"path": str(section["path"])}
    dc = _dataset_config(section)
    return gen_dataset(dc), dc.to_dict()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg) -> int:
    section = _section(cfg, "data")
    for key, val in (("task", args.task), ("n_examples", args.n), ("seed", args.seed)):
        if val is not None:
            section[key] = val
    dc = _dataset_config(section)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = gen_dataset(dc)
    save_dataset(ds, out)
    write_json(out.parent / "effective_config.json", {"subcommand": "gen-data", "out": str(out), "data": dc.to_dict()})
    print(f"wrote {len(ds)} examples to {out}")
    return 0


def frequency_allocation(model) -> dict | None:
    fe = model.frontend
    if isinstance(fe, AdaptiveFrontEnd):
        return None
    sfm = analysis.sort_neurons_by_peak(fe.kernels(), 16000)
    return {"threshold_hz": ALLOCATION_HZ, "fraction_below": sfm.fraction_below(ALLOCATION_HZ)}


def cmd_train(args, cfg) -> int:
    out = _outdir(args.out)
    model_d, train_d = _section(cfg, "model"), _section(cfg, "train")
    if args.seed is not None:
        model_d["seed"] = train_d["seed"] = args.seed
    train_set, data_d = _load_or_generate(_section(cfg, "data"))
    val_section = _section(cfg, "val_data")
    if not val_section:
        raise AdaptftError("config needs a val_data section")
    val_set, val_d = _load_or_generate(val_section)
    mc, tc = ModelConfig(**model_d), TrainConfig(**train_d)
    write_json(out / "effective_config.json", {"subcommand": "train", "data": data_d, "val_data": val_d,
                                               "model": mc.to_dict(), "train": tc.to_dict()})
    ckpt, history = train(mc, tc, train_set, val_set,
                          callback=lambda e: log.info("epoch %d val_acc %.4f", e.epoch, e.val_accuracy))
    model = ckpt.build_model()
    metrics = {"epochs": [vars(h) for h in history], "final_val_accuracy": evaluate(ckpt, val_set).accuracy}
    if model.is_adaptive:
        metrics["router_mi_bits"] = analysis.router_usage(model, val_set).mi_bits
    alloc = frequency_allocation(model)
    if alloc is not None:
        metrics["frequency_allocation"] = alloc
    save_checkpoint(ckpt, out / "checkpoint.adck")
    write_json(out / "metrics.json", metrics)
    print(f"final_val_accuracy {metrics['final_val_accuracy']:.4f}; wrote {out}/checkpoint.adck")
    return 0


def _eval_data(args, cfg) -> tuple[Dataset, dict]:
    if args.data:
        return load_dataset(args.data), {"path": args.data}
    section = _section(cfg, "val_data") or _section(cfg, "data")
    if not section:
        raise AdaptftError("no dataset: pass --data or a config with a val_data section")
    return _load_or_generate(section)


def cmd_eval(args, cfg) -> int:
    out = _outdir(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    ds, data_d = _eval_data(args, cfg)
    write_json(out / "effective_config.json", {"subcommand": "eval", "checkpoint": args.checkpoint, "data": data_d})
    m = evaluate(ckpt, ds)
    write_json(out / "metrics.json", {"loss": m.loss, "accuracy": m.accuracy, "n": m.n,
                                      "router_usage": m.router_usage})
    print(f"accuracy {m.accuracy:.4f} loss {m.loss:.4f} on {m.n} examples")
    return 0


def cmd_analyze(args, cfg) -> int:
    out = _outdir(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    fe = model.frontend
    if isinstance(fe, AdaptiveFrontEnd):
        if not 0 <= args.expert < len(fe.experts):
            raise AdaptftError(f"expert {args.expert} out of range for {len(fe.experts)} experts")
        fe = fe.experts[args.expert]
    write_json(out / "effective_config.json", {"subcommand": "analyze", "checkpoint": args.checkpoint,
                                               "expert": args.expert, "sample_rate": args.sample_rate})
    W = fe.kernels()
    sfm = analysis.sort_neurons_by_peak(W, args.sample_rate)
    analysis.export_heatmap(sfm.mags.T[::-1], out / "sorted_filter_map.pgm")
    with open(out / "sorted_filter_map.csv", "w") as fh:
        fh.write("position,neuron,peak_hz,bandwidth_hz\n")
        for pos, (idx, pk, bw) in enumerate(zip(sfm.perm, sfm.peak_hz, sfm.bandwidths * sfm.bin_hz)):
            fh.write(f"{pos},{idx},{pk:.17g},{bw:.17g}\n")
    cm = analysis.comb_map(model.head.W.data, sfm.perm)
    analysis.export_heatmap(cm.matrix, out / "comb_map.pgm")
    analysis.export_kernels_csv(W[sfm.perm], out / "kernels.csv", args.sample_rate, indices=sfm.perm.tolist())
    analysis.export_profiles_csv(analysis.neuron_profiles(W, args.sample_rate), out / "profiles.csv")
    write_json(out / "summary.json", {"n_neurons": int(W.shape[0]),
                                      "fraction_below_1600hz": sfm.fraction_below(ALLOCATION_HZ)})
    print(f"wrote analysis of {W.shape[0]} kernels to {out}")
    return 0


def cmd_router_stats(args, cfg) -> int:
    out = _outdir(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    ds, data_d = _eval_data(args, cfg)
    write_json(out / "effective_config.json", {"subcommand": "router-stats", "checkpoint": args.checkpoint,
                                               "data": data_d})
    usage = analysis.router_usage(ckpt.build_model(), ds)
    write_json(out / "router_stats.json", usage.to_dict())
    print(f"I(domain; expert) = {usage.mi_bits:.4f} bits, expert totals {usage.joint.sum(axis=0).tolist()}")
    return 0


def cmd_selftest(args, cfg) -> int:
    results = selftest.run_all(seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    if args.out:
        out = _outdir(args.out)
        write_json(out / "effective_config.json", {"subcommand": "selftest", "seed": args.seed or 0})
        write_json(out / "selftest.json", [vars(r) for r in results])
    return 0 if all(r.ok for r in results) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptft", description=__doc__,
                                epilog="Config values can be overridden with --section.key VALUE "
                                       f"(sections: {', '.join(SECTIONS)}).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, out_required=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config with data/val_data/model/train sections")
        sp.add_argument("--seed", type=int, help="seed override")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.set_defaults(func=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "generate a synthetic dataset file")
    g.add_argument("--task", choices=["pitch", "timbre", "mixture"])
    g.add_argument("--n", type=int, help="number of examples")
    add("train", cmd_train, "train a model; writes checkpoint.adck and metrics.json")
    for name, fn, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                           ("router-stats", cmd_router_stats, "router usage and I(domain; expert)")):
        sp = add(name, fn, text)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", help="dataset file (default: val_data from --config)")
    a = add("analyze", cmd_analyze, "sorted filter map, comb map and kernel tables")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--expert", type=int, default=0, help="expert to analyze for adaptive models")
    a.add_argument("--sample-rate", type=int, default=16000)
    add("selftest", cmd_selftest, "run the built-in oracle checks", out_required=False)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        cfg = resolve_config(args.config, parse_overrides(rest))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adaptft: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except (AdaptftError, OSError) as exc:
        print(f"adaptft: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, cfg)
    except (AdaptftError, ValueError, TypeError, OSError, FloatingPointError) as exc:
        print(f"adaptft: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
