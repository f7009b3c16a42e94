"""Command-line entry point: ``mtuda generate|train|eval|refine|report``.

Exit codes: 0 success, 1 ``--assert-miou`` threshold missed, 2 invalid
config, contract violation or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
import zlib
from pathlib import Path

from mtuda import config as cfgmod
from mtuda import metrics, pseudo_label, synth, trainers
from mtuda.errors import MtudaError
from mtuda.trainers import Method, derive_seed

log = logging.getLogger("mtuda")

EXIT_OK, EXIT_THRESHOLD, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# datasets


def _domain_seed(cfg, name, split):
    # keyed by name so adding a domain never changes another domain's scenes
    return derive_seed(cfg.get("data", "seed"), zlib.crc32(name.encode()), 0 if split == "train" else 1)


def _data_dir(cfg, name, split):
    return Path(cfg.output_dir) / "data" / name / split


def _spec_for(cfg, name):
    return cfg.domain_spec(name) if name == cfg.get("data", "source") else cfg.target_spec(name)


def build_dataset(cfg, name, split):
    d = cfg.values["data"]
    n = d["train_size"] if split == "train" else d["val_size"]
    labeled = split == "val" or name == d["source"]
    return synth.parallel_generate(_spec_for(cfg, name), n, _domain_seed(cfg, name, split), d["height"], d["width"], labeled)


def dataset(cfg, name, split):
    """Exported copy from ``generate`` when present, otherwise built in memory."""
    directory = _data_dir(cfg, name, split)
    if (directory / "manifest.tsv").exists():
        return synth.import_dataset(directory)
    return build_dataset(cfg, name, split)


def _all_domains(cfg):
    d = cfg.values["data"]
    return [(d["source"], "train")] + [(t, s) for t in d["targets"] for s in ("train", "val")] + [
        (t, "val") for t in d["transfer"]
    ]


def training_data(cfg):
    d = cfg.values["data"]
    return dataset(cfg, d["source"], "train"), [dataset(cfg, t, "train") for t in d["targets"]]


def eval_data(cfg, transfer=()):
    d = cfg.values["data"]
    names = list(d["targets"]) + [t for t in (*d["transfer"], *transfer) if t not in d["targets"]]
    return [dataset(cfg, t, "val") for t in names]


# --------------------------------------------------------------------------
# checkpoints


def _ckpt_dir(cfg):
    return Path(cfg.output_dir) / "checkpoints"


def _latest_checkpoint(cfg):
    found = sorted(_ckpt_dir(cfg).glob("iter_*.ckpt"))
    return found[-1] if found else None


def _save(cfg, state, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    trainers.save_state(path, state, extra={"experiment_hash": cfg.config_hash()})


def _write_metrics_log(cfg, state):
    """``iter<TAB>name<TAB>value``; series that start late (distillation, refinement) end at the current iteration."""
    rows = []
    for name, series in state.history.items():
        offset = state.iteration - len(series)
        rows.extend((offset + j, name, v) for j, v in enumerate(series))
    lines = [f"# config_hash\t{cfg.config_hash()}"] + [f"{i}\t{n}\t{v!r}" for i, n, v in sorted(rows)]
    (Path(cfg.output_dir) / "metrics.log").write_text("\n".join(lines) + "\n")


def _check_compatible(cfg, state, path):
    want = cfg.train_config()
    got = state.cfg
    if got.method is not want.method or got.T != want.T:
        raise CliError(f"{path}: checkpoint holds a {got.method.value} model with T={got.T}, config asks for {want.method.value} with T={want.T}")


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    cfg = cfgmod.load(args.config)
    for name, split in _all_domains(cfg):
        ds = build_dataset(cfg, name, split)
        out = synth.export_dataset(ds, _data_dir(cfg, name, split))
        print(f"{name}/{split}: {len(ds)} scenes -> {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = cfgmod.load(args.config)
    tcfg = cfg.train_config()
    source, targets = training_data(cfg)
    state = None
    if args.resume:
        ckpt = _latest_checkpoint(cfg)
        if ckpt is not None:
            header = trainers.load_header(ckpt)
            saved = header.get("extra", {}).get("experiment_hash")
            if saved != cfg.config_hash():
                raise CliError(
                    f"refusing to resume from {ckpt}: it was written under config hash {saved}, "
                    f"the current config hashes to {cfg.config_hash()}"
                )
            state = trainers.load_state(ckpt)
            print(f"resuming from {ckpt} at iteration {state.iteration}")
    state = state or trainers.init_state(tcfg)
    until = tcfg.iters if args.until is None else min(args.until, tcfg.iters)
    every = cfg.get("experiment", "checkpoint_every")
    while state.iteration < until:
        stop = until if every <= 0 else min(until, (state.iteration // every + 1) * every)
        trainers.train(tcfg, source, targets, state=state, until=stop)
        _save(cfg, state, _ckpt_dir(cfg) / f"iter_{state.iteration:07d}.ckpt")
        _write_metrics_log(cfg, state)
        log.info("iteration %d", state.iteration)
    if state.iteration >= tcfg.iters:
        final = Path(cfg.output_dir) / "final.ckpt"
        _save(cfg, state, final)
        _write_metrics_log(cfg, state)
        print(f"trained {tcfg.method.value} for {state.iteration} iterations -> {final}")
    else:
        print(f"stopped at iteration {state.iteration} (resume with --resume)")
    return EXIT_OK


def _report_text(cfg, report, datasets):
    head = [f"# config_hash\t{cfg.config_hash()}"]
    head += [f"# dataset\t{ds.domain_id}\t{ds.fingerprint()}" for ds in datasets]
    return "\n".join(head) + "\n" + metrics.machine_report(report)


def _finish_report(args, cfg, report, baseline=None):
    print(metrics.render_report(report, baseline), end="")
    if args.assert_miou is not None and not report.miou_avg * 100 >= args.assert_miou:
        print(f"mIoU Avg. {100 * report.miou_avg:.1f} below required {args.assert_miou}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def _load_baseline(path):
    return metrics.parse_machine_report(Path(path).read_text()) if path else None


def cmd_eval(args):
    cfg = cfgmod.load(args.config)
    state = trainers.load_state(args.checkpoint)
    _check_compatible(cfg, state, args.checkpoint)
    datasets = eval_data(cfg, args.transfer or ())
    report = metrics.evaluate(state, datasets)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"report_{Path(args.checkpoint).stem}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_report_text(cfg, report, datasets))
    return _finish_report(args, cfg, report, _load_baseline(args.baseline))


def cmd_refine(args):
    cfg = cfgmod.load(args.config)
    state = trainers.load_state(args.checkpoint)
    _check_compatible(cfg, state, args.checkpoint)
    pl = cfg.values["pl"]
    strategy = None if pl["strategy"].lower() == "none" else pseudo_label.PLStrategy.parse(pl["strategy"])
    method = state.cfg.method
    if strategy is not None and method is not Method.MTKT:
        raise CliError(f"PL strategy {strategy.value} applies to MTKT models only, checkpoint holds {method.value}")
    if strategy is None and method is Method.MTKT:
        raise CliError("MTKT refinement needs pl.strategy (TeacherOnly, TeacherPlusKLMask or TeacherPlusAgnostic)")
    iters = pl["refine_iters"] or pseudo_label.default_refine_iters(state.cfg.iters)
    source, targets = training_data(cfg)
    datasets = eval_data(cfg)
    out_dir = Path(cfg.output_dir)
    before = metrics.evaluate(state, datasets)
    (out_dir / "report_before_refine.tsv").write_text(_report_text(cfg, before, datasets))
    if strategy is None:
        pseudo_label.refine_baseline(state, source, targets, iters, pl["keep_fraction"])
    else:
        pseudo_label.refine_mtkt(state, source, targets, strategy, iters, pl["keep_fraction"])
    _save(cfg, state, out_dir / "refined.ckpt")
    after = metrics.evaluate(state, datasets)
    (out_dir / "report_after_refine.tsv").write_text(_report_text(cfg, after, datasets))
    return _finish_report(args, cfg, after, before)


def cmd_report(args):
    report = metrics.parse_machine_report(Path(args.report).read_text())
    print(metrics.render_report(report, _load_baseline(args.baseline)), end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mtuda", description="Multi-target adversarial domain adaptation on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the configured datasets to disk")
    g.add_argument("config")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the configured method")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    t.add_argument("--until", type=int, help="stop after this iteration (checkpoint written)")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"), ("refine", cmd_refine, "pseudo-label refinement")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("checkpoint")
        e.add_argument("config")
        e.add_argument("--assert-miou", type=float, help="exit 1 unless mIoU Avg. (percent) reaches this value")
        if name == "eval":
            e.add_argument("--transfer", action="append", help="also evaluate on this unseen domain (repeatable)")
            e.add_argument("--baseline", help="machine-readable report to diff against")
            e.add_argument("--out", help="where to write the machine-readable report")
        e.set_defaults(func=func)

    r = sub.add_parser("report", help="render a machine-readable report as a table")
    r.add_argument("report")
    r.add_argument("--baseline")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (MtudaError, CliError, ValueError, OSError, KeyError) as exc:
        print(f"mtuda {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
