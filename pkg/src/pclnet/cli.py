"""Command-line entry point: ``pclnet {train,eval,infer,benchmark,selftest}``.

Every subcommand that produces a report writes CSV tables and PNG figures into
``--out``.  Exit status: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import MODES, VARIANTS, Config
from .dataio import load_dataset, translation_clips
from .dataio.colorcode import flow_to_color
from .dataio.datasets import LAYOUTS
from .dataio.formats import FormatError, read_flo
from .train import DivergenceError, EvalReport, TimingReport, Trainer, benchmark, evaluate, infer, load_model

log = logging.getLogger("pclnet")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class ValidationFailure(Exception):
    """A run finished but its result violates a checked property."""


# -- shared helpers -------------------------------------------------------------


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    d = cfg.to_dict()
    if getattr(args, "mode", None):
        d["train"]["mode"] = args.mode
    if getattr(args, "variant", None):
        d["model"]["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        d["train"]["seed"] = args.seed
    if getattr(args, "precision", None):
        d["train"]["precision"] = args.precision
    return Config.from_dict(d)


def _synthetic(cfg: Config, count: int, seed: int, size: int | None = None):
    h, w = cfg.train.frame_size
    if size is None and h != w:
        raise ValueError(f"synthetic clips are square; frame_size is {h}x{w}")
    return translation_clips(count, length=cfg.train.clip_length, size=size or h, seed=seed)


def _clips(cfg: Config, data, layout, synthetic, seed, require_flow=False, size=None):
    if data:
        return list(load_dataset(data, layout, cfg.train.clip_length, require_flow=require_flow))
    if synthetic:
        return _synthetic(cfg, synthetic, seed, size)
    return []


@contextlib.contextmanager
def _threads(n):
    if not n:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl is not installed; --threads %d has no effect", n)
        yield
        return
    with threadpool_limits(limits=n):
        yield


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import plot_training, write_csv

    cfg = _config(args)
    if args.iterations is not None:
        d = cfg.to_dict()
        d["train"]["max_iterations"] = args.iterations
        cfg = Config.from_dict(d)
    need_flow = cfg.train.mode == "supervised-epe"
    train = _clips(cfg, args.data, args.layout, args.synthetic, cfg.train.seed, require_flow=need_flow,
                   size=args.synthetic_size)
    if not train:
        raise ValueError("no training clips; pass --data or --synthetic")
    val = _clips(cfg, args.val_data, args.layout, args.val_synthetic, cfg.train.seed + 1, require_flow=True)
    out = _out(args)
    cfg.save(out / "config.yaml")
    trainer = Trainer(cfg, train, val)
    if args.checkpoint:
        trainer.restore(args.checkpoint)
        log.info("resumed from %s at iteration %d", args.checkpoint, trainer.iteration)
    try:
        history = trainer.run(checkpoint_dir=out)
    finally:
        if trainer.history:
            write_csv(out / "train_log.csv", ("iteration", "loss", "lr", "val_epe"),
                      [(h["iteration"], f"{h['loss']:.8g}", f"{h['lr']:.6g}",
                        "" if h.get("val_epe") is None else f"{h['val_epe']:.6f}") for h in trainer.history])
            plot_training(trainer.history, out / "training.png")
    trainer.save(out / "final.pclc")
    print(f"trained {trainer.iteration} iterations, final loss {history[-1]['loss']:.5f}" if history else "nothing to do")
    if val:
        report = evaluate(trainer.model, val, name="validation")
        _write_eval(report, out)
        print(report.text())
    print(f"outputs in {out}")
    return EXIT_OK


def _write_eval(report: EvalReport, out: Path) -> None:
    from .plotting import plot_evaluation, write_csv

    write_csv(out / "eval.csv", EvalReport.HEADER, [report.row()])
    write_csv(out / "eval_clips.csv", ("clip", "epe", "seconds"),
              [(k, f"{e:.6f}", f"{s:.6f}") for k, (e, s) in enumerate(zip(report.clip_epe, report.seconds))])
    write_csv(out / "eval_scales.csv", ("stride", "epe"),
              [(s, f"{v:.6f}") for s, v in sorted(report.scale_epe.items(), reverse=True)])
    plot_evaluation(report.clip_epe, report.scale_epe, out / "evaluation.png", title=report.dataset)


def cmd_eval(args) -> int:
    model, cfg = load_model(args.checkpoint, allow_mismatch=args.allow_mismatch)
    if args.data:
        clips = list(load_dataset(args.data, args.layout, cfg.train.clip_length, require_flow=True))
        name = Path(args.data).name
    else:
        clips = _synthetic(cfg, args.synthetic, args.seed if args.seed is not None else 12)
        name = "synthetic"
    if not clips:
        raise ValueError("evaluation set is empty")
    report = evaluate(model, clips, name=name)
    _write_eval(report, _out(args))
    print(report.text())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .plotting import plot_flow_sheet, write_csv

    model, cfg = load_model(args.checkpoint, allow_mismatch=args.allow_mismatch)
    length = args.length or cfg.train.clip_length
    ds = load_dataset(args.frames, "frames-dir", length)
    out = _out(args)
    written, failures = infer(model, ds, out)
    failures += ds.skipped
    write_csv(out / "infer.csv", ("flow_file", "mean_magnitude", "p99_magnitude"),
              [(p.name, f"{m.mean():.6f}", f"{np.percentile(m, 99):.6f}")
               for p in written for m in [np.hypot(*read_flo(p)[0])]])
    if written:
        shown = written[:20]
        plot_flow_sheet([flow_to_color(read_flo(p))[0] for p in shown], [p.stem for p in shown], out / "flows.png")
    print(f"wrote {len(written)} flow files to {out}; {failures} failures")
    return EXIT_IO if failures else EXIT_OK


def cmd_benchmark(args) -> int:
    from .plotting import plot_benchmark, write_csv

    if args.checkpoint:
        _, cfg = load_model(args.checkpoint)
    else:
        cfg = _config(args)
    size = tuple(args.size) if args.size else None
    reports = benchmark(cfg, runs=args.runs, warmup=args.warmup, size=size, length=args.length)
    out = _out(args)
    write_csv(out / "benchmark.csv", TimingReport.HEADER, [r.row() for r in reports.values()])
    plot_benchmark({v: r.times for v, r in reports.items()}, out / "benchmark.png")
    for r in reports.values():
        print(f"{r.variant:8s} params {r.parameters:>9d}  median {r.median * 1e3:8.2f} ms  "
              f"p10 {r.p10 * 1e3:8.2f}  p90 {r.p90 * 1e3:8.2f}")
    fast, slow = reports["PCLNet"], reports["PCLNetC"]
    if fast.median > slow.median:
        raise ValidationFailure(f"PCLNet median {fast.median:.4f}s exceeds PCLNetC {slow.median:.4f}s")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .plotting import write_csv
    from .selftest import gradient_suite, oracle_suite

    seeds = range(args.seeds)
    rows, ok = [], True
    for suite, fn in (("gradient", gradient_suite), ("oracle", oracle_suite)):
        for r in fn(seeds):
            ok &= r.passed
            rows.append((suite, r.name, r.seed, f"{r.error:.3e}", f"{r.tol:.0e}", "pass" if r.passed else "FAIL"))
            print(f"{'PASS' if r.passed else 'FAIL'} {suite} {r.name} seed={r.seed} err={r.error:.3e}")
    if args.out:
        write_csv(_out(args) / "selftest.csv", ("suite", "check", "seed", "error", "tolerance", "result"), rows)
    print(f"{sum(r[-1] == 'pass' for r in rows)}/{len(rows)} checks passed")
    return EXIT_OK if ok else EXIT_INVALID


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pclnet", description="Multi-frame optical flow with pyramid ConvLSTMs.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--precision", choices=("f32", "f64"))
        sp.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
        sp.add_argument("--checkpoint", help="checkpoint file")
        sp.add_argument("--threads", type=int, default=0, help="limit BLAS threads (0 = library default)")

    t = sub.add_parser("train", help="train a model")
    common(t, "runs/train")
    t.add_argument("--data", help="training data root")
    t.add_argument("--layout", choices=LAYOUTS, default="frames-dir")
    t.add_argument("--synthetic", type=int, default=0, help="train on N synthetic translation clips")
    t.add_argument("--synthetic-size", type=int, help="edge of synthetic training clips (default: frame_size)")
    t.add_argument("--val-data", help="validation data root (same layout)")
    t.add_argument("--val-synthetic", type=int, default=0, help="validate on N synthetic clips")
    t.add_argument("--iterations", type=int, help="override max_iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="EPE report for a checkpoint")
    common(e, "runs/eval")
    e.add_argument("--data", help="dataset root with ground-truth flow")
    e.add_argument("--layout", choices=LAYOUTS, default="sintel")
    e.add_argument("--synthetic", type=int, default=8, help="synthetic clip count when --data is absent")
    e.add_argument("--allow-mismatch", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write .flo files and colour-coded PPMs")
    common(i, "runs/infer")
    i.add_argument("--frames", required=True, help="directory of numbered frames (or sub-folders of them)")
    i.add_argument("--length", type=int, help="clip length (default: the checkpoint's)")
    i.add_argument("--allow-mismatch", action="store_true")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("benchmark", help="forward timing of both variants")
    common(b, "runs/benchmark")
    b.add_argument("--runs", type=int, default=50)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    b.add_argument("--length", type=int)
    b.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("selftest", help="gradient-check and scalar-oracle suites")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--out", help="directory for selftest.csv")
    s.add_argument("--threads", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    if args.command in ("eval", "infer") and not args.checkpoint:
        log.error("%s needs --checkpoint", args.command)
        return EXIT_INVALID
    try:
        with _threads(args.threads):
            return args.func(args)
    except (OSError, FormatError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValueError, KeyError, ValidationFailure, DivergenceError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
