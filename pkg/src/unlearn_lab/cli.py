"""``unlearn-lab`` command-line entry point.

Exit status: 0 on success, 1 when the configuration or arguments are
invalid, 2 when a run fails.  Files whose content depends on wall-clock
time end in ``_timing.txt``, ``timing.csv``, ``report.txt`` or
``summary.txt``; everything else is reproducible byte for byte.
"""

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from . import evaluation as ev
from . import experiments as ex
from .errors import ConfigError, UnlearnLabError
from .fileio import atomic_write
from .models import Checkpoint, accuracy, load_checkpoint, save_checkpoint
from .training import grad_norm_stats
from .unlearning import MODES


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _timing_line(ms: float) -> str:
    return f"time_ms={ms!r}\n"


def _out_dir(cfg, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_compatible(ckpt: Checkpoint, cfg, data) -> None:
    expected = ex.model_for(cfg, data)
    if ckpt.spec != expected:
        raise ConfigError(f"checkpoint model {ckpt.spec.to_dict()} does not match the configured "
                          f"model {expected.to_dict()}", field="model")


def cmd_train(cfg, args) -> int:
    out = _out_dir(cfg, args)
    data = ex.prepare_data(cfg, cfg.seed)
    ckpt, history = ex.train_target(cfg, data, cfg.seed)
    save_checkpoint(ckpt, out / "checkpoint.ulck")
    history.save_csv(out / "history.csv")
    _write_text(out / "grad_norms.csv", grad_norm_stats(ckpt.spec, ckpt.params, data.train).histogram_csv())
    _write_text(out / "train_timing.txt", f"wall_time_s={history.wall_time!r}\n")
    acc = accuracy(ckpt.spec, ckpt.params, data.test.features, data.test.labels)
    _write_text(out / "summary.txt", f"epochs={history.stopped_epoch} best_epoch={history.best_epoch} "
                                     f"test_acc={acc:.4f} wall_time_s={history.wall_time:.3f}\n")
    print(f"trained {ckpt.spec.kind}: {history.stopped_epoch} epochs, test accuracy {acc:.4f} -> {out}")
    return 0


def cmd_unlearn(cfg, args) -> int:
    out = _out_dir(cfg, args)
    data = ex.prepare_data(cfg, cfg.seed)
    target = load_checkpoint(args.checkpoint or out / "checkpoint.ulck")
    _check_compatible(target, cfg, data)
    mode = args.mode or cfg.unlearn.mode
    part = ex.partition_for(cfg, data.train.n, cfg.seed)
    ckpt, ms = ex.run_strategy(mode, cfg, target, data, part, cfg.seed)
    stem = "gold" if mode == "retrain" else "unlearned"
    save_checkpoint(ckpt, out / f"{stem}.ulck")
    _write_text(out / "forget_indices.txt", "".join(f"{i}\n" for i in part.forget_indices))
    _write_text(out / f"{stem}_timing.txt", _timing_line(ms))
    print(f"{mode}: forgot {part.forget_indices.size} samples in {ms:.3f} ms -> {out / (stem + '.ulck')}")
    return 0


def cmd_evaluate(cfg, args) -> int:
    out = _out_dir(cfg, args)
    data = ex.prepare_data(cfg, cfg.seed)
    unlearned_path = Path(args.unlearned or out / "unlearned.ulck")
    unlearned = load_checkpoint(unlearned_path)
    gold = load_checkpoint(args.gold or out / "gold.ulck")
    _check_compatible(unlearned, cfg, data)
    if data.shadow_pool is None:
        raise ConfigError("evaluation needs a shadow pool", field="data")
    part = ex.partition_for(cfg, data.train.n, cfg.seed)
    forget = data.train.subset(part.forget_indices, "forget")
    attack = ex.build_attack(cfg, unlearned.spec, data.shadow_pool, cfg.seed)
    timing = unlearned_path.with_name(unlearned_path.stem + "_timing.txt")
    ms = float("nan")
    if timing.exists():
        ms = float(timing.read_text().strip().split("=", 1)[1])
    report = ev.compute_metrics(unlearned, gold, data.test, forget, attack, ms, {"seed": cfg.seed})
    p = report.provenance
    _write_text(out / "metrics.csv", ex._csv(
        ["mu", "ue", "acc_unlearned", "acc_gold", "asr_unlearned", "asr_gold"],
        [[ex._fmt(v) for v in (report.mu, report.ue, p["acc_unlearned"], p["acc_gold"],
                                p["asr_unlearned"], p["asr_gold"])]]))
    ev.save_report(report, out / "report.txt")
    print(f"MU={report.mu:.3f} UE={report.ue:.3f} time_ms={ms:.3f}")
    return 0


def cmd_oracle(cfg, args) -> int:
    out = _out_dir(cfg, args)
    if args.index is None:
        raise ConfigError("--index is required for the oracle command", field="--index")
    data = ex.prepare_data(cfg, cfg.seed)
    ckpt = load_checkpoint(args.checkpoint or out / "checkpoint.ulck")
    _check_compatible(ckpt, cfg, data)
    pool = data.train if args.direction == "remove" else data.test
    if not 0 <= args.index < pool.n:
        raise ConfigError(f"index {args.index} outside [0, {pool.n})", field="--index")
    result = ex.influence_check(ckpt.spec, data.train, args.direction, args.index, extra=data.test,
                                theta0=ckpt.params, damping=cfg.oracle.damping, tol=cfg.oracle.tol)
    save_checkpoint(Checkpoint(ckpt.spec, result.predicted, {"oracle": "influence", "direction": args.direction,
                                                              "index": args.index}), out / "oracle_predicted.ulck")
    save_checkpoint(Checkpoint(ckpt.spec, result.retrained, {"oracle": "retrain", "direction": args.direction,
                                                              "index": args.index}), out / "oracle_retrained.ulck")
    _write_text(out / "oracle.csv", ex.oracle_csv(result))
    print(f"{args.direction} {args.index}: cosine={result.cosine:.6f} rel_error={result.rel_error:.4%}")
    return 0


def cmd_bench(cfg, args) -> int:
    out = _out_dir(cfg, args)
    cells = []
    for seed in cfg.bench_seeds:
        cells.append(ex.run_cell(cfg, seed))
        print(f"seed {seed} done")
    _write_text(out / "bench_metrics.csv", ex.metrics_csv(cells))
    _write_text(out / "timing.csv", ex.timing_csv(cells))
    summary = ex.summary_text(cells)
    _write_text(out / "summary.txt", summary)
    print(summary, end="")
    return 0


COMMANDS = {
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "oracle": cmd_oracle,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unlearn-lab", description="Train, unlearn and evaluate desk-scale classifiers.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment configuration")
    p.add_argument("--out", help="output directory (default: the config's 'out')")
    p.add_argument("--checkpoint", help="trained checkpoint for unlearn/oracle")
    p.add_argument("--mode", choices=(*MODES, "retrain"), help="override unlearn.mode; retrain writes gold.ulck")
    p.add_argument("--unlearned", help="unlearned checkpoint for evaluate")
    p.add_argument("--gold", help="retrained checkpoint for evaluate")
    p.add_argument("--index", type=int, help="sample index for oracle")
    p.add_argument("--direction", choices=("remove", "add"), default="remove",
                   help="oracle direction: remove a training point or add a test point")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (UnlearnLabError, OSError, ValueError, ArithmeticError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
