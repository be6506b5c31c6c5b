"""Command-line interface: ``dentarrange <command> [options]``.

Every command writes ``config.json`` (the effective configuration), a
machine-readable ``result.json`` and a ``summary.txt`` into ``--out-dir``.
Option values resolve as: command-line flag, then ``--config`` file, then default.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegeneratePair, DentArrangeError, NoOverlapSupport

log = logging.getLogger("dentarrange")

COMMON_DEFAULTS = {"seed": 0, "out_dir": "out", "threads": 1}

COMMAND_DEFAULTS = {
    "gen": {
        "cases": None, "train": 200, "val": 28, "test": 56, "severity": None, "variation": 1.0,
        "points_per_tooth": 512,
    },
    "attach": {
        "cloud_u": None, "cloud_v": None, "lr": 0.1, "tol": 0.05, "max_iter": 500,
        "interval": 0.3, "resolution": [50, 50],
    },
    "train": {"dataset": None, "split": "train"},
    "eval": {"dataset": None, "split": "test", "checkpoint": None, "predictor": "model", "per_tooth": False},
    "sweep-lambda-c": {"dataset": None, "split": "train", "eval_split": "test", "values": [0.0, 2.0]},
    "arch-sweep": {
        "dataset": None, "split": "test", "checkpoint": None,
        "deltas": [[-2.0, -2.0], [0.0, 0.0], [2.0, 2.0], [2.0, -2.0]],
    },
}

# options forwarded to TrainConfig (train, sweep-lambda-c)
TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "optimizer": str, "lr": float, "momentum": float,
    "weight_decay": float, "n_points": int, "lambda_r": float, "lambda_p": float, "lambda_f": float,
    "lambda_c": float, "p_naive": float, "p_staging": float, "aug_severity": float, "expansion_mm": float,
}
MODEL_FLAGS = {"feature_dim": int, "global_dim": int, "head_hidden": int, "ema_momentum": float}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _pairs(text: str) -> list[list[float]]:
    out = []
    for item in text.split(";"):
        vals = _floats(item)
        if len(vals) != 2:
            raise argparse.ArgumentTypeError(f"expected 'left,right' pairs separated by ';', got {item!r}")
        out.append(vals)
    return out


def build_parser() -> argparse.ArgumentParser:
    # every default is None so that explicitly given flags can be told apart
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON file of option values")
    common.add_argument("--out-dir", dest="out_dir", default=None)
    common.add_argument("--threads", type=int, default=None)

    parser = argparse.ArgumentParser(prog="dentarrange", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common], argument_default=None)

    p = add("gen", "generate a synthetic dataset")
    p.add_argument("--cases", type=int, help="total case count, split 70/10/20")
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--severity", type=float)
    p.add_argument("--variation", type=float)
    p.add_argument("--points-per-tooth", dest="points_per_tooth", type=int)

    p = add("attach", "move cloud v by gradient descent on the collision loss")
    p.add_argument("cloud_u", nargs="?")
    p.add_argument("cloud_v", nargs="?")
    p.add_argument("--lr", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--interval", type=float)
    p.add_argument("--resolution", type=lambda s: [int(v) for v in s.split(",")])

    def train_flags(p):
        for flag, kind in {**TRAIN_FLAGS, **MODEL_FLAGS}.items():
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
        p.add_argument("--conditional", action="store_true", default=None)

    p = add("train", "train a model on a dataset split")
    p.add_argument("--dataset")
    p.add_argument("--split")
    train_flags(p)

    p = add("eval", "evaluate predictions on a dataset split")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--checkpoint")
    p.add_argument("--predictor", choices=["model", "identity", "ground-truth"])
    p.add_argument("--per-tooth", dest="per_tooth", action="store_true", default=None)

    p = add("sweep-lambda-c", "train one model per collision weight and compare gap statistics")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--eval-split", dest="eval_split")
    p.add_argument("--values", type=_floats)
    train_flags(p)

    p = add("arch-sweep", "condition a trained model on offset arch widths")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--checkpoint")
    p.add_argument("--deltas", type=_pairs, help="e.g. '-2,-2;0,0;2,2;2,-2'")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (later wins)."""
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")}
    config = {**COMMON_DEFAULTS, **COMMAND_DEFAULTS[args.command]}
    if args.command in ("train", "sweep-lambda-c"):
        from .training import TrainConfig

        base = TrainConfig().to_dict()
        base.pop("seed")
        config.update(base)
    if args.config:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(loaded) - set(config) - set(MODEL_FLAGS) - {"conditional"}
        if unknown:
            raise ConfigError(f"unknown options in {path}: {sorted(unknown)}")
        config.update(loaded)
    config.update(flags)
    # model flags live under the nested "model" table
    if "model" in config:
        model = dict(config["model"])
        for key in (*MODEL_FLAGS, "conditional"):
            if key in config:
                model[key] = config.pop(key)
        config["model"] = model
    config["command"] = args.command
    return config


# ---------------------------------------------------------------------------
# output helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _plot(path: Path, series: list[tuple], xlabel: str, ylabel: str, title: str, logy: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dentarrange"
    fig, ax = plt.subplots(figsize=(6, 4))
    for xs, ys, label in series:
        ax.plot(xs, ys, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if any(label for _, _, label in series):
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _finish(out: Path, config: dict, result: dict, summary: list[str]) -> None:
    _write_json(out / "config.json", config)
    _write_json(out / "result.json", result)
    text = "\n".join(summary) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(config: dict, out: Path) -> None:
    from .synthgen import CALIBRATED_SEVERITY, ArchSpec, generate_dataset

    if config["cases"] is not None:
        total = int(config["cases"])
        if total < 1:
            raise ConfigError("--cases must be positive")
        val, test = round(0.1 * total), round(0.2 * total)
        splits = {"train": total - val - test, "val": val, "test": test}
    else:
        splits = {k: int(config[k]) for k in ("train", "val", "test")}
    severity = CALIBRATED_SEVERITY if config["severity"] is None else float(config["severity"])
    config["severity"] = severity
    base = ArchSpec(points_per_tooth=int(config["points_per_tooth"]))
    descriptor = generate_dataset(out / "dataset", config["seed"], splits, severity, base, float(config["variation"]))
    result = {"dataset": "dataset", "splits": {k: len(v) for k, v in descriptor["splits"].items()},
              "severity": severity, "seed": config["seed"]}
    _finish(out, config, result, [
        f"wrote {sum(result['splits'].values())} cases to {out / 'dataset'}",
        "splits: " + ", ".join(f"{k}={v}" for k, v in result["splits"].items()),
    ])


def attach(cloud_u, cloud_v, lr=0.1, tol=0.05, max_iter=500, interval=0.3, resolution=(50, 50)):
    """Plain gradient descent on ``c**2`` over the translation of ``cloud_v``.

    Returns ``(trajectory rows, final translation, final report)``.
    """
    from .collision import collide, collision_backward

    offset = np.zeros(3)
    rows = []
    for it in range(max_iter + 1):
        moved = cloud_v + offset
        report = collide(cloud_u, moved, interval, tuple(resolution))
        center = moved.mean(axis=0)
        rows.append({
            "iteration": it, "c": report.c_uv,
            "tx": offset[0], "ty": offset[1], "tz": offset[2],
            "cx": center[0], "cy": center[1], "cz": center[2],
        })
        if abs(report.c_uv) < tol or it == max_iter:
            return rows, offset, report
        _, grad_v = collision_backward(report)
        # every point of v shares the translation
        offset = offset - lr * grad_v.sum(axis=0)


def cmd_attach(config: dict, out: Path) -> None:
    from .io import read_cloud, write_cloud

    if not config["cloud_u"] or not config["cloud_v"]:
        raise ConfigError("attach needs two cloud files")
    cloud_u = read_cloud(config["cloud_u"])
    cloud_v = read_cloud(config["cloud_v"])
    try:
        rows, offset, report = attach(
            cloud_u, cloud_v, config["lr"], config["tol"], config["max_iter"], config["interval"], config["resolution"]
        )
    except DegeneratePair as exc:
        raise DegeneratePair(f"{exc}; the clouds must have distinct barycenters") from exc
    except NoOverlapSupport as exc:
        raise NoOverlapSupport(
            f"{exc}; the clouds share no grid cell, try a coarser --interval or a larger --resolution"
        ) from exc
    _write_csv(out / "trajectory.csv", rows)
    write_cloud(out / ("moved_v" + Path(config["cloud_v"]).suffix), cloud_v + offset)
    (out / "final_report.json").write_text(report.to_json() + "\n")
    _plot(out / "trajectory.svg", [([r["iteration"] for r in rows], [r["c"] for r in rows], "")],
          "iteration", "collision value c (mm)", "attachment")
    iterations = rows[-1]["iteration"]
    converged = abs(report.c_uv) < config["tol"]
    result = {
        "converged": converged, "iterations": iterations, "initial_c": rows[0]["c"],
        "final_c": report.c_uv, "translation": offset.tolist(),
        "displacement_mm": float(np.linalg.norm(offset)),
    }
    _finish(out, config, result, [
        f"c {rows[0]['c']:.4f} -> {report.c_uv:.4f} mm in {iterations} iterations "
        f"({'converged' if converged else 'not converged'})",
        f"translation of v: {np.array2string(offset, precision=4)}",
    ])
    if not converged:
        raise DentArrangeError(f"attachment did not reach |c| < {config['tol']} in {config['max_iter']} iterations")


def _train_config(config: dict):
    from .training import TrainConfig

    keys = set(TrainConfig().to_dict())
    return TrainConfig.from_dict({k: v for k, v in config.items() if k in keys})


def _load(config: dict, split_key: str = "split"):
    from .synthgen import load_split

    if not config["dataset"]:
        raise ConfigError("--dataset is required")
    path = Path(config["dataset"])
    if not (path / "dataset.json").exists():
        raise ConfigError(f"{path} has no dataset.json; run 'dentarrange gen' first")
    return load_split(path, config[split_key])


def cmd_train(config: dict, out: Path) -> None:
    from .training import train

    cfg = _train_config(config)
    cases = _load(config)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def save(epoch, model):
        if epoch % 50 == 0 or epoch == cfg.epochs:
            model.save(ckpt_dir / f"epoch_{epoch:04d}.pt", {"train_config": cfg.to_dict(), "epoch": epoch})

    result = train(cases, cfg, log=log.info, epoch_callback=save)
    result.model.save(out / "model.pt", {"train_config": cfg.to_dict(), "epoch": cfg.epochs})
    result.write_loss_csv(out / "loss.csv")
    _write_csv(out / "epoch_loss.csv", [{"epoch": i + 1, "total": v} for i, v in enumerate(result.epoch_losses)])
    steps = [r["step"] for r in result.history]
    _plot(out / "loss.svg", [(steps, [r[k] for r in result.history], k) for k in ("total", "L_r", "L_p", "L_f", "L_c")],
          "step", "loss", "training loss", logy=True)
    summary = {
        "epochs": cfg.epochs, "steps": len(result.history),
        "first_epoch_loss": result.epoch_losses[0], "final_epoch_loss": result.epoch_losses[-1],
        "final_loss": result.history[-1]["total"], "checkpoint": "model.pt",
    }
    _finish(out, config, summary, [
        f"trained {cfg.epochs} epochs ({len(result.history)} steps) in {result.seconds:.1f}s",
        f"epoch loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}",
        f"checkpoint: {out / 'model.pt'}",
    ])


def _load_model(path):
    import torch

    from .network import DTAN

    if not path:
        raise ConfigError("--checkpoint is required")
    try:
        ckpt = torch.load(path, weights_only=False)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    model = DTAN.from_checkpoint(ckpt)
    n_points = int(ckpt.get("train_config", {}).get("n_points", 0)) or None
    return model, n_points


def _check_points(cases, n_points):
    fewest = min(len(t.cloud) for c in cases for t in c.initial.teeth.values())
    if n_points is None or n_points > fewest:
        raise ConfigError(f"checkpoint expects {n_points} points per tooth, dataset teeth have {fewest}")


def _report_outputs(out: Path, report, stem: str = "") -> None:
    report.write_pct_csv(out / f"{stem}pct.csv")
    _write_csv(out / f"{stem}per_case.csv", report.per_case)
    ks = [k for k, _ in report.pct_curve]
    _plot(out / f"{stem}pct.svg", [(ks, [f for _, f in report.pct_curve], f"AUC {report.auc:.2f}")],
          "threshold K (mm)", "PCT@K", "PCT curve")


def cmd_eval(config: dict, out: Path) -> None:
    from .metrics import evaluate_cases
    from .training import identity_motions, predict_cases

    cases = _load(config)
    predictor = config["predictor"]
    if predictor == "identity":
        motions = identity_motions(cases)
    elif predictor == "ground-truth":
        motions = [case.gt_motions for case in cases]
    else:
        model, n_points = _load_model(config["checkpoint"])
        _check_points(cases, n_points)
        motions = predict_cases(model, cases, n_points)
    report = evaluate_cases(cases, motions, per_tooth=bool(config["per_tooth"]))
    _report_outputs(out, report)
    result = report.to_dict()
    _finish(out, config, result, [
        f"{predictor} on {config['split']} ({len(cases)} cases)",
        f"ME_point {report.me_point:.4f} mm, ME_trans {report.me_trans:.4f} mm, ME_rotat {report.me_rotat:.4f} deg",
        f"AUC {report.auc:.3f}",
        "gap: mean|c| {mean_abs_d:.4f} mm, max|c| {max_abs_d:.4f} mm, pairs over 0.5 mm {count_pairs_abs_d_gt_0_5:.3f}"
        .format(**report.gap_stats),
    ])


def cmd_sweep_lambda_c(config: dict, out: Path) -> None:
    from .training import sweep_lambda_c

    cfg = _train_config(config)
    train_cases = _load(config)
    test_cases = _load(config, "eval_split")
    rows = sweep_lambda_c(train_cases, test_cases, cfg, config["values"], log=log.info)
    _write_csv(out / "lambda_c.csv", rows, ["lambda_c", "mean_abs_d", "max_abs_d", "count_pairs_abs_d_gt_0_5",
                                             "me_point", "auc"])
    _finish(out, config, {"rows": rows}, [
        "lambda_c  mean|d|  max|d|  N(|d|>0.5)  ME_point",
        *(f"{r['lambda_c']:8.3f}  {r['mean_abs_d']:.4f}  {r['max_abs_d']:.4f}  "
          f"{r['count_pairs_abs_d_gt_0_5']:.3f}  {r['me_point']:.4f}" for r in rows),
    ])


def cmd_arch_sweep(config: dict, out: Path) -> None:
    from .training import arch_sweep

    cases = _load(config)
    model, n_points = _load_model(config["checkpoint"])
    if not model.config.conditional:
        raise ConfigError("arch-sweep needs a checkpoint trained with --conditional")
    _check_points(cases, n_points)
    rows = arch_sweep(model, cases, config["deltas"], n_points)
    _write_csv(out / "arch_sweep.csv", rows)
    _finish(out, config, {"rows": rows}, [
        "delta_left  delta_right  width_left  width_right  asymmetry",
        *(f"{r['delta_left']:10.2f}  {r['delta_right']:11.2f}  {r['width_left']:10.3f}  "
          f"{r['width_right']:11.3f}  {r['asymmetry']:9.3f}" for r in rows),
    ])


COMMANDS = {
    "gen": cmd_gen, "attach": cmd_attach, "train": cmd_train, "eval": cmd_eval,
    "sweep-lambda-c": cmd_sweep_lambda_c, "arch-sweep": cmd_arch_sweep,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        import torch

        torch.set_num_threads(int(config["threads"]))
        out = Path(config["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        COMMANDS[args.command](config, out)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return 0
    except DentArrangeError as exc:
        log.error("error (%s): %s", type(exc).__name__, exc)
        return 2
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 3
    except Exception as exc:  # noqa: BLE001 - any failure must give a nonzero exit code
        log.error("unexpected error (%s): %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
