"""Command-line pipeline: ``cobra-ad {craft,train,eval,attack,report}``.

Every command reads one YAML config (optional) plus ``--section.key=value``
overrides and writes under ``output_dir/run_id/``. Exit codes: 0 success,
1 invalid configuration, 2 missing input, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .augment import TransformError
from .config import ConfigError, ExperimentConfig, load_config
from .crafter import (CrafterError, ThresholdModel, craft_batch, fit_crafter, summarize_craft_logs,
                      write_craft_logs)
from .data import DatasetNotFoundError, load_protocol
from .evalkit import Condition, EvalReport, build_feature_bank, run_protocol
from .nets import CheckpointError, load_checkpoint, save_checkpoint
from .seeding import stream_seed
from .trainer import fit

log = logging.getLogger("cobra_ad")

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3
INCOMPLETE = "INCOMPLETE"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _start(cfg: ExperimentConfig, command: str) -> Path:
    d = cfg.run_dir
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.resolved").write_text(cfg.dump())
    (d / INCOMPLETE).write_text(f"{command} did not finish\n")
    return d


def _finish(d: Path) -> None:
    (d / INCOMPLETE).unlink(missing_ok=True)


def _save_grid(images: torch.Tensor, path: Path, ncol: int = 8) -> None:
    from PIL import Image

    x = images.clamp(0, 1).numpy()
    n, c, h, w = x.shape
    nrow = -(-n // ncol)
    grid = np.ones((c, nrow * (h + 2), ncol * (w + 2)), dtype=np.float32)
    for i in range(n):
        r, q = divmod(i, ncol)
        grid[:, r * (h + 2) + 1:r * (h + 2) + 1 + h, q * (w + 2) + 1:q * (w + 2) + 1 + w] = x[i]
    arr = (grid.transpose(1, 2, 0) * 255).round().astype(np.uint8)
    Image.fromarray(arr[..., 0] if c == 1 else arr).save(path)


def _threshold(cfg: ExperimentConfig, d: Path, d_train: torch.Tensor) -> ThresholdModel:
    path = d / "threshold.ckpt"
    if path.exists():
        return ThresholdModel.load(path)
    tm = fit_crafter(d_train, cfg.crafter.transform_bank(), cfg.crafter.crafter_config(),
                     seed=stream_seed(cfg.train.seed, "crafter"))
    tm.save(path)
    return tm


def render_report(report: EvalReport) -> str:
    """Plain-text table: one row per score variant, a ``clean / attacked`` AUROC cell per attack."""
    variants = list(dict.fromkeys(r.score_variant for r in report.records))
    attacks = list(dict.fromkeys(r.condition for r in report.records if r.condition != "clean"))
    lines = []
    if report.records:
        r0 = report.records[0]
        lines.append(f"protocol: {json.dumps(r0.protocol, sort_keys=True)}")
        lines.append(f"normals: {r0.n_normal}  anomalies: {r0.n_anomaly}  model: {r0.fingerprint.get('model', '')}")
        lines.append("")
    header = ["variant", "clean"] + [f"clean / {a}" for a in attacks]
    rows = []
    for v in variants:
        m = {r.condition: r for r in report.records if r.score_variant == v}
        clean = m.get("clean")
        row = [v, f"{100 * clean.auroc:.1f}" if clean else "-"]
        for a in attacks:
            if a in m:
                row.append(f"{100 * clean.auroc:.1f} / {100 * m[a].auroc:.1f}" if clean else f"- / {100 * m[a].auroc:.1f}")
            else:
                row.append("-")
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines.append(fmt.format(*header))
    lines.extend(fmt.format(*row) for row in rows)
    lines.append("")
    lines.append("AUROC in percent. Full metrics (AUROC, AUPR, FPR95):")
    for r in report.records:
        lines.append(f"  {r.score_variant:8s} {r.condition:32s} auroc={r.auroc:.4f} aupr={r.aupr:.4f} "
                     f"fpr95={r.fpr95:.4f}")
    for w in report.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


def _write_report(d: Path, report: EvalReport) -> None:
    report.save(d)
    (d / "report.txt").write_text(render_report(report))
    if report.transcripts:
        np.savez(d / "transcripts.npz", **{f"{v}|{c}": s for (c, v), s in report.transcripts.items()})


def _evaluate(cfg: ExperimentConfig, conditions: list[Condition]) -> int:
    d = _start(cfg, "eval")
    model = load_checkpoint(d / "model.ckpt")
    d_train, d_test, labels = load_protocol(cfg.data)
    bank = build_feature_bank(model, d_train)
    report = run_protocol(model, bank, d_test, labels, conditions, cfg.eval.score_variants,
                          protocol=cfg.data.to_dict(), seed=stream_seed(cfg.train.seed, "eval"),
                          transcripts=cfg.eval.transcripts)
    _write_report(d, report)
    print(render_report(report), end="")
    _finish(d)
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_craft(cfg: ExperimentConfig, args) -> int:
    d = _start(cfg, "craft")
    d_train, _, _ = load_protocol(cfg.data)
    tm = _threshold(cfg, d, d_train)
    n = min(args.samples, len(d_train))
    crafted, logs = craft_batch(d_train[:n], tm, cfg.crafter.transform_bank(), stream_seed(cfg.train.seed, "craft"),
                                cfg.crafter.max_iters, return_logs=True)
    _save_grid(torch.cat([d_train[:n], crafted]), d / "crafted_grid.png")
    write_craft_logs(logs, d / "craft_log.jsonl")
    summary = summarize_craft_logs(logs)
    (d / "craft_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"accept rate {summary['accept_rate']:.3f}  mean attempts {summary['mean_attempts']:.2f}  "
          f"fallbacks {summary['fallback_count']}/{summary['n']}")
    _finish(d)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    d = _start(cfg, "train")
    d_train, _, _ = load_protocol(cfg.data)
    tm = _threshold(cfg, d, d_train)
    mode = "a" if args.resume else "w"
    with open(d / "log.jsonl", mode) as f:
        def on_record(rec):
            f.write(json.dumps(rec) + "\n")
            f.flush()
        res = fit(d_train, cfg.train, cfg.model, cfg.crafter.transform_bank(), cfg.crafter.crafter_config(),
                  threshold=tm, out_dir=d, resume=args.resume, on_record=on_record)
    save_checkpoint(res.model, d / "model.ckpt", extra={"config": cfg.to_dict()})
    last = res.log[-1] if res.log else {}
    print(f"trained {cfg.train.epochs} epochs; final loss {last.get('loss', float('nan')):.4f}")
    _finish(d)
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    return _evaluate(cfg, cfg.eval.build_conditions())


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    attack = {"epsilon": args.epsilon / 255, "steps": args.steps, "restarts": args.restarts, "norm": args.norm}
    cond = cfg.eval.condition({"name": args.kind, "attack": attack, "queries": args.queries})
    return _evaluate(cfg, [Condition(), cond])


def cmd_report(cfg: ExperimentConfig, args) -> int:
    d = cfg.run_dir
    if not (d / "report.jsonl").exists():
        raise FileNotFoundError(f"no report in {d}; run eval first")
    text = render_report(EvalReport.load(d))
    (d / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"craft": cmd_craft, "train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cobra-ad", description="Robust anomaly detection with crafted pseudo-anomalies.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("-c", "--config", help="YAML experiment config")
        s.add_argument("--workers", type=int, default=1,
                       help="data worker count (runs are bit-reproducible only with 1)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "craft":
            s.add_argument("--samples", type=int, default=64, help="number of crafted examples to render")
        if name == "train":
            s.add_argument("--resume", action="store_true", help="continue from train_state.ckpt")
        if name == "attack":
            s.add_argument("--kind", choices=("pgd", "fgsm", "blackbox"), default="pgd")
            s.add_argument("--epsilon", type=float, default=4.0, help="budget in units of 1/255")
            s.add_argument("--steps", type=int, default=100)
            s.add_argument("--restarts", type=int, default=3)
            s.add_argument("--norm", choices=("linf", "l2"), default="linf")
            s.add_argument("--queries", type=int, default=1000)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    bad = [r for r in rest if not (r.startswith("--") and "=" in r)]
    if bad:
        print(f"error: unrecognized arguments {bad}; overrides look like --section.key=value", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config, rest)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, TransformError, CrafterError, ValueError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except DatasetNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (FileNotFoundError, CheckpointError) as e:
        print(f"error: missing or unreadable input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - top-level contract maps everything else to 3
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
