"""Command-line entry point.

Output layout under the output root::

    task/                       synthetic task (shared by all seeds)
    seed_<n>/pretrain/          source bundles
    seed_<n>/stage1/            adapted bundles, pseudo labels, curves
    seed_<n>/stage2/            integrated model, pseudo labels, curves
    seed_<n>/eval/              metric records and IoU table
    seed_<n>/ablation/          ladder results, table, plots
    report/                     merged tables across seed directories

Exit codes: 0 success, 2 configuration error, 3 missing or inconsistent
data / upstream artifacts, 4 training diverged, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .ablation import ROW_NAMES, bundle_records, bundles_summary, final_record, run_ladder
from .adapt_stage1 import run_stage1
from .config import ConfigError, RunConfig
from .data_synth import build_task, load_eval_split, load_task, read_task_meta, save_task, task_digest
from .ensemble_core import UnionSetProblem, average_cast, cast_probability, class_argmax
from .integrate_stage2 import run_stage2
from .metrics_eval import ConfusionMatrix, EvalRecord, accumulate, evaluate_cm, format_iou_table
from .models import (CheckpointError, FinalModel, ModelBundle, TrainingDiverged, load_checkpoint,
                     params_checksum, pretrain_source, save_checkpoint)
from .pseudo_labels import generate_pseudo_labels, regenerate_for_stage2, save_pseudo_labels

log = logging.getLogger("usmsma")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
OUT_ENV = "USMSMA_OUT"
DONE = "DONE"


class DataError(RuntimeError):
    """Missing or inconsistent input data or upstream artifacts."""


# -- run-directory helpers ----------------------------------------------------

class Context:
    def __init__(self, args, cfg: RunConfig):
        self.args, self.cfg = args, cfg
        self.root = Path(args.out)
        self.task_dir = self.root / "task"
        self.seed_dir = self.root / f"seed_{cfg.seed}"

    def phase_dir(self, name: str) -> Path:
        return self.seed_dir / name

    def task(self):
        try:
            meta = read_task_meta(self.task_dir)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from None
        expected = task_digest(self.cfg.task_preset(), self.cfg.domains(), self.cfg.sizes())
        if meta["digest"] != expected:
            raise DataError(f"{self.task_dir}: task digest {meta['digest']} does not match the "
                            f"config ({expected}); rerun `synth --force`")
        return load_task(self.task_dir), meta["digest"]

    def test_split(self):
        return load_eval_split(self.task_dir)


def _begin(path: Path, digest: str, force: bool) -> bool:
    """True when the phase must run; False when an identical completed run exists."""
    marker = path / DONE
    if marker.is_file():
        done = json.loads(marker.read_text())
        if done.get("config_digest") == digest and not force:
            print(f"{path}: up to date")
            return False
        if not force:
            raise DataError(f"{path}: holds a run with a different config "
                            f"({done.get('config_digest')} != {digest}); pass --force to replace it")
    if force and path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    marker.unlink(missing_ok=True)
    return True


def _finish(path: Path, digest: str, report: dict) -> None:
    (path / "run.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    (path / DONE).write_text(json.dumps({"config_digest": digest}))


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _require(path: Path, what: str) -> None:
    if not (path / DONE).is_file():
        raise DataError(f"{path}: no completed {what} run; run `{what}` first")


def _load_bundles(path: Path, problem: UnionSetProblem) -> list[ModelBundle]:
    out = []
    for i, space in enumerate(problem.source_spaces):
        try:
            b = load_checkpoint(path / f"bundle_{i}", [space])
        except CheckpointError as exc:
            raise DataError(str(exc)) from None
        out.append(b)
    return out


# -- plots ------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_curves(series: dict[str, list[tuple[float, float]]], path: Path, ylabel: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in series.items():
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if series:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bars(names, means, spreads, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    pos = np.arange(len(names))
    ax.bar(pos, [100 * m for m in means], yerr=[100 * s for s in spreads], capsize=3)
    ax.set_xticks(pos)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel("mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _loss_series(history, key="loss", step=None):
    return [(r["iteration"], r[key]) for r in history
            if key in r and (step is None or r.get("step") == step)]


def _eval_series(evals):
    return [(e["iteration"], e["miou"] if "miou" in e else e["record"]["miou"]) for e in evals]


# -- commands ---------------------------------------------------------------

def cmd_synth(ctx: Context) -> int:
    cfg = ctx.cfg
    pre, doms, sizes = cfg.task_preset(), cfg.domains(), cfg.sizes()
    digest = task_digest(pre, doms, sizes)
    if (ctx.task_dir / "task.json").is_file():
        meta = read_task_meta(ctx.task_dir)
        if meta["digest"] == digest and not ctx.args.force:
            print(f"{ctx.task_dir}: up to date ({digest})")
            return EXIT_OK
        if not ctx.args.force:
            raise DataError(f"{ctx.task_dir}: holds task {meta['digest']}, config asks for {digest}; "
                            "pass --force to regenerate")
    task = build_task(pre, doms, **sizes)
    got = save_task(task, ctx.task_dir, sizes)
    print(f"{ctx.task_dir}: wrote task {got}")
    return EXIT_OK


def _pretrain(ctx: Context, task) -> list[ModelBundle]:
    cfg = ctx.cfg
    out = ctx.phase_dir("pretrain")
    digest = cfg.digest("task", "model", "pretrain")
    if not _begin(out, digest, ctx.args.force):
        return _load_bundles(out, task.problem)
    spec = cfg.backbone_spec()
    bundles, histories = [], []
    for i, (src, space) in enumerate(zip(task.sources, task.problem.source_spaces)):
        hist: list = []
        b = pretrain_source(src, spec, space, cfg.schedule("pretrain", seed_offset=i), history=hist)
        save_checkpoint(b, out / f"bundle_{i}")
        bundles.append(b)
        histories.append(hist)
    plot_curves({f"M{i}": [(r["iteration"], r["value"]) for r in h] for i, h in enumerate(histories)},
                out / "loss.png", "source CE")
    _finish(out, digest, {"phase": "pretrain", "seed": cfg.seed,
                          "checksums": [params_checksum([b.backbone, b.classifier]) for b in bundles],
                          "final_loss": [b.meta.get("final_loss") for b in bundles]})
    return bundles


def cmd_pretrain(ctx: Context) -> int:
    task, _ = ctx.task()
    _pretrain(ctx, task)
    return EXIT_OK


def _evaluator(ctx: Context, problem):
    test = ctx.test_split()
    return lambda bs: bundles_summary(bs, problem, test, ctx.cfg.task_preset().background_classes)


def cmd_adapt(ctx: Context) -> int:
    cfg = ctx.cfg
    task, tdigest = ctx.task()
    src = ctx.phase_dir("pretrain")
    _require(src, "pretrain")
    out = ctx.phase_dir("stage1")
    digest = cfg.digest("task", "model", "pretrain", "stage1", "switches")
    if not _begin(out, digest, ctx.args.force):
        return EXIT_OK
    bundles = _load_bundles(src, task.problem)
    pseudo = generate_pseudo_labels(bundles, task.target_train, task.problem, cfg.tau)
    save_pseudo_labels(pseudo, out / "pseudo")
    latest = out / "checkpoints" / "latest"
    resume = latest if (latest / "state.json").is_file() else None
    sch = cfg.schedule("stage1")
    res = run_stage1(task.problem, bundles, task.target_train, pseudo, sch, cfg.stage1_switches(),
                     evaluator=_evaluator(ctx, task.problem), out_dir=out, resume_from=resume)
    plot_curves({s: _loss_series(res.history, step=s) for s in ("step1", "step2", "step3")},
                out / "loss.png", "loss")
    plot_curves({"bundle mean": _eval_series(res.evals)}, out / "miou.png", "target mIoU")
    _finish(out, digest, {"phase": "stage1", "seed": cfg.seed, "task_digest": tdigest,
                          "miou": res.report.get("miou"), "bundle_miou": res.report.get("bundle_miou"),
                          "pseudo_ignored": pseudo.ignored_fraction(), "resumed": resume is not None})
    print(f"{out}: mean bundle mIoU {res.report.get('miou', float('nan')):.4f}")
    return EXIT_OK


def cmd_integrate(ctx: Context) -> int:
    cfg = ctx.cfg
    if not cfg.raw["switches"]["model_integration"]:
        raise ConfigError("switches.model_integration is off; integration would be a no-op")
    task, tdigest = ctx.task()
    src = ctx.phase_dir("stage1")
    _require(src, "adapt")
    out = ctx.phase_dir("stage2")
    digest = cfg.digest()
    if not _begin(out, digest, ctx.args.force):
        return EXIT_OK
    adapted = _load_bundles(src, task.problem)
    pseudo = regenerate_for_stage2(adapted, task.target_train, task.problem, cfg.tau)
    save_pseudo_labels(pseudo, out / "pseudo")
    test = ctx.test_split()
    bg = cfg.task_preset().background_classes
    res = run_stage2(task.problem, adapted, task.target_train, pseudo, cfg.schedule("stage2"),
                     max_squares=cfg.raw["switches"]["max_squares"], **cfg.stage2_options(),
                     evaluator=lambda fm: {"record": final_record(fm, task.problem, test, bg).to_dict()},
                     out_dir=out)
    plot_curves({k: _loss_series(res.history, key=k) for k in ("ens_ce", "kd", "src_ce", "msl")},
                out / "loss.png", "loss")
    plot_curves({"M_fin": _eval_series(res.evals)}, out / "miou.png", "target mIoU")
    miou = res.report["record"]["miou"]
    _finish(out, digest, {"phase": "stage2", "seed": cfg.seed, "task_digest": tdigest, "miou": miou,
                          "selection_scores": res.report["selection_scores"]})
    print(f"{out}: M_fin mIoU {miou:.4f}")
    return EXIT_OK


def _source_only_record(bundles, problem, test, bg) -> EvalRecord:
    """Each source model with its own classifier, cast to the target space and averaged."""
    dtype = next(bundles[0].backbone.parameters()).dtype
    cm = ConfusionMatrix(problem.num_classes)
    with torch.no_grad():
        for s in range(0, len(test), 25):
            x = torch.as_tensor(test.images[s:s + 25], dtype=dtype)
            casts = [cast_probability(torch.softmax(b(x), 1), sp, problem.target_space)
                     for b, sp in zip(bundles, problem.source_spaces)]
            accumulate(cm, class_argmax(average_cast(casts)).numpy(), test.labels[s:s + 25])
    return evaluate_cm(cm, problem.names(), "cast-average", bg)


def _records_for(obj, problem, test, bg, prefix: str) -> list[EvalRecord]:
    if isinstance(obj, FinalModel):
        rec = final_record(obj, problem, test, bg)
        rec.name = f"{prefix}M_fin"
        return [rec]
    recs = bundle_records(obj, problem, test, bg) + [_source_only_record(obj, problem, test, bg)]
    for r in recs:
        r.name = prefix + r.name
    return recs


def cmd_eval(ctx: Context) -> int:
    cfg = ctx.cfg
    task, tdigest = ctx.task()
    test = ctx.test_split()
    problem, bg = task.problem, cfg.task_preset().background_classes
    records: list[EvalRecord] = []
    if ctx.args.checkpoint:
        path = Path(ctx.args.checkpoint)
        if (path / "bundle_0").is_dir():
            obj = _load_bundles(path, problem)
        else:
            try:
                obj = load_checkpoint(path)
            except CheckpointError as exc:
                raise DataError(str(exc)) from None
            if isinstance(obj, ModelBundle):
                raise DataError(f"{path}: a single bundle has no ensemble; pass its phase directory")
        records = _records_for(obj, problem, test, bg, "")
        out = ctx.phase_dir("eval") / "checkpoints" / path.name
    else:
        for phase, label in (("pretrain", "source/"), ("stage1", "stage1/")):
            if (ctx.phase_dir(phase) / DONE).is_file():
                records += _records_for(_load_bundles(ctx.phase_dir(phase), problem), problem, test, bg, label)
        final_dir = ctx.phase_dir("stage2")
        if (final_dir / DONE).is_file():
            records += _records_for(load_checkpoint(final_dir / "final"), problem, test, bg, "stage2/")
        if not records:
            raise DataError(f"{ctx.seed_dir}: nothing to evaluate; run pretrain/adapt/integrate first")
        out = ctx.phase_dir("eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / DONE).unlink(missing_ok=True)
    (out / "records.json").write_text(json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True))
    table = format_iou_table(records, bg)
    (out / "iou_table.txt").write_text(table)
    print(table, end="")
    _finish(out, cfg.digest(), {"phase": "eval", "seed": cfg.seed, "task_digest": tdigest,
                                "records": len(records)})
    return EXIT_OK


def cmd_ablate(ctx: Context) -> int:
    cfg = ctx.cfg
    task, tdigest = ctx.task()
    rows = ctx.args.row or cfg.raw["ablation"]["rows"]
    if rows:
        unknown = set(rows) - set(ROW_NAMES)
        if unknown:
            raise ConfigError(f"unknown ladder rows {sorted(unknown)}; known: {list(ROW_NAMES)}")
    bundles = _pretrain(ctx, task)
    out = ctx.phase_dir("ablation")
    digest = cfg.digest() + ":" + ",".join(rows or ROW_NAMES)
    if not _begin(out, digest, ctx.args.force):
        return EXIT_OK
    pseudo = generate_pseudo_labels(bundles, task.target_train, task.problem, cfg.tau)
    test = ctx.test_split()
    bg = cfg.task_preset().background_classes
    res = run_ladder(task.problem, bundles, task.target_train, test, pseudo, cfg.schedule("stage1"),
                     cfg.schedule("stage2"), tau=cfg.tau, rows=rows, background=bg,
                     select_count=cfg.raw["stage2"]["select_count"], out_dir=out / "rows")
    summary = [{k: r.get(k) for k in ("name", "miou", "bundle_miou", "stage1_bundle_miou", "error")}
               for r in res.rows]
    records = [EvalRecord.from_dict({**r["record"], "name": r["name"]}) for r in res.rows if "record" in r]
    table = format_iou_table(records, bg)
    lines = [f"{r['name']:<20} {'FAILED: ' + r['error'] if r.get('error') else format(100 * r['miou'], '.1f')}"
             for r in res.rows]
    (out / "table.txt").write_text(table + "\n" + "\n".join(lines) + "\n")
    (out / "ladder.json").write_text(json.dumps({"task_digest": tdigest, "seed": cfg.seed,
                                                 "pretrained_checksums": res.pretrained_checksums,
                                                 "rows": summary,
                                                 "records": [r.to_dict() for r in records]},
                                                indent=2, sort_keys=True))
    plot_curves({r["name"]: _loss_series(r.get("history", []), step="step1" if "MI" not in r["name"] else None)
                 for r in res.rows}, out / "loss.png", "loss (Stage I step 1 / Stage II total)")
    plot_curves({r["name"]: _eval_series(r.get("evals", [])) for r in res.rows}, out / "miou.png",
                "target mIoU")
    ok = [r for r in res.rows if not r.get("error")]
    plot_bars([r["name"] for r in ok], [r["miou"] for r in ok], [0.0] * len(ok), out / "ladder.png")
    print(table + "\n".join(lines))
    failed = [r["name"] for r in res.rows if r.get("error")]
    report = {"phase": "ablation", "seed": cfg.seed, "task_digest": tdigest, "failed_rows": failed}
    if len(failed) == len(res.rows):
        (out / "run.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        raise TrainingDiverged(f"every ladder row failed: {failed}")
    _finish(out, digest, report)
    return EXIT_OK


def _run_dirs(ctx: Context) -> list[Path]:
    if ctx.args.runs:
        dirs = [Path(p) for p in ctx.args.runs]
    else:
        dirs = sorted(p for p in ctx.root.glob("seed_*") if p.is_dir())
    if not dirs:
        raise DataError(f"no run directories given or found under {ctx.root}")
    for d in dirs:
        if not d.is_dir():
            raise DataError(f"{d}: not a run directory")
    return dirs


def _run_digest(d: Path) -> str | None:
    found = set()
    for phase in ("stage1", "stage2", "eval", "ablation"):
        f = d / phase / "run.json"
        if f.is_file():
            td = json.loads(f.read_text()).get("task_digest")
            if td:
                found.add(td)
    if len(found) > 1:
        raise DataError(f"{d}: phases disagree on the task digest {sorted(found)}")
    return found.pop() if found else None


def _merge_records(groups: dict[str, list[EvalRecord]]) -> tuple[list[EvalRecord], dict]:
    means, stats = [], {}
    for name, recs in groups.items():
        iou = np.array([[np.nan if v is None else v for v in r.iou] for r in recs], dtype=float)
        with np.errstate(all="ignore"):
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mean_iou = np.nanmean(iou, axis=0)
        values = np.array([r.miou for r in recs])
        groups_mean = {k: float(np.mean([r.groups[k] for r in recs])) for k in recs[0].groups}
        means.append(EvalRecord(name, recs[0].class_names, list(mean_iou), float(values.mean()), groups_mean))
        stats[name] = {"mean": float(values.mean()), "std": float(values.std()),
                       "min": float(values.min()), "max": float(values.max()), "n": int(len(values)),
                       "values": [float(v) for v in values]}
    return means, stats


def cmd_report(ctx: Context) -> int:
    dirs = _run_dirs(ctx)
    digests = {str(d): _run_digest(d) for d in dirs}
    known = {v for v in digests.values() if v}
    if len(known) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in digests.items())
        raise DataError(f"runs come from different tasks; refusing to merge ({detail})")
    sections = {}
    for kind, rel, key in (("eval", "eval/records.json", None), ("ablation", "ablation/ladder.json", "records")):
        groups: dict[str, list[EvalRecord]] = {}
        for d in dirs:
            f = d / rel
            if not f.is_file():
                continue
            data = json.loads(f.read_text())
            for rd in (data[key] if key else data):
                groups.setdefault(rd["name"], []).append(EvalRecord.from_dict(rd))
        if groups:
            sections[kind] = _merge_records(groups)
    if not sections:
        raise DataError("no metric records found in the given run directories")
    out = ctx.root / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / DONE).unlink(missing_ok=True)
    text = []
    bg = ctx.cfg.task_preset().background_classes
    for kind, (means, stats) in sections.items():
        text.append(f"== {kind} ({len(dirs)} run(s)) ==")
        text.append(format_iou_table(means, bg).rstrip("\n"))
        text.append(f"{'method':<24}{'mean':>8}{'+/-':>8}{'min':>8}{'max':>8}")
        for name, s in stats.items():
            text.append(f"{name:<24}{100 * s['mean']:8.1f}{100 * s['std']:8.1f}"
                        f"{100 * s['min']:8.1f}{100 * s['max']:8.1f}")
        text.append("")
        names = list(stats)
        plot_bars(names, [stats[n]["mean"] for n in names], [stats[n]["std"] for n in names],
                  out / f"{kind}.png")
    (out / "report.txt").write_text("\n".join(text))
    (out / "report.json").write_text(json.dumps(
        {"runs": [str(d) for d in dirs], "task_digest": known.pop() if known else None,
         **{kind: stats for kind, (_, stats) in sections.items()}}, indent=2, sort_keys=True))
    (out / DONE).write_text("{}")
    print("\n".join(text))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "integrate": cmd_integrate, "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="training seed (overrides the config)")
    common.add_argument("--out", default=os.environ.get(OUT_ENV, "runs"),
                        help=f"output root (default: ${OUT_ENV} or ./runs)")
    common.add_argument("--force", action="store_true", help="replace existing outputs")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. stage1.lr=0.005")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="usmsma", description="Union-set multi-source model adaptation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic task")
    sub.add_parser("pretrain", parents=[common], help="train one model per source")
    sub.add_parser("adapt", parents=[common], help="Stage I: model-invariant feature learning")
    sub.add_parser("integrate", parents=[common], help="Stage II: distil into one backbone")
    e = sub.add_parser("eval", parents=[common], help="score pretrained/adapted/final models")
    e.add_argument("--checkpoint", help="evaluate this checkpoint directory only")
    a = sub.add_parser("ablate", parents=[common], help="run the cumulative ablation ladder")
    a.add_argument("--row", action="append", choices=ROW_NAMES, help="run only this row (repeatable)")
    r = sub.add_parser("report", parents=[common], help="merge runs into one report")
    r.add_argument("runs", nargs="*", help="seed directories (default: all under --out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](Context(args, cfg))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
