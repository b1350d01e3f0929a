"""
命令行主入口
每个子命令对应一个模块操作，所有随机性来自配置中的单一种子
"""
import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import torch

from core.config import RunConfig, dump_run_config, load_run_config, settings
from core.errors import AffectError, ConfigError, DataIOError, classify_error
from core.logger import logger, setup_logger
from core.tasks import ALL_TASKS, Task

CommandHandler = Callable[[argparse.Namespace, RunConfig, Path], Dict[str, Any]]

# 命令行参数 -> 配置键
PATH_OVERRIDES = {
    "manifest": "DATA__MANIFEST",
    "val_manifest": "DATA__VAL_MANIFEST",
    "labels": "DATA__LABELS",
    "predictions": "DATA__PREDICTIONS",
    "completed": "DATA__COMPLETED",
    "teachers_dir": "DATA__TEACHERS_DIR",
    "checkpoint": "DATA__CHECKPOINT",
}


def _require(value: Optional[str], key: str) -> str:
    if not value:
        raise ConfigError("该命令需要此路径，请在配置文件或命令行中给出", key=key)
    return value


def cmd_gen_synthetic(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.synthetic import generate_synthetic_splits

    train, val = generate_synthetic_splits(config.synthetic, out)
    results = {"train_manifest": out / "train.csv", "train_samples": len(train)}
    if val is not None:
        results.update(val_manifest=out / "val.csv", val_samples=len(val))
    return results


def _load_val(config: RunConfig):
    from data.manifest import load_manifest

    return load_manifest(config.data.val_manifest) if config.data.val_manifest else None


def cmd_train_teacher(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.manifest import load_manifest
    from distill.pipeline import train_teacher

    task = Task(args.task)
    manifest = load_manifest(_require(config.data.manifest, "DATA__MANIFEST"))
    teacher = train_teacher(
        task, manifest, config.model, config.train, config.loss, val_manifest=_load_val(config), out_dir=out,
    )
    return {"task": task.value, "checkpoint": teacher.checkpoint_path, "teacher_id": teacher.teacher_id}


def cmd_complete_labels(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.manifest import load_manifest
    from distill.pipeline import complete_labels, load_teachers

    manifest = load_manifest(_require(config.data.manifest, "DATA__MANIFEST"))
    teachers = load_teachers(_require(config.data.teachers_dir, "DATA__TEACHERS_DIR"))
    completed = complete_labels(teachers, manifest, hard=args.hard)
    path = completed.save(out / "completed.csv")
    counts = completed.counts()
    return {
        "completed": path, "completed_va": counts[Task.VA], "completed_expr": counts[Task.EXPR],
        "completed_au": counts[Task.AU], "dropped": len(completed.dropped),
    }


def cmd_build_multi(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.manifest import load_manifest, save_manifest
    from data.models import Provenance
    from distill.models import CompletedLabels
    from distill.pipeline import build_unified

    manifest = load_manifest(_require(config.data.manifest, "DATA__MANIFEST"))
    completed = CompletedLabels.load(_require(config.data.completed, "DATA__COMPLETED"))
    unified = build_unified(manifest, completed)
    path = save_manifest(unified, out / "d_multi.csv")
    results: Dict[str, Any] = {"d_multi": path, "samples": len(unified)}
    for task in ALL_TASKS:
        results[f"teacher_{task.value}"] = unified.provenance_counts(task)[Provenance.TEACHER]
    return results


def cmd_train_student(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.manifest import load_manifest
    from distill.pipeline import train_student

    d_multi = load_manifest(_require(config.data.manifest, "DATA__MANIFEST"))
    result = train_student(
        d_multi, config.model, config.student, config.loss, val_manifest=_load_val(config), out_dir=out,
    )
    last = result.history.epochs[-1]
    return {
        "checkpoint": out / "student.pt", "best_checkpoint": result.best_checkpoint,
        "epochs": len(result.history), "final_loss": last.loss_total,
    }


def cmd_predict(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.manifest import load_manifest
    from metrics.evaluator import save_predictions
    from training.checkpoint import load_checkpoint
    from training.inference import predict_manifest

    model, _ = load_checkpoint(_require(config.data.checkpoint, "DATA__CHECKPOINT"))
    manifest = load_manifest(_require(config.data.manifest, "DATA__MANIFEST"))
    frame = predict_manifest(model, manifest)
    path = save_predictions(frame, out / "predictions.csv")
    return {"predictions": path, "samples": len(frame)}


def cmd_evaluate(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from metrics.evaluator import evaluate, write_report

    report = evaluate(
        _require(config.data.predictions, "DATA__PREDICTIONS"),
        _require(config.data.labels, "DATA__LABELS"),
        au_threshold=args.threshold,
    )
    text_path, kv_path = write_report(report, out)
    print(report.to_text())
    results: Dict[str, Any] = {"report": text_path, "report_kv": kv_path}
    for name in ("s_va", "s_expr", "s_au", "ccc_v", "ccc_a", "expr_f1", "expr_tacc", "au_af1", "au_tacc"):
        value = getattr(report, name)
        results[name] = "absent" if value is None else value
    return results


def cmd_analyze(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from analysis.contribution import emit_contribution_plot, layer_contribution

    report = layer_contribution(_require(config.data.checkpoint, "DATA__CHECKPOINT"))
    plot_path, table_path = emit_contribution_plot(report, out / "contribution.png")
    return {"plot": plot_path, "table": table_path}


def _manifest_inputs(config: RunConfig) -> List[str]:
    inputs = list(config.data.merge_inputs)
    if not inputs and config.data.manifest:
        inputs = [config.data.manifest]
    if not inputs:
        raise ConfigError("需要至少一个清单", key="DATA__MERGE_INPUTS")
    return inputs


def cmd_expr_dist(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.manifest import emit_expression_distribution, load_manifest

    manifests = {}
    for path in _manifest_inputs(config):
        name = Path(path).stem
        while name in manifests:
            name += "_"
        manifests[name] = load_manifest(path)
    distributions = emit_expression_distribution(
        manifests, out / "expr_distribution.csv", out / "expr_distribution.png"
    )
    results: Dict[str, Any] = {"table": out / "expr_distribution.csv", "plot": out / "expr_distribution.png"}
    for name, dist in distributions.items():
        results[f"{name}.counts"] = ",".join(str(c) for c in dist.counts)
    return results


def cmd_merge(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from data.manifest import load_manifest, merge_datasets, save_manifest

    merged = merge_datasets([load_manifest(p) for p in _manifest_inputs(config)])
    path = save_manifest(merged, out / "merged.csv")
    coverage = merged.coverage
    return {
        "merged": path, "samples": len(merged), "coverage_va": coverage[Task.VA],
        "coverage_expr": coverage[Task.EXPR], "coverage_au": coverage[Task.AU],
    }


def cmd_gradcheck(args, config: RunConfig, out: Path) -> Dict[str, Any]:
    from training.gradcheck import gradcheck_model_config, gradient_check

    report = gradient_check(
        gradcheck_model_config(seed=config.seed, num_aus=config.model.num_aus),
        weights=config.loss, step=args.step, tolerance=args.tolerance,
        elements_per_tensor=args.elements, seed=config.seed,
    )
    path = out / "gradcheck.csv"
    try:
        path.write_text(report.to_text(), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"梯度校验报告写入失败: {path}: {e}")
    if not report.passed:
        logger.warning(f"梯度校验未通过 | failed={report.failed_tensors}")
    return {"report": path, "passed": report.passed, "max_relative_error": report.max_relative_error}


COMMANDS: Dict[str, CommandHandler] = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-teacher": cmd_train_teacher,
    "complete-labels": cmd_complete_labels,
    "build-multi": cmd_build_multi,
    "train-student": cmd_train_student,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "expr-dist": cmd_expr_dist,
    "merge": cmd_merge,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="dotenv 格式的运行配置文件")
    common.add_argument("--seed", type=int, help="覆盖配置中的种子")
    common.add_argument("--out", help="覆盖配置中的输出目录")
    common.add_argument("--log-level", default=None, help="日志级别")
    for name in PATH_OVERRIDES:
        common.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)

    parser = argparse.ArgumentParser(prog="affect-fpn", description="多任务情感分析特征金字塔工具")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synthetic", parents=[common], help="生成合成数据集")
    teacher = sub.add_parser("train-teacher", parents=[common], help="训练单任务教师")
    teacher.add_argument("--task", required=True, choices=[t.value for t in ALL_TASKS])
    complete = sub.add_parser("complete-labels", parents=[common], help="教师补全缺失标签")
    complete.add_argument("--hard", action="store_true", help="存储硬标签而不是软标签")
    sub.add_parser("build-multi", parents=[common], help="构建全标注的 D_multi")
    sub.add_parser("train-student", parents=[common], help="训练多任务学生")
    sub.add_parser("predict", parents=[common], help="生成预测文件")
    evaluate = sub.add_parser("evaluate", parents=[common], help="评估预测文件")
    evaluate.add_argument("--threshold", type=float, default=0.5, help="AU 判定阈值")
    sub.add_parser("analyze", parents=[common], help="特征层贡献分析")
    dist = sub.add_parser("expr-dist", parents=[common], help="表情分布统计")
    dist.add_argument("--inputs", nargs="+", default=None, help="一个或多个清单")
    merge = sub.add_parser("merge", parents=[common], help="合并多个清单")
    merge.add_argument("--inputs", nargs="+", default=None, help="待合并的清单")
    gradcheck = sub.add_parser("gradcheck", parents=[common], help="有限差分梯度校验")
    gradcheck.add_argument("--step", type=float, default=1e-3)
    gradcheck.add_argument("--tolerance", type=float, default=1e-4)
    gradcheck.add_argument("--elements", type=int, default=None, help="每个张量抽查的元素数")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = {}
    if args.seed is not None:
        overrides["SEED"] = str(args.seed)
    if args.out is not None:
        overrides["OUTPUT_DIR"] = args.out
    for name, key in PATH_OVERRIDES.items():
        value = getattr(args, name, None)
        if value is not None:
            overrides[key] = value
    inputs = getattr(args, "inputs", None)
    if inputs:
        overrides["DATA__MERGE_INPUTS"] = ",".join(inputs)
    return overrides


def _format_summary(values: Dict[str, Any]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        text = str(value).replace("\n", " ")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def write_summary(out: Path, values: Dict[str, Any]):
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary").write_text(_format_summary(values), encoding="utf-8")
    except OSError as e:
        logger.error(f"运行摘要写入失败: {e}")


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行入口

    Returns:
        int: 退出码，0 表示成功，其余为各错误类别的退出码
    """
    args = build_parser().parse_args(argv)
    setup_logger(level=args.log_level)

    try:
        config = load_run_config(args.config, overrides=collect_overrides(args))
    except AffectError as e:
        logger.error(f"配置加载失败 | category={e.category} {e}")
        return e.exit_code

    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.env").write_text(dump_run_config(config), encoding="utf-8")
    except OSError as e:
        logger.error(f"输出目录不可写: {out}: {e}")
        return DataIOError.exit_code
    setup_logger(log_dir=str(out / "logs"), level=args.log_level)
    if settings.torch_threads > 0:
        torch.set_num_threads(settings.torch_threads)

    summary: Dict[str, Any] = {"command": args.command, "seed": config.seed, "output_dir": out}
    logger.info(f"开始执行命令 | command={args.command} seed={config.seed} out={out}")
    try:
        results = COMMANDS[args.command](args, config, out)
    except Exception as e:
        error = classify_error(e)
        if error is e:
            logger.error(f"命令执行失败 | command={args.command} category={error.category} {error}")
        else:
            logger.opt(exception=e).error(f"命令执行异常 | command={args.command} category={error.category} {error}")
        summary.update(status="error", category=error.category, exit_code=error.exit_code, message=str(error))
        write_summary(out, summary)
        return error.exit_code

    summary.update(status="ok", exit_code=0)
    summary.update(results)
    write_summary(out, summary)
    logger.info(f"命令执行完成 | command={args.command}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
