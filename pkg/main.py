"""
检索增强代码补全引擎命令行入口
子命令：index（建库）、complete（单次补全）、eval（评测）、analyze（分析报告）、serve-model（参考模型服务）
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from loguru import logger

from app import __version__
from app.core.config import EngineConfig, RunConfig, load_engine_config, settings
from app.core.database import load_database, save_database
from app.core.exceptions import ConfigError, EngineError, RunFailedError, UsageError
from app.core.logging import setup_logging
from app.models.evaluation import EvalMode, RetrievalKind
from app.services.chunk_store import HashingEmbeddingProvider, chunk_store_service
from app.services.completion_engine import CompletionEngine, cursor_context
from app.services.eval_harness import eval_harness, load_report
from app.services.language_model import create_model
from app.services.model_server import ModelServer
from app.services.tokenizer_service import load_tokenizer
from app.utils.table import print_table


class CliArgumentParser(argparse.ArgumentParser):
    """参数错误时抛出UsageError（退出码1）"""

    def error(self, message):
        raise UsageError(message)


def _response(success: bool, message: str, data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {"success": success, "message": message, "data": data or {}}


def _emit_json(payload: Dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, ensure_ascii=False, indent=2) + "\n")
    sys.stdout.flush()


def _write_json(path: str, data: Dict[str, Any]) -> None:
    out = Path(path)
    if not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def _parse_floats(value: str) -> List[float]:
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError as e:
        raise UsageError(f"无法解析数值列表: {value}") from e


def _engine_config(args, **overrides) -> EngineConfig:
    overrides.update(tokenizer=args.tokenizer, seed=getattr(args, "seed", None))
    config = load_engine_config(args.config, overrides)
    config.validate_paths()
    return config


def _provider(args) -> HashingEmbeddingProvider:
    return HashingEmbeddingProvider(dimension=args.embedding_dim)


# ==================== 子命令 ====================

def cmd_index(args) -> int:
    """构建并保存项目检索数据库"""
    config = _engine_config(args, chunk_size=args.chunk_size)
    spec = load_tokenizer(config.tokenizer)
    db = chunk_store_service.build_database(args.project_root, spec, config.chunk_size, config.extensions)
    if args.embeddings:
        db = chunk_store_service.attach_embeddings(db, _provider(args))
    save_database(db, args.out)

    stats = chunk_store_service.database_stats(db, args.out)
    if args.json:
        _emit_json(_response(True, f"检索数据库已保存: {args.out}", stats.to_dict()))
    else:
        sys.stdout.write(f"记录数: {stats.records}\n")
        sys.stdout.write(f"token数: {stats.key_tokens}\n")
        sys.stdout.write(f"文件大小: {stats.on_disk_bytes} 字节\n")
        if stats.skipped_files:
            sys.stdout.write(f"跳过文件: {stats.skipped_files}\n")
    return 0


def cmd_complete(args) -> int:
    """在文件的 (行, 列) 处补全"""
    config = _engine_config(args, k=0 if args.no_retrieval else args.k, model=args.model)
    spec = load_tokenizer(config.tokenizer)

    db = None
    m = config.chunk_size
    if args.db and not args.no_retrieval and config.k > 0:
        db = load_database(args.db)
        db.check_tokenizer(spec.tokenizer_id)
        if args.chunk_size is not None and args.chunk_size != db.m:
            raise ConfigError(f"--chunk-size {args.chunk_size} 与检索数据库的块大小 {db.m} 不一致")
        m = db.m
    rag = config.rag_config().model_copy(update={"m": m})

    path = Path(args.file)
    try:
        text = path.read_bytes().decode("utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"无法读取文件: {args.file}: {e}") from e
    context = cursor_context(text, args.line, args.col)
    file_path = path.resolve().relative_to(Path(args.project_root).resolve()).as_posix() \
        if args.project_root else path.as_posix()

    model = create_model(config.model, spec, config.ngram_corpus, config.ngram_order, config.extensions)
    try:
        engine = CompletionEngine(spec, model, _provider(args) if args.retrieval == "embedding" else None)
        result = engine.complete(
            context, rag, db=db, file_path=file_path,
            retrieval=RetrievalKind(args.retrieval),
            copying_allowed=args.copying,
            similarity_threshold=args.threshold,
            healing=not args.no_healing,
            max_tokens=args.max_tokens,
        )
    finally:
        model.close()

    if args.json:
        _emit_json(_response(True, "补全成功", result.to_dict()))
    else:
        sys.stdout.write(result.completion + "\n")
    return 0


def cmd_eval(args) -> int:
    """运行评测或相似度阈值扫描"""
    mode = EvalMode(args.mode)
    config = _engine_config(args, k=args.k, model=args.model, chunk_size=args.chunk_size)
    if mode.is_random() and config.seed is None:
        raise UsageError(f"--mode {mode.value} 需要 --seed")

    spec = load_tokenizer(config.tokenizer)
    retrieval = RetrievalKind(args.retrieval)
    cfg = RunConfig.create(
        mode=mode,
        retrieval=retrieval,
        copying_allowed=args.copying,
        rag=config.rag_config(),
        seed=config.seed,
        healing=not args.no_healing,
        single_token=args.single_token,
        exclude_overlap=args.exclude_overlap,
        max_tokens=args.max_tokens,
    )

    dataset = eval_harness.load_dataset(args.dataset)
    provider = _provider(args) if retrieval == RetrievalKind.EMBEDDING else None
    dbs = {}
    if cfg.retrieval_enabled():
        dbs = eval_harness.build_project_databases(dataset, spec, config.chunk_size, provider, config.extensions)

    # 困惑度需要完整分布
    model = create_model(config.model, spec, config.ngram_corpus, config.ngram_order, config.extensions,
                         top_j=0 if args.single_token else None)
    try:
        if args.threshold:
            sweep = eval_harness.threshold_sweep(dataset, model, dbs, cfg, _parse_floats(args.threshold), spec, provider)
            data = sweep.to_dict()
            rows = [[row.threshold, row.report.metrics.em.point, row.report.metrics.edit_sim.point,
                     row.report.metrics.prefix_sim.point, row.report.examples_with_snippets(),
                     row.improved, row.worsened] for row in sweep.rows]
            headers = ["阈值", "EM", "EditSim", "PrefixSim", "使用片段", "提升", "下降"]
            status = "ok" if all(row.report.status == "ok" for row in sweep.rows) else "failed"
        else:
            report = eval_harness.run(dataset, model, dbs, cfg, spec, provider)
            data = report.to_dict()
            metrics = report.metrics
            rows = [[name, ci.point, ci.lo, ci.hi] for name, ci in
                    (("EM", metrics.em), ("EditSim", metrics.edit_sim), ("PrefixSim", metrics.prefix_sim))]
            headers = ["指标", "点估计", "下界", "上界"]
            status = report.status
    finally:
        model.close()

    _write_json(args.out, data)
    logger.info(f"评测报告已保存: {args.out}")
    print_table(headers, rows, title=f"{dataset.name} · {cfg.mode.value} · {cfg.retrieval.value}")
    if status != "ok":
        raise RunFailedError("失败样本比例超过上限，运行标记为失败")
    return 0


def cmd_analyze(args) -> int:
    """按相似度分桶比较检索报告与无检索基线"""
    if "," in args.buckets:
        buckets = _parse_floats(args.buckets)
    else:
        try:
            buckets = int(args.buckets)
        except ValueError as e:
            raise UsageError(f"--buckets 必须是整数或逗号分隔的边界: {args.buckets}") from e

    analysis = eval_harness.analyze_reports(load_report(args.report), load_report(args.baseline), buckets)
    if args.json:
        _emit_json(_response(True, "分析完成", analysis.to_dict()))
        return 0

    print_table(
        ["区间", "样本数", "平均相似度", "EM", "基线EM", "提升比例", "下降比例"],
        [[f"[{row.lo:.2f}, {row.hi:.2f}{']' if i == len(analysis.buckets) - 1 else ')'}", row.count,
          row.mean_similarity, row.em, row.baseline_em, row.improved, row.worsened]
         for i, row in enumerate(analysis.buckets)],
        title="相似度分桶",
    )
    print_table(
        ["项目", "样本数", "平均相似度", "EM", "基线EM", "EM差"],
        [[row.project_id, row.count, row.mean_similarity, row.em, row.baseline_em, row.em_diff]
         for row in analysis.projects],
        title="按项目",
    )
    spearman = "无" if analysis.spearman is None else f"{analysis.spearman:.3f}"
    sys.stdout.write(f"提升={analysis.improved} 下降={analysis.worsened} 不变={analysis.unchanged} "
                     f"Spearman={spearman}\n")
    return 0


def cmd_serve_model(args) -> int:
    """运行参考模型服务"""
    config = _engine_config(args, model=args.model)
    spec = load_tokenizer(config.tokenizer)
    if config.model.startswith(("ws://", "wss://")):
        raise UsageError("serve-model 只能提供本地参考模型")
    model = create_model(config.model, spec, config.ngram_corpus, config.ngram_order, config.extensions)
    server = ModelServer(model, host=args.host, port=args.port, tokenizer_id=spec.tokenizer_id, top_j=args.top_j)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("收到中断信号，停止模型服务")
    return 0


COMMANDS = {
    "index": cmd_index,
    "complete": cmd_complete,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "serve-model": cmd_serve_model,
}


# ==================== 参数解析 ====================

def build_parser() -> argparse.ArgumentParser:
    """构建命令行参数解析器"""
    common = CliArgumentParser(add_help=False)
    common.add_argument("--config", help="引擎配置文件（JSON，键与EngineConfig字段同名）")
    common.add_argument("--tokenizer", help="分词器目录或vocab.json路径")
    common.add_argument("--log-level", default=None, help="日志级别（默认取LOG_LEVEL）")

    parser = CliArgumentParser(prog="main.py", description=settings.APP_NAME)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index", parents=[common], help="构建项目检索数据库")
    index.add_argument("project_root")
    index.add_argument("--chunk-size", type=int, default=None, help="块大小m（默认64）")
    index.add_argument("--embeddings", action="store_true", help="同时计算块向量")
    index.add_argument("--embedding-dim", type=int, default=256)
    index.add_argument("--out", required=True, help="数据库输出路径")
    index.add_argument("--json", action="store_true")

    complete = sub.add_parser("complete", parents=[common], help="在光标处补全一行")
    complete.add_argument("--db", help="检索数据库文件")
    complete.add_argument("--file", required=True)
    complete.add_argument("--line", type=int, required=True, help="行号（从1开始）")
    complete.add_argument("--col", type=int, default=0, help="行内字符偏移（从0开始）")
    complete.add_argument("--k", type=int, default=None)
    complete.add_argument("--model", default=None, help="copy / uniform / ngram / ws://host:port")
    complete.add_argument("--no-retrieval", action="store_true")
    complete.add_argument("--retrieval", choices=["jaccard", "embedding"], default="jaccard")
    complete.add_argument("--embedding-dim", type=int, default=256)
    complete.add_argument("--chunk-size", type=int, default=None)
    complete.add_argument("--project-root", help="计算文件在项目内相对路径的根目录")
    complete.add_argument("--copying", action="store_true", help="允许检索同一文件的片段")
    complete.add_argument("--threshold", type=float, default=None, help="丢弃相似度低于阈值的片段")
    complete.add_argument("--no-healing", action="store_true")
    complete.add_argument("--max-tokens", type=int, default=None)
    complete.add_argument("--json", action="store_true")

    evaluate = sub.add_parser("eval", parents=[common], help="运行评测")
    evaluate.add_argument("--dataset", required=True, help="数据集目录或manifest.json")
    evaluate.add_argument("--mode", choices=[mode.value for mode in EvalMode], default="line")
    evaluate.add_argument("--retrieval", choices=[kind.value for kind in RetrievalKind], default="jaccard")
    evaluate.add_argument("--copying", action="store_true")
    evaluate.add_argument("--threshold", default=None, help="逗号分隔的相似度阈值，给出时运行阈值扫描")
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--k", type=int, default=None)
    evaluate.add_argument("--model", default=None)
    evaluate.add_argument("--chunk-size", type=int, default=None)
    evaluate.add_argument("--embedding-dim", type=int, default=256)
    evaluate.add_argument("--single-token", action="store_true", help="同时计算单token指标")
    evaluate.add_argument("--exclude-overlap", action="store_true", help="排除与训练数据重叠的项目")
    evaluate.add_argument("--no-healing", action="store_true")
    evaluate.add_argument("--max-tokens", type=int, default=None)

    analyze = sub.add_parser("analyze", parents=[common], help="按相似度分桶分析评测报告")
    analyze.add_argument("--report", required=True)
    analyze.add_argument("--baseline", required=True)
    analyze.add_argument("--buckets", default=str(settings.SIMILARITY_BUCKETS), help="分桶数或逗号分隔的边界")
    analyze.add_argument("--json", action="store_true")

    serve = sub.add_parser("serve-model", parents=[common], help="通过WebSocket提供参考模型")
    serve.add_argument("--model", default=None)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8765)
    serve.add_argument("--top-j", type=int, default=None, help="返回稀疏的top-j分数")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """命令行主函数，返回退出码"""
    parser = build_parser()
    json_output = False
    try:
        args = parser.parse_args(argv)
        json_output = getattr(args, "json", False)
        setup_logging(args.log_level)
        return COMMANDS[args.command](args)
    except EngineError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if json_output:
            _emit_json(_response(False, str(e), {"error": type(e).__name__}))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
