"""
评测服务
加载项目快照和补全样本，按配置运行补全引擎并计算指标报告；支持随机位置变体、复制模式、相似度阈值扫描和分桶分析
"""

import json
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.stats import spearmanr

from app.core.config import RunConfig, settings
from app.core.exceptions import DataError, DatasetValidationError
from app.models.chunk import RetrievalDatabase, RetrievedSnippet
from app.models.evaluation import (AnalysisReport, BucketRow, EvalDataset, EvalExample, ExampleRecord,
                                   PredictionPair, ProjectInfo, ProjectRow, RetrievalKind, RunReport,
                                   SimilarityHistogram, SingleTokenStats, SweepReport, SweepRow)
from app.models.prompt import CompletionResult
from app.services.chunk_store import EmbeddingProvider, chunk_store_service
from app.services.completion_engine import CompletionEngine
from app.services.language_model import LanguageModel, decoding_service
from app.services.metrics_service import metrics_service, score_pair
from app.services.tokenizer_service import TokenizerSpec
from app.utils.seeds import derive_rng, derive_seed

MANIFEST_FILE = "manifest.json"
EXAMPLES_FILE = "examples.jsonl"


class EvalHarness:
    """评测服务类"""

    # ==================== 数据集 ====================

    def _read_manifest(self, manifest_path: Path) -> Tuple[Dict[str, ProjectInfo], Path]:
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise DataError(f"数据集清单不存在: {manifest_path}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"数据集清单解析失败: {manifest_path} 第{e.lineno}行第{e.colno}列: {e.msg}") from e

        base = manifest_path.parent
        projects: Dict[str, ProjectInfo] = {}
        for entry in manifest.get("projects", []):
            if "id" not in entry or "root" not in entry:
                raise DataError(f"项目条目缺少 id/root 字段: {entry}")
            root = (base / entry["root"]).resolve()
            if not root.is_dir():
                raise DataError(f"项目目录不存在: {entry['id']} → {root}")
            projects[entry["id"]] = ProjectInfo(project_id=entry["id"], root=root,
                                                overlap_flag=bool(entry.get("overlap_flag", False)))
        return projects, base / manifest.get("examples", EXAMPLES_FILE)

    def _locate(self, text: str, line_number: int) -> Optional[int]:
        """第line_number行（从1开始）起始位置的字符偏移"""
        if line_number < 1:
            return None
        offset = 0
        for _ in range(line_number - 1):
            newline = text.find("\n", offset)
            if newline < 0:
                return None
            offset = newline + 1
        return offset

    def load_dataset(self, path: Union[str, Path]) -> EvalDataset:
        """
        加载并校验数据集

        path可以是数据集目录（含manifest.json与examples.jsonl）或清单文件本身；
        每个样本的target必须出现在项目快照中所述的位置
        """
        path = Path(path)
        manifest_path = path / MANIFEST_FILE if path.is_dir() else path
        projects, examples_path = self._read_manifest(manifest_path)
        if not examples_path.exists():
            raise DataError(f"样本文件不存在: {examples_path}")

        examples: List[EvalExample] = []
        problems: List[str] = []
        file_cache: Dict[Tuple[str, str], str] = {}

        for line_no, line in enumerate(examples_path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            where = f"{examples_path.name}:{line_no}"
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                problems.append(f"{where}: JSON解析失败: {e.msg}")
                continue

            missing = [key for key in ("project_id", "file_path", "line_number", "target") if key not in entry]
            if missing:
                problems.append(f"{where}: 缺少字段 {missing}")
                continue
            project = projects.get(entry["project_id"])
            if project is None:
                raise DataError(f"{where}: 清单中没有项目 {entry['project_id']}")

            file_path, line_number, target = entry["file_path"], int(entry["line_number"]), entry["target"]
            location = f"{entry['project_id']}/{file_path}:{line_number}"
            if not target.strip():
                problems.append(f"{where}: {location} 的target为空")
                continue

            key = (project.project_id, file_path)
            if key not in file_cache:
                try:
                    file_cache[key] = (project.root / file_path).read_bytes().decode("utf-8")
                except (OSError, UnicodeDecodeError) as e:
                    problems.append(f"{where}: 无法读取 {location}: {e}")
                    continue
            text = file_cache[key]

            start = self._locate(text, line_number)
            cut_offset = int(entry.get("cut_offset", 0))
            if start is None or not text.startswith(target, start + cut_offset):
                problems.append(f"{where}: target不在 {location} 列 {cut_offset} 处")
                continue

            examples.append(EvalExample(
                example_id=str(entry.get("example_id", f"{project.project_id}:{file_path}:{line_number}")),
                project_id=project.project_id,
                file_path=file_path,
                line_number=line_number,
                cut_offset=cut_offset,
                target=target,
                context_text=text[:start + cut_offset],
                mode_hint=entry.get("mode_hint", "line"),
            ))

        if problems:
            for problem in problems:
                logger.error(f"数据集校验失败: {problem}")
            raise DatasetValidationError(f"数据集中有 {len(problems)} 个无效样本", problems)

        ids = [example.example_id for example in examples]
        if len(set(ids)) != len(ids):
            raise DatasetValidationError("样本id重复", [i for i in ids if ids.count(i) > 1])

        logger.info(f"加载数据集: {manifest_path.parent.name}, 项目={len(projects)}, 样本={len(examples)}")
        return EvalDataset(name=manifest_path.parent.name, projects=projects, examples=examples)

    def randomize_cut(self, example: EvalExample, seed: int) -> EvalExample:
        """在目标首行 [0, len) 范围内均匀抽取开始位置，切点之前的部分移入上下文"""
        first_line = example.target.split("\n", 1)[0].rstrip()
        if len(first_line) <= 1:
            return example
        cut = int(derive_rng(seed, f"cut:{example.example_id}").integers(0, len(first_line)))
        if cut == 0:
            return example
        return replace(
            example,
            cut_offset=example.cut_offset + cut,
            target=example.target[cut:],
            context_text=example.context_text + example.target[:cut],
        )

    def prepare_examples(self, dataset: EvalDataset, cfg: RunConfig) -> List[EvalExample]:
        """按配置过滤重叠项目、生成随机切点"""
        examples = dataset.examples
        if cfg.exclude_overlap:
            flagged = {pid for pid, project in dataset.projects.items() if project.overlap_flag}
            examples = [example for example in examples if example.project_id not in flagged]
            if flagged:
                logger.info(f"排除重叠项目: {sorted(flagged)}, 剩余样本={len(examples)}")
        if cfg.mode.is_random():
            examples = [self.randomize_cut(example, cfg.seed) for example in examples]
        return examples

    def build_project_databases(self,
                                dataset: EvalDataset,
                                spec: TokenizerSpec,
                                m: int,
                                provider: Optional[EmbeddingProvider] = None,
                                extensions: Optional[Sequence[str]] = None) -> Dict[str, RetrievalDatabase]:
        """为每个项目单独构建检索数据库（不排除任何文件，同文件过滤在查询时进行）"""
        databases = {}
        for project_id in dataset.project_ids():
            db = chunk_store_service.build_database(dataset.projects[project_id].root, spec, m, extensions)
            if provider is not None:
                db = chunk_store_service.attach_embeddings(db, provider)
            databases[project_id] = db
        return databases

    # ==================== 运行 ====================

    def _check_databases(self, examples: List[EvalExample], dbs: Dict[str, RetrievalDatabase],
                         cfg: RunConfig, spec: TokenizerSpec) -> None:
        if not cfg.retrieval_enabled():
            return
        for project_id in dict.fromkeys(example.project_id for example in examples):
            db = dbs.get(project_id)
            if db is None:
                raise DataError(f"项目 {project_id} 没有检索数据库")
            db.check_tokenizer(spec.tokenizer_id)
            if db.m != cfg.rag.m:
                raise DataError(f"项目 {project_id} 的检索数据库块大小 {db.m} 与查询长度 {cfg.rag.m} 不一致")

    def _complete(self, engine: CompletionEngine, example: EvalExample, dbs: Dict[str, RetrievalDatabase],
                  cfg: RunConfig, retrieval: RetrievalKind,
                  retrieved: Optional[List[RetrievedSnippet]] = None) -> CompletionResult:
        return engine.complete(
            example.context_text,
            cfg.rag,
            db=dbs.get(example.project_id),
            file_path=example.file_path,
            retrieval=retrieval,
            copying_allowed=cfg.copying_allowed,
            similarity_threshold=cfg.similarity_threshold,
            healing=cfg.healing,
            max_tokens=cfg.token_limit(),
            max_lines=example.target_lines if cfg.mode.is_api() else 1,
            retrieved=retrieved,
        )

    def _make_record(self, example: EvalExample, result: CompletionResult,
                     retrieved: List[RetrievedSnippet]) -> ExampleRecord:
        pair = PredictionPair.create(result.completion, example.target)
        scores = score_pair(pair)
        return ExampleRecord(
            example_id=example.example_id,
            project_id=example.project_id,
            file_path=example.file_path,
            target=example.target,
            prediction=result.completion,
            em=scores["em"],
            edit_sim=scores["edit_sim"],
            prefix_len=scores["prefix_len"],
            target_len=scores["target_len"],
            stop_reason=result.decode.stop_reason.value,
            snippets=[snippet.to_dict() for snippet in result.prompt.snippets_used],
            max_similarity=max((snippet.jaccard for snippet in retrieved), default=None),
            error=result.decode.error,
        )

    def _single_token(self, engine: CompletionEngine, example: EvalExample,
                      result: CompletionResult) -> SingleTokenStats:
        """以组装后的提示词为前缀，按真实前缀逐个给目标token评分"""
        prompt = list(result.prompt.tokens)
        target = engine.spec.encode(result.healing.pending + example.target.encode("utf-8"))
        stats = decoding_service.score_sequence(engine.model, prompt + target, start=len(prompt))
        result.decode.per_step_ranks = list(stats.ranks)
        return stats

    def histogram(self, records: List[ExampleRecord], buckets: Optional[int] = None) -> SimilarityHistogram:
        """最大检索相似度的分布，分桶边界固定为 [0, 1] 等分"""
        buckets = buckets or settings.SIMILARITY_BUCKETS
        counts = [0] * buckets
        no_retrieval = 0
        for record in records:
            if record.max_similarity is None:
                no_retrieval += 1
                continue
            counts[min(int(record.max_similarity * buckets), buckets - 1)] += 1
        return SimilarityHistogram(boundaries=[i / buckets for i in range(buckets + 1)],
                                   counts=counts, no_retrieval=no_retrieval)

    def _report(self, records: List[ExampleRecord], dataset: EvalDataset, model: LanguageModel,
                cfg: RunConfig, single: Optional[SingleTokenStats]) -> RunReport:
        failures = sum(1 for record in records if record.failed)
        metrics = metrics_service.summarize(records, dataset=dataset.name, model_id=model.model_id,
                                            single_token=single, seed=derive_seed(cfg.seed or 0, "bootstrap"))
        status = "failed" if failures > settings.FAILURE_RATE_LIMIT * len(records) else "ok"
        if status == "failed":
            logger.error(f"失败样本 {failures}/{len(records)} 超过上限 {settings.FAILURE_RATE_LIMIT:.0%}，运行标记为失败")
        return RunReport(config=cfg.echo(), metrics=metrics, histogram=self.histogram(records),
                         failures=failures, status=status)

    def run(self,
            dataset: EvalDataset,
            model: LanguageModel,
            dbs: Dict[str, RetrievalDatabase],
            cfg: RunConfig,
            spec: TokenizerSpec,
            provider: Optional[EmbeddingProvider] = None) -> RunReport:
        """运行一次评测：逐样本补全并计算指标"""
        engine = CompletionEngine(spec, model, provider)
        examples = self.prepare_examples(dataset, cfg)
        if not examples:
            raise DataError("没有可评测的样本")
        self._check_databases(examples, dbs, cfg, spec)
        retrieval = cfg.retrieval if cfg.retrieval_enabled() else RetrievalKind.NONE

        logger.info(f"开始评测: 数据集={dataset.name}, 模型={model.model_id}, 模式={cfg.mode.value}, "
                    f"检索={retrieval.value}, 复制={cfg.copying_allowed}, 样本={len(examples)}")

        records: List[ExampleRecord] = []
        single = SingleTokenStats() if cfg.single_token else None
        for example in examples:
            result = self._complete(engine, example, dbs, cfg, retrieval)
            record = self._make_record(example, result, result.retrieved)
            if record.failed:
                logger.warning(f"样本 {example.example_id} 补全失败: {record.error}")
            elif single is not None:
                try:
                    single.extend(self._single_token(engine, example, result))
                except Exception as e:
                    logger.warning(f"样本 {example.example_id} 单token评分失败: {e}")
            records.append(record)

        report = self._report(records, dataset, model, cfg, single)
        logger.info(f"评测完成: EM={report.metrics.em.format()}, 失败={report.failures}, 状态={report.status}")
        return report

    def threshold_sweep(self,
                        dataset: EvalDataset,
                        model: LanguageModel,
                        dbs: Dict[str, RetrievalDatabase],
                        cfg: RunConfig,
                        thresholds: Sequence[float],
                        spec: TokenizerSpec,
                        provider: Optional[EmbeddingProvider] = None) -> SweepReport:
        """
        相似度阈值扫描

        每个样本只检索一次；同一 (样本, 片段集合) 只解码一次，空片段集合复用无检索基线
        """
        thresholds = [float(t) for t in thresholds]
        if not thresholds:
            raise DataError("阈值列表不能为空")
        if thresholds != sorted(thresholds) or thresholds[0] < 0:
            raise DataError(f"阈值必须非负且升序: {thresholds}")
        if not cfg.retrieval_enabled():
            raise DataError("阈值扫描需要开启检索")

        engine = CompletionEngine(spec, model, provider)
        examples = self.prepare_examples(dataset, cfg)
        if not examples:
            raise DataError("没有可评测的样本")
        self._check_databases(examples, dbs, cfg, spec)

        baseline_cfg = cfg.model_copy(update={"retrieval": RetrievalKind.NONE, "similarity_threshold": None})
        cache: Dict[Tuple[str, Tuple[Tuple[str, int], ...]], CompletionResult] = {}
        baseline_records = []
        retrieved_by_id: Dict[str, List[RetrievedSnippet]] = {}
        for example in examples:
            result = self._complete(engine, example, dbs, baseline_cfg, RetrievalKind.NONE)
            cache[(example.example_id, ())] = result
            baseline_records.append(self._make_record(example, result, []))

            data = example.context_text.encode("utf-8")
            plan = spec.compute_healing(data) if cfg.healing else None
            input_tokens = spec.encode(plan.trimmed_input if plan else data)
            exclude = None if cfg.copying_allowed else example.file_path
            retrieved_by_id[example.example_id] = engine.retrieve(input_tokens, dbs[example.project_id],
                                                                  cfg.rag, cfg.retrieval, exclude)
        baseline = self._report(baseline_records, dataset, model, baseline_cfg, None)

        rows = []
        decodes = 0
        for threshold in thresholds:
            row_cfg = cfg.model_copy(update={"similarity_threshold": threshold})
            records = []
            for example in examples:
                retrieved = retrieved_by_id[example.example_id]
                used = tuple(snippet.record.sort_key for snippet in retrieved if snippet.jaccard >= threshold)
                key = (example.example_id, used)
                if key not in cache:
                    cache[key] = self._complete(engine, example, dbs, row_cfg, cfg.retrieval, retrieved=retrieved)
                    decodes += 1
                records.append(self._make_record(example, cache[key], retrieved))
            report = self._report(records, dataset, model, row_cfg, None)
            improved, worsened, unchanged = metrics_service.compare_to_baseline(records, baseline_records)
            rows.append(SweepRow(threshold=threshold, report=report, improved=improved,
                                 worsened=worsened, unchanged=unchanged))
            logger.info(f"阈值 {threshold}: EM={report.metrics.em.format()}, 提升={improved}, 下降={worsened}")

        logger.info(f"阈值扫描完成: 阈值={len(thresholds)}, 额外解码={decodes}")
        return SweepReport(thresholds=thresholds, rows=rows, baseline=baseline)

    # ==================== 分析 ====================

    def _bucket_edges(self, buckets: Union[int, Sequence[float]]) -> List[float]:
        if isinstance(buckets, int):
            if buckets < 1:
                raise DataError("分桶数必须为正整数")
            return [i / buckets for i in range(buckets + 1)]
        edges = [float(edge) for edge in buckets]
        if len(edges) < 2 or edges != sorted(edges):
            raise DataError(f"分桶边界必须至少两个且升序: {edges}")
        return edges

    def analyze_reports(self,
                        report: Union[RunReport, Dict[str, Any]],
                        baseline: Union[RunReport, Dict[str, Any]],
                        buckets: Union[int, Sequence[float]] = 10) -> AnalysisReport:
        """
        按最大检索相似度分桶，比较检索报告与无检索基线

        分桶区间左闭右开，最后一个桶右闭；没有检索结果的样本按相似度0计
        """
        records = _records_of(report)
        baseline_by_id = {record.example_id: record for record in _records_of(baseline)}
        if set(baseline_by_id) != {record.example_id for record in records}:
            raise DataError("报告与基线的样本集合不一致")

        edges = self._bucket_edges(buckets)
        rows = [BucketRow(lo=edges[i], hi=edges[i + 1]) for i in range(len(edges) - 1)]
        members: List[List[ExampleRecord]] = [[] for _ in rows]
        for record in records:
            similarity = record.max_similarity or 0.0
            index = int(np.searchsorted(edges, similarity, side="right")) - 1
            members[min(max(index, 0), len(rows) - 1)].append(record)

        improved_total = worsened_total = unchanged_total = 0
        for row, bucket in zip(rows, members):
            row.count = len(bucket)
            if not bucket:
                continue
            references = [baseline_by_id[record.example_id] for record in bucket]
            improved, worsened, unchanged = metrics_service.compare_to_baseline(bucket, references)
            improved_total += improved
            worsened_total += worsened
            unchanged_total += unchanged
            row.mean_similarity = float(np.mean([record.max_similarity or 0.0 for record in bucket]))
            row.em = float(np.mean([record.em for record in bucket]))
            row.baseline_em = float(np.mean([reference.em for reference in references]))
            row.improved = improved / len(bucket)
            row.worsened = worsened / len(bucket)

        filled = [row for row in rows if row.count]
        spearman = None
        if len(filled) >= 2:
            sims = [row.mean_similarity for row in filled]
            ems = [row.em for row in filled]
            if np.ptp(sims) > 0 and np.ptp(ems) > 0:
                spearman = float(spearmanr(sims, ems).correlation)

        projects = []
        for project_id in dict.fromkeys(record.project_id for record in records):
            group = [record for record in records if record.project_id == project_id]
            projects.append(ProjectRow(
                project_id=project_id,
                count=len(group),
                mean_similarity=float(np.mean([record.max_similarity or 0.0 for record in group])),
                em=float(np.mean([record.em for record in group])),
                baseline_em=float(np.mean([baseline_by_id[record.example_id].em for record in group])),
            ))

        return AnalysisReport(buckets=rows, projects=projects, improved=improved_total,
                              worsened=worsened_total, unchanged=unchanged_total, spearman=spearman)


def _records_of(report: Union[RunReport, Dict[str, Any]]) -> List[ExampleRecord]:
    if isinstance(report, RunReport):
        return list(report.per_example)
    if "per_example" not in report:
        raise DataError("报告中缺少 per_example 字段")
    return [ExampleRecord.from_dict(entry) for entry in report["per_example"]]


def load_report(path: Union[str, Path]) -> Dict[str, Any]:
    """读取报告JSON"""
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"报告文件不存在: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"报告解析失败: {path} 第{e.lineno}行第{e.colno}列: {e.msg}") from e


# 创建全局服务实例
eval_harness = EvalHarness()


# 便捷函数
def load_dataset(path: Union[str, Path]) -> EvalDataset:
    """加载数据集"""
    return eval_harness.load_dataset(path)


def randomize_cut(example: EvalExample, seed: int) -> EvalExample:
    """随机切点"""
    return eval_harness.randomize_cut(example, seed)


def run(dataset: EvalDataset, model: LanguageModel, dbs: Dict[str, RetrievalDatabase], cfg: RunConfig,
        spec: TokenizerSpec, provider: Optional[EmbeddingProvider] = None) -> RunReport:
    """运行评测"""
    return eval_harness.run(dataset, model, dbs, cfg, spec, provider)


def threshold_sweep(dataset: EvalDataset, model: LanguageModel, dbs: Dict[str, RetrievalDatabase], cfg: RunConfig,
                    thresholds: Sequence[float], spec: TokenizerSpec,
                    provider: Optional[EmbeddingProvider] = None) -> SweepReport:
    """阈值扫描"""
    return eval_harness.threshold_sweep(dataset, model, dbs, cfg, thresholds, spec, provider)


def analyze_reports(report, baseline, buckets: Union[int, Sequence[float]] = 10) -> AnalysisReport:
    """分桶分析"""
    return eval_harness.analyze_reports(report, baseline, buckets)
