"""
评测指标服务
单token指标（PPL、R@k、MRR@k）、多token指标（EM、EditSim、PrefixSim）以及BCa bootstrap置信区间
"""

import math
from os.path import commonprefix
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import Levenshtein
import numpy as np
from loguru import logger
from scipy.stats import norm

from app.core.config import settings
from app.models.evaluation import (ConfidenceInterval, ExampleRecord, MetricsReport, PredictionPair,
                                   SingleTokenStats)

# 浮点误差容忍：归一化后概率为1的token可能得到极小的正对数概率
_LOG_PROB_TOLERANCE = 1e-9


# ==================== 单token指标 ====================

def perplexity(stats: SingleTokenStats) -> float:
    """PPL = exp(-平均对数概率)"""
    if stats.n < 1 or len(stats.log_probs) != stats.n:
        raise ValueError("困惑度至少需要一个位置的对数概率")
    log_probs = np.asarray(stats.log_probs, dtype=np.float64)
    if np.any(log_probs > _LOG_PROB_TOLERANCE):
        raise ValueError("对数概率不能为正数")
    return float(math.exp(-np.minimum(log_probs, 0.0).mean()))


def recall_at_k(stats: SingleTokenStats, k: int) -> float:
    """排名 <= k 的位置比例"""
    if k < 1:
        raise ValueError(f"k必须为正整数，当前为 {k}")
    ranks = np.asarray(stats.ranks)
    return float(np.mean(ranks <= k)) if len(ranks) else 0.0


def mrr_at_k(stats: SingleTokenStats, k: int) -> float:
    """平均倒数排名，排名超过k的位置贡献0"""
    if k < 1:
        raise ValueError(f"k必须为正整数，当前为 {k}")
    ranks = np.asarray(stats.ranks, dtype=np.float64)
    if not len(ranks):
        return 0.0
    return float(np.mean(np.where(ranks <= k, 1.0 / ranks, 0.0)))


def single_token_summary(stats: SingleTokenStats) -> Dict[str, float]:
    """报告中的单token指标"""
    return {
        "ppl": perplexity(stats),
        "r1": recall_at_k(stats, 1),
        "r5": recall_at_k(stats, 5),
        "mrr5": mrr_at_k(stats, 5),
        "n": stats.n,
    }


# ==================== 多token指标 ====================

def exact_match(pair: PredictionPair) -> int:
    return int(pair.predicted == pair.target)


def edit_similarity(pair: PredictionPair) -> float:
    """1 - lev(s, t) / max(|s|, |t|)，两个空串记为1"""
    longest = max(len(pair.predicted), len(pair.target))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(pair.predicted, pair.target) / longest


def common_prefix_length(pair: PredictionPair) -> int:
    """最长公共前缀的字符数"""
    return len(commonprefix([pair.predicted, pair.target]))


def prefix_similarity_aggregate(pairs: Sequence[PredictionPair]) -> float:
    """公共前缀长度之和 / 目标长度之和（按长度加权，不是逐对比例的平均）"""
    total = sum(len(pair.target) for pair in pairs)
    if total == 0:
        raise ValueError("目标总长度为0，无法计算PrefixSim")
    return sum(common_prefix_length(pair) for pair in pairs) / total


def score_pair(pair: PredictionPair) -> Dict[str, float]:
    """单个样本的全部字符串指标"""
    return {
        "em": exact_match(pair),
        "edit_sim": edit_similarity(pair),
        "prefix_len": common_prefix_length(pair),
        "target_len": len(pair.target),
    }


# ==================== BCa置信区间 ====================

def ratio_of_sums(rows: np.ndarray) -> float:
    """二列数据的 Σ第一列 / Σ第二列"""
    denominator = rows[:, 1].sum()
    return float(rows[:, 0].sum() / denominator) if denominator else 0.0


def bca_interval(values,
                 statistic: Optional[Callable[[np.ndarray], float]] = None,
                 resamples: Optional[int] = None,
                 level: Optional[float] = None,
                 seed: Optional[int] = 0) -> ConfidenceInterval:
    """
    BCa bootstrap置信区间

    statistic为None时使用均值（向量化计算）；否则按行重采样后逐次调用statistic
    """
    resamples = resamples or settings.BOOTSTRAP_RESAMPLES
    level = level or settings.CONFIDENCE_LEVEL
    data = np.asarray(values, dtype=np.float64)
    n = len(data)
    if n < 2:
        raise ValueError(f"BCa区间至少需要2个样本，当前为 {n}")

    rng = np.random.default_rng(seed)
    indexes = rng.integers(0, n, size=(resamples, n))

    if statistic is None:
        point = float(data.mean())
        stats = data[indexes].mean(axis=1)
        jackknife = (data.sum() - data) / (n - 1)
    else:
        point = float(statistic(data))
        stats = np.array([statistic(data[index]) for index in indexes])
        jackknife = np.array([statistic(np.delete(data, i, axis=0)) for i in range(n)])

    # 所有重采样统计量相同（如数据全部相等）时区间退化为一点
    if np.ptp(stats) == 0:
        return ConfidenceInterval(point=point, lo=point, hi=point, level=level, resamples=resamples)

    # 偏差校正：重采样统计量低于点估计的比例
    proportion = np.mean(stats < point)
    proportion = min(max(proportion, 1.0 / (2 * resamples)), 1.0 - 1.0 / (2 * resamples))
    z0 = norm.ppf(proportion)

    # 加速因子：jackknife偏度
    deviations = jackknife.mean() - jackknife
    denominator = 6.0 * np.sum(deviations ** 2) ** 1.5
    acceleration = float(np.sum(deviations ** 3) / denominator) if denominator > 0 else 0.0

    alphas = np.array([(1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0])
    zs = z0 + norm.ppf(alphas)
    adjusted = norm.cdf(z0 + zs / (1.0 - acceleration * zs))
    adjusted = np.clip(np.nan_to_num(adjusted, nan=0.5), 0.0, 1.0)
    lo, hi = np.quantile(stats, adjusted)

    return ConfidenceInterval(point=point, lo=float(min(lo, point)), hi=float(max(hi, point)),
                              level=level, resamples=resamples)


def _interval(values, statistic=None, resamples=None, level=None, seed=0) -> ConfidenceInterval:
    data = np.asarray(values, dtype=np.float64)
    if len(data) < 2:
        point = float(statistic(data) if statistic else data.mean())
        return ConfidenceInterval(point=point, lo=point, hi=point,
                                  level=level or settings.CONFIDENCE_LEVEL,
                                  resamples=resamples or settings.BOOTSTRAP_RESAMPLES)
    return bca_interval(data, statistic, resamples, level, seed)


# ==================== 汇总 ====================

class MetricsService:
    """指标汇总服务"""

    def summarize(self,
                  records: List[ExampleRecord],
                  dataset: str = "",
                  model_id: str = "",
                  single_token: Optional[SingleTokenStats] = None,
                  resamples: Optional[int] = None,
                  level: Optional[float] = None,
                  seed: int = 0) -> MetricsReport:
        """计算EM / EditSim / PrefixSim 的点估计和BCa区间"""
        if not records:
            raise ValueError("没有可汇总的样本")

        em = [record.em for record in records]
        edit_sim = [record.edit_sim for record in records]
        prefix_rows = [(record.prefix_len, record.target_len) for record in records]
        if sum(row[1] for row in prefix_rows) == 0:
            raise ValueError("目标总长度为0，无法计算PrefixSim")

        report = MetricsReport(
            dataset=dataset,
            model_id=model_id,
            n=len(records),
            em=_interval(em, resamples=resamples, level=level, seed=seed),
            edit_sim=_interval(edit_sim, resamples=resamples, level=level, seed=seed),
            prefix_sim=_interval(prefix_rows, statistic=ratio_of_sums, resamples=resamples, level=level, seed=seed),
            single_token=single_token_summary(single_token) if single_token and single_token.n else None,
            per_example=list(records),
        )
        logger.info(f"指标汇总: n={report.n}, EM={report.em.format()}, "
                    f"EditSim={report.edit_sim.format()}, PrefixSim={report.prefix_sim.format()}")
        return report

    def compare_to_baseline(self,
                            records: List[ExampleRecord],
                            baseline: List[ExampleRecord]) -> Tuple[int, int, int]:
        """按逐样本PrefixSim与基线比较，返回 (提升, 下降, 不变) 数量"""
        baseline_by_id = {record.example_id: record for record in baseline}
        improved = worsened = unchanged = 0
        for record in records:
            reference = baseline_by_id.get(record.example_id)
            if reference is None:
                raise ValueError(f"基线中缺少样本: {record.example_id}")
            if record.prefix_sim > reference.prefix_sim:
                improved += 1
            elif record.prefix_sim < reference.prefix_sim:
                worsened += 1
            else:
                unchanged += 1
        return improved, worsened, unchanged


# 创建全局服务实例
metrics_service = MetricsService()


# 便捷函数
def summarize(records: List[ExampleRecord], dataset: str = "", model_id: str = "",
              single_token: Optional[SingleTokenStats] = None, seed: int = 0) -> MetricsReport:
    """汇总指标"""
    return metrics_service.summarize(records, dataset, model_id, single_token, seed=seed)


def compare_to_baseline(records: List[ExampleRecord], baseline: List[ExampleRecord]) -> Tuple[int, int, int]:
    """与基线比较"""
    return metrics_service.compare_to_baseline(records, baseline)
