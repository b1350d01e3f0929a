"""
推理
在清单上批量运行模型，生成预测表或原始输出
"""
from typing import List, Optional, Tuple

import pandas as pd
import torch

from core.logger import logger
from data.dataset import AffectDataset, make_loader
from data.models import DatasetManifest
from metrics.evaluator import evaluate_frames, prediction_columns
from metrics.models import MetricsReport
from model.network import AffectFPN, MultiTaskPrediction


def _model_dtype(model: AffectFPN) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def run_model(
    model: AffectFPN,
    manifest: DatasetManifest,
    batch_size: int = 256,
) -> Tuple[List[str], MultiTaskPrediction, List[str]]:
    """
    在清单全部样本上前向

    Args:
        model: 模型
        manifest: 清单
        batch_size: 批大小

    Returns:
        (ids, prediction, failed_ids)：读取失败的样本不在 ids 中
    """
    was_training = model.training
    model.eval()
    dtype = _model_dtype(model)
    dataset = AffectDataset(manifest, image_size=model.config.input_size, cache_images=False)

    ids: List[str] = []
    failed: List[str] = []
    outputs = {"va": [], "expr_logits": [], "au_logits": []}
    for batch in make_loader(dataset, batch_size=batch_size):
        ok = batch["ok"]
        failed.extend(dataset.record_ids(batch["index"][~ok].tolist()))
        if not bool(ok.any()):
            continue
        keep = torch.nonzero(ok).flatten()
        prediction = model(batch["image"][keep].to(dtype))
        ids.extend(dataset.record_ids(batch["index"][keep].tolist()))
        outputs["va"].append(prediction.va)
        outputs["expr_logits"].append(prediction.expr_logits)
        outputs["au_logits"].append(prediction.au_logits)
    model.train(was_training)

    if failed:
        logger.warning(f"推理时跳过读取失败的样本 | count={len(failed)} ids={failed[:5]}")
    if not ids:
        empty = torch.zeros(0, dtype=dtype)
        prediction = MultiTaskPrediction(
            va=empty.reshape(0, 2),
            expr_logits=empty.reshape(0, model.config.num_expressions),
            au_logits=empty.reshape(0, model.config.num_aus),
        )
    else:
        prediction = MultiTaskPrediction(**{k: torch.cat(v) for k, v in outputs.items()})
    return ids, prediction, failed


def predictions_frame(ids: List[str], prediction: MultiTaskPrediction) -> pd.DataFrame:
    """预测表: id,valence,arousal,expr_class,au_0..au_{K-1}（AU 为 sigmoid 概率）"""
    num_aus = prediction.au_logits.shape[-1]
    va = prediction.va.double().cpu().numpy()
    frame = pd.DataFrame({
        "id": ids,
        "valence": va[:, 0],
        "arousal": va[:, 1],
        "expr_class": prediction.expr_logits.argmax(dim=-1).cpu().numpy(),
    })
    au = prediction.au_probabilities().double().cpu().numpy()
    for j in range(num_aus):
        frame[f"au_{j}"] = au[:, j]
    return frame[prediction_columns(num_aus)]


def predict_manifest(model: AffectFPN, manifest: DatasetManifest, batch_size: int = 256) -> pd.DataFrame:
    """生成清单的预测表"""
    ids, prediction, _ = run_model(model, manifest, batch_size=batch_size)
    return predictions_frame(ids, prediction)


def evaluate_model(
    model: AffectFPN,
    manifest: DatasetManifest,
    batch_size: int = 256,
    au_threshold: float = 0.5,
    skip_unreadable: bool = False,
) -> Optional[MetricsReport]:
    """
    在带真实标签的清单上评估模型

    Args:
        model: 模型
        manifest: 带真实标签的清单
        batch_size: 批大小
        au_threshold: AU 阳性阈值
        skip_unreadable: 为 True 时只在读取成功的样本上评估；否则缺失的预测会引发 AlignmentError

    Returns:
        MetricsReport: 评估报告；skip_unreadable 且没有样本读取成功时返回 None
    """
    ids, prediction, failed = run_model(model, manifest, batch_size=batch_size)
    if failed and skip_unreadable:
        loaded = set(ids)
        manifest = manifest.subset([r for r in manifest.records if r.id in loaded])
        logger.warning(f"评估只使用读取成功的样本 | evaluated={len(manifest)} skipped={len(failed)} ids={failed[:5]}")
        if len(manifest) == 0:
            return None
    return evaluate_frames(predictions_frame(ids, prediction), manifest, au_threshold=au_threshold)
