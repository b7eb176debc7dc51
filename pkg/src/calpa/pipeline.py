"""Stage functions shared by the CLI and the end-to-end acceptance run."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from calpa.arch import ArchGraph, ShrinkPlan, apply_shrink_plan, build_srnet, build_xunet2, cost_report
from calpa.harness.checkpoint import ModelCheckpoint
from calpa.harness.data import Dataset, to_input
from calpa.harness.train import TrainConfig, TrainResult, train
from calpa.harness.validate import SplitValidator
from calpa.search import SearchConfig, SearchResult, bottom_up_search

log = logging.getLogger(__name__)


def reference_graph(arch: str, input_size: int, width_scale=1) -> ArchGraph:
    if arch == "srnet":
        return build_srnet(input_size, width_scale)
    if arch == "xunet2":
        return build_xunet2(input_size)
    raise ValueError(f"unknown architecture {arch!r}")


def sample_images(dataset: Dataset, m: int, seed: int) -> np.ndarray:
    """``m`` training images, covers and stegos alternating, for ThiNet sampling."""
    idx = dataset.splits["train"]
    pick = np.random.default_rng([seed, 3]).permutation(len(idx))[:(m + 1) // 2]
    pairs = idx[np.sort(pick)]
    images = np.empty((2 * len(pairs),) + dataset.covers.shape[1:], dtype=np.uint8)
    images[0::2] = dataset.covers[pairs]
    images[1::2] = dataset.stegos[pairs]
    return to_input(images[:m])


def validator_for(dataset: Dataset, config: SearchConfig, seed: int = 0) -> SplitValidator:
    images, labels = dataset.labeled("val")
    return SplitValidator(images, labels, subsample=config.val_subsample, seed=seed)


def search(checkpoint: ModelCheckpoint, dataset: Dataset, config: SearchConfig) -> SearchResult:
    net = checkpoint.network()
    validator = validator_for(dataset, config, config.sample_spec.seed)
    images = sample_images(dataset, config.sample_spec.m, config.sample_spec.seed)
    return bottom_up_search(net, validator, config, images)


@dataclass
class PipelineResult:
    reference: TrainResult
    search: SearchResult
    shrunk: ArchGraph
    retrain: TrainResult

    @property
    def param_ratio(self) -> float:
        return cost_report(self.shrunk).total_params / cost_report(self.reference.best.graph).total_params

    @property
    def flop_ratio(self) -> float:
        return cost_report(self.shrunk).total_flops / cost_report(self.reference.best.graph).total_flops


def run_pipeline(graph: ArchGraph, dataset: Dataset, train_config: TrainConfig,
                 search_config: SearchConfig, retrain_config: TrainConfig | None = None) -> PipelineResult:
    """Train the reference, search a plan, shrink and retrain from scratch."""
    reference = train(graph, dataset, train_config)
    log.info("reference best val %.3f at %d", reference.best.val_acc, reference.best.iteration)
    result = search(reference.best, dataset, search_config)
    shrunk = apply_shrink_plan(graph, result.plan)
    retrained = train(shrunk, dataset, retrain_config or train_config)
    log.info("retrained best val %.3f", retrained.best.val_acc)
    return PipelineResult(reference, result, shrunk, retrained)


def plan_is_identity(plan: ShrinkPlan) -> bool:
    return all(r == 1 for r in plan.rates.values())
