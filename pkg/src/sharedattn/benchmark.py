"""The pinned desk-scale benchmark: fixed data, one training run per seed.

``run_benchmark`` trains a model on the 2,000 pinned training scenes,
then scores the model's final stage, its initial stage and the PP baseline
on the 500 held-out scenes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .attention_net import ModelConfig
from .eval_metrics import APTable, baseline_pp, evaluate, make_records
from .sa_pipeline import SharedAttentionModel, predict
from .scene_synth import GeneratorConfig, Scene, generate_dataset
from .train_loss import LossBreakdown, TrainConfig, build_model, train

BENCHMARK_SEED = 1234
N_TRAIN = 2000
N_TEST = 500
DESK_STEPS = 3000
# CPU training allowance per run, in seconds
TIME_BUDGET = 30 * 60


def pinned_benchmark(config: GeneratorConfig | None = None) -> tuple[list[Scene], list[Scene]]:
    """(train, test) scenes; the test scenes continue the same seeded stream."""
    config = GeneratorConfig() if config is None else config
    train_scenes = generate_dataset(config, N_TRAIN, seed=BENCHMARK_SEED)
    test_scenes = generate_dataset(config, N_TEST, seed=BENCHMARK_SEED, offset=N_TRAIN)
    return train_scenes, test_scenes


@dataclass
class BenchmarkResult:
    seed: int
    refinement: bool
    steps_run: int
    train_seconds: float
    ours: APTable
    initial: APTable
    pp: APTable
    model: SharedAttentionModel = field(repr=False)
    history: list[LossBreakdown] = field(repr=False, default_factory=list)


def run_benchmark(
    seed: int,
    refinement: bool = True,
    steps: int = DESK_STEPS,
    data: tuple[list[Scene], list[Scene]] | None = None,
    model_config: ModelConfig | None = None,
    time_budget: float | None = TIME_BUDGET,
) -> BenchmarkResult:
    train_scenes, test_scenes = pinned_benchmark() if data is None else data
    cfg = ModelConfig(refinement=refinement) if model_config is None else model_config
    model = build_model(cfg, seed)
    start = time.process_time()
    history = train(model, train_scenes, TrainConfig.desk(steps=steps, seed=seed), time_budget=time_budget)
    seconds = time.process_time() - start

    preds, heatmaps = predict(model, test_scenes)
    initial, _ = predict(model, test_scenes, stage="initial")
    pp = [baseline_pp(h, 0.1) for h in heatmaps]
    return BenchmarkResult(
        seed=seed,
        refinement=refinement,
        steps_run=len(history),
        train_seconds=seconds,
        ours=evaluate(make_records(test_scenes, preds)),
        initial=evaluate(make_records(test_scenes, initial)),
        pp=evaluate(make_records(test_scenes, pp)),
        model=model,
        history=history,
    )


def mean_ap(results, which: str, theta_iou: float, theta_dist: float) -> float:
    """Seed-averaged AP of one table (``"ours"``, ``"initial"`` or ``"pp"``)."""
    values = [getattr(r, which)[theta_iou, theta_dist] for r in results]
    return sum(values) / len(values)

