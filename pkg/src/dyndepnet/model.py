"""End-to-end model: learner composed with classifier, plus parameter bookkeeping."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .classifier import classify, init_classifier_params
from .config import ClassifierConfig, LearnerConfig, RunConfig
from .learner import DynamicGraph, build_dynamic_graph, init_learner_buffers, init_learner_params
from .tensor import BatchNormState, Tensor


@dataclass(frozen=True)
class ModelConfig:
    learner: LearnerConfig
    classifier: ClassifierConfig

    @classmethod
    def resolve(cls, run: RunConfig, n_regions: int, n_timepoints: int) -> "ModelConfig":
        """Fill in data-dependent sizes (V, T', T) and validate."""
        learner = dataclasses.replace(run.learner, n_regions=n_regions, n_timepoints=n_timepoints)
        learner.validate()
        classifier = dataclasses.replace(run.classifier, n_snapshots=learner.n_snapshots)
        classifier.validate()
        return cls(learner, classifier)

    def to_dict(self) -> dict:
        return {"learner": dataclasses.asdict(self.learner), "classifier": dataclasses.asdict(self.classifier)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        learner = dict(data["learner"])
        learner["kernel_sizes"] = tuple(learner["kernel_sizes"])
        return cls(LearnerConfig(**learner), ClassifierConfig(**data["classifier"]))


@dataclass
class ForwardResult:
    probs: Tensor  # (N, C)
    alpha: Tensor  # (N, T)
    graph: DynamicGraph


class DynDepNet:
    """Trainable parameters and normalization buffers for one model."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.params.update(init_learner_params(config.learner, rng))
        self.params.update(init_classifier_params(config.classifier, config.learner.n_regions, rng))
        self.buffers: dict[str, BatchNormState] = init_learner_buffers(config.learner)

    def forward(self, signals: np.ndarray, training: bool) -> ForwardResult:
        graph = build_dynamic_graph(signals, self.params, self.config.learner, self.buffers, training)
        probs, alpha = classify(graph, self.params, self.config.classifier)
        return ForwardResult(probs, alpha, graph)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics as plain arrays, name-addressable."""
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for name, state in self.buffers.items():
            if state.running_mean is not None:
                out[f"buffer/{name}/running_mean"] = state.running_mean
                out[f"buffer/{name}/running_var"] = state.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            key = f"param/{name}"
            if key not in arrays:
                raise ValueError(f"checkpoint lacks parameter {name!r}")
            value = arrays[key]
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: checkpoint {value.shape}, model {p.shape}")
            p.data = np.array(value, dtype=tn.get_dtype())
        for name, state in self.buffers.items():
            key = f"buffer/{name}/running_mean"
            if key in arrays:
                state.running_mean = np.array(arrays[key])
                state.running_var = np.array(arrays[f"buffer/{name}/running_var"])
            else:
                state.running_mean = state.running_var = None
        unknown = {k.split("/", 1)[1] for k in arrays if k.startswith("param/")} - set(self.params)
        if unknown:
            raise ValueError(f"checkpoint has parameters the model lacks: {sorted(unknown)}")
