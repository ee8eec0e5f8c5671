"""Graph-level quantizers with the fit/transform estimator surface.

fit() learns per-layer scale configs and rounding strategies (from weights
alone, or weights plus a calibration set); transform() materializes a new
graph with dequantized weights and quantization records attached. All
hyperparameters are constructor arguments, so get_params/set_params/clone
work the sklearn way.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .efrap import EfrapConfig, materialize_quantized_graph, optimize_graph
from .errors import ContractError
from .io import ModelGraph
from .quantize import make_config, quantize_nearest
from .rounding import flip_fraction_graph, omse_search


class _GraphQuantizerBase(BaseEstimator):
    method = "base"

    def _check_fitted(self):
        if not hasattr(self, "configs_"):
            raise ContractError(f"{type(self).__name__} must be fitted before transform")

    def _meta(self) -> dict:
        return {"method": self.method, "bits": self.bits, "seed": int(getattr(self, "seed", 0))}

    def transform(self, graph: ModelGraph) -> ModelGraph:
        self._check_fitted()
        return materialize_quantized_graph(graph, self.configs_, self.strategies_, self.method, self._meta())

    def fit_transform(self, graph: ModelGraph, calib=None) -> ModelGraph:
        return self.fit(graph, calib).transform(graph)

    def _fit_states(self, graph: ModelGraph, scheme: str, grid_size: int = 256):
        configs, states = {}, {}
        for idx in graph.weighted_indices():
            w = graph.layers[idx].weight
            cfg = make_config(w, self.bits, scheme, grid_size)
            _, state = quantize_nearest(w, cfg)
            configs[idx] = cfg
            states[idx] = state
        return configs, states


class NearestGraphQuantizer(_GraphQuantizerBase):
    """Standard nearest-rounding quantization of every weighted layer."""

    method = "nearest"

    def __init__(self, bits: int = 8, scheme: str = "maxabs", grid_size: int = 256):
        self.bits = bits
        self.scheme = scheme
        self.grid_size = grid_size

    def fit(self, graph: ModelGraph, calib=None):
        self.configs_, states = self._fit_states(graph, self.scheme, self.grid_size)
        self.strategies_ = {i: st.r for i, st in states.items()}
        self.states_ = states
        return self


class OmseGraphQuantizer(_GraphQuantizerBase):
    """Nearest rounding at the per-layer scale minimizing weight MSE."""

    method = "omse"

    def __init__(self, bits: int = 8, grid_size: int = 256):
        self.bits = bits
        self.grid_size = grid_size

    def fit(self, graph: ModelGraph, calib=None):
        configs, strategies = {}, {}
        for idx in graph.weighted_indices():
            w = graph.layers[idx].weight
            cfg = omse_search(w, self.bits, self.grid_size)
            _, state = quantize_nearest(w, cfg)
            configs[idx] = cfg
            strategies[idx] = state.r
        self.configs_, self.strategies_ = configs, strategies
        return self


class FlipGraphQuantizer(_GraphQuantizerBase):
    """Error-ranked strategy flipping on top of nearest rounding."""

    method = "flip"

    def __init__(self, bits: int = 8, fraction: float = 0.1, direction: str = "largest_error",
                 scope: str = "per_layer", scheme: str = "maxabs"):
        self.bits = bits
        self.fraction = fraction
        self.direction = direction
        self.scope = scope
        self.scheme = scheme

    def fit(self, graph: ModelGraph, calib=None):
        self.configs_, states = self._fit_states(graph, self.scheme)
        self.strategies_ = flip_fraction_graph(states, self.fraction, self.direction, self.scope)
        self.states_ = states
        return self


class EfrapGraphQuantizer(_GraphQuantizerBase):
    """Learned rounding: flip high-error weights, preserve layer activations."""

    method = "efrap"

    def __init__(self, bits: int = 8, lambda_f: float = 1.0, lambda_a: float = 1.0,
                 lambda_p: float = 1.0, learning_rate: float = 1e-3, batch_size: int = 32,
                 iterations: int = 10000, eps_ce: float = 1e-7, seed: int = 0,
                 scheme: str = "maxabs", early_stop: bool = False, n_jobs: int | None = None):
        self.bits = bits
        self.lambda_f = lambda_f
        self.lambda_a = lambda_a
        self.lambda_p = lambda_p
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.iterations = iterations
        self.eps_ce = eps_ce
        self.seed = seed
        self.scheme = scheme
        self.early_stop = early_stop
        self.n_jobs = n_jobs

    def _config(self) -> EfrapConfig:
        return EfrapConfig(
            lambda_f=self.lambda_f, lambda_a=self.lambda_a, lambda_p=self.lambda_p,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            iterations=self.iterations, eps_ce=self.eps_ce, seed=self.seed,
            scheme=self.scheme, early_stop=self.early_stop,
        )

    def fit(self, graph: ModelGraph, calib=None):
        if calib is None:
            raise ContractError("EfrapGraphQuantizer.fit needs a calibration set")
        results = optimize_graph(graph, calib, self.bits, self._config(), self.n_jobs)
        self.layer_results_ = results
        self.configs_ = {i: r.config for i, r in results.items()}
        self.strategies_ = {
            i: r.strategy.reshape(graph.layers[i].weight.shape) for i, r in results.items()
        }
        return self


METHODS = {
    "nearest": NearestGraphQuantizer,
    "omse": OmseGraphQuantizer,
    "flip": FlipGraphQuantizer,
    "efrap": EfrapGraphQuantizer,
}
