"""Adaptive independence Metropolis-Hastings sampler with history-driven
proposal adaptation, regeneration detection, convergence diagnostics, and a
seeded ensemble experiment harness."""

from .core import (Box, ChainState, FiniteSupport, History, HistoryEntry,
                   RealSpace, StepRecord, TargetDensity, Trace,
                   acceptance_probability, aimh_step, child_seed,
                   detect_regeneration, run_chain)
from .proposals import (DoeblinMixtureKernel, GaussianIndependenceKernel,
                        GaussianWalkKernel, ModeList, NormalMixtureKernel,
                        ProposalKernel, StudentTKernel,
                        SuppressedMixtureKernel, SurrogateKernel,
                        SurrogateModel, TwoModeAdaptiveKernel,
                        UniformIndependenceKernel, UniformWalkKernel,
                        fixed_independence_kernel, mixture_weights,
                        mode_list_update, surrogate_fit)
from .targets import (CauchyTarget, Example1Target, Example4Target,
                      ExternalEvaluator, GaussMixtureTarget,
                      cauchy_quantile_bins, ex1_log_density, ex1_normalize,
                      ex4_f, ex4_log_likelihood, external_evaluate,
                      gauss13_layout, run_stub_simulator)
from .diagnostics import (BinPartition, DiscretePartition, IntervalPartition,
                          ModeShellPartition, acceptance_rate,
                          cauchy_partition, count_crossings, doeblin_estimate,
                          ex1_partition, gauss13_partition, mode_jump_stat,
                          noise_floor, noise_floor_analytic,
                          point_density_ratio, threshold_crossings, tv_binned,
                          tv_binned_from_fractions, tv_bound,
                          tv_bound_ensemble)
from .harness import (ConfigError, ExperimentConfig, KernelSpec, TargetSpec,
                      cli, emit_config, emit_outputs, parse_config,
                      run_ensemble)

__version__ = "0.1.0"
