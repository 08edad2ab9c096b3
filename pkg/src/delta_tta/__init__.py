"""Degradation-free fully test-time adaptation on a small dense network.

Test-time batch renormalization (TBR) fixes the normalization statistics,
dynamic online re-weighting (DOT) counters class-biased entropy
minimization; together they form DELTA.
"""
from .adapt import (AdaptState, DotVariant, MethodSpec, Strategy, adapt_step, dot_weights,
                    la_adjust, method_from_name, normalize_weights, sample_drop_filter, update_z)
from .errors import ConfigError, ContractError, DeltaError, InputError, NumericError, StateError
from .harness import (EpisodeReport, SweepConfig, TaskConfig, build_task, compare, emit_report,
                      fast_slow_schedule, make_synthetic_task, metrics, run_episode)
from .losses import LossKind, LossSpec, entropy_loss, entw_loss, pl_loss, softmax
from .netcore import (ModelSpec, ModelState, OptimizerConfig, backward_affine, finite_diff_check,
                      forward, init_model, optimizer_step, train_source)
from .normalize import (InitStrategy, NormLayerState, NormMode, batch_stats, ema_update, init_stats,
                        normalize_backward, normalize_forward)
from .streams import (LabeledDataset, ScenarioSpec, Stream, make_scenario, order_ds, order_is,
                      resample_ci)

__version__ = "0.1.0"
