"""Windowing, normalisation, optimisation, training loops and studies."""
from .data import (Batch, NormalizationStats, ShortEpisodeWarning, WindowDataset, fit_normalization,
                   split_episodes, window_dataset)
from .loop import (LOG_FIELDS, REPORT_FIELDS, OfflineReport, TrainConfig, TrainingAborted, TrainResult,
                   curriculum_mode, error_rates, evaluate_offline, predict, train, validation_loss)
from .optim import AdamState, AdamW, adamw_step
from .studies import (ABLATION_FIELDS, PROBE_FIELDS, STUDIES, OrderProbe, ProbeConfig, ablation_runner,
                      grid_cells, run_cell, sequence_order_probe, xy_cumulative_error)
