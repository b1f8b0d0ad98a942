"""Closed-loop use of learned kinodynamics: MPPI, global planning, controllers and trials."""
from .control import (METRIC_FIELDS, BCController, Controller, HistoryBuffer, IKDController, MPPIController,
                      Observation, RandomController, RunMetrics, TrialSpec, closed_loop_eval, desired_poses,
                      held_out_world, run_trial, summarize, trace_metrics)
from .globalplan import PathResult, dijkstra_plan, path_cost, traversability_costmap
from .mppi import (Candidate, CostParams, MPPIResult, mppi_plan, mppi_weights, model_rollout_fn,
                   oracle_rollout_fn, shift_sequence, trajectory_cost)
