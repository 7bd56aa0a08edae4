"""Trajectory planning and closed-loop simulation for autonomous excavator digging.

Modules: ``model`` (kinematics, dynamics, limits), ``terrain`` (ground and
swept volume), ``global_planner``, ``local_planner`` (feedback-linearized MPC
on ``ddp``), ``estimator``, ``controller``, ``plant`` and ``harness``.
"""
from .config import ConfigError, load_model
from .global_planner import GlobalPlanConfig, PlanningError, plan_global
from .harness import RunReport, load_scenario, run_scenario
from .model import ModelParams, PhysicalLimits

__version__ = "0.1.0"

__all__ = ["ConfigError", "GlobalPlanConfig", "ModelParams", "PhysicalLimits", "PlanningError",
           "RunReport", "load_model", "load_scenario", "plan_global", "run_scenario"]
