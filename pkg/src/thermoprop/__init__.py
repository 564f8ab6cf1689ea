"""Bilinearly coupled Langevin substrate trained with Equilibrium Propagation."""
from .config import ConfigError, RunConfig, config_from_dict, load_config, preset
from .costs import PhysicalParams, advantage_ratio, analog_step_energy, digital_step_energy
from .dsm import DsmBatch, DsmTask, make_batch, sample_batch
from .dynamics import EquilibriumResult, RelaxationConfig, RelaxationError, free_phase, relax
from .eqprop import (GradientEstimate, ReadoutCost, estimate_one_sided, estimate_symmetric,
                     local_coupling_update, optimal_beta_sym)
from .experiments import (ExperimentResult, SweepRecord, fit_loglog, run_e1, run_e2,
                          run_e3_sweep, run_e3_training)
from .oracle import compare, oracle_fd, oracle_implicit
from .substrate import (BaseEnergy, BlockPartition, LowRankCoupling, StiffnessError, SubstrateSpec,
                        build_substrate, energy, grad_theta, grad_x, hessian_free)

__version__ = "0.1.0"
