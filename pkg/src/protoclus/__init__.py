"""Multi-prototype clustering for compositional zero-shot learning at desk scale."""

from .config import RunConfig
from .datagen import CompositionSpace, Dataset, GenSpec, generate, load, save
from .encoder_model import (ModelParams, OptimState, backward, compose_embeddings, forward,
                            init_params, load_model, optimizer_step, save_model, train)
from .errors import (ConfigError, ConsistencyError, ConvergenceWarning, EvalError, FormatError,
                     LabelError, NonFiniteError, ProtoClusError, SampleCountError, ShapeError,
                     SplitError, ZeroVectorError)
from .evalkit import (MetricsCurve, ScoreTable, bias_sweep, evaluate, feasibility_filter,
                      feasibility_scores, predict, score)
from .losses import LossWeights, hsic, hsic_grad, pcl_loss, pdl_loss, total_loss
from .ot_assign import (AssignmentPlan, AssignmentProblem, build_problem, objective, omega,
                        omega_grad, sinkhorn_project, solve_gcg)
from .proto_bank import PrototypeBank, assign_batch, init_bank, load_bank, save_bank, update_bank

__version__ = "0.1.0"
