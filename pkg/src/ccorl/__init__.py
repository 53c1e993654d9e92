"""Constrained combinatorial optimization: JSP and VRAP solved by
dispatching rules, a genetic algorithm, and a policy-gradient agent with
Lagrangian constraint penalties and a self-competing quantile baseline.
"""

from .instances import (JspInstance, VrapInstance, Host, VmType, EnergyModel,
                        VrapGenConfig, gen_jsp, gen_vrap, parse_orlib,
                        write_orlib, parse_vrap, write_vrap, load_instance,
                        InstanceError)
from .jsp_env import (JspState, Schedule, GanttDoc, reset, feasible_mask, step,
                      is_done, objective, idle_excess, to_gantt, to_schedule,
                      schedule_from_sequence, JspBatch, ContractViolation)
from .baselines import (GaConfig, GaResult, dispatch, ga_jsp, ga_vrap,
                        brute_force, brute_force_jsp, brute_force_vrap,
                        DISPATCH_RULES)
from .policy import (JspPolicyNet, JspPolicyConfig, VrapPolicyNet,
                     VrapPolicyConfig, VrapScales, ModelManifest,
                     encode_static, action_distribution, sample_action,
                     greedy_action, log_prob)
from .tensor_nn import Tensor, Tape, ParamStore, backward, xavier_init
from .trainer import (TrainConfig, TrainerState, EpochStats, train_epoch, train,
                      penalized_reward, EpisodeOutcome, self_competing_baseline,
                      moving_average_baseline, AdamState, adam_update,
                      greedy_decode, sample_decode)

__version__ = "0.1.0"
