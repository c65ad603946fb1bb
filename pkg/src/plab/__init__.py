"""plab: plasticity diagnostics and geometry-aware optimization at desk scale."""

from .arrow import (ArrowConfig, ArrowOptimizer, GradientWindow, SgdOptimizer,
                    arrow_step, eigen_rescale_check, scope_filter, warmup_step, woodbury_apply)
from .autodiff import Tape, Tensor
from .cbp import CbpConfig, UnitLedger, cbp_step
from .errors import (ConfigError, ContractError, InvalidInputError, NotPositiveDefiniteError,
                     NumericError, PlabError, ShapeMismatchError, UnknownComponentError)
from .harness import (ExperimentConfig, RunRecord, StreamConfig, TaskStream, compare,
                      config_from_obj, expand_grid, load_config, make_stream, run, run_single)
from .metrics import (PlasticityReport, RankMetrics, UnitActivity, aat, delta_heatmap, erank,
                      fau, rank_of_features, rank_of_weights, srank)
from .model import (ActivationProbe, MiniViT, MiniViTConfig, Mlp, MlpConfig, ParamGroup, build,
                    build_mlp, load_model, matched_mlp_config, probe_activations, reinitialize,
                    save_model)

__version__ = "0.1.0"
