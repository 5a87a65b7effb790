"""Global-to-local search of per-layer dilation rates for temporal CNNs."""

from .errors import (CheckpointError, ConfigError, DatasetError, DegenerateFitnessError,
                     DegenerateWeightsError, DivergenceError, G2LError, PopulationError, ShapeError,
                     StructureParseError)
from .search_space import (DilationStructure, GlobalSearchSpace, build_global_space, decode_structure,
                           encode_structure, random_structure)
from .global_search import (GlobalSearchConfig, HammingLandscape, Population, crossover, mutate,
                            random_search_baseline, run_global_search, selection_probabilities,
                            select_top_m)
from .local_search import (LocalSearchConfig, LocalWindow, MultiDilatedLayerState, build_local_window,
                           expected_dilation, multi_dilated_backward, multi_dilated_forward,
                           pmf_from_weights, run_local_search)
from .metrics import MetricsReport, edit_score, f1_at_iou, framewise_accuracy, report
from .data import FrameSequence, SynthTaskConfig, generate_synthetic, load_dataset, make_folds
from .tcn import (StructureEvaluator, TcnConfig, TrainingConfig, build_model, evaluate_structure,
                  forward, train)

__version__ = "0.1.0"
