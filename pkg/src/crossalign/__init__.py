"""Cross-modal 3D scene embedding alignment and retrieval on numpy."""

from .config import RunConfig
from .datamodel import (Dataset, FrameSet, InstanceRecord, Location, Modality, SceneRecord, availability,
                        load_feature_archive, save_feature_archive)
from .errors import (ConfigError, ContractError, CrossAlignError, DimensionError, FormatError, InputError,
                     MissingModalityError, SchemaError, SetupError, SpecError)
from .metrics import EmbeddingSet, RecallTable, evaluate_embeddings
from .numcore import ParamStore, Tape, backward
from .pipeline import embed, evaluate, train_all
from .synthgen import SynthSpec, generate, split_disjoint_pairs

__version__ = "0.1.0"
