"""Multi-task training, transfer and evaluation of entity-modifier classifiers."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    AnnotatedInstance,
    Corpus,
    Document,
    EntityMention,
    Modifier,
    ModifierSchema,
    merge_corpora,
    parse_standoff,
    split_corpus,
    write_standoff,
)
from .synth import SynthConfig, generate_synthetic  # noqa: F401
from .featurize import (  # noqa: F401
    FeaturizeConfig,
    TokenizerVocab,
    build_vocab,
    encode_corpus,
)
from .encoder import EncoderConfig  # noqa: F401
from .model import MultiTaskModel, init_model, predict  # noqa: F401
from .train import TrainConfig, train, train_multitask, train_single_task, transfer_load  # noqa: F401
from .checkpoint import Checkpoint  # noqa: F401
from .evaluate import EvalOptions, PredictionSet, build_report, chi_square  # noqa: F401
