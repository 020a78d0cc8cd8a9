"""Variational-autoencoder embeddings of sparse somatic-mutation profiles."""

__version__ = "0.1.0"

from .errors import (ConfigError, EmptyVocabularyError, FlatsomaticError, FormatError,
                     ParseError, ShapeError)
from .data import (KFoldPlan, MutationRecord, OccurrenceMatrix, SomaticProfileSet,
                   build_matrix, build_vocabulary, kfold_split, make_key,
                   parse_mutation_file, synth_generate)
from .vae import VaeConfig, VaeModel, embed, train
from .evaluate import (MetricsReport, classify, cluster_compare, cross_validate, kmeans,
                       nmi, pca)
