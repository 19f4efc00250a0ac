"""Voice privacy by adversarial information hiding.

A hider strips speaker identity from mel spectrogram frames while an
adversarial finder tries to recover it; a combiner rebuilds speech features
from the scrubbed representation plus any chosen speaker embedding. One
weight, beta, trades reconstruction fidelity against identity leakage.
"""

from .core import (
    EMBEDDING_DIM,
    MEL_BINS,
    ClassDistribution,
    ClassPrior,
    DimensionError,
    HiddenRepresentation,
    MelSpectrogram,
    RangeError,
    SpeakerEmbedding,
    SpeakerLabel,
    TrainConfig,
    TrueClassIndicator,
    load_matrix,
    onehot,
    save_matrix,
    validate,
)
from .losses import (
    EPS,
    finder_kl,
    finder_mse,
    generator_total,
    leakage_kl,
    leakage_mse,
    reconstruction_mse,
)
from .networks import (
    Combiner,
    Finder,
    Hider,
    NetworkConfig,
    build_networks,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    DatasetManifest,
    MelConfig,
    ToyCorpusConfig,
    ToyEmbeddingProvider,
    compute_mel,
    estimate_prior,
    generate_toy_corpus,
    load_manifest,
    mel_filterbank,
)
from .training import (
    DivergenceError,
    MetricsLog,
    lr_at,
    run_training,
    train_step_finder,
    train_step_generator,
)
from .anonymise import (
    TargetPolicy,
    anonymise_corpus,
    anonymise_utterance,
    select_target,
)
from .evaluation import (
    ProbeConfig,
    ScoreSet,
    SweepReport,
    compute_eer,
    cosine_score,
    run_sweep,
    train_probe,
)

__version__ = "0.1.0"
