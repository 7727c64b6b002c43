"""Stronger decoders for fixed compact-code encoders."""

from .core import (
    BinaryProjection,
    CodeArray,
    DecoderLUT,
    NonFiniteError,
    SubspaceCodebook,
    as_matrix,
    mse,
    pack_codes,
)
from .decoders import (
    SingularSystemError,
    ToplineDecoder,
    aq_decode,
    aq_fit,
    binary_naive_decode,
    natural_decode,
    topline_fit,
)
from .encoders import (
    ITQModel,
    KMeansModel,
    PQModel,
    binary_encode,
    itq_train,
    kmeans_train,
    opq_train,
    pq_encode,
    pq_train,
)
from .nn import (
    NNDecoderParams,
    TrainConfig,
    mine_triplets,
    nn_forward,
    reconstruction_loss,
    train_decoder,
    triplet_loss,
)
from .search import (
    SearchResult,
    adc_scan_decoded,
    adc_scan_pq,
    groundtruth,
    recall_at,
    rerank,
    sdc_scan_binary,
)
from .serialize import deserialize_model, serialize_model

__version__ = "0.1.0"
