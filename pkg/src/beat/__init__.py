"""ECG tokenizer library.

Raw multi-lead records are parsed or synthesized, cleaned and cut into
normalized segments, compressed into discrete dual-codebook tokens by a
query-guided transformer autoencoder, and scored on reconstruction and
prediction quality.
"""

from .errors import BeatError, ConfigError, FormatError, ParseError
from .metrics import EvalReport, eval_model, run_ablation, score
from .model import (
    ActivationCache,
    BeatConfig,
    BeatParams,
    LossBundle,
    backward,
    decode_recon,
    decode_tokens,
    encode,
    forward_losses,
    init_model,
    load_checkpoint,
    predict_future,
    save_checkpoint,
    tokenize,
)
from .preprocess import (
    Segment,
    SegmentPair,
    clean,
    normalize,
    patchify,
    quality_score,
    resample,
    select_window,
    unpatchify,
)
from .quantizer import (
    Codebook,
    DvqResult,
    UsageStats,
    dvq_quantize,
    init_codebooks,
    nearest_code,
    reinit_dead_codes,
    straight_through,
    utilization,
    vq_loss,
)
from .signal_io import (
    EcgRecord,
    RecordHeader,
    parse_wfdb_header,
    read_csv_record,
    read_segment_file,
    read_wfdb_signals,
    write_segment_file,
)
from .synth import SynthConfig, make_dataset, synth_beat_template, synth_record
from .tokens import TokenSequence, parse_tokens, serialize_tokens
from .trainer import OptimizerState, TrainHistory, adamw_step, cosine_lr, train

__version__ = "0.1.0"
