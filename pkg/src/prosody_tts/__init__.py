"""Non-autoregressive text-to-mel synthesis with windowed relative-position
attention and an explicit per-phoneme prosody representation, built on a
small numpy autodiff engine."""

from .alignment import Alignment, EmissionStats, forward_sum_loss, length_regulator, viterbi_durations
from .attention import local_attention, local_attention_block
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, Utterance, read_manifest, read_melb, synthetic_corpus, write_manifest, write_melb
from .features import MelSpectrogram, PhonemeSequence, text_to_phonemes, wav_to_mel
from .model import Model, ModelConfig, init_model, reconstruct, synthesize
from .prosody import MdnParams, StubWordEmbeddings, mdn_nll, mdn_sample
from .tensor import Tape, Tensor
from .training import Checkpoint, extract_prosody_targets, stage1_train, stage2_train

__version__ = "0.1.0"
