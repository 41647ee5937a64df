"""The full acoustic model: aligner, phoneme encoder, duration predictor,
mel decoder, prosody learner/mapping and prosody predictor.

Data flow in training (teacher alignment)::

    phonemes -> aligner blocks -> emission stats --(Viterbi)--> durations
    mel + durations -> prosody learner -> representation -> mapping -> prosody emb
    phoneme emb + prosody emb -> encoder blocks -> hidden
    hidden -> duration blocks -> log durations
    hidden -(length regulator)-> decoder blocks -> mel

At inference the prosody predictor supplies the representation and the
duration predictor supplies the durations.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import tensor as tn
from .alignment import (
    Alignment,
    EmissionStats,
    durations_from_predictor,
    length_regulator,
    viterbi_durations,
)
from .attention import LocalAttentionBlockParams, glorot, init_block, local_attention_block
from .errors import ConfigurationError, StageOrderError
from .features import N_MELS, PhonemeSequence
from .prosody import (
    ProsodyLearnerParams,
    ProsodyMappingParams,
    ProsodyPredictorParams,
    init_prosody_learner,
    init_prosody_mapping,
    init_prosody_predictor,
    mdn_sample,
    prosody_learner,
    prosody_mapping,
    prosody_predictor,
)
from .tensor import Tensor


@dataclass
class ModelConfig:
    # architecture
    n_symbols: int = 10
    n_mels: int = N_MELS
    d_model: int = 64
    heads: int = 2
    kernel: int = 3
    window: int = 4
    d_ff: int = 128
    align_blocks: int = 0
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    duration_blocks: int = 1
    learner_layers: int = 4
    predictor_convs: int = 3
    predictor_blocks: int = 2
    align_var_floor: float = 1e-2
    prosody_dim: int = 3
    mixtures: int = 2
    word_dim: int = 64
    dropout: float = 0.1
    use_word_embeddings: bool = True
    frontend: str = "toy"  # "toy" id transcripts or "english" character lexicon
    # stage 1
    steps: int = 2000
    batch_size: int = 4
    lambda_dur: float = 0.1
    lambda_align: float = 1.0
    align_warmup: float = 0.2
    lr_scale: float = 0.3
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 0.0  # 0 disables global-norm clipping
    # stage 2
    stage2_steps: int = 600
    stage2_batch_size: int = 4
    stage2_lr_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.window < 0:
            raise ConfigurationError(f"window T must be >= 0, got {self.window}")
        if self.kernel % 2 == 0:
            raise ConfigurationError(f"conv kernel size must be odd, got {self.kernel}")
        if self.align_blocks < 0:
            raise ConfigurationError(f"align_blocks must be >= 0, got {self.align_blocks}")
        counts = ("n_symbols", "n_mels", "d_model", "d_ff", "encoder_blocks",
                  "decoder_blocks", "duration_blocks", "learner_layers", "predictor_convs",
                  "predictor_blocks", "prosody_dim", "mixtures", "word_dim", "steps", "batch_size",
                  "stage2_steps", "stage2_batch_size", "warmup_steps")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.align_var_floor > 0.0:
            raise ConfigurationError(f"align_var_floor must be > 0, got {self.align_var_floor}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.frontend not in ("toy", "english"):
            raise ConfigurationError(f"frontend must be 'toy' or 'english', got {self.frontend!r}")
        if not 0.0 <= self.align_warmup < 1.0:
            raise ConfigurationError(f"align_warmup must be in [0, 1), got {self.align_warmup}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """CPU-minutes configuration; identical to the field defaults."""
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Full-scale configuration: width 768, six-block stacks, window 10."""
        values = dict(d_model=768, heads=2, kernel=3, window=10, d_ff=768, align_blocks=6,
                      encoder_blocks=6, decoder_blocks=6, duration_blocks=3, learner_layers=4,
                      predictor_blocks=4, prosody_dim=3, mixtures=4, word_dim=768, dropout=0.1,
                      batch_size=16, warmup_steps=4000, lr_scale=1.0, steps=200000)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in ("desk", "paper"):
            raise ConfigurationError(f"unknown preset {name!r}; use 'desk' or 'paper'")
        return getattr(cls, name)(**overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines with ``#`` comments, typed by ModelConfig fields."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = coerce_config_value(key, value)
    return values


def coerce_config_value(key: str, value: str):
    kind = {f.name: f.type for f in fields(ModelConfig)}.get(key)
    if kind is None:
        raise ConfigurationError(f"unknown config key {key!r}")
    if kind == "str":
        return value
    try:
        if kind == "bool":
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("1", "true", "yes")
        return int(value) if kind == "int" else float(value)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None


@dataclass
class Model:
    config: ModelConfig
    embedding: Tensor                      # phoneme embedding, (n_symbols, d_model)
    align_embedding: Tensor                # aligner's own phoneme embedding
    align_blocks: list[LocalAttentionBlockParams]
    align_mean_w: Tensor
    align_mean_b: Tensor
    align_logvar_w: Tensor
    align_logvar_b: Tensor
    encoder_blocks: list[LocalAttentionBlockParams]
    duration_blocks: list[LocalAttentionBlockParams]
    duration_w: Tensor
    duration_b: Tensor
    decoder_blocks: list[LocalAttentionBlockParams]
    mel_w: Tensor
    mel_b: Tensor
    learner: ProsodyLearnerParams
    mapping: ProsodyMappingParams
    predictor: ProsodyPredictorParams
    stage: int = field(default=0)

    STAGE2_GROUPS = ("predictor",)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for f in fields(self):
            if f.name not in ("config", "stage"):
                _collect(getattr(self, f.name), f.name, out)
        return out

    def stage1_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not k.startswith(self.STAGE2_GROUPS)}

    def stage2_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith(self.STAGE2_GROUPS)}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def _collect(obj, prefix: str, out: dict) -> None:
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in fields(obj):
            _collect(getattr(obj, f.name), f"{prefix}.{f.name}", out)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _collect(item, f"{prefix}.{i}", out)


def init_model(config: ModelConfig, seed: int | None = None) -> Model:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    c = config
    blocks = lambda count: [init_block(rng, c.d_model, c.heads, c.window, c.kernel, c.d_ff, c.dropout)
                            for _ in range(count)]
    dense = lambda fan_in, fan_out: tn.parameter(glorot(rng, (fan_in, fan_out), fan_in, fan_out))
    zeros = lambda *shape: tn.parameter(np.zeros(shape))
    return Model(
        config=c,
        embedding=tn.parameter(rng.normal(0.0, c.d_model ** -0.5, (c.n_symbols, c.d_model))),
        align_embedding=tn.parameter(rng.normal(0.0, c.d_model ** -0.5, (c.n_symbols, c.d_model))),
        align_blocks=blocks(c.align_blocks),
        align_mean_w=dense(c.d_model, c.n_mels), align_mean_b=zeros(c.n_mels),
        align_logvar_w=dense(c.d_model, c.n_mels), align_logvar_b=zeros(c.n_mels),
        encoder_blocks=blocks(c.encoder_blocks),
        duration_blocks=blocks(c.duration_blocks),
        duration_w=dense(c.d_model, 1), duration_b=tn.parameter(np.full(1, np.log(4.0))),
        decoder_blocks=blocks(c.decoder_blocks),
        mel_w=dense(c.d_model, c.n_mels), mel_b=zeros(c.n_mels),
        learner=init_prosody_learner(rng, c.n_mels, c.d_model, c.prosody_dim, c.learner_layers, c.kernel),
        mapping=init_prosody_mapping(rng, c.prosody_dim, c.d_model),
        predictor=init_prosody_predictor(
            rng, c.n_symbols, c.d_model, c.word_dim, c.prosody_dim, c.mixtures, c.predictor_blocks,
            c.heads, c.window, c.kernel, c.d_ff, c.predictor_convs, c.dropout, c.use_word_embeddings),
    )


def _ids(phonemes) -> list[int]:
    return phonemes.ids if isinstance(phonemes, PhonemeSequence) else [int(i) for i in phonemes]


def _stack(h: Tensor, blocks, train: bool, rng) -> Tensor:
    for block in blocks:
        h = local_attention_block(h, block, train, rng)
    return h


def alignment_stats(model: Model, phonemes, train: bool = False, rng=None) -> EmissionStats:
    """Emission Gaussians from phoneme identity and context only (no prosody)."""
    h = _stack(tn.embedding_lookup(model.align_embedding, _ids(phonemes)), model.align_blocks, train, rng)
    return EmissionStats(
        means=tn.linear(h, model.align_mean_w, model.align_mean_b),
        log_vars=tn.maximum(tn.linear(h, model.align_logvar_w, model.align_logvar_b),
                            float(np.log(model.config.align_var_floor))),
    )


def encoder_forward(model: Model, phonemes, prosody_emb: Tensor | None = None, train: bool = False,
                    rng=None, with_alignment: bool = True):
    """(hidden, emission stats or None, log durations) for one phoneme sequence.

    ``prosody_emb=None`` is the zero-prosody path.
    """
    h = tn.embedding_lookup(model.embedding, _ids(phonemes))
    if prosody_emb is not None:
        h = tn.add(h, prosody_emb)
    hidden = _stack(h, model.encoder_blocks, train, rng)
    d = _stack(hidden, model.duration_blocks, train, rng)
    log_d = tn.reshape(tn.linear(d, model.duration_w, model.duration_b), (hidden.shape[0],))
    stats = alignment_stats(model, phonemes, train, rng) if with_alignment else None
    return hidden, stats, log_d


def decoder_forward(model: Model, expanded: Tensor, train: bool = False, rng=None) -> Tensor:
    h = _stack(expanded, model.decoder_blocks, train, rng)
    return tn.linear(h, model.mel_w, model.mel_b)


def teacher_durations(model: Model, phonemes, mel) -> Alignment:
    with tn.no_record():
        stats = alignment_stats(model, phonemes)
    return viterbi_durations(stats, mel)


def reconstruct(model: Model, phonemes, mel, durations=None, prosody: str | np.ndarray = "oracle") -> np.ndarray:
    """Teacher-forced mel prediction with dropout off.

    ``prosody`` is ``"oracle"`` (learner output from the true mel),
    ``"zero"`` (no prosody embedding) or an explicit (m, D) representation.
    """
    mel = np.asarray(getattr(mel, "values", mel), dtype=np.float32)
    with tn.no_record():
        align = teacher_durations(model, phonemes, mel) if durations is None else Alignment(durations)
        if isinstance(prosody, str) and prosody == "zero":
            emb = None
        else:
            rep = prosody_learner(mel, align, model.learner) if isinstance(prosody, str) else prosody
            if isinstance(prosody, str) and prosody != "oracle":
                raise ValueError(f"unknown prosody source {prosody!r}")
            emb = prosody_mapping(rep, model.mapping)
        hidden, _, _ = encoder_forward(model, phonemes, emb, with_alignment=False)
        return decoder_forward(model, length_regulator(hidden, align)).data


def synthesize(model: Model, phonemes: PhonemeSequence, provider=None, seed: int = 0,
               temperature: float = 1.0, mode: str = "argmax", duration_scale: float = 1.0,
               prosody: np.ndarray | None = None) -> tuple[np.ndarray, Alignment, np.ndarray]:
    """Text-to-mel inference; returns (mel, durations, prosody representation).

    The prosody representation comes from the predictor unless an explicit
    ``prosody`` array is supplied (oracle-prosody synthesis).
    """
    if prosody is None and model.stage < 2:
        raise StageOrderError("the prosody predictor is untrained; run stage-2 training before synthesis "
                              "or pass an explicit prosody representation")
    rng = np.random.default_rng(seed)
    with tn.no_record():
        if prosody is None:
            mdn = prosody_predictor(phonemes, provider, model.predictor)
            prosody = mdn_sample(mdn, rng, temperature, mode)
        emb = prosody_mapping(prosody, model.mapping)
        hidden, _, log_d = encoder_forward(model, phonemes, emb, with_alignment=False)
        align = durations_from_predictor(log_d, duration_scale)
        mel = decoder_forward(model, length_regulator(hidden, align)).data
    return mel, align, np.asarray(prosody, dtype=np.float32)


def iter_blocks(model: Model) -> Iterator[LocalAttentionBlockParams]:
    yield from model.align_blocks
    yield from model.encoder_blocks
    yield from model.duration_blocks
    yield from model.decoder_blocks
    yield from model.predictor.blocks
