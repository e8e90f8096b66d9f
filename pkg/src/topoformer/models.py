"""TopoFormer and the baseline regressors behind one 180 -> 20 contract."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, DimensionError
from .layers import ConvLSTM1DCell, ConvLSTMStack, Dense, Module, TransformerBlock
from .layout import INPUT_WIDTH, KNOWN_LEN, SEQ_LEN, TARGET_LEN, pack_input, unpack_input

TOKEN_FEATURES = 3


def tokenize_input(x) -> Tensor:
    """Turn [..., 180] inputs into [..., 100, 3] tokens.

    Token t is (chainage_t, elevation_t or 0, known flag); the flag is 1 for
    the 80 surveyed points and 0 for the 20 target slots.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    elevation, chainage = unpack_input(data)
    lead = data.shape[:-1]
    tokens = np.zeros(lead + (SEQ_LEN, TOKEN_FEATURES))
    tokens[..., 0] = chainage
    tokens[..., :KNOWN_LEN, 1] = elevation
    tokens[..., :KNOWN_LEN, 2] = 1.0
    return Tensor(tokens)


def detokenize(tokens) -> np.ndarray:
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    return pack_input(data[..., :KNOWN_LEN, 1], data[..., 0])


class SequenceRegressor(Module):
    """Base for every model: ``forward`` maps [B, 180] to [B, 20]."""

    variant: str = ""

    def forward(self, batch) -> Tensor:
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != INPUT_WIDTH:
            raise DimensionError(f"model input must be [B, {INPUT_WIDTH}], got shape {data.shape}")
        return self.forward_tokens(tokenize_input(data))

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        raise NotImplementedError

    def predict(self, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Gradient-free forward in chunks; returns a [N, 20] array."""
        inputs = np.asarray(inputs, dtype=np.float64)
        outs = []
        with ag.no_grad():
            for start in range(0, len(inputs), batch_size):
                outs.append(self.forward(inputs[start:start + batch_size]).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, TARGET_LEN))


def count_params(model: Module) -> int:
    return model.param_count()


# ---------------------------------------------------------------------------
# TopoFormer


@dataclass(frozen=True)
class TopoFormerConfig:
    d_model: int = 64
    num_heads: int = 4
    num_blocks: int = 6
    convlstm_layers_per_block: int = 4
    convlstm_hidden_channels: int = 16
    kernel_size: int = 3
    mlp_hidden_1: int = 76
    mlp_hidden_2: int = 128
    seq_len: int = SEQ_LEN
    input_features_per_token: int = TOKEN_FEATURES
    output_len: int = TARGET_LEN

    def validate(self) -> None:
        problems = []
        positive = ("d_model", "num_heads", "num_blocks", "convlstm_layers_per_block",
                    "convlstm_hidden_channels", "kernel_size", "mlp_hidden_1", "mlp_hidden_2")
        for name in positive:
            if getattr(self, name) < 1:
                problems.append(f"{name} >= 1 (got {getattr(self, name)})")
        if self.num_heads >= 1 and self.d_model % self.num_heads:
            problems.append(f"d_model divisible by num_heads (got {self.d_model} / {self.num_heads})")
        if self.kernel_size % 2 == 0:
            problems.append(f"kernel_size odd (got {self.kernel_size})")
        if self.seq_len != SEQ_LEN:
            problems.append(f"seq_len == {SEQ_LEN} (got {self.seq_len})")
        if self.input_features_per_token != TOKEN_FEATURES:
            problems.append(f"input_features_per_token == {TOKEN_FEATURES} (got {self.input_features_per_token})")
        if self.output_len != TARGET_LEN:
            problems.append(f"output_len == {TARGET_LEN} (got {self.output_len})")
        if problems:
            raise ConfigurationError("invalid TopoFormer config: " + "; ".join(problems))


class TopoFormer(SequenceRegressor):
    """Token embedding, transformer/ConvLSTM blocks, two-layer MLP and a linear head."""

    variant = "topoformer"

    def __init__(self, config: TopoFormerConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        self.token_embedding = Dense(c.input_features_per_token, c.d_model, rng)
        self.blocks = [
            TransformerBlock(c.d_model, c.num_heads, c.convlstm_layers_per_block,
                             c.convlstm_hidden_channels, c.kernel_size, rng)
            for _ in range(c.num_blocks)
        ]
        self.mlp = [Dense(c.seq_len * c.d_model, c.mlp_hidden_1, rng),
                    Dense(c.mlp_hidden_1, c.mlp_hidden_2, rng)]
        self.head = Dense(c.mlp_hidden_2, c.output_len, rng)

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        h = self.token_embedding(tokens)
        for block in self.blocks:
            h = block(h)
        h = ag.reshape(h, (tokens.shape[0], -1))
        h = self.mlp[1](ag.relu(self.mlp[0](h)))
        return self.head(h)


def build_topoformer(config: TopoFormerConfig | None = None, seed: int = 0) -> TopoFormer:
    return TopoFormer(config or TopoFormerConfig(), np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class LSTMConfig:
    hidden_size: int = 308

    def validate(self) -> None:
        if self.hidden_size < 1:
            raise ConfigurationError(f"hidden_size must be >= 1, got {self.hidden_size}")


@dataclass(frozen=True)
class BiLSTMConfig:
    hidden_size: int = 150

    def validate(self) -> None:
        if self.hidden_size < 1:
            raise ConfigurationError(f"hidden_size must be >= 1, got {self.hidden_size}")


@dataclass(frozen=True)
class ConvLSTMConfig:
    d_model: int = 64
    num_layers: int = 4
    hidden_channels: int = 16
    kernel_size: int = 3
    mlp_hidden: int = 150

    def validate(self) -> None:
        for name in ("d_model", "num_layers", "hidden_channels", "kernel_size", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")


@dataclass(frozen=True)
class CNN1DConfig:
    channels: tuple[int, ...] = (32, 64)
    kernel_size: int = 5
    pool_size: int = 2
    dense_hidden: int = 1832

    def validate(self) -> None:
        if not self.channels or min(self.channels) < 1:
            raise ConfigurationError(f"channels must be non-empty and positive, got {self.channels}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.pool_size < 1 or SEQ_LEN // self.pool_size ** len(self.channels) < 1:
            raise ConfigurationError(f"pool_size {self.pool_size} collapses the sequence")
        if self.dense_hidden < 1:
            raise ConfigurationError(f"dense_hidden must be >= 1, got {self.dense_hidden}")


def _as_recurrent_input(tokens: Tensor) -> Tensor:
    # an LSTM is a ConvLSTM with kernel 1 over a spatial axis of length 1
    batch, steps, features = tokens.shape
    return ag.reshape(tokens, (batch, steps, features, 1))


class LSTMRegressor(SequenceRegressor):
    variant = "lstm"

    def __init__(self, config: LSTMConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.cell = ConvLSTM1DCell(TOKEN_FEATURES, config.hidden_size, 1, rng)
        self.head = Dense(config.hidden_size, TARGET_LEN, rng)

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        hs = self.cell.scan(_as_recurrent_input(tokens))
        last = hs[:, -1, :, 0]
        return self.head(last)


class BiLSTMRegressor(SequenceRegressor):
    variant = "bilstm"

    def __init__(self, config: BiLSTMConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.forward_cell = ConvLSTM1DCell(TOKEN_FEATURES, config.hidden_size, 1, rng)
        self.backward_cell = ConvLSTM1DCell(TOKEN_FEATURES, config.hidden_size, 1, rng)
        self.head = Dense(2 * config.hidden_size, TARGET_LEN, rng)

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        x = _as_recurrent_input(tokens)
        fwd = self.forward_cell.scan(x)[:, -1, :, 0]
        bwd = self.backward_cell.scan(x[:, ::-1])[:, -1, :, 0]
        return self.head(ag.concat([fwd, bwd], axis=-1))


class ConvLSTMRegressor(SequenceRegressor):
    """Token embedding, one ConvLSTM stack as in a TopoFormer block, dense head."""

    variant = "convlstm"

    def __init__(self, config: ConvLSTMConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        self.token_embedding = Dense(TOKEN_FEATURES, c.d_model, rng)
        self.convlstm = ConvLSTMStack.build(c.num_layers, c.hidden_channels, c.kernel_size, rng)
        self.hidden = Dense(SEQ_LEN * c.d_model, c.mlp_hidden, rng)
        self.head = Dense(c.mlp_hidden, TARGET_LEN, rng)

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        h = self.convlstm(self.token_embedding(tokens))
        h = ag.relu(self.hidden(ag.reshape(h, (tokens.shape[0], -1))))
        return self.head(h)


class Conv1DRegressor(SequenceRegressor):
    """Stacked conv1d + relu + max-pool over the token sequence, then a dense head."""

    variant = "cnn1d"

    def __init__(self, config: CNN1DConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        self.kernels, self.biases = [], []
        in_ch = TOKEN_FEATURES
        for out_ch in c.channels:
            fan_in = in_ch * c.kernel_size
            bound = 1.0 / np.sqrt(fan_in)
            self.kernels.append(Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, c.kernel_size)), True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, out_ch), True))
            in_ch = out_ch
        length = SEQ_LEN
        for _ in c.channels:
            length //= c.pool_size
        self.hidden = Dense(in_ch * length, c.dense_hidden, rng)
        self.head = Dense(c.dense_hidden, TARGET_LEN, rng)

    def named_parameters(self, prefix: str = ""):
        for n, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}conv.{n}.kernel", k
            yield f"{prefix}conv.{n}.bias", b
        yield from self.hidden.named_parameters(prefix + "hidden.")
        yield from self.head.named_parameters(prefix + "head.")

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        h = ag.swapaxes(tokens, -1, -2)  # [B, 3, 100]
        for k, b in zip(self.kernels, self.biases):
            h = ag.max_pool1d(ag.relu(ag.conv1d(h, k, b)), self.config.pool_size)
        h = ag.relu(self.hidden(ag.reshape(h, (tokens.shape[0], -1))))
        return self.head(h)


VARIANTS: dict[str, tuple[type, type]] = {
    "topoformer": (TopoFormerConfig, TopoFormer),
    "lstm": (LSTMConfig, LSTMRegressor),
    "bilstm": (BiLSTMConfig, BiLSTMRegressor),
    "convlstm": (ConvLSTMConfig, ConvLSTMRegressor),
    "cnn1d": (CNN1DConfig, Conv1DRegressor),
}
BASELINES = ("lstm", "bilstm", "convlstm", "cnn1d")


def make_config(variant: str, hyperparameters=None):
    """Config object for ``variant`` from a dict of overrides (or a ready config)."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown model variant {variant!r}; expected one of {sorted(VARIANTS)}")
    config_cls = VARIANTS[variant][0]
    if isinstance(hyperparameters, config_cls):
        return hyperparameters
    values = dict(hyperparameters or {})
    known = {f.name for f in dataclasses.fields(config_cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown {variant} hyperparameters: {unknown}")
    if "channels" in values:
        values["channels"] = tuple(values["channels"])
    return config_cls(**values)


def config_to_dict(config) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(config).items()}


def build_model(variant: str, hyperparameters=None, seed: int = 0) -> SequenceRegressor:
    config = make_config(variant, hyperparameters)
    return VARIANTS[variant][1](config, np.random.default_rng(seed))


def build_baseline(variant: str, hyperparameters=None, seed: int = 0) -> SequenceRegressor:
    if variant not in BASELINES:
        raise ConfigurationError(f"unknown baseline variant {variant!r}; expected one of {list(BASELINES)}")
    return build_model(variant, hyperparameters, seed)
