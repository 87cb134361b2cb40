"""
Pydantic models for run configuration and reported records.
"""

from typing import Any, Optional, List, Dict, Literal, Tuple, Union

from pydantic import BaseModel, Field, ConfigDict, field_validator, model_validator

from .config import QRNNSettings

QuantMethod = Literal["binary", "ternary", "pow2ternary", "expquant", "identity"]
Variant = Literal["stochastic", "deterministic"]
Role = Literal["input", "recurrent", "bias", "output"]
CellKind = Literal["vanilla", "gru", "lstm"]
EvalMode = Literal["full_precision", "deterministic_quantized"]

ROLES: Tuple[str, ...] = ("input", "recurrent", "bias", "output")

_SHORT_VARIANT = {"stochastic": "stoch", "deterministic": "det"}


class QuantizerSpec(BaseModel):
    """Which rounding method to apply to a weight group, and its parameters."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: QuantMethod = Field(description="Rounding method")
    variant: Optional[Variant] = Field(
        default=None,
        description="stochastic or deterministic; pow2ternary is deterministic only",
    )
    m: int = Field(default=1, ge=1, description="Integer bits including sign (pow2ternary)")
    f: int = Field(default=1, ge=0, description="Fractional bits (pow2ternary)")
    e_min: int = Field(default=-8, ge=-128, le=127, description="Smallest exponent (expquant)")
    e_max: int = Field(default=0, ge=-128, le=127, description="Largest exponent (expquant)")
    ternary_clamp: bool = Field(default=True, description="Clip pow2ternary to +-2^-f")
    binary_values: Tuple[float, float] = Field(default=(-1.0, 1.0), description="Binary (low, high) pair")

    @model_validator(mode="before")
    @classmethod
    def _default_variant(cls, data):
        if isinstance(data, dict) and data.get("variant") is None:
            data = dict(data)
            data["variant"] = "deterministic" if data.get("method") in ("pow2ternary", "identity") else "stochastic"
        return data

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.method == "pow2ternary" and self.variant == "stochastic":
            raise ValueError("pow2ternary is deterministic only")
        if self.e_min > self.e_max:
            raise ValueError(f"e_min ({self.e_min}) must not exceed e_max ({self.e_max})")
        low, high = self.binary_values
        if not low < high:
            raise ValueError("binary_values must be an increasing (low, high) pair")
        return self

    @property
    def stochastic(self) -> bool:
        return self.variant == "stochastic"

    @property
    def label(self) -> str:
        """Short name such as 'binary_stoch' used in traces and file names."""
        if self.method in ("pow2ternary", "identity"):
            return self.method
        return f"{self.method}_{_SHORT_VARIANT[self.variant]}"

    def as_deterministic(self) -> "QuantizerSpec":
        """Same method with the deterministic variant, used at evaluation time."""
        return self.model_copy(update={"variant": "deterministic"})


def table_scope(preset: str, spec: Union[QuantizerSpec, Dict[str, Any]]) -> Dict[str, Any]:
    """Build a scope map for one of the ablation rows 'W_x', 'W_x,b', 'W_h', 'all'."""
    presets = {
        "W_x": ("input",),
        "W_x,b": ("input", "bias"),
        "W_h": ("recurrent",),
        "all": ("input", "recurrent", "bias", "output"),
    }
    key = preset.replace(" ", "")
    if key not in presets:
        raise ValueError(f"unknown scope preset '{preset}', expected one of {sorted(presets)}")
    return {role: spec for role in presets[key]}


class CellConfig(BaseModel):
    """Cell kind, sizes, activation and per-role quantization scope."""
    model_config = ConfigDict(extra="forbid")

    kind: CellKind = "vanilla"
    input_size: Optional[int] = Field(default=None, ge=1, description="Inferred from data when omitted")
    hidden_size: int = Field(default=128, ge=1)
    activation: Literal["relu", "tanh"] = Field(default="relu", description="Vanilla cell activation")
    scope: Dict[Role, Optional[QuantizerSpec]] = Field(default_factory=dict)

    @field_validator("scope", mode="before")
    @classmethod
    def _expand_preset(cls, value):
        # scope: {preset: "W_x,b", quantizer: {...}} expands to one entry per role
        if isinstance(value, dict) and "preset" in value:
            extra = set(value) - {"preset", "quantizer"}
            if extra or "quantizer" not in value:
                raise ValueError("a scope preset takes exactly the keys 'preset' and 'quantizer'")
            return table_scope(value["preset"], value["quantizer"])
        return value

    def quantizer_for(self, role: str) -> Optional[QuantizerSpec]:
        return self.scope.get(role)


class TrainConfig(BaseModel):
    """Optimizer, schedule and evaluation settings."""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=32, ge=1)
    max_epochs: int = Field(default=400, ge=1)
    patience: int = Field(default=100, ge=0)
    master_clip: float = Field(default=1.0, gt=0, description="Masters of binary/ternary groups stay in [-c, c]")
    clip_gradients: bool = Field(default=False, description="Global-norm gradient clipping")
    grad_clip_norm: float = Field(default=5.0, gt=0)
    eval_mode: EvalMode = "full_precision"
    shuffle: bool = True
    log_wallclock: bool = Field(default=False, description="Write elapsed seconds into metrics.csv")

    @model_validator(mode="after")
    def _check_patience(self):
        if self.patience > self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must not exceed max_epochs ({self.max_epochs})")
        return self


class SynthConfig(BaseModel):
    """Synthetic sinusoid-bank classification data."""
    model_config = ConfigDict(extra="forbid")

    n_per_class: int = Field(default=100, ge=1)
    classes: int = Field(default=10, ge=2)
    frames: int = Field(default=40, ge=2)
    dim: int = Field(default=8, ge=1)
    noise: float = Field(default=1.0, ge=0)


class DataConfig(BaseModel):
    """Where the data comes from and how it is split."""
    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = Field(default=None, description="Plain-text corpus or QSEQ dataset")
    split_fractions: Tuple[float, float, float] = (0.9, 0.05, 0.05)
    seq_length: int = Field(default=50, ge=2)
    synthetic: Optional[SynthConfig] = None
    masking: bool = True
    standardize: bool = True

    @field_validator("split_fractions")
    @classmethod
    def _check_fractions(cls, value):
        if any(v < 0 for v in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be non-negative and sum to 1")
        if value[0] <= 0:
            raise ValueError("train fraction must be positive")
        return value


class DiagnosticsConfig(BaseModel):
    """Hidden-state stability sweep settings."""
    model_config = ConfigDict(extra="forbid")

    kind: CellKind = "vanilla"
    hidden_size: int = Field(default=64, ge=1)
    input_size: int = Field(default=64, ge=1)
    activation: Literal["relu", "tanh"] = "relu"
    steps: int = Field(default=50, ge=1)
    quantizers: List[Optional[QuantizerSpec]] = Field(
        default_factory=lambda: [
            None,
            QuantizerSpec(method="binary", variant="stochastic"),
            QuantizerSpec(method="ternary", variant="stochastic"),
            QuantizerSpec(method="expquant", variant="stochastic"),
        ]
    )
    hold_fixed: bool = Field(default=False, description="Sample the recurrent image once per sequence")
    input_scale: float = Field(default=1.0, ge=0, description="Std of the Gaussian input; 0 gives zero input")
    h0_value: float = Field(default=1.0, description="Fill value of the initial state")
    power_iters: int = Field(default_factory=lambda: QRNNSettings().power_iters, ge=100)
    checkpoint: Optional[str] = None


class RunConfig(BaseModel):
    """Everything needed to reproduce a run."""
    model_config = ConfigDict(extra="forbid")

    task: Literal["char_lm", "seq_classify"] = "char_lm"
    cell: CellConfig = Field(default_factory=CellConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    readout_hidden: int = Field(default=0, ge=0, description="Dense ReLU layer before the classifier softmax")
    diagnostics: Optional[DiagnosticsConfig] = None
    output_dir: str = Field(default_factory=lambda: QRNNSettings().output_dir)
    seed: int = 0
    precision: Literal["float32", "float64"] = Field(default_factory=lambda: QRNNSettings().precision)

    @model_validator(mode="after")
    def _check_task(self):
        if self.task == "char_lm" and self.readout_hidden:
            raise ValueError("readout_hidden applies to seq_classify only")
        return self


class Metric(BaseModel):
    """One reported number."""
    kind: Literal["bpc", "accuracy", "cross_entropy"]
    value: float
    split: str
    epoch: int
    mode: Optional[EvalMode] = None

    @model_validator(mode="after")
    def _check_range(self):
        if self.kind in ("bpc", "cross_entropy") and self.value < 0:
            raise ValueError(f"{self.kind} must be non-negative")
        if self.kind == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        return self
