# models.py

import math
from enum import Enum
from typing import List, Optional, Any, Dict, Literal

from pydantic import BaseModel, Field, field_validator, model_validator

# --- SHARED ENUMS ---

class PosClass(str, Enum):
    NOUN = "NOUN"
    ADJ = "ADJ"
    VERB = "VERB"
    RELWORD = "RELWORD"
    OTHER = "OTHER"

class NegType(str, Enum):
    """Hard-negative type. Declaration order is the column order of every per-type array."""
    REL = "REL"
    ATT = "ATT"
    ACT = "ACT"
    OBJ = "OBJ"

NEG_TYPES: List[NegType] = list(NegType)
NEG_TYPE_INDEX: Dict[NegType, int] = {k: i for i, k in enumerate(NEG_TYPES)}

# Placeholder emitted when a perturbation type does not apply to a caption.
HN_PLACEHOLDER = "<HN_PLACEHOLDER>"


# --- HARD-NEGATIVE AUGMENTATION (gen-hardneg output) ---

class HardNegativeSet(BaseModel):
    rel: str = HN_PLACEHOLDER
    att: str = HN_PLACEHOLDER
    act: str = HN_PLACEHOLDER
    obj: str = HN_PLACEHOLDER

    def get(self, neg_type: NegType) -> str:
        return getattr(self, neg_type.value.lower())

    def as_list(self) -> List[str]:
        return [self.get(k) for k in NEG_TYPES]

class HardNegativeRecord(BaseModel):
    """One line of the augmentation JSONL."""
    id: str
    caption: str
    hn_rel: str = HN_PLACEHOLDER
    hn_att: str = HN_PLACEHOLDER
    hn_act: str = HN_PLACEHOLDER
    hn_obj: str = HN_PLACEHOLDER

    @classmethod
    def from_set(cls, record_id: str, caption: str, hn: HardNegativeSet) -> "HardNegativeRecord":
        return cls(id=record_id, caption=caption, hn_rel=hn.rel, hn_att=hn.att, hn_act=hn.act, hn_obj=hn.obj)


# --- SYNTHETIC WORLD ---

class SceneObject(BaseModel):
    shape: str
    color: str
    size: str

class Scene(BaseModel):
    obj1: SceneObject
    obj2: SceneObject
    relation: str
    action: str

    def key(self) -> str:
        """Ordered scene identity. See scene_identity for the mirror-invariant one."""
        o1, o2 = self.obj1, self.obj2
        return f"{o1.color}-{o1.size}-{o1.shape}|{o2.color}-{o2.size}-{o2.shape}|{self.relation}|{self.action}"

class WorldSpec(BaseModel):
    shapes: List[str] = Field(default_factory=lambda: ["circle", "square", "triangle", "star", "hexagon", "cross"])
    colors: List[str] = Field(default_factory=lambda: ["red", "blue", "green", "yellow", "purple", "orange"])
    sizes: List[str] = Field(default_factory=lambda: ["small", "large"])
    relations: List[str] = Field(default_factory=lambda: ["left_of", "right_of", "above", "below"])
    actions: List[str] = Field(default_factory=lambda: ["touching", "facing", "pushing"])
    eval_fraction: float = 0.2

    @field_validator("shapes", "colors", "sizes", "relations", "actions")
    @classmethod
    def _non_empty(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("world components must be non-empty")
        if len(set(v)) != len(v):
            raise ValueError("world components must be unique")
        return v

    @field_validator("eval_fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("eval_fraction must be in [0, 1)")
        return v

    @property
    def feature_dim(self) -> int:
        per_object = len(self.shapes) + len(self.colors) + len(self.sizes)
        return 2 * per_object + 4 + len(self.actions)

class DatasetRecord(BaseModel):
    """One line of the dataset JSONL. Hard-negative fields are filled by gen-hardneg."""
    id: str
    feature: List[float]
    caption: str
    scene: Optional[Scene] = None
    scene_id: Optional[str] = None
    template: Optional[str] = None
    hn_rel: Optional[str] = None
    hn_att: Optional[str] = None
    hn_act: Optional[str] = None
    hn_obj: Optional[str] = None
    model_config = {"extra": "allow"}

    def hard_negatives(self) -> HardNegativeSet:
        return HardNegativeSet(
            rel=self.hn_rel or HN_PLACEHOLDER,
            att=self.hn_att or HN_PLACEHOLDER,
            act=self.hn_act or HN_PLACEHOLDER,
            obj=self.hn_obj or HN_PLACEHOLDER,
        )

    def has_hard_negatives(self) -> bool:
        return any(v is not None for v in (self.hn_rel, self.hn_att, self.hn_act, self.hn_obj))


# --- BENCHMARK ITEMS ---

class BenchNegative(BaseModel):
    caption: str
    type: NegType

class BenchItem(BaseModel):
    id: str
    feature: List[float]
    positive: str
    negatives: List[BenchNegative]

    @model_validator(mode="after")
    def _check_negatives(self) -> "BenchItem":
        if not self.negatives:
            raise ValueError(f"bench item {self.id} has no negatives")
        for neg in self.negatives:
            if neg.caption == self.positive:
                raise ValueError(f"bench item {self.id} has a negative equal to its positive")
        return self


# --- TRAINING ---

class TrainConfig(BaseModel):
    """Flat training configuration. Every field is a TOML key and a CLI flag."""
    model_config = {"extra": "forbid"}

    alpha: float = 0.2
    beta: float = 0.4
    upper_bound: float = 10.0
    threshold_mode: Literal["adaptive", "fixed"] = "adaptive"
    fixed_threshold: float = 5.0
    hn_pool: Literal["own", "batch"] = "own"
    include_rel_term: bool = True
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: Literal["adam", "sgd_momentum"] = "adam"
    seed: int = 0
    use_hn: bool = True
    use_imc: bool = True
    use_cmr: bool = True
    regen_per_epoch: bool = False
    # supplementary keys
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hn_types: List[NegType] = Field(default_factory=lambda: list(NEG_TYPES))
    token_dim: int = 32
    embed_dim: int = 32
    text_ngrams: int = 2
    min_temperature: float = 0.01
    eval_every: int = 1

    @field_validator("alpha", "beta")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0 or math.isnan(v):
            raise ValueError("loss weights must be >= 0")
        return v

    @field_validator("upper_bound", "lr", "min_temperature")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("epochs")
    @classmethod
    def _epochs(cls, v: int) -> int:
        if v < 0:
            raise ValueError("epochs must be >= 0")
        return v

    @field_validator("token_dim", "embed_dim", "eval_every")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("text_ngrams")
    @classmethod
    def _ngrams(cls, v: int) -> int:
        if v not in (1, 2):
            raise ValueError("text_ngrams must be 1 or 2")
        return v

    @model_validator(mode="after")
    def _cross_field(self) -> "TrainConfig":
        if self.threshold_mode == "fixed" and self.fixed_threshold not in (2.0, 5.0, 10.0):
            raise ValueError("fixed_threshold must be one of 2, 5, 10")
        if self.batch_size < (2 if self.use_hn else 1):
            raise ValueError("batch_size must be >= 2 when use_hn is set")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        return self

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.use_imc else 0.0

    @property
    def effective_beta(self) -> float:
        return self.beta if self.use_cmr else 0.0

class ThresholdState(BaseModel):
    """Per-type adaptive thresholds, ordered as NEG_TYPES."""
    values: List[float] = Field(default_factory=lambda: [0.0] * len(NEG_TYPES))
    step: int = 0

    @classmethod
    def fixed(cls, value: float) -> "ThresholdState":
        return cls(values=[float(value)] * len(NEG_TYPES))

    def as_dict(self) -> Dict[str, float]:
        return {k.value: v for k, v in zip(NEG_TYPES, self.values)}

class MetricsRecord(BaseModel):
    step: int
    epoch: int
    batch_id: str
    itc_hn: float
    imc: float
    cmr: float
    cmr_hinge: float
    cmr_rel: float
    total: float
    temperature: float
    thresholds: Dict[str, float]
    hinge_rate: Dict[str, Optional[float]]
    mean_pos_sim: float
    mean_hn_sim: Dict[str, Optional[float]]
    mean_gap: Dict[str, Optional[float]]
    valid_count: Dict[str, int]


# --- CHECKPOINTS ---

class OptimizerStateFile(BaseModel):
    name: str
    t: int = 0
    slots: Dict[str, Dict[str, List[float]]] = Field(default_factory=dict)

class CheckpointFile(BaseModel):
    format_version: int = 1
    vocab_size: int
    token_dim: int
    embed_dim: int
    feature_dim: int
    text_ngrams: int = 2
    vocabulary: List[str] = Field(default_factory=list)
    tensors: Dict[str, List[float]]
    log_tau: float
    step: int = 0
    thresholds: Optional[ThresholdState] = None
    optimizer: Optional[OptimizerStateFile] = None
    config: Optional[Dict[str, Any]] = None


# --- EVALUATION ---

class SimilarityStat(BaseModel):
    mean: float
    ci_low: float
    ci_high: float
    n: int

class AnalysisBlock(BaseModel):
    """Raw-cosine statistics keyed by NegType value plus "ALL"."""
    intra_modal: Dict[str, SimilarityStat]
    cross_modal_gap: Dict[str, SimilarityStat]
    n_resamples: int
    confidence: float

class EvalReport(BaseModel):
    overall_accuracy: float
    per_type_accuracy: Dict[str, float]
    total_pairs: int
    correct_pairs: int
    per_type_pairs: Dict[str, int]
    per_type_correct: Dict[str, int]
    items: int
    recall: Optional[Dict[str, float]] = None
    analysis: Optional[AnalysisBlock] = None


# --- RUNS ---

class ArtifactInfo(BaseModel):
    path: str
    sha256: str

class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: Optional[int] = None
    input_digests: Dict[str, str] = Field(default_factory=dict)
    artifacts: Dict[str, ArtifactInfo] = Field(default_factory=dict)
    started_at: str
    wall_clock_seconds: float
    tool_version: str

class AblationRunError(BaseModel):
    point: str
    seed: int
    error: str
    detail: Optional[str] = None

class AblationRunSuccess(BaseModel):
    point: str
    seed: int
    overrides: Dict[str, Any]
    report: EvalReport
    final_thresholds: Dict[str, float]

class AblationRunResult(BaseModel):
    success: bool
    result: Optional[AblationRunSuccess] = None
    error_info: Optional[AblationRunError] = None

class AblationRow(BaseModel):
    point: str
    overrides: Dict[str, Any]
    seeds: List[int]
    overall_mean: float
    overall_ci: List[float]
    per_type_mean: Dict[str, float]
    per_seed_overall: List[float]
    diff_vs_baseline_ci: Optional[List[float]] = None
    failures: int = 0

class AblationReport(BaseModel):
    baseline: Optional[str] = None
    rows: List[AblationRow] = Field(default_factory=list)
    errors: List[AblationRunError] = Field(default_factory=list)
