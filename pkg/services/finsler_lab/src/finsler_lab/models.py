from enum import Enum
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

Expr = Union[str, float]
Auto = Literal["auto"]


class MetricFamily(str, Enum):
    EUCLIDEAN = "euclidean"
    RIEMANNIAN = "riemannian"
    RANDERS = "randers"


class MeasureKind(str, Enum):
    LEBESGUE = "lebesgue"
    CUSTOM = "custom"
    BUSEMANN_HAUSDORFF = "busemann-hausdorff"


class CheckName(str, Enum):
    LEMMA32 = "lemma32"
    EVOLUTION = "evolution"
    LIYAU = "liyau"
    HARNACK = "harnack"
    APRIORI = "apriori"
    CURVATURE_SCAN = "curvature-scan"


class CheckStatus(str, Enum):
    PASSED = "passed"
    FAILED = "failed"
    INCONCLUSIVE = "inconclusive"
    HYPOTHESES_NOT_MET = "hypotheses-not-met"
    EXPECTED_FAIL = "expected-fail"
    NOT_APPLICABLE = "not-applicable"


class MetricSpec(BaseModel):
    """Parametric Finsler metric.

    Matrix and one-form entries are expression strings in the chart
    coordinates ``x1..xn`` (plain numbers are accepted as well).

    Attributes:
        family: euclidean, riemannian or randers.
        dim: Chart dimension n.
        g: Riemannian matrix field, required for the riemannian family.
        alpha: Riemannian part of a Randers metric, identity when omitted.
        beta: One-form of a Randers metric.
    """

    model_config = ConfigDict(frozen=True)

    family: MetricFamily
    dim: int = Field(ge=1)
    g: Optional[tuple[tuple[Expr, ...], ...]] = None
    alpha: Optional[tuple[tuple[Expr, ...], ...]] = None
    beta: Optional[tuple[Expr, ...]] = None

    @model_validator(mode="after")
    def check_family_fields(self) -> "MetricSpec":
        n = self.dim
        if self.family == MetricFamily.RIEMANNIAN:
            if self.g is None:
                raise ValueError("riemannian metric requires 'g'")
            _check_square(self.g, n, "g")
        if self.family == MetricFamily.RANDERS:
            if self.beta is None or len(self.beta) != n:
                raise ValueError(f"randers metric requires 'beta' of length {n}")
            if self.alpha is not None:
                _check_square(self.alpha, n, "alpha")
        return self

    @classmethod
    def euclidean(cls, dim: int) -> "MetricSpec":
        return cls(family=MetricFamily.EUCLIDEAN, dim=dim)

    @classmethod
    def randers(
        cls,
        beta: tuple[Expr, ...],
        alpha: Optional[tuple[tuple[Expr, ...], ...]] = None,
    ) -> "MetricSpec":
        return cls(family=MetricFamily.RANDERS, dim=len(beta), beta=beta, alpha=alpha)


def _check_square(rows: tuple[tuple[Expr, ...], ...], n: int, name: str) -> None:
    if len(rows) != n or any(len(r) != n for r in rows):
        raise ValueError(f"'{name}' must be a {n}x{n} matrix")


class MeasureSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: MeasureKind = MeasureKind.LEBESGUE
    sigma: Optional[str] = None

    @model_validator(mode="after")
    def check_sigma(self) -> "MeasureSpec":
        if self.kind == MeasureKind.CUSTOM and not self.sigma:
            raise ValueError("custom measure requires a 'sigma' expression")
        return self


class GridSpec(BaseModel):
    lower: list[float]
    upper: list[float]
    points: list[int]
    periodic: bool = False
    boundary_layer: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def check_axes(self) -> "GridSpec":
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise ValueError("grid lower/upper/points must have equal length")
        for lo, hi, m in zip(self.lower, self.upper, self.points):
            if hi <= lo:
                raise ValueError("grid upper bound must exceed lower bound")
            if m < 5:
                raise ValueError("grid needs at least 5 points per axis")
        return self


class SolveConfig(BaseModel):
    dt: float = Field(gt=0)
    final_time: float = Field(gt=0)
    start_time: float = 0.0
    scheme: Literal["explicit", "semi-implicit"] = "semi-implicit"
    theta: float = Field(default=0.5, ge=0.5, le=1.0)
    positivity_floor: float = Field(default=1e-12, gt=0)
    boundary: Literal["dirichlet-positive", "reflecting", "periodic"] = (
        "dirichlet-positive"
    )
    stencil_order: Literal[2, 4] = 2

    @property
    def steps(self) -> int:
        return int(round(self.final_time / self.dt))


class CoefficientBounds(BaseModel):
    """Coefficient bounds measured over the run region."""

    inf_a: float = 0.0
    sup_a: float = 0.0
    sup_abs_a: float = 0.0
    inf_b: float = 0.0
    sup_b: float = 0.0
    sup_abs_b: float = 0.0
    sup_abs_a_t: float = 0.0
    sup_grad_a: float = 0.0
    sup_grad_b: float = 0.0
    inf_lap_b: float = 0.0
    sup_lap_a_plus_a_t: float = 0.0

    @property
    def sup_a_plus(self) -> float:
        return max(self.sup_a, 0.0)


class PDECoefficients(BaseModel):
    a: Expr = "0"
    b: Expr = "0"
    bounds: Optional[CoefficientBounds] = None


class BallSpec(BaseModel):
    center: list[float]
    radius: float = Field(gt=0)


class CutoffProfile(BaseModel):
    """Radial profile of the cutoff; C1/C2 are measured from it when omitted."""

    kind: Literal["quintic"] = "quintic"
    C1: Optional[float] = Field(default=None, gt=0)
    C2: Optional[float] = Field(default=None, gt=0)


class HarnackSpec(BaseModel):
    pairs: int = Field(default=10, ge=1)
    t_ratio: float = Field(default=2.0, ge=1.0)


class AprioriSpec(BaseModel):
    V: Expr = "0"


class EstimateInputs(BaseModel):
    """Estimate constants as written in a scenario; ``"auto"`` marks measured ones."""

    N: float
    K: float = Field(default=0.0, ge=0)
    K2R: Union[float, Auto] = "auto"
    K0: Union[float, Auto] = 0.0
    U_term: float = Field(default=0.0, ge=0)
    A: float
    D: Union[float, Auto] = "auto"
    E: Union[float, Auto] = "auto"
    C1: Union[float, Auto] = "auto"
    C2: Union[float, Auto] = "auto"
    alpha: Union[float, Auto] = "auto"
    B: Union[float, Auto] = "auto"
    C_N_alpha: Optional[float] = None
    C0: Optional[float] = None
    b_form: Literal["proof", "statement"] = "proof"
    bracket_form: Literal["proof", "statement"] = "proof"


class EstimateParams(BaseModel):
    """Fully resolved estimate constants."""

    n: int
    N: float
    K: float
    K2R: float
    K0: float
    A: float
    D: float
    E: float
    C1: float
    C2: float
    R: float
    C_N_alpha: float
    C0: float
    alpha: float
    B: float
    B_statement: float = 0.0
    b_form: Literal["proof", "statement"] = "proof"
    bracket_form: Literal["proof", "statement"] = "proof"
    provenance: dict[str, str] = Field(default_factory=dict)
    placeholders: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_ranges(self) -> "EstimateParams":
        if self.N < self.n:
            raise ValueError(f"N={self.N} must be at least the dimension {self.n}")
        if self.D <= 0:
            raise ValueError("D must be positive")
        if min(self.K, self.K2R, self.K0) < 0:
            raise ValueError("curvature constants must be nonnegative")
        return self


class OutputSpec(BaseModel):
    field_snapshots: int = Field(default=11, ge=2)
    counterexample_rows: int = Field(default=20, ge=1)


class Scenario(BaseModel):
    name: str
    metric: MetricSpec
    measure: MeasureSpec = MeasureSpec()
    grid: GridSpec
    coefficients: PDECoefficients = PDECoefficients()
    initial: Expr = "1"
    solve: SolveConfig
    ball: BallSpec
    estimate: EstimateInputs
    checks: list[CheckName]
    expected_fail: list[CheckName] = Field(default_factory=list)
    cutoff: CutoffProfile = CutoffProfile()
    harnack: HarnackSpec = HarnackSpec()
    apriori: Optional[AprioriSpec] = None
    output: OutputSpec = OutputSpec()
    output_dir: Optional[str] = None
    seed: int = 0

    @model_validator(mode="after")
    def check_dimensions(self) -> "Scenario":
        n = self.metric.dim
        if len(self.grid.points) != n or len(self.ball.center) != n:
            raise ValueError(f"grid and ball must have dimension {n}")
        if CheckName.APRIORI in self.checks and self.apriori is None:
            raise ValueError("the apriori check needs an 'apriori' section")
        return self


class CheckSummary(BaseModel):
    name: CheckName
    status: CheckStatus
    passed: bool
    min_margin: Optional[float] = None
    argmin: Optional[dict[str, float]] = None
    tol: float
    points: int = 0
    exclusions: int = 0
    extras: dict[str, Union[float, int, str, bool, None]] = Field(default_factory=dict)


class RunReport(BaseModel):
    scenario: Scenario
    params: Optional[EstimateParams] = None
    checks: dict[str, CheckSummary] = Field(default_factory=dict)
    flags: list[str] = Field(default_factory=list)
    exit_code: int = 0
    version: str
    timings: dict[str, float] = Field(default_factory=dict, exclude=True)
