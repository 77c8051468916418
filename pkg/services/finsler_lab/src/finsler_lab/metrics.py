from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram

REGISTRY = CollectorRegistry()

STAGE_SECONDS = Histogram(
    "finsler_lab_stage_seconds",
    "Time spent in pipeline stages",
    ["stage"],
    registry=REGISTRY,
)

CHECKS_TOTAL = Counter(
    "finsler_lab_checks_total",
    "Verified inequalities by outcome",
    ["check", "status"],
    registry=REGISTRY,
)

SOLVER_STEPS = Counter(
    "finsler_lab_solver_steps_total",
    "Time steps taken by the log-Schrodinger solver",
    ["scheme"],
    registry=REGISTRY,
)

OPTIMIZER_RETRIES = Counter(
    "finsler_lab_optimizer_retries_total",
    "Path optimisation restarts that failed to converge",
    registry=REGISTRY,
)

ACTIVE_RUNS = Gauge(
    "finsler_lab_active_runs", "Number of scenario runs in progress", registry=REGISTRY
)
