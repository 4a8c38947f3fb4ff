"""Named constants for nrlangevin."""

# Logging
LOG_FORMAT = "%(asctime)s - %(name)-32s - %(levelname)-8s - %(message)s"
LOG_DATE_FORMAT = "%d-%b-%Y %H:%M:%S"
LOG_FILE_PREFIX = "nrlangevin"

# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

# Relative tolerance for the gradient vs. finite-difference check
GRADIENT_CHECK_RTOL = 1e-5
GRADIENT_CHECK_STEP = 1e-5

# Dimer in solvent (box length and well width are not fixed by the model
# description; these are documented defaults, not reference values)
DIMER_DEFAULT_N_PARTICLES = 8
DIMER_DEFAULT_BOX_LENGTH = 6.0
DIMER_DEFAULT_EPSILON = 1.0
DIMER_DEFAULT_SIGMA = 1.0
DIMER_DEFAULT_BARRIER = 1.0
DIMER_DEFAULT_WELL_WIDTH = 0.5
COINCIDENT_DISTANCE_FLOOR = 1e-12

WARPED_DEFAULT_B = 0.05
PERIODIC_DEFAULT_BETA = 10.0

# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

ANTISYMMETRY_TOL = 1e-14
SYMMETRY_TOL = 1e-12
ORTHOGONALITY_TOL = 1e-12
DIVERGENCE_STEP = 1e-4
DIVERGENCE_TOL = 1e-4
DENSITY_FLOOR = 1e-300

# ---------------------------------------------------------------------------
# Gaussian analytics
# ---------------------------------------------------------------------------

LYAPUNOV_RESIDUAL_TOL = 1e-10
LYAPUNOV_MAX_DIM = 32
NULLSPACE_RTOL = 1e-10
LIMIT_CHECK_ALPHAS = (1e6, 1e8)
LIMIT_CHECK_RTOL = 1e-4
INTEGRAL_TRUNCATION_TOL = 1e-14

# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------

BLOWUP_NORM = 1e12
NOISE_BLOCK_STEPS = 1024

# Gradient evaluations consumed per step, keyed by scheme name
SCHEME_COSTS = {
    "em": 1,
    "mala": 1,
    "mala_nonrev_proposal": 1,
    "strang": 6,
}

# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

NORMAL_QUANTILE_95 = 1.959964
MIN_BATCHES = 20
DEFAULT_BURN_IN_FRACTION = 0.1

# ---------------------------------------------------------------------------
# Reference quadrature
# ---------------------------------------------------------------------------

QUADRATURE_DEFAULT_GRID = 256
QUADRATURE_MAX_GRID = 4096
# Largest share of the total weight one node may carry at an accepted level
QUADRATURE_MAX_NODE_MASS = 0.25
QUADRATURE_DEFAULT_TOL = 1e-8
QUADRATURE_DEFAULT_N_STD = 12.0
QUADRATURE_ROW_CHUNK = 256

# ---------------------------------------------------------------------------
# CLI / experiments
# ---------------------------------------------------------------------------

CONFIG_SCHEMA_VERSION = 1
THREADS_ENV_VAR = "NRL_THREADS"

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_ALL_BLOWUP = 3

CSV_FLOAT_FORMAT = "%.16e"  # 17 significant digits

# Column order is part of the output contract
SWEEP_COLUMNS = (
    "alpha",
    "dt",
    "scheme",
    "method",
    "estimate",
    "asym_var",
    "ci_low",
    "ci_high",
    "reference",
    "bias",
    "mse",
    "relative_mse",
    "acceptance_rate",
    "blowups",
    "gradient_evals",
    "wall_seconds",
)
ANALYTIC_COLUMNS = ("alpha", "sigma2", "limit_inf", "lower_bound")
REFERENCE_COLUMNS = ("target", "observable", "value", "error")

# Default Δt grids for the cost study
DT_GRID_EM = tuple(2.0**-k for k in range(5, -1, -1))  # [2^-5, 1]
DT_GRID_SPLITTING = tuple(10.0**-k for k in range(5, -1, -1))  # [1e-5, 1]

# Scaled-down default for desk-scale runs
DEFAULT_N_CHAINS = 50
