"""
Closed-form quantities of the linear regression problem.

Every identity here assumes the Gaussian data model y = x^T w* + eta with eta
independent of x and zero mean, Var(eta) = noise_std^2. Under that model

    J(w)     = 1/2 E(y - x^T w)^2
             = 1/2 E[(x^T (w* - w) + eta)^2]
             = 1/2 (w - w*)^T E[xx^T] (w - w*) + 1/2 noise_std^2

because the cross term E[eta x^T (w* - w)] vanishes, and

    grad J(w) = E[xx^T] w - E[xy] = E[xx^T] (w - w*)

since E[xy] = E[xx^T] w* + E[x eta] = E[xx^T] w*.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from loguru import logger

from services.errors import DimensionMismatchError, InvalidProblemError

SYMMETRY_RTOL = 1e-12
MIN_EIGENVALUE = 1e-12
CONTRACTION_ATOL = 1e-10

# Weight vectors are plain float64 arrays of length dim
WeightVector = np.ndarray


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Ground-truth regression problem: the oracle's knowledge of the data law."""

    true_weights: np.ndarray
    feature_cov: np.ndarray
    noise_std: float = 1.0

    def __post_init__(self):
        w_star = np.array(self.true_weights, dtype=np.float64).reshape(-1)
        cov = np.array(self.feature_cov, dtype=np.float64)

        if w_star.size == 0:
            raise InvalidProblemError("true_weights must be non-empty")
        if cov.shape != (w_star.size, w_star.size):
            raise InvalidProblemError(
                f"feature_cov has shape {cov.shape}, expected {(w_star.size, w_star.size)}"
            )
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(w_star)):
            raise InvalidProblemError("problem entries must be finite")

        scale = max(float(np.max(np.abs(cov))), 1.0)
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_RTOL * scale:
            raise InvalidProblemError("feature_cov is not symmetric")
        cov = (cov + cov.T) / 2.0

        eigenvalues = np.linalg.eigvalsh(cov)
        if eigenvalues[0] < MIN_EIGENVALUE:
            raise InvalidProblemError(
                f"feature_cov is not positive definite (smallest eigenvalue {eigenvalues[0]:.3e})"
            )
        if self.noise_std < 0 or not np.isfinite(self.noise_std):
            raise InvalidProblemError(f"noise_std must be a finite nonnegative number, got {self.noise_std}")

        w_star.setflags(write=False)
        cov.setflags(write=False)
        eigenvalues.setflags(write=False)
        object.__setattr__(self, "true_weights", w_star)
        object.__setattr__(self, "feature_cov", cov)
        object.__setattr__(self, "noise_std", float(self.noise_std))
        object.__setattr__(self, "_eigenvalues", eigenvalues)

    @property
    def dim(self) -> int:
        return self.true_weights.size

    @property
    def eigenvalues(self) -> np.ndarray:
        """Ascending eigenvalues of E[xx^T]."""
        return self._eigenvalues

    @cached_property
    def cholesky_factor(self) -> np.ndarray:
        """Lower-triangular L with L L^T = E[xx^T], used for sampling features."""
        factor = np.linalg.cholesky(self.feature_cov)
        factor.setflags(write=False)
        return factor

    @property
    def optimal_objective(self) -> float:
        return 0.5 * self.noise_std ** 2


@dataclass(frozen=True, eq=False)
class DataBatch:
    """N feature/label pairs drawn by one agent at one iteration."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.float64).reshape(-1)
        if features.ndim != 2:
            raise DimensionMismatchError(f"features must be an N x n matrix, got shape {features.shape}")
        if features.shape[0] != labels.size:
            raise DimensionMismatchError(
                f"{features.shape[0]} feature rows but {labels.size} labels"
            )
        if labels.size < 1:
            raise DimensionMismatchError("a batch needs at least one sample")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class SpectralConstants:
    eps: float
    rho: float
    sigma_x: np.ndarray = field(repr=False)
    eps_max: float
    lambda_min: float
    lambda_max: float

    @property
    def contractive(self) -> bool:
        return self.rho < 1.0


def _check_vector(spec: ProblemSpec, v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.dim,):
        raise DimensionMismatchError(f"{name} has shape {v.shape}, expected ({spec.dim},)")
    return v


def objective(spec: ProblemSpec, w: WeightVector) -> float:
    """Expected squared prediction error J(w), closed form (see module docstring)."""
    diff = _check_vector(spec, w, "w") - spec.true_weights
    return float(0.5 * diff @ spec.feature_cov @ diff + spec.optimal_objective)


def objective_many(spec: ProblemSpec, weights: np.ndarray) -> np.ndarray:
    """J evaluated at each row of an (M, n) array."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != spec.dim:
        raise DimensionMismatchError(f"weights has shape {weights.shape}, expected (M, {spec.dim})")
    diff = weights - spec.true_weights
    return 0.5 * np.einsum("mi,ij,mj->m", diff, spec.feature_cov, diff) + spec.optimal_objective


def true_gradient(spec: ProblemSpec, w: WeightVector) -> np.ndarray:
    """grad J(w) = E[xx^T](w - w*)."""
    diff = _check_vector(spec, w, "w") - spec.true_weights
    return spec.feature_cov @ diff


def empirical_objective(batch: DataBatch, w: WeightVector) -> float:
    """Empirical cost 1/2 * 1/N * sum_i (y_i - x_i^T w)^2."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (batch.dim,):
        raise DimensionMismatchError(f"w has shape {w.shape}, batch has dim {batch.dim}")
    residual = batch.labels - batch.features @ w
    return float(0.5 * np.mean(residual ** 2))


def stochastic_gradient(batch: DataBatch, w: WeightVector) -> np.ndarray:
    """
    Stochastic gradient 1/N * sum_i (x_i x_i^T w - x_i y_i) of one batch.

    Computed as X^T (Xw - y) / N, O(N n), no n x n intermediate.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (batch.dim,):
        raise DimensionMismatchError(f"w has shape {w.shape}, batch has dim {batch.dim}")
    residual = batch.features @ w - batch.labels
    return batch.features.T @ residual / batch.size


def stochastic_gradients(features: np.ndarray, labels: np.ndarray, w: WeightVector) -> np.ndarray:
    """Vectorised stochastic_gradient over M stacked batches: (M, N, n), (M, N) -> (M, n)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if features.ndim != 3 or labels.shape != features.shape[:2] or w.shape != (features.shape[2],):
        raise DimensionMismatchError(
            f"incompatible shapes features={features.shape} labels={labels.shape} w={w.shape}"
        )
    residual = features @ w - labels
    return np.einsum("mkn,mk->mn", features, residual) / features.shape[1]


def spectral_constants(spec: ProblemSpec, eps: float) -> SpectralConstants:
    """Contraction factor rho = max_i (1 - eps*lambda_i)^2 and friends for step size eps."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    eigenvalues = spec.eigenvalues
    lambda_min = float(eigenvalues[0])
    lambda_max = float(eigenvalues[-1])
    eps_max = 2.0 / lambda_max
    rho = float(np.max((1.0 - eps * eigenvalues) ** 2))

    if eps >= eps_max:
        logger.warning(
            f"⚠️  eps={eps} >= eps_max={eps_max:.6g}: rho={rho:.6g}, the convergence bound does not apply"
        )

    return SpectralConstants(
        eps=float(eps),
        rho=rho,
        sigma_x=spec.feature_cov / 2.0,
        eps_max=eps_max,
        lambda_min=lambda_min,
        lambda_max=lambda_max,
    )


def contraction_check(spec: ProblemSpec, eps: float) -> bool:
    """
    Check (I - 2 eps Sigma_x)^T Sigma_x (I - 2 eps Sigma_x) <= rho Sigma_x in the
    Loewner order, numerically: every eigenvalue of the gap must be >= -1e-10.
    """
    constants = spectral_constants(spec, eps)
    sigma_x = constants.sigma_x
    step = np.eye(spec.dim) - eps * 2.0 * sigma_x
    gap = constants.rho * sigma_x - step.T @ sigma_x @ step
    gap = (gap + gap.T) / 2.0
    return bool(np.all(np.linalg.eigvalsh(gap) >= -CONTRACTION_ATOL))


def random_diagonal_problem(
    dim: int,
    seed: int,
    diag_low: float = 0.2,
    diag_high: float = 4.0,
    weight_scale: float = 3.0,
    noise_std: float = 1.0,
) -> ProblemSpec:
    """Random w* and a diagonal E[xx^T] with uniform coefficients, reproducible from seed."""
    if not 0 < diag_low <= diag_high:
        raise InvalidProblemError(f"need 0 < diag_low <= diag_high, got [{diag_low}, {diag_high}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, dim]))
    diagonal = rng.uniform(diag_low, diag_high, size=dim)
    true_weights = weight_scale * rng.standard_normal(dim)
    return ProblemSpec(true_weights=true_weights, feature_cov=np.diag(diagonal), noise_std=noise_std)
