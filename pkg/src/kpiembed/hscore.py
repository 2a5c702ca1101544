"""The H-score objective over batches of paired features, and its negation.

A feature batch is a pair of (n, b) matrices whose columns are the feature
vectors of b samples: F holds the input-side features, G the target-side
features.  The score is

    H(F, G) = tr(cov(F, G)) - 1/2 tr(M_F M_G)

with the covariance centered by the batch mean (1/b scaling) and M_F, M_G
the *uncentered* second moments F F^T / b and G G^T / b.  A config switch
selects the centered-moment variant for comparison.
"""

from . import ndiff
from .errors import DimensionError, ParameterError
from .ndiff import Tensor


def _validate(f, g):
    if not isinstance(f, Tensor):
        f = Tensor(f)
    if not isinstance(g, Tensor):
        g = Tensor(g)
    if f.data.ndim != 2 or g.data.ndim != 2:
        raise DimensionError(f"h_score: features must be (n, b) matrices, got {f.shape} and {g.shape}")
    if f.shape != g.shape:
        raise DimensionError(f"h_score: mismatched feature shapes {f.shape} and {g.shape}")
    if f.shape[1] < 2:
        raise ParameterError(f"h_score: batch size must be >= 2, got {f.shape[1]}")
    return f, g


def _second_moment(x, centered):
    if centered:
        return ndiff.batch_covariance(x, x)
    b = x.shape[1]
    return ndiff.scale(ndiff.matmul(x, ndiff.transpose(x)), 1.0 / b)


def h_score(f, g, centered_second_moment=False):
    """H-score of a feature batch; differentiable w.r.t. both inputs."""
    f, g = _validate(f, g)
    cov_term = ndiff.trace(ndiff.batch_covariance(f, g))
    mf = _second_moment(f, centered_second_moment)
    mg = _second_moment(g, centered_second_moment)
    moment_term = ndiff.trace(ndiff.matmul(mf, mg))
    return cov_term - ndiff.scale(moment_term, 0.5)


def h_loss(f, g, centered_second_moment=False):
    """Negated H-score, used as the stage-one training loss."""
    return ndiff.scale(h_score(f, g, centered_second_moment), -1.0)
