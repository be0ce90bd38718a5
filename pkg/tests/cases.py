"""Shared model fixtures for the test suite."""

import numpy as np

from wavemom.models import LatentBlock, ModelSpec

# Three-channel benchmark: independent white noise per channel plus a fully
# correlated random walk (9 free parameters).
SIGMA3 = np.diag([0.1010e-3, 0.0712e-3, 0.0490e-3])
LAMBDA3 = np.array(
    [
        [0.0119, -0.0004, 0.0048],
        [-0.0004, 0.0220, 0.0093],
        [0.0048, 0.0093, 0.1628],
    ]
)


def spec3(values=True):
    wn = LatentBlock.wn((1, 2, 3), cov=SIGMA3 if values else None)
    rw = LatentBlock.rw(
        (1, 2, 3), cov=LAMBDA3 if values else None, correlated=True
    )
    return ModelSpec(I=3, blocks=(wn, rw))


def spec3_null(values=True):
    """Same structure but with independent random walks."""
    wn = LatentBlock.wn((1, 2, 3), cov=SIGMA3 if values else None)
    rw = LatentBlock.rw(
        (1, 2, 3), cov=np.diag(np.diag(LAMBDA3)) if values else None
    )
    return ModelSpec(I=3, blocks=(wn, rw))


# Two-channel inertial-sensor-style benchmark: each channel carries a fast
# and a slow autoregression plus a random walk; the fast autoregression is
# shared across channels with negatively correlated innovations.
AR_SHARED_PHI = (0.1300635, 0.07466659)
AR_SHARED_COV = (
    (8.142854e-05, -4.603401e-05),
    (-4.603401e-05, 1.255179e-04),
)


def spec_inertial(values=True):
    if values:
        shared = LatentBlock.ar1(
            (1, 2), phi=AR_SHARED_PHI, cov=AR_SHARED_COV, correlated=True
        )
        slow1 = LatentBlock.ar1((1,), phi=(0.9989909,), cov=((1.612509e-10,),))
        slow2 = LatentBlock.ar1((2,), phi=(0.9999121,), cov=((2.075570e-10,),))
        rw1 = LatentBlock.rw((1,), cov=((1.756252e-11,),))
        rw2 = LatentBlock.rw((2,), cov=((5.015933e-12,),))
    else:
        shared = LatentBlock.ar1((1, 2), correlated=True)
        slow1 = LatentBlock.ar1((1,))
        slow2 = LatentBlock.ar1((2,))
        rw1 = LatentBlock.rw((1,))
        rw2 = LatentBlock.rw((2,))
    return ModelSpec(I=2, blocks=(shared, slow1, slow2, rw1, rw2))


def spec_wnrw2(lam12=0.0, values=True):
    """Two channels of white noise plus a (possibly correlated) random walk."""
    wn = LatentBlock.wn((1, 2), cov=np.diag([0.5, 0.8]) if values else None)
    lam = np.array([[0.02, lam12], [lam12, 0.03]])
    rw = LatentBlock.rw((1, 2), cov=lam if values else None, correlated=True)
    return ModelSpec(I=2, blocks=(wn, rw))
