"""Fixture condivise: fantocci piccoli generati una sola volta per sessione."""

import numpy as np
import pytest

from phantom import PhantomSpec, make_phantom


@pytest.fixture(scope='session')
def straight_spec():
    return PhantomSpec(kind='straight', r0=3.0, taper=-0.02, length=30.0, name='straight_small')


@pytest.fixture(scope='session')
def straight_phantom(straight_spec):
    return make_phantom(straight_spec)


@pytest.fixture(scope='session')
def ysplit_spec():
    return PhantomSpec(kind='ysplit', r0=3.0, taper=-0.01, length=40.0, branch_angle_deg=60.0,
                       split_position=0.4, name='ysplit_small')


@pytest.fixture(scope='session')
def ysplit_phantom(ysplit_spec):
    return make_phantom(ysplit_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def edge_calibration():
    # PSF, spacing, parete e HU di default, comuni a tutti i fantocci dei test
    from edge_calibration import calibrate_edges
    return calibrate_edges(PhantomSpec())
