import json

import pytest

from algebroid import fixture_path, load_spec, load_spec_file, sample_points

FIXTURES = [
    "fx_action_so2", "fx_so3_sphere", "fx_bla", "fx_bla_const",
    "fx_bla_nojacobi", "fx_rho0_n1", "fx_omega_xdy", "fx_tm_flat",
    "fx_foliation_flat", "fx_nonriem_fol", "fx_so2_conformal",
    "fx_killing_nonabelian", "fx_free_heis", "fx_free_abelian",
    "fx_sympl_conf", "fx_taucurv", "fx_flat_exp", "fx_poisson_linear",
]

LIE_FIXTURES = [name for name in FIXTURES
                if json.loads(fixture_path(name).read_text())["mode"] == "lie"]

METRIC_FIXTURES = [name for name in FIXTURES
                   if "metric" in json.loads(fixture_path(name).read_text())]


def fixture_doc(name: str) -> dict:
    return json.loads(fixture_path(name).read_text())


@pytest.fixture
def spec_of():
    return lambda name: load_spec_file(fixture_path(name))


@pytest.fixture
def points_of():
    def _points(spec, count=100, seed=42):
        return sample_points(spec.chart, count, seed)
    return _points


def load_doc(doc: dict):
    return load_spec(doc)
