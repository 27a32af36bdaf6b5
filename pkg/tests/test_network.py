"""Network description, nominal Windkessel split and the theta mapping."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haemoinfer.errors import InvalidParameter, ValidationError
from haemoinfer.network import (THETA_BOUNDS, NominalWindkessel, ThetaVector, Vessel, VesselNetwork,
                                apply_theta, boundary_layer_thickness, estimate_nominal_windkessel,
                                load_network, network_to_json, parse_network)

from conftest import DEMO_NETWORK


def _net(period=1.0, mu=0.049, rho=1.055):
    v = (
        Vessel(1, 10.0, 1.0, 1.0, None, (2, 3)),
        Vessel(2, 5.0, 0.6, 0.6, 1),
        Vessel(3, 5.0, 0.4, 0.4, 1),
    )
    return VesselNetwork(v, root=1, rho=rho, mu=mu, period=period)


theta_st = st.builds(
    lambda f, r1, r2, c, xi: ThetaVector(f, r1, r2, c, xi),
    st.floats(*THETA_BOUNDS["f"]),
    st.floats(-3.0, 1.9),
    st.floats(-3.0, 1.9),
    st.floats(-3.0, 1.9),
    st.floats(*THETA_BOUNDS["xi"]),
)


class TestNominal:
    def test_single_terminal(self):
        nom = estimate_nominal_windkessel(10.0, 2.0, [Vessel(1, 1.0, 0.5, 0.5)], total_compliance=0.1)
        assert nom.total_resistance == 5.0
        assert nom.R01[1] == pytest.approx(1.0, rel=1e-15)
        assert nom.R02[1] == pytest.approx(4.0, rel=1e-15)

    def test_two_identical_terminals(self):
        ts = [Vessel(1, 1.0, 0.5, 0.5), Vessel(2, 1.0, 0.5, 0.5)]
        nom = estimate_nominal_windkessel(10.0, 2.0, ts, total_compliance=0.1)
        for j in (1, 2):
            assert nom.R01[j] == pytest.approx(2.0, rel=1e-15)
            assert nom.R02[j] == pytest.approx(8.0, rel=1e-15)
            assert nom.C0[j] == pytest.approx(0.05, rel=1e-15)

    def test_decay_fit_recovers_time_constant(self):
        # p = 8 exp(-t / 0.5), R_T = 5  ->  C_T = tau / R_T = 0.1
        t = np.linspace(0.0, 0.4, 9)
        nom = estimate_nominal_windkessel(10.0, 2.0, [Vessel(1, 1.0, 0.5, 0.5)], t, 8 * np.exp(-t / 0.5))
        assert nom.total_compliance == pytest.approx(0.1, rel=1e-12)

    @pytest.mark.parametrize("p, q", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
    def test_non_positive_inputs(self, p, q):
        with pytest.raises(ValidationError):
            estimate_nominal_windkessel(p, q, [Vessel(1, 1.0, 0.5, 0.5)], total_compliance=0.1)

    def test_non_decreasing_decay_rejected(self):
        with pytest.raises(ValidationError):
            estimate_nominal_windkessel(10.0, 2.0, [Vessel(1, 1.0, 0.5, 0.5)], [0, 1, 2], [3.0, 3.0, 2.0])

    def test_short_decay_rejected(self):
        with pytest.raises(ValidationError):
            estimate_nominal_windkessel(10.0, 2.0, [Vessel(1, 1.0, 0.5, 0.5)], [0, 1], [3.0, 2.0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 3.0), min_size=1, max_size=12), st.floats(1.0, 100.0), st.floats(0.1, 50.0))
    def test_parallel_combination_reproduces_total(self, radii, p, q):
        ts = [Vessel(i, 1.0, r, r) for i, r in enumerate(radii)]
        nom = estimate_nominal_windkessel(p, q, ts, total_compliance=0.2)
        parallel = 1.0 / sum(1.0 / (nom.R01[j] + nom.R02[j]) for j in nom.R01)
        assert parallel == pytest.approx(p / q, rel=1e-9)
        assert sum(nom.C0.values()) == pytest.approx(0.2, rel=1e-12)
        for j in nom.R01:
            assert nom.R01[j] == pytest.approx(0.2 * (nom.R01[j] + nom.R02[j]), rel=1e-12)


class TestApplyTheta:
    nominal = NominalWindkessel({2: 1.0, 3: 2.0}, {2: 4.0, 3: 8.0}, {2: 0.1, 3: 0.05}, 2.0, 0.15)

    def test_identity_at_zero(self):
        net, wk = apply_theta(_net(), self.nominal, ThetaVector(5e4, 0.0, 0.0, 0.0, 0.0))
        assert wk.R1 == self.nominal.R01
        assert wk.R2 == self.nominal.R02
        assert wk.C == self.nominal.C0
        assert all(v.r_bottom == v.r_top for v in net.vessels)
        assert net.stiffness == 5e4

    def test_taper_at_observed_value(self):
        net, _ = apply_theta(_net(), self.nominal, ThetaVector(5e4, 0, 0, 0, 0.26))
        root = net.vessel(1)
        assert root.r_bottom == pytest.approx(0.87 * root.r_top, rel=1e-15)
        # terminals stay straight
        assert net.vessel(2).r_bottom == net.vessel(2).r_top

    def test_scaling_formulas(self):
        _, wk = apply_theta(_net(), self.nominal, ThetaVector(5e4, 0.4, -1.0, 1.5, 0.1))
        assert wk.R1[3] == pytest.approx(0.8 * 2.0)
        assert wk.R2[3] == pytest.approx(1.5 * 8.0)
        assert wk.C[2] == pytest.approx(0.25 * 0.1)

    def test_out_of_bounds(self):
        with pytest.raises(ValidationError):
            apply_theta(_net(), self.nominal, ThetaVector(5e3, 0, 0, 0, 0))
        with pytest.raises(ValidationError):
            apply_theta(_net(), self.nominal, ThetaVector(5e4, 0, 0, 0, 0.6))

    def test_non_positive_compliance(self):
        # c = 2 is in bounds but makes C = 0
        with pytest.raises(InvalidParameter):
            apply_theta(_net(), self.nominal, ThetaVector(5e4, 0, 0, 2.0, 0))

    def test_4d_rejects_nonzero_xi(self):
        with pytest.raises(ValidationError):
            ThetaVector(5e4, 0, 0, 0, 0.1, model_kind="4D")

    @settings(max_examples=50, deadline=None)
    @given(theta_st)
    def test_deterministic_and_idempotent(self, th):
        net1, wk1 = apply_theta(_net(), self.nominal, th)
        net2, wk2 = apply_theta(_net(), self.nominal, th)
        assert net1 == net2 and wk1 == wk2
        # r_bottom is recomputed from r_top, so applying again changes nothing
        net3, wk3 = apply_theta(net1, self.nominal, th)
        assert net3 == net1 and wk3 == wk1

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_taper_monotone(self, a, b):
        if a == b:
            return
        lo, hi = sorted((a, b))
        n_lo, _ = apply_theta(_net(), self.nominal, ThetaVector(5e4, 0, 0, 0, lo))
        n_hi, _ = apply_theta(_net(), self.nominal, ThetaVector(5e4, 0, 0, 0, hi))
        assert n_hi.vessel(1).r_bottom <= n_lo.vessel(1).r_bottom
        if hi - lo > 4 * np.finfo(float).eps:
            # gaps below an ulp of the unit taper factor round to the same radius
            assert n_hi.vessel(1).r_bottom < n_lo.vessel(1).r_bottom

    @settings(max_examples=30, deadline=None)
    @given(theta_st)
    def test_4d_is_5d_at_zero_taper(self, th):
        a = apply_theta(_net(), self.nominal, ThetaVector(th.f, th.r1, th.r2, th.c, 0.0, "5D"))
        b = apply_theta(_net(), self.nominal, ThetaVector(th.f, th.r1, th.r2, th.c, 0.0, "4D"))
        assert a == b


class TestBoundaryLayer:
    def test_paper_constants(self):
        # independent evaluation of sqrt(mu T / (2 pi rho))
        expected = (0.049 * 1.0 / (2 * 3.141592653589793 * 1.055)) ** 0.5
        assert boundary_layer_thickness(_net()) == pytest.approx(expected, rel=1e-14)
        assert boundary_layer_thickness(_net()) == pytest.approx(0.08598, abs=5e-6)

    def test_identity_period_two_pi_rho(self):
        net = _net(period=2 * math.pi * 1.055)
        assert boundary_layer_thickness(net) == pytest.approx(math.sqrt(0.049), rel=1e-14)

    def test_zero_viscosity_limit(self):
        assert boundary_layer_thickness(_net(mu=0.0)) == 0.0


class TestTopology:
    def test_demo_loads(self):
        net = load_network(DEMO_NETWORK)
        assert len(net.vessels) == 7
        assert len(net.terminals) == 4
        assert net.root == 1

    def test_round_trip(self):
        net = load_network(DEMO_NETWORK)
        again = parse_network(network_to_json(net))
        assert again == net

    def test_one_daughter_rejected(self):
        with pytest.raises(ValidationError):
            Vessel(1, 1.0, 1.0, 1.0, None, (2,))

    def test_radius_ordering(self):
        with pytest.raises(ValidationError):
            Vessel(1, 1.0, 1.0, 1.2)

    def test_two_roots_rejected(self):
        v = (Vessel(1, 1.0, 1.0, 1.0), Vessel(2, 1.0, 1.0, 1.0))
        with pytest.raises(ValidationError, match="root"):
            VesselNetwork(v, root=1)

    def _doc(self):
        return json.loads(DEMO_NETWORK.read_text())

    def test_inconsistent_terminal_flag_reports_line(self):
        doc = self._doc()
        doc["vessels"][1]["terminal"] = not doc["vessels"][1]["terminal"]
        text = json.dumps(doc, indent=2)
        with pytest.raises(ValidationError, match=r"<network>:\d+: vessels\[1\]\.terminal"):
            parse_network(text)

    def test_unknown_field(self):
        doc = self._doc()
        doc["vessels"][0]["colour"] = "red"
        with pytest.raises(ValidationError, match="unknown fields"):
            parse_network(json.dumps(doc))

    def test_missing_globals(self):
        doc = self._doc()
        del doc["globals"]["rho"]
        with pytest.raises(ValidationError, match="rho"):
            parse_network(json.dumps(doc))

    def test_bad_json(self):
        with pytest.raises(ValidationError, match="invalid JSON"):
            parse_network("{")

    def test_shared_daughter(self):
        doc = self._doc()
        first = doc["vessels"][0]["daughters"]
        # point a second vessel at the root's first daughter
        for item in doc["vessels"][1:]:
            if item["daughters"]:
                item["daughters"][0] = first[0]
                break
        with pytest.raises(ValidationError):
            parse_network(json.dumps(doc))
