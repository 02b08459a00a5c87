import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varorder.model import (
    BoundaryExcitation,
    MediumCoefficients,
    PiecewiseOrder,
    PiecewisePolynomial,
    ProblemFileError,
    ProblemSpec,
    ghat,
    load_problem,
    problem_from_dict,
    problem_to_dict,
    save_problem,
    validate,
)


def spec_with(values, breakpoints=None, coeffs=(1.0,), sigma=1.0, rho=1.0, q=0.0):
    breakpoints = breakpoints or list(np.linspace(0, 1, len(values) + 1))
    L = breakpoints[-1]
    medium = MediumCoefficients.constant(L, rho=rho, sigma=sigma, q=q)
    return ProblemSpec(PiecewiseOrder(breakpoints, values), medium, BoundaryExcitation(coeffs))


MINIMAL = {
    "order": {"breakpoints": [0, 1], "values": [0.5]},
    "medium": {"rho": {"const": 1}, "sigma": {"const": 1}},
    "excitation": {"coeffs": [1]},
}


class TestValidate:
    def test_alpha_condition_violation(self):
        report = validate(spec_with([0.4, 0.9]))
        assert not report.ok
        assert any("2*min alpha" in m for m in report.messages())

    def test_admissible_two_piece(self):
        assert validate(spec_with([0.5, 0.7])).ok

    def test_vanishing_leading_coefficient(self):
        report = validate(spec_with([0.5], coeffs=(1.0, 0.0)))
        assert any("g_N = 0" in m for m in report.messages())

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.5])
    def test_alpha_outside_unit_interval(self, alpha):
        assert not validate(spec_with([alpha])).ok

    def test_negative_potential(self):
        assert not validate(spec_with([0.5], q=-1.0)).ok

    def test_nonpositive_diffusivity(self):
        assert not validate(spec_with([0.5], sigma=0.0)).ok

    def test_grid_floor(self):
        spec = spec_with([0.5]).with_grid(8)
        assert any("grid_per_interval" in m for m in validate(spec).messages())

    def test_medium_domain_mismatch(self):
        spec = ProblemSpec(PiecewiseOrder([0, 2], [0.5]), MediumCoefficients.constant(1.0), BoundaryExcitation([1.0]))
        assert not validate(spec).ok

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(allow_nan=True, allow_infinity=True, width=32), min_size=1, max_size=4),
        st.lists(st.floats(allow_nan=True, allow_infinity=True, width=32), min_size=0, max_size=5),
        st.lists(st.floats(allow_nan=True, allow_infinity=True, width=32), min_size=0, max_size=3),
        st.floats(allow_nan=True, allow_infinity=True, width=32),
        st.integers(-5, 40),
    )
    def test_total(self, values, breakpoints, coeffs, sigma, grid):
        # arbitrary numbers never make validation raise
        try:
            order = PiecewiseOrder(breakpoints, values)
            medium = MediumCoefficients(
                PiecewisePolynomial((0.0, 1.0), ((1.0,),)),
                PiecewisePolynomial((0.0, 1.0), ((sigma,),)),
                PiecewisePolynomial((0.0, 1.0), ((0.0,),)),
            )
        except (ValueError, TypeError):
            return
        spec = ProblemSpec(order, medium, BoundaryExcitation(coeffs), grid, 8)
        report = validate(spec)
        assert isinstance(report.ok, bool)


class TestGhat:
    @pytest.mark.parametrize(
        "coeffs, p, expected",
        [((1.0,), 1.0, 2.0), ((1.0,), 2.0, 0.25), ((1.0, 1.0), 1.0, 8.0)],
    )
    def test_values(self, coeffs, p, expected):
        assert ghat(BoundaryExcitation(coeffs), p) == pytest.approx(expected, rel=1e-15)

    @pytest.mark.parametrize("p", [0.0, -1.0])
    def test_rejects_nonpositive(self, p):
        with pytest.raises(ValueError):
            ghat(BoundaryExcitation((1.0,)), p)

    def test_pure_power(self):
        exc = BoundaryExcitation((3.0,))
        for p in (1e-2, 1e-4, 1e-6):
            assert ghat(exc, p) * p**3 == pytest.approx(6.0, rel=1e-14)

    @pytest.mark.parametrize("coeffs", [(0.3, -2.0), (1.0, 0.5, 0.25)])
    def test_leading_term(self, coeffs):
        exc = BoundaryExcitation(coeffs)
        N = exc.degree
        lead = math.factorial(N) * coeffs[-1]
        devs = [abs(ghat(exc, p) * p ** (N + 1) / lead - 1) for p in (1e-2, 1e-4, 1e-6)]
        # deviation shrinks in proportion to p
        assert devs[1] / devs[0] == pytest.approx(1e-2, rel=0.05)
        assert devs[2] / devs[1] == pytest.approx(1e-2, rel=0.05)

    def test_complex_argument(self):
        exc = BoundaryExcitation((1.0,))
        assert ghat(exc, 1j) == pytest.approx(2.0 / (1j) ** 3)
        with pytest.raises(ValueError):
            ghat(exc, np.array([-1.0 + 0j]))


class TestProblemFiles:
    def test_minimal(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(MINIMAL))
        spec = load_problem(path)
        assert spec.n == 0
        assert spec.order.values == (0.5,)

    def test_default_potential(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(MINIMAL))
        spec = load_problem(path)
        assert float(spec.medium.q(0.3)) == 0.0

    def test_breakpoints_out_of_order(self):
        bad = json.loads(json.dumps(MINIMAL))
        bad["order"] = {"breakpoints": [0, 0.6, 0.4, 1], "values": [0.5, 0.5, 0.5]}
        with pytest.raises(ProblemFileError, match="out of order"):
            problem_from_dict(bad)

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(MINIMAL).replace('"values": [0.5]', '"values": [NaN]'))
        with pytest.raises(ProblemFileError):
            load_problem(path)

    def test_parse_error_context(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('{"order": \n  [1, }')
        with pytest.raises(ProblemFileError, match=":2:"):
            load_problem(path)

    def test_violations_embedded(self, tmp_path):
        bad = json.loads(json.dumps(MINIMAL))
        bad["order"] = {"breakpoints": [0, 0.5, 1], "values": [0.4, 0.9]}
        path = tmp_path / "p.json"
        path.write_text(json.dumps(bad))
        with pytest.raises(ProblemFileError) as info:
            load_problem(path)
        assert info.value.violations

    def test_unknown_medium_key(self):
        bad = json.loads(json.dumps(MINIMAL))
        bad["medium"]["kappa"] = {"const": 1}
        with pytest.raises(ProblemFileError, match="unknown keys"):
            problem_from_dict(bad)

    def test_round_trip(self, tmp_path):
        medium = MediumCoefficients(
            PiecewisePolynomial((0.0, 0.5, 1.5), ((1.0,), (2.0,))),
            PiecewisePolynomial((0.0, 1.5), ((1.0, 0.25, -0.1),)),
            PiecewisePolynomial((0.0, 1.5), ((0.5, 0.1),)),
        )
        spec = ProblemSpec(PiecewiseOrder([0, 0.5, 1.5], [0.5, 0.7]), medium, BoundaryExcitation([0.5, 1.0], "right"), 64, 16)
        path = tmp_path / "p.json"
        save_problem(spec, path)
        again = load_problem(path)
        assert problem_to_dict(again) == problem_to_dict(spec)
        save_problem(again, tmp_path / "q.json")
        assert (tmp_path / "q.json").read_text() == path.read_text()


class TestTypes:
    def test_piecewise_polynomial_sides(self):
        f = PiecewisePolynomial((0.0, 1.0, 2.0), ((1.0,), (3.0, 1.0)))
        assert float(f(1.0, side="left")) == 1.0
        assert float(f(1.0, side="right")) == 3.0
        assert float(f(1.5, deriv=1)) == 1.0

    def test_specs_hashable_with_list_input(self):
        f = PiecewisePolynomial([0, 1], [[1.0, 2.0]])
        assert hash(f) == hash(PiecewisePolynomial((0.0, 1.0), ((1.0, 2.0),)))

    def test_reflection(self):
        order = PiecewiseOrder([0, 0.3, 1], [0.5, 0.7])
        assert order.reflected().breakpoints == pytest.approx((0, 0.7, 1))
        assert order.reflected().values == (0.7, 0.5)
        medium = MediumCoefficients(
            PiecewisePolynomial((0.0, 1.0), ((1.0, 2.0),)),
            PiecewisePolynomial((0.0, 1.0), ((1.0, 0.5, 0.25),)),
            PiecewisePolynomial((0.0, 1.0), ((0.0,),)),
        )
        x = np.linspace(0, 1, 7)
        assert np.allclose(medium.reflected(1.0).sigma(x), medium.sigma(1 - x))
        assert np.allclose(medium.reflected(1.0).rho(x), medium.rho(1 - x))
