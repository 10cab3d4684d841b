import json
from dataclasses import replace

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vibroimpact.modal import solve_modes
from vibroimpact.model import (
    ElasticLayer,
    ModelError,
    TwinBeamSpec,
    apply_point_masses,
    attach_elastic_layers,
    build_twin_beam_model,
    load_fe_matrices,
    save_fe_matrices,
)

from conftest import single_dof_model


def _write_pair(tmp_path, M, K, meta):
    scipy.io.mmwrite(str(tmp_path / "M.mtx"), sp.coo_matrix(M), precision=17)
    scipy.io.mmwrite(str(tmp_path / "K.mtx"), sp.coo_matrix(K), precision=17)
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    return tmp_path / "M.mtx", tmp_path / "K.mtx", tmp_path / "meta.json"


def _meta(n):
    return {"format": "vibroimpact-fe", "version": 1, "n_dofs": n,
            "nodes": {str(i): {"z": i} for i in range(n)}, "constrained_dofs": [],
            "b_dofs": list(range(n)), "contact_pairs": []}


class TestLoad:
    def test_smallest_system(self, tmp_path):
        paths = _write_pair(tmp_path, np.eye(2), np.array([[2.0, -1.0], [-1.0, 2.0]]), _meta(2))
        model = load_fe_matrices(*paths)
        assert model.n_dofs == 2
        assert model.load_report["asymmetry_K"] == 0.0

    def test_rejects_asymmetry(self, tmp_path):
        K = np.array([[2.0, -1.0], [-1.001, 2.0]])
        paths = _write_pair(tmp_path, np.eye(2), K, _meta(2))
        with pytest.raises(ModelError, match="asymmetr"):
            load_fe_matrices(*paths)

    def test_small_asymmetry_is_symmetrized_and_reported(self, tmp_path):
        K = np.array([[2.0, -1.0], [-1.0 - 1e-12, 2.0]])
        model = load_fe_matrices(*_write_pair(tmp_path, np.eye(2), K, _meta(2)))
        assert abs(model.K - model.K.T).max() == 0.0
        assert 0 < model.load_report["asymmetry_K"] < 1e-8

    def test_dimension_mismatch(self, tmp_path):
        paths = _write_pair(tmp_path, np.eye(2), np.eye(3), _meta(2))
        with pytest.raises(ModelError, match="mismatch"):
            load_fe_matrices(*paths)

    def test_pair_on_constrained_dof(self, tmp_path):
        meta = _meta(2)
        meta["constrained_dofs"] = [0]
        meta["b_dofs"] = [1]
        meta["contact_pairs"] = [{"node_a": 0, "node_b": 1, "labels": ["z"], "frame": [[1.0]]}]
        with pytest.raises(ModelError, match="constrained"):
            load_fe_matrices(*_write_pair(tmp_path, np.eye(2), 2 * np.eye(2), meta))

    def test_twin_beam_round_trip_is_bit_identical(self, tmp_path, twin_model):
        paths = save_fe_matrices(twin_model, tmp_path / "a")
        back = load_fe_matrices(*paths)
        assert (back.M != twin_model.M).nnz == 0
        assert (back.K != twin_model.K).nnz == 0
        np.testing.assert_array_equal(back.b, twin_model.b)
        assert back.contact_pairs[0].to_dict() == twin_model.contact_pairs[0].to_dict()
        again = save_fe_matrices(back, tmp_path / "b")
        for p, q in zip(paths, again):
            assert p.read_bytes() == q.read_bytes()


class TestTwinBeam:
    def test_default_fundamental_ratio(self, twin_model):
        f = solve_modes(twin_model, 2).frequencies
        assert 1.08 <= f[1] / f[0] <= 1.12

    def test_identical_beams_have_equal_fundamentals(self):
        f = solve_modes(build_twin_beam_model(TwinBeamSpec(taper_ratio=1.0)), 2).frequencies
        assert f[1] / f[0] == pytest.approx(1.0, abs=1e-10)

    def test_uniform_cantilever_matches_euler_bernoulli(self):
        spec = TwinBeamSpec(taper_ratio=1.0)
        EI = spec.youngs_modulus * spec.width * spec.thickness**3 / 12
        rhoA = spec.density * spec.width * spec.thickness
        exact = 1.875104**2 * np.sqrt(EI / (rhoA * spec.length**4)) / (2 * np.pi)
        f1 = solve_modes(build_twin_beam_model(spec), 1).frequencies[0]
        assert f1 == pytest.approx(exact, rel=0.01)

    def test_second_bending_near_six_times_fundamental(self, twin_model):
        f = solve_modes(twin_model, 4).frequencies / solve_modes(twin_model, 4).frequencies[1]
        assert 5.5 < f[2] < 6.2 and 5.5 < f[3] < 6.2

    @pytest.mark.parametrize("field,value", [("length", 0.0), ("thickness", -1e-3),
                                             ("width", 0.0), ("n_elements", 3)])
    def test_degenerate_geometry(self, field, value):
        with pytest.raises(ModelError):
            TwinBeamSpec(**{field: value})

    def test_invariants(self, twin_model):
        free = twin_model.free_dofs
        K = twin_model.K[free][:, free].toarray()
        assert np.linalg.eigvalsh(K)[0] > 0
        assert not twin_model.b[twin_model.constrained_dofs].any()
        assert set(np.unique(twin_model.b)) <= {0.0, 1.0}

    def test_pairs_sit_at_the_tips(self, twin_model, beam_spec):
        nn = beam_spec.n_elements + 1
        pair = twin_model.contact_pairs[-1]
        assert (pair.node_a, pair.node_b) == (2 * nn - 1, nn - 1)


class TestElasticLayers:
    def test_vanishing_stiffness_leaves_frequencies(self, twin_model, beam_spec):
        nn = beam_spec.n_elements + 1
        layer = ElasticLayer(pairs=((nn - 1, 2 * nn - 1),), k_n=1e-12, k_t=1e-12)
        f0 = solve_modes(twin_model, 6).frequencies
        f1 = solve_modes(attach_elastic_layers(twin_model, [layer]), 6).frequencies
        np.testing.assert_allclose(f1, f0, rtol=1e-9)

    def test_rigid_limit(self, twin_model, beam_spec):
        nn = beam_spec.n_elements + 1
        tip = twin_model.dof(nn - 1, "z")

        def tip_deflection(model):
            free = model.free_dofs
            f = np.zeros(model.n_dofs)
            f[tip] = 1.0
            K = model.K[free][:, free].toarray()
            u = np.linalg.solve(K, f[free])
            return u[np.searchsorted(free, tip)]

        base = tip_deflection(twin_model)
        stiff = attach_elastic_layers(twin_model, [ElasticLayer(((nn - 1, None),), 1e12, 1e12)])
        assert abs(tip_deflection(stiff)) < 1e-6 * abs(base)

    def test_single_mass_on_spring(self):
        m, k = 2.0, 5e4
        model = attach_elastic_layers(single_dof_model(m), [ElasticLayer(((0, None),), k, k)])
        f = solve_modes(model, 1).frequencies[0]
        assert f == pytest.approx(np.sqrt(k / m) / (2 * np.pi), rel=1e-12)

    def test_layer_on_constrained_dof(self, twin_model):
        with pytest.raises(ModelError, match="constrained"):
            attach_elastic_layers(twin_model, [ElasticLayer(((0, None),), 1.0, 1.0)])

    @pytest.mark.parametrize("k_n,k_t", [(0.0, 1.0), (1.0, -1.0)])
    def test_stiffness_must_be_positive(self, k_n, k_t):
        with pytest.raises(ModelError):
            ElasticLayer(((0, None),), k_n, k_t)

    @settings(max_examples=20, deadline=None)
    @given(k=st.floats(1.0, 1e9), node=st.integers(1, 32))
    def test_symmetric_after_attachment(self, twin_model, k, node):
        model = attach_elastic_layers(twin_model, [ElasticLayer(((node, node + 33),), k, k)])
        assert abs(model.K - model.K.T).max() == 0.0
        assert (model.M != twin_model.M).nnz == 0


class TestPointMasses:
    def test_zero_mass(self, twin_model):
        model = apply_point_masses(twin_model, [(32, 0.0)])
        assert abs(model.M - twin_model.M).max() == 0.0

    def test_tip_mass_lowers_fundamental(self, twin_model):
        f0 = solve_modes(twin_model, 1).frequencies[0]
        f1 = solve_modes(apply_point_masses(twin_model, [(32, 0.01)]), 1).frequencies[0]
        assert f1 < f0

    def test_effective_mass_formula(self):
        spec = TwinBeamSpec(taper_ratio=1.0)
        model = build_twin_beam_model(spec)
        EI = spec.youngs_modulus * spec.width * spec.thickness**3 / 12
        rhoAL = spec.density * spec.width * spec.thickness * spec.length
        Mt = 0.5
        f = solve_modes(apply_point_masses(model, [(spec.n_elements, Mt)]), 1).frequencies[0]
        approx = np.sqrt(3 * EI / ((Mt + 0.2357 * rhoAL) * spec.length**3)) / (2 * np.pi)
        assert f == pytest.approx(approx, rel=0.02)

    def test_negative_mass(self, twin_model):
        with pytest.raises(ModelError, match="negative"):
            apply_point_masses(twin_model, [(5, -1.0)])

    def test_masses_are_recorded(self, twin_model):
        model = apply_point_masses(twin_model, [(5, 0.1)])
        assert model.point_masses[-1] == (5, 0.1)
        assert abs(model.M - model.M.T).max() == 0.0

    def test_unknown_node(self, twin_model):
        with pytest.raises(ModelError, match="unknown node"):
            apply_point_masses(twin_model, [(10_000, 1.0)])


def test_unclamped_model_has_rigid_body_modes(beam_spec):
    model = build_twin_beam_model(replace(beam_spec, clamped=False))
    assert model.constrained_dofs.size == 0
    w = np.linalg.eigvalsh(model.K.toarray())
    assert np.sum(np.abs(w) < 1e-12 * w.max()) == 4
