import dataclasses

import numpy as np
import pytest

from dyndepnet.gradcheck import relative_error, run_gradcheck, tiny_run_config


class TestRelativeError:
    def test_examples(self):
        assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
        assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5
        # both at noise level: the floor keeps the ratio small instead of 0/0
        assert relative_error(np.array([1e-12]), np.array([-1e-12])) == pytest.approx(2e-4)


class TestGradcheck:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_tiny_model_passes(self, seed):
        report = run_gradcheck(seed=seed)
        assert report.passed, "\n".join(report.lines())
        assert max(report.max_error.values()) < 1e-4

    def test_every_parameter_is_reported(self):
        from dyndepnet.model import DynDepNet, ModelConfig

        report = run_gradcheck(seed=0)
        model = DynDepNet(ModelConfig.resolve(tiny_run_config(), 4, 24), seed=0)
        assert set(report.max_error) == set(model.params)
        lines = report.lines()
        assert len(lines) == len(model.params) + 1
        assert lines[-1].split()[:2] == ["overall", "PASS"]

    def test_tampered_gradient_fails(self):
        report = run_gradcheck(seed=0, tamper="readout.W_3")
        assert not report.passed
        assert report.max_error["readout.W_3"] > 1e-2
        failing = [line for line in report.lines() if line.endswith("FAIL")]
        assert failing and failing[0].startswith("readout.W_3")

    @pytest.mark.parametrize(
        "section,change",
        [
            ("learner", {"use_inception": False}),
            ("learner", {"use_self_attention": False}),
            ("learner", {"use_sparsity": False}),
            ("classifier", {"use_temporal_attention": False}),
        ],
    )
    def test_ablated_models_pass(self, section, change):
        run = tiny_run_config()
        run = dataclasses.replace(run, **{section: dataclasses.replace(getattr(run, section), **change)})
        report = run_gradcheck(run, seed=0)
        assert report.passed, "\n".join(report.lines())
