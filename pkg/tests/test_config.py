from egoflow.utils.config import Config


class TestConfig:
    def test_defaults(self):
        config = Config()
        assert config.orthonormality_tol == 1e-9
        assert config.kitti_segment_lengths == [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0]
        assert config.kitti_step_size == 1
        assert config.validate_configuration() == {"valid": True, "issues": []}

    def test_invalid_values_are_reported(self):
        config = Config(num_threads=0, min_visible_fraction=1.5, kitti_segment_lengths=[])
        report = config.validate_configuration()
        assert not report["valid"]
        assert len(report["issues"]) == 3

    def test_environment_override(self, monkeypatch):
        monkeypatch.setenv("EGOFLOW_NUM_THREADS", "4")
        monkeypatch.setenv("EGOFLOW_FLOW_EPSILON", "1e-5")
        config = Config()
        assert config.num_threads == 4
        assert config.flow_epsilon == 1e-5

    def test_to_dict_groups_settings(self):
        groups = Config().to_dict()
        assert set(groups) == {"execution", "tolerances", "simulation", "evaluation"}
        assert groups["evaluation"]["kitti_step_size"] == 1
