from __future__ import annotations

import numpy as np
import pytest

from da3.ablation import ARMS, AblationConfig, AblationResult
from da3.data import TaskSpec, linearly_separable, load_dataset, make_domain, save_dataset, \
    two_domain_task
from da3.errors import ConfigError


class TestSynthetic:
    def test_balanced_and_deterministic(self):
        x, y = make_domain("A", 40, TaskSpec(num_classes=4, image_size=8), seed=3)
        assert x.shape == (40, 3, 8, 8) and x.dtype == np.float32
        assert np.bincount(y).tolist() == [10, 10, 10, 10]
        x2, y2 = make_domain("A", 40, TaskSpec(num_classes=4, image_size=8), seed=3)
        assert x.tobytes() == x2.tobytes() and np.array_equal(y, y2)

    def test_domains_and_splits_differ(self):
        src, tgt = two_domain_task(16, 16, TaskSpec(image_size=8), seed=0)
        assert not np.allclose(src.x_train, tgt.x_train)
        assert not np.allclose(src.x_train, src.x_test)

    @pytest.mark.parametrize("kw", [dict(domain="C", n=4), dict(domain="A", n=0)])
    def test_errors(self, kw):
        with pytest.raises(ConfigError):
            make_domain(**kw)

    def test_spec_guard(self):
        with pytest.raises(ConfigError):
            TaskSpec(num_classes=1)

    def test_linearly_separable(self):
        ds = linearly_separable(32, 2, 4)
        means = [ds.x_train[ds.y_train == k, 0].mean() for k in (0, 1)]
        assert means[0] < -0.5 < 0.5 < means[1]


def test_dataset_round_trip(tmp_path):
    ds = linearly_separable(12, 2, 4, seed=1)
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    for name in ("x_train", "y_train", "x_test", "y_test"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    (tmp_path / "y_test.da3t").unlink()
    with pytest.raises(ConfigError):
        load_dataset(tmp_path)


class TestAblationBookkeeping:
    def rows(self, seed, accs):
        return [dict(seed=seed, arm=a, train_accuracy=0.0, test_accuracy=v,
                     mean_gate_sparsity=0.0, status="ok") for a, v in zip(ARMS, accs)]

    def test_majority_vote(self):
        res = AblationResult(self.rows(0, [.4, .5, .6, .7]) + self.rows(1, [.4, .5, .7, .6]) +
                             self.rows(2, [.3, .5, .6, .6]), {0: True, 1: False, 2: True})
        assert res.passed
        assert "PASS (2/3 seeds)" in res.to_text()
        assert res.mean_accuracy()["bias-only"] == pytest.approx((.4 + .4 + .3) / 3)

    def test_minority_fails(self):
        res = AblationResult(self.rows(0, [.4] * 4), {0: True, 1: False, 2: False})
        assert not res.passed

    def test_config(self):
        with pytest.raises(ConfigError):
            AblationConfig(seeds=[])
        with pytest.raises(ConfigError):
            AblationConfig.from_dict({"seedz": [1]})
        assert AblationConfig.from_dict(AblationConfig().to_dict()) == AblationConfig()
