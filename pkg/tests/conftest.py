import numpy as np
import pytest

from aucal.data import AnnotatedRecord, binarize, make_dataset
from aucal.synth import AuModel, SynthConfig, generate


def record(i, au6, au12, label, gender, features=None, split="train"):
    return AnnotatedRecord(
        id=f"r{i}",
        au_intensities={"AU6": au6, "AU12": au12},
        label=label,
        group={"gender": gender},
        features=None if features is None else np.asarray(features, dtype=float),
        split=split,
    )


def small_dataset():
    recs = [
        record(0, 3.0, 2.8, 1, "F"),
        record(1, 0.5, 0.4, 0, "F"),
        record(2, 3.2, 3.1, 1, "M"),
        record(3, 0.3, 0.6, 0, "M"),
    ]
    return make_dataset(recs, ["AU6", "AU12"])


def biased_config(seed=0, n=20000, beta_f=1.0, feature_dim=0, leak=0,
                  test_fraction=0.0):
    return SynthConfig(
        n=n,
        group_probs={"F": 0.5, "M": 0.5},
        latent_positive_prob=0.5,
        au_models={
            "AU6": AuModel(1.2, 3.2, 0.8, 0.8),
            "AU12": AuModel(1.0, 3.4, 0.8, 0.8),
        },
        annotator_intercept=-4.0,
        annotator_weights={"AU6": 0.9, "AU12": 0.9},
        group_bias={"F": beta_f} if beta_f else {},
        thresholds={"AU6": 2.2, "AU12": 2.2},
        feature_dim=feature_dim,
        feature_noise_std=0.3,
        group_leak_dims=leak,
        test_fraction=test_fraction,
        seed=seed,
    )


@pytest.fixture
def biased_dataset():
    cfg = biased_config(seed=11)
    res = generate(cfg)
    return binarize(res.dataset, {"AU6": 2.2, "AU12": 2.2}), cfg
