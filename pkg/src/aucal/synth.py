"""Synthetic datasets with known, injected annotation bias.

Each record gets a group, a latent expression state, truncated-normal AU
intensities driven by the latent state, and a label drawn from a logistic
annotator whose per-group intercept shifts are the injected bias. A
parallel fair-label column is drawn with the shifts zeroed. Closed-form
cell proportions (Gauss-Legendre quadrature over the truncated normals)
serve as the oracle for audit tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import ndtr, ndtri

from .data import (
    AnnotatedRecord,
    AuCellKey,
    Dataset,
    au_sort_key,
)
from .errors import InvalidConfig
from .rng import Rng
from .stats import normal_cdf

AU_LO, AU_HI = 0.0, 5.0


@dataclass(frozen=True)
class AuModel:
    """Truncated-normal intensity parameters per latent expression state."""
    mean_negative: float
    mean_positive: float
    std_negative: float = 0.8
    std_positive: float = 0.8

    def params(self, latent: int) -> tuple[float, float]:
        return (
            (self.mean_positive, self.std_positive)
            if latent
            else (self.mean_negative, self.std_negative)
        )


@dataclass(frozen=True)
class SynthConfig:
    n: int
    group_probs: Mapping[str, float]
    latent_positive_prob: float
    au_models: Mapping[str, AuModel]
    annotator_intercept: float
    annotator_weights: Mapping[str, float]
    group_bias: Mapping[str, float] = field(default_factory=dict)
    composition_shift: Mapping[str, float] = field(default_factory=dict)
    thresholds: Mapping[str, float] = field(default_factory=dict)
    feature_dim: int = 0
    feature_noise_std: float = 0.1
    group_leak_dims: int = 0
    test_fraction: float = 0.0
    group_attr: str = "gender"
    seed: int = 0

    def validate(self) -> None:
        if self.n < 0:
            raise InvalidConfig("n must be >= 0")
        total = sum(self.group_probs.values())
        if not self.group_probs or abs(total - 1.0) > 1e-9:
            raise InvalidConfig("group_probs must sum to 1")
        if not (0.0 <= self.latent_positive_prob <= 1.0):
            raise InvalidConfig("latent_positive_prob must be in [0, 1]")
        for p in self.composition_shift.values():
            if not (0.0 <= p <= 1.0):
                raise InvalidConfig("composition_shift probs must be in [0, 1]")
        for au, m in self.au_models.items():
            if m.std_negative <= 0 or m.std_positive <= 0:
                raise InvalidConfig(f"{au}: stddevs must be > 0")
        for au in self.annotator_weights:
            if au not in self.au_models:
                raise InvalidConfig(f"annotator weight for unknown AU {au!r}")
        for z in self.group_bias:
            if z not in self.group_probs:
                raise InvalidConfig(f"group_bias for unknown level {z!r}")
        if self.feature_dim:
            needed = len(self.au_models) + self.group_leak_dims
            if self.feature_dim < needed:
                raise InvalidConfig(
                    f"feature_dim {self.feature_dim} < AU dims + leak dims {needed}"
                )
        if not (0.0 <= self.test_fraction < 1.0):
            raise InvalidConfig("test_fraction must be in [0, 1)")

    def threshold_for(self, au: str) -> float:
        return float(self.thresholds.get(au, 2.5))

    def au_ids(self) -> list[str]:
        return sorted(self.au_models, key=au_sort_key)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -35, 35)))


def _truncnorm_draw(gen: np.random.Generator, mean, std, size) -> np.ndarray:
    """Inverse-CDF sampling of a normal truncated to [0, 5]."""
    a = ndtr((AU_LO - mean) / std)
    b = ndtr((AU_HI - mean) / std)
    u = gen.random(size)
    return mean + std * ndtri(a + u * (b - a))


@dataclass
class SynthResult:
    dataset: Dataset
    fair_labels: np.ndarray


def generate(config: SynthConfig) -> SynthResult:
    """Draw a dataset with injected annotation bias plus the parallel
    fair-label column; deterministic per seed with per-purpose substreams
    (changing feature noise never changes labels or AUs)."""
    config.validate()
    n = config.n
    rng = Rng(config.seed, ("synth",))
    levels = sorted(config.group_probs)
    aus = config.au_ids()

    if n == 0:
        dataset = Dataset(
            records=(),
            attribute_levels={config.group_attr: tuple(levels)},
            au_ids=tuple(aus),
            feature_dim=config.feature_dim,
        )
        return SynthResult(dataset=dataset, fair_labels=np.zeros(0, dtype=int))

    probs = np.array([config.group_probs[z] for z in levels])
    u = rng.child("group").generator().random(n)
    group_idx = np.searchsorted(np.cumsum(probs), u, side="right")
    group_idx = np.clip(group_idx, 0, len(levels) - 1)
    group = np.array(levels)[group_idx]

    p_latent = np.array(
        [config.composition_shift.get(z, config.latent_positive_prob) for z in levels]
    )[group_idx]
    latent = (rng.child("latent").generator().random(n) < p_latent).astype(int)

    intensities = {}
    for au in aus:
        m = config.au_models[au]
        mean = np.where(latent == 1, m.mean_positive, m.mean_negative)
        std = np.where(latent == 1, m.std_positive, m.std_negative)
        intensities[au] = _truncnorm_draw(
            rng.child(f"au/{au}").generator(), mean, std, n
        )

    eta = np.full(n, config.annotator_intercept, dtype=float)
    for au, w in config.annotator_weights.items():
        eta += w * intensities[au]
    shift = np.array([config.group_bias.get(z, 0.0) for z in levels])[group_idx]
    label = (rng.child("label").generator().random(n) < _sigmoid(eta + shift)).astype(int)
    fair = (rng.child("fair_label").generator().random(n) < _sigmoid(eta)).astype(int)

    features = None
    if config.feature_dim:
        gen = rng.child("features").generator()
        noise = gen.normal(0.0, config.feature_noise_std, (n, config.feature_dim))
        features = noise
        for j, au in enumerate(aus):
            features[:, j] += intensities[au]
        # leak dims carry the group signal a naive model can exploit
        ref = levels[0]
        leak = (group != ref).astype(float)
        for j in range(config.group_leak_dims):
            features[:, len(aus) + j] += leak

    split = np.full(n, "train", dtype=object)
    if config.test_fraction > 0:
        is_test = rng.child("split").generator().random(n) < config.test_fraction
        split[is_test] = "test"

    records = []
    intensity_cols = np.stack([intensities[au] for au in aus], axis=1)
    for i in range(n):
        records.append(
            AnnotatedRecord(
                id=f"s{i}",
                au_intensities=dict(zip(aus, intensity_cols[i].tolist())),
                label=int(label[i]),
                group={config.group_attr: str(group[i])},
                features=features[i] if features is not None else None,
                split=str(split[i]),
            )
        )
    dataset = Dataset(
        records=tuple(records),
        attribute_levels={config.group_attr: tuple(levels)},
        au_ids=tuple(aus),
        feature_dim=config.feature_dim,
    )
    return SynthResult(dataset=dataset, fair_labels=fair)


def with_fair_test_labels(result: SynthResult) -> Dataset:
    """Swap the test split's labels for the fair (bias-free) column: the
    synthetic analogue of evaluating on a lab-controlled test set."""
    labels = result.dataset.labels().copy()
    for i, r in enumerate(result.dataset.records):
        if r.split == "test":
            labels[i] = result.fair_labels[i]
    return result.dataset.with_labels(labels)


def _region(config: SynthConfig, au: str, bit: int) -> tuple[float, float]:
    t = config.threshold_for(au)
    return (t, AU_HI) if bit else (AU_LO, t)


def _truncnorm_norm(mean: float, std: float) -> float:
    return normal_cdf((AU_HI - mean) / std) - normal_cdf((AU_LO - mean) / std)


def _region_prob(mean: float, std: float, lo: float, hi: float) -> float:
    z = _truncnorm_norm(mean, std)
    return (normal_cdf((hi - mean) / std) - normal_cdf((lo - mean) / std)) / z


def expected_cell_proportions(
    config: SynthConfig, cell: AuCellKey, nodes: int = 64
) -> dict[str, float]:
    """Closed-form P(Y=1 | cell, group): the annotator logistic integrated
    over the truncated-normal intensities conditioned on the cell's
    presence pattern, mixing over the latent state by Bayes' rule."""
    config.validate()
    aus = config.au_ids()
    regions = {au: _region(config, au, bit) for au, bit in cell.items}
    for au in aus:
        regions.setdefault(au, (AU_LO, AU_HI))

    x_gl, w_gl = np.polynomial.legendre.leggauss(nodes)

    out = {}
    for z_level in sorted(config.group_probs):
        p_lat = config.composition_shift.get(z_level, config.latent_positive_prob)
        beta = config.group_bias.get(z_level, 0.0)
        weighted_sum = 0.0
        weight_total = 0.0
        for latent, prior in ((0, 1.0 - p_lat), (1, p_lat)):
            if prior == 0.0:
                continue
            region_prob = 1.0
            grids = []
            for au in aus:
                mean, std = config.au_models[au].params(latent)
                lo, hi = regions[au]
                region_prob *= _region_prob(mean, std, lo, hi)
                x = 0.5 * (hi - lo) * x_gl + 0.5 * (hi + lo)
                pdf = (
                    np.exp(-0.5 * ((x - mean) / std) ** 2)
                    / (std * math.sqrt(2 * math.pi))
                    / _truncnorm_norm(mean, std)
                )
                w = 0.5 * (hi - lo) * w_gl * pdf
                # normalize to the conditional density on the region
                w = w / w.sum()
                grids.append((x, w))
            if region_prob <= 0:
                continue
            # conditional expectation of the annotator over the region:
            # broadcast the separable node grids into the full tensor
            k = len(aus)
            eta = np.full((1,) * k, config.annotator_intercept + beta)
            weight = np.ones((1,) * k)
            for dim, ((x, w), au) in enumerate(zip(grids, aus)):
                shape = [1] * k
                shape[dim] = nodes
                eta = eta + config.annotator_weights.get(au, 0.0) * x.reshape(shape)
                weight = weight * w.reshape(shape)
            exp_sigma = float((weight * _sigmoid(eta)).sum())
            cell_weight = prior * region_prob
            weighted_sum += cell_weight * exp_sigma
            weight_total += cell_weight
        out[z_level] = weighted_sum / weight_total if weight_total > 0 else float("nan")
    return out
