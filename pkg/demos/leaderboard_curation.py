"""How much of a model's leaderboard rating comes from one stylistic feature?

Run ``python demos/leaderboard_curation.py``.  One of four models writes
responses that express a feature annotators reward; flipping the labels the
feature most plausibly decided shows how far its Elo rating depends on it.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from prefscope import curation
from prefscope.dataset import Dataset, Label, PreferencePair


def tournament(seed=0, n=3000, styled="model-c"):
    rng = np.random.default_rng(seed)
    models = ["model-a", "model-b", "model-c", "model-d"]
    skill = {"model-a": 0.4, "model-b": 0.2, "model-c": 0.0, "model-d": -0.3}
    pairs, z = [], []
    for i in range(n):
        a, b = rng.choice(models, 2, replace=False)
        style = float(a == styled) - float(b == styled)
        win_a = rng.random() < expit(skill[a] - skill[b] + 1.2 * style)
        pairs.append(PreferencePair(id=f"m{i:05d}", prompt="p", response_a="x", response_b="y",
                                    label=Label.A if win_a else Label.B, model_a=a, model_b=b))
        z.append(style * rng.uniform(0.5, 2.0))
    return Dataset(pairs=tuple(pairs)), np.array(z)[:, None]


def main():
    d, Z = tournament()
    comparison = curation.safety_adjusted_elo(d, Z, 0, 400, direction=+1)
    print(f"flipped {len(comparison.flipped_ids)} labels where the styled side won")
    print(f"{'model':10s} {'before':>8s} {'after':>8s} {'change':>8s}")
    for row in comparison.rows():
        print(f"{row['model']:10s} {row['base_rating']:8.1f} {row['adjusted_rating']:8.1f} {row['delta']:+8.1f}")


if __name__ == "__main__":
    main()
