"""Walk through the analysis on a synthetic dataset with planted preferences.

Run ``python demos/synthetic_walkthrough.py``.  Everything is offline: the
embeddings come from the generator and the LLM is a deterministic stub that
reads the planted ``concept<j>`` tokens.
"""

from __future__ import annotations

import numpy as np

from prefscope import autointerp, preference_stats, sae, subjectivity, synthbench


def main():
    # 1. A dataset where eight directions in embedding space carry preferences of known size.
    spec = synthbench.PlantedSpec(n_annotators=60, pairs_per_annotator=200, seed=1,
                                  effect_sizes=[1.0, -0.8, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0],
                                  annotator_tau=[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    d, records, gt = synthbench.generate(spec)
    X = np.vstack([r.e_delta for r in records])
    print(f"{len(d)} pairs from {spec.n_annotators} annotators, embedding dim {X.shape[1]}")

    # 2. The sparse autoencoder should rediscover the planted directions from the differences alone.
    model = sae.train(X, sae.SaeConfig(input_dim=X.shape[1], epochs=60))
    print(f"dictionary recovery: {synthbench.dictionary_recovery_score(model, spec.resolved()):.3f}")
    Z = sae.transform(X, model)

    # 3. Describe each latent and keep the descriptions a judge can verify.
    llm = synthbench.MarkerLLM()
    described = autointerp.interpret_features(Z, d, llm, llm, n_candidates=2, n_fidelity=150)
    for fd in described:
        if fd.significant:
            print(f"  latent {fd.feature_id:2d}: {fd.text!r} (fidelity {fd.fidelity:.2f})")

    # 4. Which described features move the win rate, after controlling for length?
    y = d.labels()
    keep = [fd.feature_id for fd in described if fd.significant]
    names = {fd.feature_id: fd.text for fd in described}
    for e in preference_stats.feature_effects(Z, y, d.length_deltas(), features=keep, n_boot=200):
        if e.ok and e.p_value * len(keep) < 0.05:
            print(f"  {names[e.feature_id]:28s} win-rate effect {100 * e.delta_winrate:+5.1f} points")
    auc = preference_stats.sparse_auc(Z[:, keep], y, d.length_deltas())
    print(f"cross-validated AUC from described features: {auc:.3f}")

    # 5. Do annotators agree?  Only the first concept was planted with a spread of slopes.
    for fd in described:
        if fd.significant and fd.text.startswith("mentions concept") and fd.text[-1] in "01":
            est = subjectivity.pool_random_effects(subjectivity.per_annotator_slopes(fd.feature_id, d, Z))
            print(f"  {fd.text}: beta {est.beta_mean:+.2f}, tau {est.tau:.2f}, "
                  f"{100 * subjectivity.fraction_reversed(est):.0f}% of annotators reversed")


if __name__ == "__main__":
    main()
