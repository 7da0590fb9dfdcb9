"""Pooling a long speech sequence into a handful of tokens.

A scene speaks one category for 12 frames. Eight learnable queries attend
over the frames and each returns a convex mix of them, so every token lands
near the spoken concept's acoustic vector no matter how long the utterance is.
"""

import numpy as np

from speechground.data import ConceptVocabulary, SceneParams, generate_scene
from speechground.qsa import QueryBank, qsa_forward

vocab = ConceptVocabulary.create(seed=0)
scene = generate_scene(vocab, seed=1, params=SceneParams(noise=0.3))
category = scene.mentioned[0]
print(f"spoken category {category}, {scene.speech.frames.shape[0]} frames of width {vocab.d}")

bank = QueryBank(np.random.default_rng(0).normal(0, 1 / np.sqrt(vocab.d), (8, vocab.d)))
tokens = qsa_forward(bank, scene.speech).tokens

target = vocab.acoustic(category)
cos = tokens @ target / (np.linalg.norm(tokens, axis=1) * np.linalg.norm(target))
print("cosine of each token with the spoken concept:", np.round(cos, 3))

others = [c for c in range(vocab.n_concepts) if c != category]
worst_other = max(abs(tokens.mean(axis=0) @ vocab.acoustic(c)) / np.linalg.norm(vocab.acoustic(c)) for c in others)
print(f"mean token projection on the spoken concept {tokens.mean(axis=0) @ target / np.linalg.norm(target):.2f}, "
      f"largest on any other concept {worst_other:.2f}")
