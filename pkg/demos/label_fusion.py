"""Why fuse labels over many frames.

A voxel seen by a classifier that is right 60% of the time: the running
product of per-frame distributions quickly concentrates on the true class,
while any single frame stays unreliable.

    python3 demos/label_fusion.py
"""
import numpy as np

from semfuse.fusion import bayes_update

C, TRUE, FRAMES, TRIALS = 5, 2, 20, 2000
rng = np.random.default_rng(0)


def observation():
    """A noisy per-pixel prediction: peak at the true class 60% of the time."""
    peak = TRUE if rng.random() < 0.6 else rng.choice([c for c in range(C) if c != TRUE])
    d = np.full(C, 0.3 / (C - 1))
    d[peak] = 0.7
    return d


right = np.zeros(FRAMES)
for _ in range(TRIALS):
    belief = np.full(C, 1.0 / C)
    for f in range(FRAMES):
        belief = bayes_update(belief, observation())
        right[f] += belief.argmax() == TRUE

print("frames fused  P(argmax is right)")
for f in (0, 1, 2, 4, 9, 19):
    print(f"{f + 1:12d}  {right[f] / TRIALS:.3f}")
