from typing import Union

import numpy as np

__all__ = ["derive_seed", "rng_for"]

# Stream tags keep task draws, rollouts and branches on disjoint seed paths.
TASK_STREAM = 1
ROLLOUT_STREAM = 2
BRANCH_STREAM = 3
SUBSAMPLE_STREAM = 4


def derive_seed(root: int, *path: int) -> int:
    """Derive a child seed from a root seed and an integer path.

    The split scheme is root -> iteration/prompt -> rollout -> branch. A child seed
    depends only on its path, never on how many other seeds were drawn before it,
    so parallel or resumed runs reproduce the same numbers.
    """
    if root < 0 or any(p < 0 for p in path):
        raise ValueError(f"Seeds and seed paths must be non-negative: root={root}, path={path}")
    seq = np.random.SeedSequence(entropy=root, spawn_key=tuple(path))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed: Union[int, np.random.SeedSequence]) -> np.random.Generator:
    return np.random.default_rng(seed)
