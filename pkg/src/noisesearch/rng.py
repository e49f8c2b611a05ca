"""Counter-based random substreams.

Every stochastic draw in a search is keyed by (seed, iteration,
candidate-index, ...) so that results are bit-identical regardless of
execution order or thread count.
"""

import numpy as np


def substream(seed, *path):
    """Return a Generator for the substream identified by an integer path.

    Args:
        seed: Root seed of the run.
        *path: Non-negative integers identifying the draw site, e.g.
            (iteration, candidate_index).

    Returns:
        An independent ``np.random.Generator``; the same (seed, path)
        always yields the same stream.
    """
    key = tuple(int(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def fold_seed(seed, *path):
    """Derive a child integer seed from a root seed and an integer path."""
    ss = np.random.SeedSequence(entropy=[int(seed)] + [int(p) for p in path])
    return int(ss.generate_state(1, np.uint64)[0])
