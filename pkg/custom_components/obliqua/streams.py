"""Counter-based random streams keyed by (seed, path_id, stream...).

Every path owns its streams, so results never depend on how paths are batched or
scheduled across workers.
"""

import numpy as np

STREAM_BROWNIAN = 0
STREAM_AUX = 1
STREAM_SEGMENT = 2
STREAM_INITIAL = 3

BATCH_SIZE = 1024


def path_generator(seed: int, path_id: int, *stream: int) -> np.random.Generator:
    """Philox generator for one path and stream.

    Examples:
        >>> a = path_generator(7, 3, STREAM_BROWNIAN).standard_normal(2)
        >>> b = path_generator(7, 3, STREAM_BROWNIAN).standard_normal(2)
        >>> bool((a == b).all())
        True
    """
    if seed < 0 or path_id < 0 or any(s < 0 for s in stream):
        raise ValueError(f"Stream keys must be non-negative, got {(seed, path_id, *stream)}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_id, *stream])))


def brownian_normals(seed: int, path_id: int, n_steps: int) -> np.ndarray:
    """Standard normals for the Brownian stream; row k drives step k."""
    return path_generator(seed, path_id, STREAM_BROWNIAN).standard_normal((n_steps, 2))


def segment_generator(seed: int, path_id: int, segment: int) -> np.random.Generator:
    """Generator for a restarted segment; segment 0 is the Brownian stream."""
    if segment == 0:
        return path_generator(seed, path_id, STREAM_BROWNIAN)
    return path_generator(seed, path_id, STREAM_SEGMENT, segment)


def batches(path_ids: list[int]) -> list[list[int]]:
    """Group path ids by path_id // BATCH_SIZE, in ascending order."""
    groups: dict[int, list[int]] = {}
    for pid in sorted(path_ids):
        groups.setdefault(pid // BATCH_SIZE, []).append(pid)
    return [groups[k] for k in sorted(groups)]
