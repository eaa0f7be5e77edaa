"""
Counter-Based Random Streams
Philox4x64-10 keyed by (seed, stream) with documented float conversions
"""
import math

import numpy as np

# Stream kinds, packed into the top byte of the 64-bit stream id
DATASET_TRAIN = 1
DATASET_EVAL = 2
PARAMETER_INIT = 3
POSITIVES = 4
NEGATIVES = 5
GRADCHECK = 6


def stream_id(kind, layer=0, index=0):
    """(kind << 56) | (layer << 48) | index"""
    return (int(kind) << 56) | (int(layer) << 48) | int(index)


class CounterRNG:
    """Random stream reproducible from (seed, stream) in any language

    Key = (stream << 64) | seed, counter starting at zero. Uniforms take the
    top 53 bits of each raw 64-bit draw times 2^-53; normals use Box-Muller
    on consecutive uniform pairs (u1, u2): r = sqrt(-2 ln(1 - u1)),
    z = (r cos(2 pi u2), r sin(2 pi u2)).
    """

    def __init__(self, seed, stream=0):
        if not 0 <= seed < 2 ** 64 or not 0 <= stream < 2 ** 64:
            raise ValueError("seed and stream must fit in 64 bits")
        self.seed = int(seed)
        self.stream = int(stream)
        self.bit_generator = np.random.Philox(key=(self.stream << 64) | self.seed)

    def raw(self, count):
        return self.bit_generator.random_raw(count)

    def _unit(self, count):
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform(self, low=0.0, high=1.0, size=None):
        count = 1 if size is None else int(np.prod(size))
        out = low + (high - low) * self._unit(count)
        return float(out[0]) if size is None else out.reshape(size)

    def integers(self, low, high):
        """Integer in [low, high)"""
        return low + min(int(math.floor(self.uniform() * (high - low))), high - low - 1)

    def normal(self, size, sigma=1.0):
        count = int(np.prod(size))
        pairs = (count + 1) // 2
        u = self._unit(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:count]
        return sigma * z.reshape(size)

    def choice(self, candidates, size, replace=False):
        """`size` distinct candidates: the ones with the smallest uniform keys"""
        candidates = np.asarray(candidates)
        if replace:
            picks = np.floor(self._unit(size) * len(candidates)).astype(np.int64)
            return candidates[np.minimum(picks, len(candidates) - 1)]
        if size > len(candidates):
            raise ValueError(f"Cannot draw {size} of {len(candidates)} without replacement")
        keys = self._unit(len(candidates))
        if size == 0:
            return candidates[:0]
        # same picks and order as a stable argsort of the keys, in O(n)
        kth = keys[np.argpartition(keys, size - 1)[size - 1]]
        below = np.flatnonzero(keys < kth)
        ties = np.flatnonzero(keys == kth)[:size - below.size]
        picked = np.concatenate([below, ties])
        return candidates[picked[np.lexsort((picked, keys[picked]))]]
