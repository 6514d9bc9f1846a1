"""Pinned pseudo-random number generation.

All stochastic pieces of the project (dataset sampling, weight init,
dropout masks, mixup draws, shuffling) run on xoshiro256** streams seeded
through splitmix64.  The generator is implemented directly on numpy uint64
arithmetic so the integer stream is bit-identical on every platform; float
conversion uses the exact (x >> 11) * 2^-53 mapping.  Gaussian draws go
through Box-Muller, so they are deterministic up to libm rounding of
log/sin/cos, which is stable on a given machine.
"""

import numpy as np

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_FIVE = _U64(5)
_NINE = _U64(9)
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


def _splitmix64_next(state):
    """Advance splitmix64 state (uint64 array), return (new_state, output)."""
    with np.errstate(over="ignore"):
        state = state + _GOLDEN
        z = state
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        z = z ^ (z >> _U64(31))
    return state, z


def _rotl(x, k):
    return (x << _U64(k)) | (x >> _U64(64 - k))


class StreamBank:
    """A bank of independent xoshiro256** streams stepped in lockstep.

    Each stream is seeded from splitmix64(seed), so distinct seeds give
    statistically independent streams.  With a single seed this behaves as
    one ordinary sequential generator; with an array of seeds every call
    returns one value (or block) per stream, which is how the dataset
    generator draws per-sample streams in parallel.
    """

    def __init__(self, seeds):
        seeds = np.atleast_1d(np.asarray(seeds, dtype=np.uint64))
        self.n = seeds.shape[0]
        state = seeds.copy()
        lanes = []
        for _ in range(4):
            state, out = _splitmix64_next(state)
            lanes.append(out)
        self._s = lanes  # list of 4 uint64 arrays, shape (n,)

    def next_u64(self):
        """One xoshiro256** output per stream, shape (n,)."""
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * _FIVE, 7) * _NINE
            t = s1 << _U64(17)
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform_block(self, k):
        """k uniforms in [0,1) per stream, shape (n, k)."""
        out = np.empty((self.n, k), dtype=np.float64)
        for j in range(k):
            out[:, j] = (self.next_u64() >> _U64(11)).astype(np.float64) * _INV_2_53
        return out

    def normal_block(self, k):
        """k standard normals per stream via Box-Muller, shape (n, k)."""
        pairs = (k + 1) // 2
        u = self.uniform_block(2 * pairs)
        u1 = u[:, 0::2]
        u2 = u[:, 1::2]
        r = np.sqrt(-2.0 * np.log(1.0 - u1))  # 1-u1 keeps log away from 0
        theta = 2.0 * np.pi * u2
        z = np.empty((self.n, 2 * pairs), dtype=np.float64)
        z[:, 0::2] = r * np.cos(theta)
        z[:, 1::2] = r * np.sin(theta)
        return z[:, :k]


class RandomStream:
    """Sequential convenience wrapper around a single xoshiro256** stream."""

    def __init__(self, seed):
        self._bank = StreamBank(np.uint64(seed))

    def u64(self):
        return int(self._bank.next_u64()[0])

    def uniform(self, shape=None):
        if shape is None:
            return float(self._bank.uniform_block(1)[0, 0])
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        k = int(np.prod(shape)) if shape else 1
        return self._bank.uniform_block(k)[0].reshape(shape)

    def normal(self, shape=None):
        if shape is None:
            return float(self._bank.normal_block(1)[0, 0])
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        k = int(np.prod(shape)) if shape else 1
        return self._bank.normal_block(k)[0].reshape(shape)

    def randbelow(self, k):
        """Integer in [0, k). Uses the 53-bit uniform; bias is ~2^-53."""
        return min(int(self.uniform() * k), k - 1)

    def permutation(self, n):
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def beta(self, a, b):
        """Beta(a, b) via Johnk's algorithm (works for shape params < 1)."""
        while True:
            u = self.uniform()
            v = self.uniform()
            x = u ** (1.0 / a)
            y = v ** (1.0 / b)
            if x + y <= 1.0:
                if x + y > 0.0:
                    return x / (x + y)
            # fall through on degenerate underflow and retry

    def bernoulli(self, p):
        return self.uniform() < p


def mix_seed(seed, salt):
    """Derive a child seed from (seed, salt) with splitmix64 finalization."""
    s = np.array([(int(seed) ^ (int(salt) * 0x9E3779B97F4A7C15)) & 0xFFFFFFFFFFFFFFFF],
                 dtype=np.uint64)
    _, out = _splitmix64_next(s)
    return int(out[0])


def path_seed(seed, path):
    """Stable per-parameter seed derived from a path string (FNV-1a 64)."""
    h = 0xCBF29CE484222325
    for byte in path.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return mix_seed(seed, h)
