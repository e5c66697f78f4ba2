"""Counter-based pseudo-random streams.

Every stream is a SplitMix64 sequence: a 64-bit key plus a counter. Output
number ``i`` of a stream with key ``k`` is ``mix(k + (i + 1) * GOLDEN)``
where ``mix`` is the SplitMix64 finalizer (Steele, Lea & Flood 2014). Keys
are derived by folding a seed and a tuple of tags (ints or strings) through
the same finalizer, so ``Rng(seed, "prior", 12)`` names a stream that does
not depend on how many other streams were used before it.

Gaussian variates come from the Box-Muller transform applied to consecutive
pairs of 53-bit uniforms ``u1 in (0, 1]`` and ``u2 in [0, 1)``:
``r = sqrt(-2 log u1)``, giving ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
A request for an odd number of variates per stream discards the last sine.

A multi-key ``Rng`` holds one stream per row (one per Langevin chain). Its
draws always have ``shape[0] == n_streams`` and row ``c`` is taken from
stream ``c`` only, so chain results never depend on batch composition.
"""

from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(v) for v in (30, 27, 31, 11))
_TWO_POW_M53 = 2.0**-53
_MASK = (1 << 64) - 1


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> _S30)
    x *= _M1
    x ^= x >> _S27
    x *= _M2
    x ^= x >> _S31
    return x


def _tag_to_int(tag) -> int:
    if isinstance(tag, (bool, np.bool_)):
        raise TypeError("rng tags must be ints or strings")
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng tags must be ints or strings, got {type(tag).__name__}")


def _fold(h: np.ndarray, tag_values) -> np.ndarray:
    return _mix(h + (np.asarray(tag_values, dtype=np.uint64) * GOLDEN + GOLDEN))


def _derive(seed: int, tags) -> np.ndarray:
    h = _mix(np.array([_tag_to_int(seed) ^ int(GOLDEN)], dtype=np.uint64))
    for tag in tags:
        h = _fold(h, [_tag_to_int(tag)])
    return h


def derive_key(seed: int, *tags) -> int:
    """Fold ``seed`` and ``tags`` into one 64-bit stream key."""
    return int(_derive(seed, tags)[0])


class Rng:
    """One or more SplitMix64 streams sharing a counter.

    ``Rng(seed, *tags)`` gives a single stream; ``Rng.chains(seed, *tags, n=n)``
    gives ``n`` streams whose keys are ``derive_key(seed, *tags, c)``.
    """

    __slots__ = ("keys", "counter")

    def __init__(self, seed: int = 0, *tags, keys=None, counter: int = 0):
        if keys is None:
            keys = [derive_key(seed, *tags)]
        self.keys = np.array(keys, dtype=np.uint64).reshape(-1)
        if self.keys.size == 0:
            raise ValueError("Rng needs at least one stream")
        self.counter = int(counter)

    @classmethod
    def chains(cls, seed: int, *tags, n: int) -> "Rng":
        if n < 1:
            raise ValueError(f"number of chains must be >= 1, got {n}")
        return cls(keys=_fold(_derive(seed, tags), np.arange(n, dtype=np.uint64)))

    @property
    def n_streams(self) -> int:
        return int(self.keys.size)

    def copy(self) -> "Rng":
        return Rng(keys=self.keys.copy(), counter=self.counter)

    def _raw(self, per_stream: int) -> np.ndarray:
        """Next ``per_stream`` uint64 outputs of every stream, shape (streams, per_stream)."""
        offsets = np.arange(self.counter + 1, self.counter + 1 + per_stream, dtype=np.uint64)
        offsets *= GOLDEN
        self.counter += per_stream
        return _mix(self.keys[:, None] + offsets)

    def _split_shape(self, shape) -> tuple[tuple[int, ...], int]:
        shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
        if not shape or any(s < 1 for s in shape):
            raise ValueError(f"shape must be nonempty with positive dims, got {shape}")
        if self.n_streams == 1:
            return shape, int(np.prod(shape))
        if shape[0] != self.n_streams:
            raise ValueError(
                f"multi-stream Rng has {self.n_streams} streams but shape[0] = {shape[0]}"
            )
        return shape, int(np.prod(shape[1:], dtype=np.int64))

    def uniform(self, shape) -> np.ndarray:
        """Uniform variates on [0, 1) with 53-bit resolution."""
        shape, per = self._split_shape(shape)
        raw = self._raw(per)
        return ((raw >> _S11).astype(np.float64) * _TWO_POW_M53).reshape(shape)

    def standard_normal(self, shape) -> np.ndarray:
        shape, per = self._split_shape(shape)
        pairs = (per + 1) // 2
        raw = self._raw(2 * pairs)
        raw >>= _S11
        u = raw.astype(np.float64).reshape(self.n_streams, pairs, 2)
        u *= _TWO_POW_M53
        u1 = u[..., 0]
        u1 += _TWO_POW_M53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u[..., 1]
        out = np.empty((self.n_streams, pairs, 2))
        np.multiply(r, np.cos(theta), out=out[..., 0])
        np.multiply(r, np.sin(theta), out=out[..., 1])
        return out.reshape(self.n_streams, 2 * pairs)[:, :per].reshape(shape)

    def integers(self, high: int, size: int) -> np.ndarray:
        """Indices uniform on ``{0, ..., high-1}`` as ``floor(u * high)``."""
        if high < 1:
            raise ValueError(f"high must be >= 1, got {high}")
        if self.n_streams != 1:
            raise ValueError("integers() is only defined for single-stream Rng")
        u = self.uniform((size,))
        return np.minimum((u * high).astype(np.int64), high - 1)


def rng_standard_normal(rng: Rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)
