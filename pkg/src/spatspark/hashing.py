"""64-bit FNV-1a, used for container/checkpoint checksums and config fingerprints."""

import numba
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a64(data):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for byte in data:
        h = (h ^ np.uint64(byte)) * prime
    return h


def fnv1a64(data) -> int:
    buf = np.frombuffer(bytes(data) if not isinstance(data, np.ndarray) else data.tobytes(),
                        dtype=np.uint8)
    return int(_fnv1a64(buf))
