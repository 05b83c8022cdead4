import numpy as np

SA0 = 0
SA1 = 1


def force_bits(weights: np.ndarray, index: np.ndarray, bit: np.ndarray, polarity: np.ndarray) -> np.ndarray:
    """Force bits of int8 weights (flat view) to 0 or 1, returning a new array.

    Works on the two's-complement byte, so bit 7 is the sign bit.
    """
    flat = np.asarray(weights, dtype=np.int8).reshape(-1).view(np.uint8).copy()
    index = np.asarray(index, dtype=np.int64)
    mask = (np.uint8(1) << np.asarray(bit, dtype=np.uint8)).astype(np.uint8)
    pol = np.asarray(polarity, dtype=bool)
    v = flat[index]
    flat[index] = np.where(pol, v | mask, v & ~mask)
    return flat.view(np.int8).reshape(np.shape(weights))
