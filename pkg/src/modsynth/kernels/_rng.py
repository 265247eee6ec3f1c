"""splitmix64 stream used for per-node feature shuffles.

Both kernel paths implement the identical integer recurrence so that tree
structures do not depend on which path built them.
"""

_MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(state: int) -> tuple[int, int]:
    """Advance the state, return (new_state, output)."""
    state = (state + GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    z = z ^ (z >> 31)
    return state, z


def derive_stream_seed(base_seed: int, index: int) -> int:
    """Deterministic per-index substream seed (base xor golden-ratio hash)."""
    return (base_seed ^ ((index + 1) * GOLDEN)) & _MASK64


def feature_permutation(n_features: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of range(n_features) driven by splitmix64."""
    perm = list(range(n_features))
    state = seed & _MASK64
    for i in range(n_features - 1, 0, -1):
        state, z = splitmix64(state)
        j = z % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
