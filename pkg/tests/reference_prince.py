"""Slow textbook PRINCE used only as a test oracle.

Everything is built from the cipher description: the linear layer is an
explicit 64x64 GF(2) matrix, the state is a list of 16 nibbles (index 0 is
the most significant), and nothing is shared with the package code.
"""

SBOX = [0xB, 0xF, 0x3, 0x2, 0xA, 0xC, 0x9, 0x1, 0x6, 0x7, 0x8, 0x0, 0xE, 0x5, 0xD, 0x4]
SBOX_INV = [SBOX.index(i) for i in range(16)]

RC = [
    0x0000000000000000, 0x13198A2E03707344, 0xA4093822299F31D0, 0x082EFA98EC4E6C89,
    0x452821E638D01377, 0xBE5466CF34E90C6C, 0x7EF84F78FD955CB1, 0x85840851F1AC43AA,
    0xC882D32F25323C54, 0x64A51195E0E3610D, 0xD3B5A399CA0C2399, 0xC0AC29B7C97C50DD,
]

SHIFT_ROWS = [0, 5, 10, 15, 4, 9, 14, 3, 8, 13, 2, 7, 12, 1, 6, 11]
SHIFT_ROWS_INV = [SHIFT_ROWS.index(i) for i in range(16)]


def _m(i):
    # 4x4 identity with the i-th diagonal entry cleared
    return [[1 if (r == c and r != i) else 0 for c in range(4)] for r in range(4)]


def _block(layout):
    """16x16 matrix from a 4x4 arrangement of M_i indices."""
    out = [[0] * 16 for _ in range(16)]
    for br in range(4):
        for bc in range(4):
            sub = _m(layout[br][bc])
            for r in range(4):
                for c in range(4):
                    out[4 * br + r][4 * bc + c] = sub[r][c]
    return out


M_HAT0 = _block([[0, 1, 2, 3], [1, 2, 3, 0], [2, 3, 0, 1], [3, 0, 1, 2]])
M_HAT1 = _block([[1, 2, 3, 0], [2, 3, 0, 1], [3, 0, 1, 2], [0, 1, 2, 3]])


def _m_prime_matrix():
    out = [[0] * 64 for _ in range(64)]
    for k, blk in enumerate((M_HAT0, M_HAT1, M_HAT1, M_HAT0)):
        for r in range(16):
            for c in range(16):
                out[16 * k + r][16 * k + c] = blk[r][c]
    return out


M_PRIME = _m_prime_matrix()


def _bits(x):
    return [(x >> (63 - i)) & 1 for i in range(64)]


def _from_bits(b):
    v = 0
    for bit in b:
        v = (v << 1) | bit
    return v


def m_prime(x):
    v = _bits(x)
    return _from_bits([sum(row[j] & v[j] for j in range(64)) % 2 for row in M_PRIME])


def _nibbles(x):
    return [(x >> (60 - 4 * i)) & 0xF for i in range(16)]


def _from_nibbles(n):
    v = 0
    for d in n:
        v = (v << 4) | d
    return v


def s_layer(x, box=SBOX):
    return _from_nibbles([box[d] for d in _nibbles(x)])


def shift_rows(x, perm=SHIFT_ROWS):
    n = _nibbles(x)
    return _from_nibbles([n[perm[i]] for i in range(16)])


def core(x, k1, half_rounds=5):
    x ^= k1 ^ RC[0]
    for i in range(1, half_rounds + 1):
        x = s_layer(x)
        x = shift_rows(m_prime(x))
        x ^= RC[i] ^ k1
    x = s_layer(x)
    x = m_prime(x)
    x = s_layer(x, SBOX_INV)
    for i in range(11 - half_rounds, 11):
        x ^= RC[i] ^ k1
        x = m_prime(shift_rows(x, SHIFT_ROWS_INV))
        x = s_layer(x, SBOX_INV)
    return x ^ RC[11] ^ k1


def k0_prime(k0):
    return ((k0 >> 1) | ((k0 & 1) << 63)) ^ (k0 >> 63)


def encrypt(p, k0, k1, half_rounds=5):
    return core(p ^ k0, k1, half_rounds) ^ k0_prime(k0)


def decrypt(c, k0, k1, half_rounds=5):
    # alpha-reflection: decryption is encryption with swapped whitening keys and k1 ^ alpha
    return core(c ^ k0_prime(k0), k1 ^ RC[11], half_rounds) ^ k0
