"""Straight-from-the-definition Keccak-f[1600] sponge, used only as a test oracle."""

_RC = []
_r = 1
for _ in range(24):
    c = 0
    for j in range(7):
        _r = ((_r << 1) ^ ((_r >> 7) * 0x71)) % 256
        if _r & 2:
            c ^= 1 << ((1 << j) - 1)
    _RC.append(c)

_ROT = [[0] * 5 for _ in range(5)]
_x, _y = 1, 0
for t in range(24):
    _ROT[_x][_y] = ((t + 1) * (t + 2) // 2) % 64
    _x, _y = _y, (2 * _x + 3 * _y) % 5

_M = (1 << 64) - 1


def _rol(v, n):
    return ((v << n) | (v >> (64 - n))) & _M if n else v


def _f(a):
    for rnd in range(24):
        c = [a[x][0] ^ a[x][1] ^ a[x][2] ^ a[x][3] ^ a[x][4] for x in range(5)]
        d = [c[(x - 1) % 5] ^ _rol(c[(x + 1) % 5], 1) for x in range(5)]
        a = [[a[x][y] ^ d[x] for y in range(5)] for x in range(5)]
        b = [[0] * 5 for _ in range(5)]
        for x in range(5):
            for y in range(5):
                b[y][(2 * x + 3 * y) % 5] = _rol(a[x][y], _ROT[x][y])
        a = [[b[x][y] ^ (~b[(x + 1) % 5][y] & b[(x + 2) % 5][y]) for y in range(5)]
             for x in range(5)]
        a[0][0] ^= _RC[rnd]
    return a


def shake128(data: bytes, n: int) -> bytes:
    rate = 168
    msg = bytearray(data) + b"\x1f"
    while len(msg) % rate:
        msg.append(0)
    msg[-1] |= 0x80
    a = [[0] * 5 for _ in range(5)]
    for off in range(0, len(msg), rate):
        block = msg[off:off + rate]
        for i in range(rate // 8):
            x, y = i % 5, i // 5
            a[x][y] ^= int.from_bytes(block[8 * i:8 * i + 8], "little")
        a = _f(a)
    out = bytearray()
    while True:
        for i in range(rate // 8):
            x, y = i % 5, i // 5
            out += a[x][y].to_bytes(8, "little")
        if len(out) >= n:
            return bytes(out[:n])
        a = _f(a)
