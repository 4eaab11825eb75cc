"""CRC-32C (Castagnoli), table-driven, reflected polynomial 0x82F63B78."""

from __future__ import annotations

import numpy as np


def _make_table():
    table = np.zeros(256, dtype=np.uint32)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ (0x82F63B78 if crc & 1 else 0)
        table[i] = crc
    return table


_TABLE = _make_table()


def crc32c(data, crc=0):
    crc = (crc ^ 0xFFFFFFFF) & 0xFFFFFFFF
    table = _TABLE
    for b in bytes(data):
        crc = int(table[(crc ^ b) & 0xFF]) ^ (crc >> 8)
    return (crc ^ 0xFFFFFFFF) & 0xFFFFFFFF
