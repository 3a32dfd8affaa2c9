# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled Merkle kernels over OpenSSL SHA-256.

Mirrors ``_kernels_py`` exactly; the pair is checked against each other in
the test suite and compared in ``benchmarks/bench_kernels.py``.
"""
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy

cdef extern from "openssl/sha.h":
    ctypedef struct SHA256_CTX:
        pass
    int SHA256_Init(SHA256_CTX *c) nogil
    int SHA256_Update(SHA256_CTX *c, const void *data, size_t n) nogil
    int SHA256_Final(unsigned char *md, SHA256_CTX *c) nogil


cdef inline void SHA256(const unsigned char *d, size_t n, unsigned char *md) noexcept nogil:
    # the one-shot SHA256() in OpenSSL 3 re-fetches the digest on every call
    cdef SHA256_CTX ctx
    SHA256_Init(&ctx)
    SHA256_Update(&ctx, d, n)
    SHA256_Final(md, &ctx)

cdef enum:
    DLEN = 32

ZERO32 = bytes(32)


def leaf_hashes(items):
    cdef bytes item
    cdef unsigned char md[DLEN]
    out = []
    for item in items:
        SHA256(<const unsigned char *>item, len(item), md)
        out.append((<char *>md)[:DLEN])
    return out


cdef bytes _reduce(unsigned char *buf, Py_ssize_t n):
    # buf holds n digests back to back with room for one duplicate
    cdef Py_ssize_t i, half
    with nogil:
        while n > 1:
            if n & 1:
                memcpy(buf + n * DLEN, buf + (n - 1) * DLEN, DLEN)
                n += 1
            half = n // 2
            for i in range(half):
                SHA256(buf + 2 * i * DLEN, 2 * DLEN, buf + i * DLEN)
            n = half
    return (<char *>buf)[:DLEN]


def merkle_root(leaves):
    cdef Py_ssize_t n = len(leaves), i
    cdef bytes leaf
    if n == 0:
        return ZERO32
    cdef unsigned char *buf = <unsigned char *>malloc((n + 1) * DLEN)
    if buf == NULL:
        raise MemoryError()
    try:
        for i in range(n):
            leaf = leaves[i]
            if len(leaf) != DLEN:
                raise ValueError("leaf digests must be 32 bytes")
            memcpy(buf + i * DLEN, <const unsigned char *>leaf, DLEN)
        return _reduce(buf, n)
    finally:
        free(buf)


def merkle_root_of(items):
    cdef Py_ssize_t n = len(items), i
    cdef bytes item
    if n == 0:
        return ZERO32
    cdef unsigned char *buf = <unsigned char *>malloc((n + 1) * DLEN)
    if buf == NULL:
        raise MemoryError()
    try:
        for i in range(n):
            item = items[i]
            SHA256(<const unsigned char *>item, len(item), buf + i * DLEN)
        return _reduce(buf, n)
    finally:
        free(buf)
