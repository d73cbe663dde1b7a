"""Test-only encoder for the binary event file format.

Kept out of the package on purpose: tests that build files with this
encoder and read them back with the package's parser would prove nothing
if both sides shared code.
"""

import struct


def encode_dat(stream, with_prefix=True, event_type=0, header_lines=None, extra_bytes=b""):
    """Serialize an EventStream to the binary format.

    header_lines overrides the default header (a list of '%'-prefixed
    strings without trailing newline).  extra_bytes is appended raw, to
    build deliberately corrupt payloads.
    """
    if header_lines is None:
        header_lines = [
            "% Height " + str(stream.height),
            "% Width " + str(stream.width),
            "% Version 2",
        ]
    out = bytearray()
    for line in header_lines:
        out += line.encode("ascii") + b"\n"
    if with_prefix:
        out += struct.pack("<BB", event_type, 8)
    for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
        word = (int(x) & 0x3FFF) | ((int(y) & 0x3FFF) << 14) | ((int(p) & 1) << 28)
        out += struct.pack("<II", int(t), word)
    out += extra_bytes
    return bytes(out)
