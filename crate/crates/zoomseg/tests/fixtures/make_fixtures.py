"""Writes the NIfTI-1 fixtures used by the reader tests.

Independent of the Rust writer: the header is packed field by field from the
published NIfTI-1 layout with `struct`.

    python3 make_fixtures.py && gzip -n -k -f le_f32_4x4x4.nii
"""
import struct


def header(order, dims, datatype, bitpix, pixdim, slope=1.0, inter=0.0, magic=b"n+1\0"):
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    fields = [
        ("i", 348),
        ("10s", b""), ("18s", b""), ("i", 0), ("h", 0), ("c", b"r"), ("b", 0),
        ("8h", *dim),
        ("3f", 0.0, 0.0, 0.0), ("h", 0),
        ("h", datatype), ("h", bitpix), ("h", 0),
        ("8f", 1.0, *pixdim, 0.0, 0.0, 0.0, 0.0),
        ("f", 352.0), ("f", slope), ("f", inter),
        ("h", 0), ("b", 0), ("b", 2),
        ("4f", 0.0, 0.0, 0.0, 0.0), ("2i", 0, 0),
        ("80s", b"fixture"), ("24s", b""),
        ("2h", 0, 0),
        ("6f", 0, 0, 0, 0, 0, 0), ("12f", *([0.0] * 12)),
        ("16s", b""), ("4s", magic),
    ]
    out = b""
    for f in fields:
        out += struct.pack(order + f[0], *f[1:])
    assert len(out) == 348, len(out)
    return out + b"\0\0\0\0"


def write(name, order, dims, datatype, bitpix, code, values, pixdim=(1.0, 1.0, 1.0), **kw):
    body = struct.pack(order + str(len(values)) + code, *values)
    with open(name, "wb") as f:
        f.write(header(order, dims, datatype, bitpix, pixdim, **kw) + body)


f32 = [i * 0.25 - 3.0 for i in range(64)]
write("le_f32_4x4x4.nii", "<", (4, 4, 4), 16, 32, "f", f32)

raw = [4, -2, 0, 7, 100, -300, 1, 2, 3, 4, 5, 6]
write("be_i16_scaled.nii", ">", (3, 2, 2), 4, 16, "h", raw, pixdim=(0.9, 1.1, 2.5), slope=0.5, inter=10.0)
write("le_i16_scaled.nii", "<", (3, 2, 2), 4, 16, "h", raw, pixdim=(0.9, 1.1, 2.5), slope=0.5, inter=10.0)

mask = [(i * 7) % 3 == 0 for i in range(24)]
write("le_u8_mask.nii", "<", (4, 3, 2), 2, 8, "B", [int(m) for m in mask], pixdim=(1.0, 1.0, 1.5))

f64 = [1.0 / (i + 1) - 0.3 for i in range(8)]
write("le_f64_2x2x2.nii", "<", (2, 2, 2), 64, 64, "d", f64)

write("four_dim.nii", "<", (2, 2, 2, 1), 16, 32, "f", [float(i) for i in range(8)])
write("bad_magic.nii", "<", (2, 2, 2), 16, 32, "f", [0.0] * 8, magic=b"abcd")
write("float128.nii", "<", (2, 2, 2), 1536, 128, "d", [0.0] * 16)
write("short_data.nii", "<", (4, 4, 4), 16, 32, "f", [0.0] * 10)
