#!/usr/bin/env python3
"""Generates the committed U2F raw-message fixture vectors.

Independent oracle for the wire-format conformance tests: everything here is
built with the `cryptography` package and hand-rolled DER, sharing no code
with the Rust implementation. Signatures use deterministic ECDSA (RFC 6979)
with low-s normalization, so both sides must agree byte for byte.

Run from the repository root:

    python3 tools/gen_u2f_vectors.py

Writes crates/u2f-provision/tests/fixtures/{registration,authentication}_vectors.txt
"""

import hashlib
import pathlib

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec, utils
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

OID_ECDSA_SHA256 = bytes.fromhex("2a8648ce3d040302")
OID_EC_PUBLIC_KEY = bytes.fromhex("2a8648ce3d0201")
OID_PRIME256V1 = bytes.fromhex("2a8648ce3d030107")
OID_COMMON_NAME = bytes.fromhex("550403")

NOT_BEFORE = b"200101000000Z"
NOT_AFTER = b"400101000000Z"
COMMON_NAME = b"soft token"


def tlv(tag: int, content: bytes) -> bytes:
    length = len(content)
    if length < 0x80:
        header = bytes([tag, length])
    else:
        size = (length.bit_length() + 7) // 8
        header = bytes([tag, 0x80 | size]) + length.to_bytes(size, "big")
    return header + content


def seq(*children: bytes) -> bytes:
    return tlv(0x30, b"".join(children))


def der_set(*children: bytes) -> bytes:
    return tlv(0x31, b"".join(children))


def integer(value: int) -> bytes:
    content = value.to_bytes((value.bit_length() + 7) // 8 or 1, "big")
    if content[0] & 0x80:
        content = b"\x00" + content
    return tlv(0x02, content)


def bit_string(payload: bytes) -> bytes:
    return tlv(0x03, b"\x00" + payload)


def sign_low_s(private_key, data: bytes) -> bytes:
    der = private_key.sign(data, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
    r, s = utils.decode_dss_signature(der)
    if s > P256_ORDER // 2:
        s = P256_ORDER - s
    return utils.encode_dss_signature(r, s)


def key_from_scalar(scalar: int):
    return ec.derive_private_key(scalar, ec.SECP256R1())


def uncompressed_point(private_key) -> bytes:
    return private_key.public_key().public_bytes(
        Encoding.X962, PublicFormat.UncompressedPoint
    )


def build_certificate(attestation_key) -> bytes:
    algorithm = seq(tlv(0x06, OID_ECDSA_SHA256))
    name = seq(der_set(seq(tlv(0x06, OID_COMMON_NAME), tlv(0x0C, COMMON_NAME))))
    validity = seq(tlv(0x17, NOT_BEFORE), tlv(0x17, NOT_AFTER))
    spki = seq(
        seq(tlv(0x06, OID_EC_PUBLIC_KEY), tlv(0x06, OID_PRIME256V1)),
        bit_string(uncompressed_point(attestation_key)),
    )
    tbs = seq(integer(1), algorithm, name, validity, name, spki)
    signature = sign_low_s(attestation_key, tbs)
    return seq(tbs, algorithm, bit_string(signature))


def registration_vector(attestation_scalar, user_scalar, origin, challenge, key_handle):
    attestation_key = key_from_scalar(attestation_scalar)
    user_key = key_from_scalar(user_scalar)
    app = hashlib.sha256(origin.encode()).digest()
    public = uncompressed_point(user_key)

    signed = b"\x00" + app + challenge + key_handle + public
    signature = sign_low_s(attestation_key, signed)
    certificate = build_certificate(attestation_key)

    message = (
        b"\x05"
        + public
        + bytes([len(key_handle)])
        + key_handle
        + certificate
        + signature
    )
    return {
        "attestation_scalar": f"{attestation_scalar:064x}",
        "user_scalar": f"{user_scalar:064x}",
        "origin": origin,
        "challenge": challenge.hex(),
        "key_handle": key_handle.hex(),
        "expected": message.hex(),
    }


def authentication_vector(user_scalar, origin, challenge, presence, counter):
    user_key = key_from_scalar(user_scalar)
    app = hashlib.sha256(origin.encode()).digest()
    signed = app + bytes([presence]) + counter.to_bytes(4, "big") + challenge
    signature = sign_low_s(user_key, signed)
    message = bytes([presence]) + counter.to_bytes(4, "big") + signature
    return {
        "user_scalar": f"{user_scalar:064x}",
        "origin": origin,
        "challenge": challenge.hex(),
        "presence": str(presence),
        "counter": str(counter),
        "expected": message.hex(),
    }


def write_vectors(path: pathlib.Path, vectors):
    lines = ["# generated by tools/gen_u2f_vectors.py; do not edit by hand", ""]
    for vector in vectors:
        for key, value in vector.items():
            lines.append(f"{key}={value}")
        lines.append("---")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({len(vectors)} vectors)")


def main():
    fixtures = pathlib.Path(__file__).resolve().parent.parent / (
        "crates/u2f-provision/tests/fixtures"
    )

    registrations = [
        registration_vector(
            attestation_scalar=0x1111_2222_3333_4444_5555_6666_7777_8888_9999_AAAA_BBBB_CCCC_DDDD_EEEE_0123_4567,
            user_scalar=0x0FED_CBA9_8765_4321_0FED_CBA9_8765_4321_0FED_CBA9_8765_4321_0FED_CBA9_8765_4321,
            origin="https://iot-cloud.example",
            challenge=bytes(range(32)),
            key_handle=bytes.fromhex("a0a1a2a3a4a5a6a7a8a9aaabacadaeaf" * 4),
        ),
        registration_vector(
            attestation_scalar=0x6B17_D1F2_E12C_4247_F8BC_E6E5_63A4_40F2_7703_7D81_2DEB_33A0_F4A1_3945_D898_C296 - 7,
            user_scalar=0x2222_0000_2222_0000_2222_0000_2222_0000_2222_0000_2222_0000_2222_0000_2222_0001,
            origin="iot.example",
            challenge=hashlib.sha256(b"second challenge").digest(),
            key_handle=bytes.fromhex("deadbeef" * 3),
        ),
    ]
    write_vectors(fixtures / "registration_vectors.txt", registrations)

    authentications = [
        authentication_vector(
            user_scalar=0x0FED_CBA9_8765_4321_0FED_CBA9_8765_4321_0FED_CBA9_8765_4321_0FED_CBA9_8765_4321,
            origin="https://iot-cloud.example",
            challenge=bytes(range(32, 64)),
            presence=1,
            counter=5,
        ),
        authentication_vector(
            user_scalar=0x2222_0000_2222_0000_2222_0000_2222_0000_2222_0000_2222_0000_2222_0000_2222_0001,
            origin="iot.example",
            challenge=hashlib.sha256(b"auth challenge two").digest(),
            presence=0,
            counter=0xDEAD_BEEF,
        ),
    ]
    write_vectors(fixtures / "authentication_vectors.txt", authentications)


if __name__ == "__main__":
    main()
