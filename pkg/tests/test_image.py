"""Enclave image container: serialization, validation, wrapping."""

import pytest

from servas_sim.image import (
    FormatError,
    ImageAuthFailure,
    ImagePage,
    ImagePageType,
    InvalidImage,
    build_image,
    load_enclave_image,
)

DEV_KEY = bytes(range(16))
NONCE = bytes(12)


def _image(n_data=1):
    pages = [(0, "rx", ImagePageType.SHENCLAVE, b"\x13\x05" * 2048)]
    for j in range(n_data):
        pages.append((1 + j, "rw", ImagePageType.REGULAR, bytes([j]) * 4096))
    return build_image(pages, entry_offset=0x40)


def test_pack_parse_roundtrip():
    image = _image(2)
    parsed = load_enclave_image(image.pack())
    assert parsed.entry_offset == 0x40
    assert parsed.developer_id == image.developer_id
    assert [(p.index, p.page_type, p.rsw) for p in parsed.pages] == \
        [(p.index, p.page_type, p.rsw) for p in image.pages]
    assert all(a.body == b.body for a, b in zip(parsed.pages, image.pages))
    assert parsed.encid() == image.encid()


def test_truncated_file_rejected():
    blob = _image().pack()
    with pytest.raises(FormatError):
        load_enclave_image(blob[:40])
    with pytest.raises(FormatError):
        load_enclave_image(blob[:-100])
    with pytest.raises(FormatError):
        load_enclave_image(b"NOPE" + blob[4:])


def test_writable_shared_code_page_rejected():
    with pytest.raises(InvalidImage):
        build_image([(0, "rwx", ImagePageType.SHENCLAVE, b"")]).validate()


def test_entry_point_must_be_executable():
    with pytest.raises(InvalidImage):
        build_image([(0, "rw", ImagePageType.REGULAR, b"")], entry_offset=0).validate()


def test_duplicate_page_index_rejected():
    image = build_image([(0, "rx", ImagePageType.SHENCLAVE, b"a"),
                         (0, "rw", ImagePageType.REGULAR, b"b")])
    with pytest.raises(InvalidImage):
        image.validate()


def test_rsw_must_match_page_type():
    page = ImagePage(0, {"r": True, "w": False, "x": True, "u": True, "g": False},
                     ImagePageType.SHENCLAVE, bytes(4096), rsw=0b01)
    image = build_image([])
    image.pages.append(page)
    with pytest.raises(InvalidImage):
        image.validate()


def test_wrap_roundtrip():
    image = _image()
    blob = image.wrap(DEV_KEY, NONCE)
    parsed = load_enclave_image(blob, developer_key=DEV_KEY)
    assert parsed.encid() == image.encid()


def test_wrap_identity_stable():
    """Wrapping never changes the enclave identity hash."""
    image = _image()
    wrapped = load_enclave_image(image.wrap(DEV_KEY, NONCE), developer_key=DEV_KEY)
    assert wrapped.encid() == load_enclave_image(image.pack()).encid()


def test_tampered_wrapped_image_rejected():
    blob = bytearray(_image().wrap(DEV_KEY, NONCE))
    blob[60] ^= 0x01  # one ciphertext bit
    with pytest.raises(ImageAuthFailure):
        load_enclave_image(bytes(blob), developer_key=DEV_KEY)


def test_wrong_developer_key_rejected():
    blob = _image().wrap(DEV_KEY, NONCE)
    with pytest.raises(ImageAuthFailure):
        load_enclave_image(blob, developer_key=bytes(16))
    with pytest.raises(ImageAuthFailure):
        load_enclave_image(blob)  # wrapped but no key at all
